use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duplex_core::checkpoint;
use duplex_core::config::Config;
use duplex_core::corpus::{generate_synthetic, load_sharc, save_jsonl, SyntheticConfig};
use duplex_core::evaluation::{evaluate, Metrics};
use duplex_core::model::Model;
use duplex_core::pipeline::{build_vocab, encode_input, prepare_all};
use duplex_core::training::train;

/// Conversational machine reading with a shared encoder and duplex decoders.
#[derive(Parser, Debug)]
#[command(name = "duplex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic ShARC-style corpus as JSON lines.
    GenerateData(GenerateArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Generate answers for a corpus and report metrics.
    Evaluate(EvaluateArgs),
    /// Generate one answer per input record.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_rules: usize,
    #[arg(long, default_value_t = 1)]
    min_conditions: usize,
    #[arg(long, default_value_t = 3)]
    max_conditions: usize,
    #[arg(long, default_value_t = 48)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0.5)]
    irrelevant_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Optional dev corpus for best-checkpoint selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>/train_log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Write the metrics as JSON to this file.
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input records in the corpus format.
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Defaults, then the config file, then command-line flags.
fn resolve_config(args: &TrainArgs) -> Result<Config> {
    let mut table = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<toml::Table>().with_context(|| format!("parsing {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override `{o}` is not KEY=VALUE");
        };
        table.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    if let Some(v) = args.steps {
        table.insert("steps".into(), toml::Value::Integer(v as i64));
    }
    if let Some(v) = args.seed {
        table.insert("seed".into(), toml::Value::Integer(v as i64));
    }
    if let Some(v) = args.batch_size {
        table.insert("batch_size".into(), toml::Value::Integer(v as i64));
    }
    if let Some(v) = args.lambda {
        table.insert("lambda".into(), toml::Value::Float(v));
    }
    if let Some(v) = &args.variant {
        table.insert("variant".into(), toml::Value::String(v.clone()));
    }
    let config = Config::parse(&toml::to_string(&table)?)?;
    config.validate()?;
    Ok(config)
}

fn generate_data(args: &GenerateArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_rules: args.n_rules,
        min_conditions: args.min_conditions,
        max_conditions: args.max_conditions,
        vocab_size: args.vocab_size,
        irrelevant_rate: args.irrelevant_rate,
        seed: args.seed,
    };
    let mut examples = generate_synthetic(&cfg)?;
    if let Some(n) = args.limit {
        examples.truncate(n);
    }
    save_jsonl(&args.out, &examples)?;
    println!("wrote {} examples to {}", examples.len(), args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut config = resolve_config(args)?;
    let examples = load_sharc(&args.corpus)?;
    if examples.is_empty() {
        bail!("corpus {} has no examples", args.corpus.display());
    }
    let vocab = build_vocab(&examples);
    config.model.vocab_size = vocab.len();
    let data = prepare_all(&examples, &vocab, &config.model)?;
    let dev = match &args.dev {
        Some(p) => Some(prepare_all(&load_sharc(p)?, &vocab, &config.model)?),
        None => None,
    };
    let mut model = Model::new(&config.model, config.train.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let log_path = args.log.clone().unwrap_or_else(|| args.out.join("train_log.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_error = None;
    let report = train(&mut model, &data, dev.as_deref(), &config.train, |record| {
        let line = serde_json::to_string(record).expect("log records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e).context("writing training log");
    }
    log.flush()?;
    checkpoint::save(&args.out, &model, &vocab, &config)?;
    println!(
        "trained {} steps on {} examples; final batch loss {:.6}",
        report.steps,
        data.len(),
        report.last.loss
    );
    if let (Some(loss), Some(step)) = (report.best_dev_loss, report.best_step) {
        println!("best dev loss {loss:.6} after step {step}");
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn load_checkpoint(dir: &Path, beam: Option<usize>) -> Result<(Model, duplex_core::tokenizer::Vocab)> {
    let (mut model, vocab, _) =
        checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if let Some(b) = beam {
        if b == 0 {
            bail!("--beam must be at least 1");
        }
        model.config.beam_width = b;
    }
    Ok((model, vocab))
}

fn print_metrics(m: &Metrics) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("examples        {}", m.n_examples);
    println!("micro accuracy  {:.4}", m.micro_acc);
    println!("macro accuracy  {:.4}", m.macro_acc);
    println!("BLEU-1          {}", opt(m.bleu1));
    println!("BLEU-4          {}", opt(m.bleu4));
    println!("ABLEU-1         {}", opt(m.ableu1));
    println!("ABLEU-4         {}", opt(m.ableu4));
    println!("BLEU questions  {}", m.n_eval_questions);
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&args.checkpoint, args.beam)?;
    let examples = load_sharc(&args.corpus)?;
    let (metrics, _) = evaluate(&model, &examples, &vocab)?;
    print_metrics(&metrics);
    if let Some(path) = &args.json_out {
        let text = serde_json::to_string_pretty(&metrics)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&args.checkpoint, args.beam)?;
    let examples = load_sharc(&args.input)?;
    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for ex in &examples {
        let (seq, _) = encode_input(ex, &vocab, model.config.max_len)?;
        let gen = model.generate(&seq, &vocab)?;
        let record = serde_json::json!({
            "utterance_id": ex.utterance_id,
            "answer": gen.text,
            "log_prob": gen.total_log_prob,
            "forced": gen.forced,
        });
        writeln!(out, "{record}")?;
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DUPLEX_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenerateData(a) => generate_data(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Predict(a) => run_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
