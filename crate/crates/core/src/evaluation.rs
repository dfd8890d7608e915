//! Decision accuracy, conditional BLEU and ABLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::answer::{beam_search, GenerationOutput, StepScorer};
use crate::corpus::{Answer, CmrcExample, Decision};
use crate::error::Result;
use crate::model::Model;
use crate::pipeline::encode_input;
use crate::tokenizer::{tokenize, Special, Vocab};

/// Case-insensitive exact match to a decision word, otherwise Inquire.
pub fn classify_generated(text: &str) -> Decision {
    Decision::classify(text)
}

/// Micro accuracy and mean per-class recall over the classes present in
/// `golds`.
pub fn accuracy(preds: &[Decision], golds: &[Decision]) -> (f64, f64) {
    assert_eq!(preds.len(), golds.len(), "one prediction per gold label");
    if golds.is_empty() {
        return (0.0, 0.0);
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    let micro = correct as f64 / golds.len() as f64;
    let mut recalls = Vec::new();
    for class in Decision::ALL {
        let total = golds.iter().filter(|&&g| g == class).count();
        if total == 0 {
            continue;
        }
        let hit = preds.iter().zip(golds).filter(|(p, g)| **g == class && **p == class).count();
        recalls.push(hit as f64 / total as f64);
    }
    let macro_acc = recalls.iter().sum::<f64>() / recalls.len() as f64;
    (micro, macro_acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoothing {
    /// Any zero n-gram precision makes the score zero.
    None,
    /// Zero match counts are replaced by this value.
    Floor(f64),
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU over pre-tokenized candidates, each with one or more
/// references, using uniform weights over orders `1..=max_n`.
pub fn corpus_bleu_tokens(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize, smoothing: Smoothing) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let counts = ngrams(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let m = match (matches[n], smoothing) {
            (0, Smoothing::None) => return 0.0,
            (0, Smoothing::Floor(eps)) => eps,
            (m, _) => m as f64,
        };
        if totals[n] == 0 {
            return 0.0;
        }
        log_sum += (m / totals[n] as f64).ln() / max_n as f64;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Corpus BLEU over raw texts, one reference each, no smoothing.
pub fn corpus_bleu(candidates: &[&str], references: &[&str], max_n: usize) -> f64 {
    let c: Vec<Vec<String>> = candidates.iter().map(|t| tokenize(t)).collect();
    let r: Vec<Vec<Vec<String>>> = references.iter().map(|t| vec![tokenize(t)]).collect();
    corpus_bleu_tokens(&c, &r, max_n, Smoothing::None)
}

/// BLEU of one candidate against its references.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    let c = vec![tokenize(candidate)];
    let r = vec![references.iter().map(|t| tokenize(t)).collect()];
    corpus_bleu_tokens(&c, &r, max_n, Smoothing::None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub micro_acc: f64,
    pub macro_acc: f64,
    /// Over examples where prediction and gold are both Inquire.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    /// Over every gold-Inquire example.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ableu1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ableu4: Option<f64>,
    /// Size of the official BLEU subset.
    pub n_eval_questions: usize,
    pub n_examples: usize,
}

/// Model output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub gold: Answer,
    pub prediction: String,
    /// Question generated for a gold-Inquire example; defaults to the
    /// prediction when absent.
    pub question: Option<String>,
}

pub fn evaluate_records(records: &[EvalRecord]) -> Metrics {
    let preds: Vec<Decision> = records.iter().map(|r| classify_generated(&r.prediction)).collect();
    let golds: Vec<Decision> = records.iter().map(|r| r.gold.kind()).collect();
    let (micro_acc, macro_acc) = accuracy(&preds, &golds);

    let mut official: (Vec<&str>, Vec<&str>) = (Vec::new(), Vec::new());
    let mut all: (Vec<&str>, Vec<&str>) = (Vec::new(), Vec::new());
    for (r, p) in records.iter().zip(&preds) {
        if r.gold.kind() != Decision::Inquire {
            continue;
        }
        if *p == Decision::Inquire {
            official.0.push(&r.prediction);
            official.1.push(r.gold.text());
        }
        all.0.push(r.question.as_deref().unwrap_or(&r.prediction));
        all.1.push(r.gold.text());
    }
    let score = |set: &(Vec<&str>, Vec<&str>), n| (!set.0.is_empty()).then(|| corpus_bleu(&set.0, &set.1, n));
    Metrics {
        micro_acc,
        macro_acc,
        bleu1: score(&official, 1),
        bleu4: score(&official, 4),
        ableu1: score(&all, 1),
        ableu4: score(&all, 4),
        n_eval_questions: official.0.len(),
        n_examples: records.len(),
    }
}

/// Forbids the given tokens as the first generated token.
struct BanFirst<'a, S> {
    inner: S,
    banned: &'a [u32],
}

impl<S: StepScorer> StepScorer for BanFirst<'_, S> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut lp = self.inner.log_probs(prefix)?;
        if prefix.len() == 1 {
            for &t in self.banned {
                lp[t as usize] = f64::NEG_INFINITY;
            }
        }
        Ok(lp)
    }
}

/// Generates a follow-up question by excluding decision words and the end
/// token from the first position.
pub fn generate_question(model: &Model, example: &CmrcExample, vocab: &Vocab) -> Result<GenerationOutput> {
    let (seq, _) = encode_input(example, vocab, model.config.max_len)?;
    let memory = model.encoder.encode_eval(&model.store, &seq)?.token_states;
    let start = vocab.special(Special::Bos);
    let end = vocab.special(Special::Eos);
    let banned = [vocab.id("yes"), vocab.id("no"), vocab.id("irrelevant"), end];
    let inner = model.answer.step_scorer(&model.store, &memory);
    let mut scorer = BanFirst { inner, banned: &banned };
    let limit = model.config.max_answer_len.min(model.answer.max_len);
    let hyp = beam_search(&mut scorer, start, end, model.config.beam_width, limit)?;
    Ok(GenerationOutput {
        text: vocab.decode(&hyp.tokens),
        token_ids: hyp.tokens,
        token_log_probs: hyp.log_probs,
        total_log_prob: hyp.score,
        forced: !hyp.finished,
    })
}

/// Generates answers for `examples` and scores them.
pub fn evaluate(model: &Model, examples: &[CmrcExample], vocab: &Vocab) -> Result<(Metrics, Vec<EvalRecord>)> {
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let (seq, _) = encode_input(ex, vocab, model.config.max_len)?;
        let out = model.generate(&seq, vocab)?;
        let question = if ex.gold_answer.kind() == Decision::Inquire && classify_generated(&out.text) != Decision::Inquire {
            Some(generate_question(model, ex, vocab)?.text)
        } else {
            None
        };
        records.push(EvalRecord {
            gold: ex.gold_answer.clone(),
            prediction: out.text,
            question,
        });
    }
    Ok((evaluate_records(&records), records))
}
