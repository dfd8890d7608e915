//! Example data model, ShARC-format loading and the synthetic dialog-tree
//! generator.
//!
//! Records are JSON objects with the ShARC field names `utterance_id`,
//! `tree_id`, `snippet`, `question`, `scenario`, `history`, `evidence` and
//! `answer`, one per line. A file whose first non-space byte is `[` is read
//! as a single JSON array instead, which is how the public ShARC release is
//! distributed. Synthetic corpora add an optional `entailment_states` field.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::preprocess::{segment_rule, EntailmentState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    Yes,
    No,
    Irrelevant,
    Inquire,
}

impl Decision {
    pub const ALL: [Decision; 4] = [Decision::Yes, Decision::No, Decision::Irrelevant, Decision::Inquire];

    /// Exact, case-insensitive match against the three decision words;
    /// anything else is a follow-up question.
    pub fn classify(text: &str) -> Decision {
        let t = text.trim();
        if t.eq_ignore_ascii_case("yes") {
            Decision::Yes
        } else if t.eq_ignore_ascii_case("no") {
            Decision::No
        } else if t.eq_ignore_ascii_case("irrelevant") {
            Decision::Irrelevant
        } else {
            Decision::Inquire
        }
    }
}

/// Gold answer: a decision, or a follow-up question under `Inquire`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Answer {
    kind: Decision,
    followup: Option<String>,
}

impl Answer {
    pub fn yes() -> Self {
        Self { kind: Decision::Yes, followup: None }
    }

    pub fn no() -> Self {
        Self { kind: Decision::No, followup: None }
    }

    pub fn irrelevant() -> Self {
        Self { kind: Decision::Irrelevant, followup: None }
    }

    /// Panics on an empty question; use [`Answer::from_text`] for untrusted input.
    pub fn inquire(question: impl Into<String>) -> Self {
        let q = question.into();
        assert!(!q.trim().is_empty(), "follow-up question must be non-empty");
        Self { kind: Decision::Inquire, followup: Some(q) }
    }

    /// Maps a ShARC answer string. Returns `None` for an empty string.
    pub fn from_text(text: &str) -> Option<Self> {
        match Decision::classify(text) {
            Decision::Yes => Some(Self::yes()),
            Decision::No => Some(Self::no()),
            Decision::Irrelevant => Some(Self::irrelevant()),
            Decision::Inquire if text.trim().is_empty() => None,
            Decision::Inquire => Some(Self::inquire(text)),
        }
    }

    pub fn kind(&self) -> Decision {
        self.kind
    }

    pub fn followup(&self) -> Option<&str> {
        self.followup.as_deref()
    }

    /// Text the answer decoder is trained to generate.
    pub fn text(&self) -> &str {
        match self.kind {
            Decision::Yes => "Yes",
            Decision::No => "No",
            Decision::Irrelevant => "Irrelevant",
            Decision::Inquire => self.followup.as_deref().unwrap(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Some(YesNo::Yes),
            "no" => Some(YesNo::No),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            YesNo::Yes => "yes",
            YesNo::No => "no",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryTurn {
    pub question: String,
    pub answer: YesNo,
}

/// One utterance of a dialog tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmrcExample {
    pub utterance_id: String,
    pub tree_id: String,
    pub rule_text: String,
    pub user_question: String,
    pub scenario: String,
    pub history: Vec<HistoryTurn>,
    pub gold_answer: Answer,
    /// Supporting evidence; never part of the model input.
    pub evidence: Vec<String>,
    /// Per-EDU gold states, available for synthetic data.
    pub gold_states: Option<Vec<EntailmentState>>,
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    follow_up_question: String,
    follow_up_answer: String,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    utterance_id: String,
    tree_id: String,
    snippet: String,
    question: String,
    scenario: String,
    history: Vec<RawTurn>,
    evidence: Vec<Value>,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entailment_states: Option<Vec<EntailmentState>>,
}

const REQUIRED_FIELDS: [&str; 8] = [
    "utterance_id",
    "tree_id",
    "snippet",
    "question",
    "scenario",
    "history",
    "evidence",
    "answer",
];

fn evidence_text(v: Value) -> String {
    match v {
        Value::String(s) => s,
        Value::Object(map) => {
            let q = map.get("follow_up_question").and_then(Value::as_str).unwrap_or("");
            let a = map.get("follow_up_answer").and_then(Value::as_str).unwrap_or("");
            format!("{q} {a}").trim().to_string()
        }
        other => other.to_string(),
    }
}

fn parse_record(record: usize, value: Value) -> Result<CmrcExample> {
    let obj = value.as_object().ok_or_else(|| Error::Record {
        record,
        message: "not a JSON object".into(),
    })?;
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(Error::MissingField { record, field });
        }
    }
    let raw: RawRecord = serde_json::from_value(value).map_err(|e| Error::Record {
        record,
        message: e.to_string(),
    })?;
    let history = raw
        .history
        .into_iter()
        .map(|t| {
            let answer = YesNo::parse(&t.follow_up_answer).ok_or_else(|| Error::Record {
                record,
                message: format!("history answer {:?} is neither yes nor no", t.follow_up_answer),
            })?;
            Ok(HistoryTurn { question: t.follow_up_question, answer })
        })
        .collect::<Result<Vec<_>>>()?;
    let gold_answer = Answer::from_text(&raw.answer).ok_or_else(|| Error::Record {
        record,
        message: "empty answer".into(),
    })?;
    Ok(CmrcExample {
        utterance_id: raw.utterance_id,
        tree_id: raw.tree_id,
        rule_text: raw.snippet,
        user_question: raw.question,
        scenario: raw.scenario,
        history,
        gold_answer,
        evidence: raw.evidence.into_iter().map(evidence_text).collect(),
        gold_states: raw.entailment_states,
    })
}

/// Parses corpus text (line-delimited records or a JSON array).
pub fn parse_sharc(text: &str) -> Result<Vec<CmrcExample>> {
    if text.trim_start().starts_with('[') {
        let values: Vec<Value> = serde_json::from_str(text).map_err(|e| Error::Record {
            record: 0,
            message: e.to_string(),
        })?;
        return values
            .into_iter()
            .enumerate()
            .map(|(i, v)| parse_record(i, v))
            .collect();
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let v: Value = serde_json::from_str(line).map_err(|e| Error::Record {
                record: i,
                message: e.to_string(),
            })?;
            parse_record(i, v)
        })
        .collect()
}

/// Loads a corpus file, or every `*.jsonl`/`*.json` file of a directory in
/// name order.
pub fn load_sharc(path: &Path) -> Result<Vec<CmrcExample>> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "json")))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_sharc(&f)?);
        }
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sharc(&text)
}

fn to_record(ex: &CmrcExample) -> RawRecord {
    RawRecord {
        utterance_id: ex.utterance_id.clone(),
        tree_id: ex.tree_id.clone(),
        snippet: ex.rule_text.clone(),
        question: ex.user_question.clone(),
        scenario: ex.scenario.clone(),
        history: ex
            .history
            .iter()
            .map(|t| RawTurn {
                follow_up_question: t.question.clone(),
                follow_up_answer: if t.answer == YesNo::Yes { "Yes" } else { "No" }.into(),
            })
            .collect(),
        evidence: ex.evidence.iter().cloned().map(Value::String).collect(),
        answer: ex.gold_answer.text().to_string(),
        entailment_states: ex.gold_states.clone(),
    }
}

/// Serializes examples as line-delimited records.
pub fn to_jsonl(examples: &[CmrcExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&to_record(ex)).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(path: &Path, examples: &[CmrcExample]) -> Result<()> {
    fs::write(path, to_jsonl(examples)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_rules: usize,
    pub min_conditions: usize,
    pub max_conditions: usize,
    /// Size of the filler lexicon (benefits, places, ages, ...) drawn from.
    pub vocab_size: usize,
    /// Probability that a dialog tree gets one off-topic question.
    pub irrelevant_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_rules: 16,
            min_conditions: 1,
            max_conditions: 3,
            vocab_size: 48,
            irrelevant_rate: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_rules == 0 {
            return bad("n_rules must be positive");
        }
        if self.min_conditions == 0 || self.min_conditions > self.max_conditions {
            return bad("conditions_per_rule must be a non-empty range of positive counts");
        }
        if self.max_conditions > CONDITION_KINDS.len() {
            return bad("at most 6 conditions per rule are supported");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.irrelevant_rate) {
            return bad("irrelevant_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

struct ConditionKind {
    statement: &'static str,
    question: &'static str,
    fillers: &'static [&'static str],
}

const CONDITION_KINDS: [ConditionKind; 6] = [
    ConditionKind {
        statement: "you are over {}",
        question: "Are you over {}?",
        fillers: &["16", "18", "21", "25", "50", "60", "65", "70"],
    },
    ConditionKind {
        statement: "you live in {}",
        question: "Do you live in {}?",
        fillers: &["England", "Wales", "Scotland", "Ireland", "London", "Cardiff", "Leeds", "York"],
    },
    ConditionKind {
        statement: "you are a {}",
        question: "Are you a {}?",
        fillers: &["carer", "student", "veteran", "farmer", "nurse", "pensioner", "tenant", "parent"],
    },
    ConditionKind {
        statement: "you have a {}",
        question: "Do you have a {}?",
        fillers: &["disability", "pension", "mortgage", "business", "car", "lodger", "visa", "partner"],
    },
    ConditionKind {
        statement: "you care for {}",
        question: "Do you care for {}?",
        fillers: &["a child", "a relative", "your partner", "a neighbour", "an adult", "a parent", "twins", "a friend"],
    },
    ConditionKind {
        statement: "you work more than {} hours a week",
        question: "Do you work more than {} hours a week?",
        fillers: &["10", "16", "20", "24", "30", "35", "40", "48"],
    },
];

const BENEFITS: [&str; 8] = [
    "Carer Allowance",
    "Housing Benefit",
    "Pension Credit",
    "Winter Fuel Payment",
    "Attendance Allowance",
    "Child Benefit",
    "Council Tax Reduction",
    "Student Grant",
];

const OFF_TOPIC: [&str; 6] = [
    "How do I renew my passport?",
    "Where can I register a car?",
    "How do I pay a parking fine?",
    "Can I change my address online?",
    "When does the library open?",
    "How do I report a pothole?",
];

const SCENARIOS: [&str; 5] = [
    "",
    "I am asking for myself.",
    "I want to apply this year.",
    "My circumstances changed recently.",
    "I have never claimed before.",
];

fn fill(template: &str, value: &str) -> String {
    template.replacen("{}", value, 1)
}

/// Generates complete synthetic dialog trees.
///
/// Each rule is a conjunction of `k` templated conditions. Its tree holds one
/// `Inquire` example per proper prefix of confirmed conditions (asking the
/// first unconfirmed one), one `Yes` example with every condition confirmed,
/// one `No` example per position at which the next condition is denied, and,
/// with probability `irrelevant_rate`, one off-topic `Irrelevant` example.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<CmrcExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_kinds = CONDITION_KINDS.len() + 1;
    let per_slot = cfg.vocab_size.div_ceil(n_kinds).max(1);
    let lexicon = |pool: &'static [&'static str]| &pool[..per_slot.min(pool.len())];

    let mut out = Vec::new();
    for rule_idx in 0..cfg.n_rules {
        let tree_id = format!("syn-{rule_idx:04}");
        let benefit = *lexicon(&BENEFITS).choose(&mut rng).unwrap();
        let k = rng.random_range(cfg.min_conditions..=cfg.max_conditions);
        let mut kinds: Vec<usize> = (0..CONDITION_KINDS.len()).collect();
        kinds.shuffle(&mut rng);
        let conditions: Vec<(String, String)> = kinds[..k]
            .iter()
            .map(|&ki| {
                let kind = &CONDITION_KINDS[ki];
                let value = *lexicon(kind.fillers).choose(&mut rng).unwrap();
                (fill(kind.statement, value), fill(kind.question, value))
            })
            .collect();

        let rule_text = if k == 1 && rng.random_bool(0.5) {
            format!("If {}, you can get {benefit}.", conditions[0].0)
        } else {
            let mut s = format!("You can get {benefit} if:");
            for (stmt, _) in &conditions {
                s.push_str("\n* ");
                s.push_str(stmt);
            }
            s
        };
        let edus = segment_rule(&rule_text)?;
        let condition_edu: Vec<usize> = conditions
            .iter()
            .map(|(stmt, _)| {
                edus.iter()
                    .position(|e| e.text.contains(stmt.as_str()))
                    .expect("every condition lands in one EDU")
            })
            .collect();
        let states_for = |confirmed: usize, denied: Option<usize>| {
            let mut s = vec![EntailmentState::Neutral; edus.len()];
            for &e in &condition_edu[..confirmed] {
                s[e] = EntailmentState::Entailment;
            }
            if let Some(d) = denied {
                s[condition_edu[d]] = EntailmentState::Contradiction;
            }
            s
        };
        let question = format!("Can I get {benefit}?");
        let confirmed_history = |n: usize| -> Vec<HistoryTurn> {
            conditions[..n]
                .iter()
                .map(|(_, q)| HistoryTurn { question: q.clone(), answer: YesNo::Yes })
                .collect()
        };

        let mut tree = Vec::new();
        for j in 0..k {
            tree.push((confirmed_history(j), Answer::inquire(conditions[j].1.clone()), states_for(j, None)));
        }
        tree.push((confirmed_history(k), Answer::yes(), states_for(k, None)));
        for j in 0..k {
            let mut h = confirmed_history(j);
            h.push(HistoryTurn { question: conditions[j].1.clone(), answer: YesNo::No });
            tree.push((h, Answer::no(), states_for(j, Some(j))));
        }
        let irrelevant = rng.random_bool(cfg.irrelevant_rate);

        let mut n = 0;
        for (history, answer, states) in tree {
            let scenario = SCENARIOS.choose(&mut rng).unwrap().to_string();
            out.push(CmrcExample {
                utterance_id: format!("{tree_id}-{n:02}"),
                tree_id: tree_id.clone(),
                rule_text: rule_text.clone(),
                user_question: question.clone(),
                scenario,
                evidence: history.iter().map(|t| format!("{} {}", t.question, t.answer.as_str())).collect(),
                history,
                gold_answer: answer,
                gold_states: Some(states),
            });
            n += 1;
        }
        if irrelevant {
            out.push(CmrcExample {
                utterance_id: format!("{tree_id}-{n:02}"),
                tree_id: tree_id.clone(),
                rule_text: rule_text.clone(),
                user_question: OFF_TOPIC.choose(&mut rng).unwrap().to_string(),
                scenario: SCENARIOS.choose(&mut rng).unwrap().to_string(),
                history: vec![],
                gold_answer: Answer::irrelevant(),
                evidence: vec![],
                gold_states: Some(vec![EntailmentState::Neutral; edus.len()]),
            });
        }
    }
    Ok(out)
}
