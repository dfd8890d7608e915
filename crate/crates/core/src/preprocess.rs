//! Rule segmentation, discourse tagging, noisy entailment labels and the
//! prefixed encoder input.
//!
//! Segmentation and relation tagging are deterministic heuristics:
//!
//! * a bullet marker (`*`, `-`, `•`, `1.`, `2)`) opens a new EDU;
//! * a word ending in `.`, `?` or `!` closes the current EDU;
//! * `if`, `unless`, `but`, `or`, `and` directly after a `,` or `;` open a new EDU;
//! * an EDU that begins with `if`/`unless` closes after its first comma.
//!
//! Relation labels come from the first content word of each EDU.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{CmrcExample, HistoryTurn, YesNo};
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, Special, Vocab};

const CLAUSE_CONNECTIVES: [&str; 5] = ["if", "unless", "but", "or", "and"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntailmentState {
    Entailment,
    Contradiction,
    Neutral,
}

impl EntailmentState {
    pub const ALL: [EntailmentState; 3] = [
        EntailmentState::Entailment,
        EntailmentState::Contradiction,
        EntailmentState::Neutral,
    ];

    /// Class index used by the state classifier.
    pub fn class_index(self) -> usize {
        match self {
            EntailmentState::Entailment => 0,
            EntailmentState::Contradiction => 1,
            EntailmentState::Neutral => 2,
        }
    }
}

/// One elementary discourse unit of a rule text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edu {
    /// 1-based position within the rule.
    pub index: usize,
    pub text: String,
    /// Byte range of `text` inside the rule text.
    pub span: Range<usize>,
    pub bullet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationLabel {
    Condition,
    Contrast,
    Continuation,
    Elaboration,
    Disjunction,
    None,
}

impl RelationLabel {
    pub const ALL: [RelationLabel; 6] = [
        RelationLabel::Condition,
        RelationLabel::Contrast,
        RelationLabel::Continuation,
        RelationLabel::Elaboration,
        RelationLabel::Disjunction,
        RelationLabel::None,
    ];

    pub fn index(self) -> usize {
        RelationLabel::ALL.iter().position(|&l| l == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationLabel::Condition => "condition",
            RelationLabel::Contrast => "contrast",
            RelationLabel::Continuation => "continuation",
            RelationLabel::Elaboration => "elaboration",
            RelationLabel::Disjunction => "disjunction",
            RelationLabel::None => "none",
        }
    }

    fn from_cue(word: &str) -> Option<Self> {
        Some(match word {
            "if" | "unless" | "provided" => RelationLabel::Condition,
            "but" | "however" | "although" | "except" => RelationLabel::Contrast,
            "or" => RelationLabel::Disjunction,
            "and" | "also" | "then" => RelationLabel::Continuation,
            _ => return None,
        })
    }
}

/// A tagged relation between two EDUs (1-based indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscourseRelation {
    pub label: RelationLabel,
    pub head: usize,
    pub dependent: usize,
}

fn is_bullet(word: &str) -> bool {
    if matches!(word, "*" | "-" | "•" | "–") {
        return true;
    }
    let digits = word.trim_end_matches(['.', ')']);
    digits.len() + 1 == word.len() && !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn bare(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// First word of an EDU that is not a bullet marker, lowercased.
fn cue_word(text: &str) -> String {
    text.split_whitespace()
        .find(|w| !is_bullet(w))
        .map(bare)
        .unwrap_or_default()
}

/// Splits a rule text into EDUs.
pub fn segment_rule(rule_text: &str) -> Result<Vec<Edu>> {
    let words: Vec<(usize, &str)> = rule_text
        .split_whitespace()
        .map(|w| (w.as_ptr() as usize - rule_text.as_ptr() as usize, w))
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyRule);
    }

    let mut starts = vec![0];
    let mut seg_start = 0;
    let mut seg_conditional = false;
    let mut seg_comma_seen = false;
    let mut seg_first_content = true;

    for i in 0..words.len() {
        let word = words[i].1;
        if i > seg_start {
            let prev = words[i - 1].1;
            let lower = bare(word);
            let boundary = is_bullet(word)
                || (prev.ends_with(['.', '?', '!']) && !is_bullet(prev))
                || (prev.ends_with([',', ';']) && CLAUSE_CONNECTIVES.contains(&lower.as_str()))
                || (seg_conditional && !seg_comma_seen && prev.ends_with(','));
            if boundary {
                starts.push(i);
                seg_start = i;
                seg_conditional = false;
                seg_comma_seen = false;
                seg_first_content = true;
            } else if prev.ends_with(',') {
                seg_comma_seen = true;
            }
        }
        if seg_first_content && !is_bullet(word) {
            seg_first_content = false;
            seg_conditional = matches!(bare(word).as_str(), "if" | "unless");
        }
    }

    let mut edus = Vec::with_capacity(starts.len());
    for (n, &s) in starts.iter().enumerate() {
        let e = starts.get(n + 1).copied().unwrap_or(words.len());
        let begin = words[s].0;
        let (last_off, last) = words[e - 1];
        let end = last_off + last.len();
        edus.push(Edu {
            index: n + 1,
            text: rule_text[begin..end].to_string(),
            span: begin..end,
            bullet: is_bullet(words[s].1),
        });
    }
    Ok(edus)
}

/// Attaches every non-first EDU to a prior EDU with a connective-derived label.
///
/// Bullets attach to the closest preceding non-bullet EDU (the list stem);
/// everything else attaches to the immediately preceding EDU.
pub fn tag_relations(edus: &[Edu]) -> Vec<DiscourseRelation> {
    let mut out = Vec::new();
    for j in 1..edus.len() {
        let edu = &edus[j];
        let cue = cue_word(&edu.text);
        let (head, label) = if edu.bullet {
            let stem = edus[..j].iter().rev().find(|e| !e.bullet).unwrap_or(&edus[0]);
            let label = RelationLabel::from_cue(&cue).unwrap_or_else(|| {
                let conditional_stem = stem
                    .text
                    .split_whitespace()
                    .map(bare)
                    .any(|w| w == "if" || w == "unless");
                if conditional_stem {
                    RelationLabel::Condition
                } else {
                    RelationLabel::Elaboration
                }
            });
            (stem.index, label)
        } else {
            let prev = &edus[j - 1];
            let label = RelationLabel::from_cue(&cue).unwrap_or_else(|| {
                if matches!(cue_word(&prev.text).as_str(), "if" | "unless") {
                    RelationLabel::Condition
                } else {
                    RelationLabel::None
                }
            });
            (prev.index, label)
        };
        out.push(DiscourseRelation {
            label,
            head,
            dependent: edu.index,
        });
    }
    out
}

/// Unit-cost Levenshtein distance between two sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word tokens used for matching: punctuation and bullet markers dropped.
pub fn match_words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

/// Word-level edit distance between two strings.
pub fn min_edit_distance(a: &str, b: &str) -> usize {
    levenshtein(&match_words(a), &match_words(b))
}

/// Noisy entailment labels from the dialogue history.
///
/// Each history turn is matched to the EDU with the smallest word edit
/// distance to its question (lowest index on ties); a "yes" marks it
/// ENTAILMENT and a "no" CONTRADICTION. Later turns overwrite earlier ones.
/// The scenario is accepted for interface symmetry but does not produce labels.
pub fn label_entailment_states(
    edus: &[Edu],
    _scenario: &str,
    history: &[HistoryTurn],
) -> Vec<EntailmentState> {
    let mut states = vec![EntailmentState::Neutral; edus.len()];
    if edus.is_empty() {
        return states;
    }
    let edu_words: Vec<Vec<String>> = edus.iter().map(|e| match_words(&e.text)).collect();
    for turn in history {
        let q = match_words(&turn.question);
        let best = edu_words
            .iter()
            .enumerate()
            .min_by_key(|(i, w)| (levenshtein(&q, w), *i))
            .map(|(i, _)| i)
            .unwrap();
        states[best] = match turn.answer {
            YesNo::Yes => EntailmentState::Entailment,
            YesNo::No => EntailmentState::Contradiction,
        };
    }
    states
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentKind {
    /// 0-based EDU index.
    Edu(usize),
    Question,
    Scenario,
    /// 0-based history turn index.
    History(usize),
}

/// One prefixed input component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub kind: ComponentKind,
    /// Position of the text prefix token.
    pub text_prefix_position: usize,
    /// Position of the special prefix token.
    pub special_position: usize,
    /// Positions of the component's own text tokens.
    pub text_span: Range<usize>,
}

/// Concatenated encoder input with fine-grained prefixes.
///
/// Layout: task prefix, then each EDU as `rule: <edu> text`, the question as
/// `question: <cls> text`, the scenario as `info: <cls> text` and each history
/// turn as `info: <cls> question answer`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixedSequence {
    pub tokens: Vec<u32>,
    /// Components in input order; this is also the row order of the
    /// sentence-level states.
    pub components: Vec<Component>,
    pub task_prefix_len: usize,
}

impl PrefixedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special_positions(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.special_position).collect()
    }

    pub fn n_edus(&self) -> usize {
        self.components
            .iter()
            .filter(|c| matches!(c.kind, ComponentKind::Edu(_)))
            .count()
    }

    /// Sentence-row index of the scenario component.
    pub fn scenario_row(&self) -> usize {
        self.components
            .iter()
            .position(|c| c.kind == ComponentKind::Scenario)
            .expect("every sequence has a scenario component")
    }

    /// Token spans of the EDUs: the special token through the end of the text.
    pub fn edu_token_spans(&self) -> Vec<Range<usize>> {
        self.components
            .iter()
            .filter(|c| matches!(c.kind, ComponentKind::Edu(_)))
            .map(|c| c.special_position..c.text_span.end)
            .collect()
    }
}

pub fn history_text(turn: &HistoryTurn) -> String {
    format!("{} {}", turn.question, turn.answer.as_str())
}

/// Builds the prefixed encoder input for one example.
pub fn build_input_sequence(
    example: &CmrcExample,
    edus: &[Edu],
    vocab: &Vocab,
    max_len: usize,
) -> Result<PrefixedSequence> {
    let mut tokens = vec![vocab.special(Special::Task)];
    let mut components = Vec::new();
    let mut push = |kind: ComponentKind, text_prefix: Special, special: Special, text: &str, tokens: &mut Vec<u32>| {
        let text_prefix_position = tokens.len();
        tokens.push(vocab.special(text_prefix));
        let special_position = tokens.len();
        tokens.push(vocab.special(special));
        let start = tokens.len();
        tokens.extend(vocab.encode(text));
        components.push(Component {
            kind,
            text_prefix_position,
            special_position,
            text_span: start..tokens.len(),
        });
    };
    for (k, edu) in edus.iter().enumerate() {
        push(ComponentKind::Edu(k), Special::Rule, Special::Edu, &edu.text, &mut tokens);
    }
    push(ComponentKind::Question, Special::Question, Special::Cls, &example.user_question, &mut tokens);
    push(ComponentKind::Scenario, Special::Info, Special::Cls, &example.scenario, &mut tokens);
    for (i, turn) in example.history.iter().enumerate() {
        push(ComponentKind::History(i), Special::Info, Special::Cls, &history_text(turn), &mut tokens);
    }
    if tokens.len() > max_len {
        return Err(Error::Truncation {
            id: example.utterance_id.clone(),
            len: tokens.len(),
            max: max_len,
        });
    }
    Ok(PrefixedSequence {
        tokens,
        components,
        task_prefix_len: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Answer;

    fn texts(edus: &[Edu]) -> Vec<&str> {
        edus.iter().map(|e| e.text.as_str()).collect()
    }

    #[test]
    fn bullets_open_edus() {
        let edus = segment_rule("You qualify if: * you are over 60 * you live alone").unwrap();
        assert_eq!(texts(&edus), ["You qualify if:", "* you are over 60", "* you live alone"]);
        assert_eq!(edus.iter().map(|e| e.index).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(!edus[0].bullet && edus[1].bullet);
    }

    #[test]
    fn plain_sentence_is_one_edu() {
        let edus = segment_rule("You must register before the deadline").unwrap();
        assert_eq!(edus.len(), 1);
    }

    #[test]
    fn conditional_clause_splits_at_comma() {
        let edus = segment_rule("If you are over 60, you qualify").unwrap();
        assert_eq!(texts(&edus), ["If you are over 60,", "you qualify"]);
    }

    #[test]
    fn sentences_and_connectives() {
        let edus = segment_rule("You can claim. You must be 18, but you may be younger, or a carer.").unwrap();
        assert_eq!(
            texts(&edus),
            ["You can claim.", "You must be 18,", "but you may be younger,", "or a carer."]
        );
        let edus = segment_rule("1. first thing\n2) second thing").unwrap();
        assert_eq!(texts(&edus), ["1. first thing", "2) second thing"]);
    }

    #[test]
    fn empty_rule_is_an_error() {
        assert!(matches!(segment_rule("  \n "), Err(Error::EmptyRule)));
    }

    #[test]
    fn connective_labels() {
        let edus = segment_rule("You can apply, if you are a carer, but you must live in Wales, or Scotland").unwrap();
        let rels = tag_relations(&edus);
        let labels: Vec<_> = rels.iter().map(|r| r.label).collect();
        assert_eq!(
            labels,
            [RelationLabel::Condition, RelationLabel::Contrast, RelationLabel::Disjunction]
        );
        assert!(rels.iter().all(|r| r.head + 1 == r.dependent));
    }

    #[test]
    fn bullets_attach_to_stem() {
        let edus = segment_rule("You qualify if: * you are over 60 * you live alone").unwrap();
        let rels = tag_relations(&edus);
        assert_eq!(rels.len(), 2);
        for r in &rels {
            assert_eq!(r.head, 1);
            assert_eq!(r.label, RelationLabel::Condition);
        }
        let edus = segment_rule("Documents you need: * a passport * a bill").unwrap();
        assert!(tag_relations(&edus).iter().all(|r| r.label == RelationLabel::Elaboration));
    }

    #[test]
    fn consequent_of_conditional_is_condition() {
        let edus = segment_rule("If you are over 60, you qualify").unwrap();
        let rels = tag_relations(&edus);
        assert_eq!(rels, [DiscourseRelation { label: RelationLabel::Condition, head: 1, dependent: 2 }]);
    }

    #[test]
    fn single_edu_has_no_relations() {
        let edus = segment_rule("Just one clause here").unwrap();
        assert!(tag_relations(&edus).is_empty());
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(min_edit_distance("over 60", "over 60"), 0);
        assert_eq!(min_edit_distance("", "a b c"), 3);
        assert_eq!(min_edit_distance("Are you over 60?", "are you over 60"), 0);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    fn turn(q: &str, yes: bool) -> HistoryTurn {
        HistoryTurn {
            question: q.to_string(),
            answer: if yes { YesNo::Yes } else { YesNo::No },
        }
    }

    fn two_edus() -> Vec<Edu> {
        vec![
            Edu { index: 1, text: "you are over 60".into(), span: 0..15, bullet: false },
            Edu { index: 2, text: "you live alone".into(), span: 16..30, bullet: false },
        ]
    }

    #[test]
    fn labels_from_history() {
        use EntailmentState::*;
        let edus = two_edus();
        assert_eq!(label_entailment_states(&edus, "", &[]), [Neutral, Neutral]);
        assert_eq!(
            label_entailment_states(&edus, "", &[turn("are you over 60", true)]),
            [Entailment, Neutral]
        );
        assert_eq!(
            label_entailment_states(&edus, "", &[turn("are you over 60", false)]),
            [Contradiction, Neutral]
        );
    }

    #[test]
    fn label_ties_go_to_lowest_index() {
        let edus = vec![
            Edu { index: 1, text: "a b".into(), span: 0..3, bullet: false },
            Edu { index: 2, text: "a c".into(), span: 4..7, bullet: false },
        ];
        let states = label_entailment_states(&edus, "", &[turn("a", true)]);
        assert_eq!(states, [EntailmentState::Entailment, EntailmentState::Neutral]);
    }

    fn example(history: Vec<HistoryTurn>) -> CmrcExample {
        CmrcExample {
            utterance_id: "u1".into(),
            tree_id: "t1".into(),
            rule_text: "You qualify if: * you are over 60 * you live alone".into(),
            user_question: "Can I qualify?".into(),
            scenario: "I am retired.".into(),
            history,
            gold_answer: Answer::yes(),
            evidence: vec![],
            gold_states: None,
        }
    }

    fn vocab_for(ex: &CmrcExample) -> Vocab {
        let mut texts = vec![ex.rule_text.clone(), ex.user_question.clone(), ex.scenario.clone()];
        texts.extend(ex.history.iter().map(history_text));
        Vocab::build(texts.iter().map(String::as_str))
    }

    #[test]
    fn prefixed_sequence_layout() {
        let ex = example(vec![turn("Are you over 60?", true)]);
        let vocab = vocab_for(&ex);
        let edus = segment_rule(&ex.rule_text).unwrap();
        let seq = build_input_sequence(&ex, &edus, &vocab, 512).unwrap();
        assert_eq!(seq.components.len(), 3 + 1 + 1 + 1);
        let pos = seq.special_positions();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(seq.tokens[0], vocab.special(Special::Task));
        for c in &seq.components {
            let (tp, sp) = match c.kind {
                ComponentKind::Edu(_) => (Special::Rule, Special::Edu),
                ComponentKind::Question => (Special::Question, Special::Cls),
                _ => (Special::Info, Special::Cls),
            };
            assert_eq!(seq.tokens[c.text_prefix_position], vocab.special(tp));
            assert_eq!(seq.tokens[c.special_position], vocab.special(sp));
        }
        let again = build_input_sequence(&ex, &edus, &vocab, 512).unwrap();
        assert_eq!(seq, again);
    }

    #[test]
    fn component_counts() {
        let two = CmrcExample {
            rule_text: "If you are over 60, you qualify".into(),
            ..example(vec![turn("Are you over 60?", true)])
        };
        let vocab = vocab_for(&two);
        let edus = segment_rule(&two.rule_text).unwrap();
        assert_eq!(build_input_sequence(&two, &edus, &vocab, 512).unwrap().components.len(), 5);
        let none = CmrcExample { history: vec![], ..two };
        assert_eq!(build_input_sequence(&none, &edus, &vocab, 512).unwrap().components.len(), 4);
    }

    #[test]
    fn too_long_input_is_rejected() {
        let ex = example(vec![]);
        let vocab = vocab_for(&ex);
        let edus = segment_rule(&ex.rule_text).unwrap();
        let err = build_input_sequence(&ex, &edus, &vocab, 8).unwrap_err();
        assert!(matches!(err, Error::Truncation { ref id, .. } if id == "u1"));
    }
}
