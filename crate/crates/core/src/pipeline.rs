//! Turns corpus examples into model-ready instances.

use crate::config::{LabelSource, ModelConfig};
use crate::corpus::{Answer, CmrcExample};
use crate::entail::EntailInputs;
use crate::error::{Error, Result};
use crate::preprocess::{
    build_input_sequence, history_text, label_entailment_states, segment_rule, tag_relations, EntailmentState,
    PrefixedSequence,
};
use crate::tokenizer::{Special, Vocab};

#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub seq: PrefixedSequence,
    pub entail: EntailInputs,
    pub states: Vec<EntailmentState>,
    /// Answer tokens followed by the end token.
    pub answer_tokens: Vec<u32>,
    pub gold: Answer,
}

/// Vocabulary over every text a model reads or writes.
pub fn build_vocab(examples: &[CmrcExample]) -> Vocab {
    let mut texts: Vec<String> = vec!["yes no irrelevant".to_string()];
    for ex in examples {
        texts.push(ex.rule_text.clone());
        texts.push(ex.user_question.clone());
        texts.push(ex.scenario.clone());
        texts.push(ex.gold_answer.text().to_string());
        texts.extend(ex.history.iter().map(history_text));
    }
    Vocab::build(texts.iter().map(String::as_str))
}

/// Input sequence and entailment inputs of one example.
pub fn encode_input(example: &CmrcExample, vocab: &Vocab, max_len: usize) -> Result<(PrefixedSequence, EntailInputs)> {
    let edus = segment_rule(&example.rule_text).map_err(|e| match e {
        Error::EmptyRule => Error::Example {
            id: example.utterance_id.clone(),
            message: "rule text has no EDUs".into(),
        },
        other => other,
    })?;
    let seq = build_input_sequence(example, &edus, vocab, max_len)?;
    let entail = EntailInputs::new(&seq, &tag_relations(&edus))?;
    Ok((seq, entail))
}

pub fn prepare(example: &CmrcExample, vocab: &Vocab, cfg: &ModelConfig) -> Result<Instance> {
    let (seq, entail) = encode_input(example, vocab, cfg.max_len)?;
    let states = match (cfg.label_source, &example.gold_states) {
        (LabelSource::Gold, Some(gold)) => {
            if gold.len() != entail.n_edus {
                return Err(Error::Example {
                    id: example.utterance_id.clone(),
                    message: format!("{} gold states for {} EDUs", gold.len(), entail.n_edus),
                });
            }
            gold.clone()
        }
        (LabelSource::Gold, None) => {
            return Err(Error::Example {
                id: example.utterance_id.clone(),
                message: "gold entailment states requested but absent".into(),
            })
        }
        (LabelSource::Heuristic, _) => {
            let edus = segment_rule(&example.rule_text)?;
            label_entailment_states(&edus, &example.scenario, &example.history)
        }
    };
    let mut answer_tokens = vocab.encode(example.gold_answer.text());
    answer_tokens.push(vocab.special(Special::Eos));
    if answer_tokens.len() > cfg.max_answer_len {
        return Err(Error::Truncation {
            id: example.utterance_id.clone(),
            len: answer_tokens.len(),
            max: cfg.max_answer_len,
        });
    }
    Ok(Instance {
        id: example.utterance_id.clone(),
        seq,
        entail,
        states,
        answer_tokens,
        gold: example.gold_answer.clone(),
    })
}

pub fn prepare_all(examples: &[CmrcExample], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<Instance>> {
    examples.iter().map(|ex| prepare(ex, vocab, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};

    #[test]
    fn synthetic_examples_prepare_with_both_label_sources() {
        let examples = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let vocab = build_vocab(&examples);
        let mut cfg = ModelConfig::default();
        let heuristic = prepare_all(&examples, &vocab, &cfg).unwrap();
        cfg.label_source = LabelSource::Gold;
        let gold = prepare_all(&examples, &vocab, &cfg).unwrap();
        for (h, g) in heuristic.iter().zip(&gold) {
            assert_eq!(h.states.len(), h.entail.n_edus);
            assert_eq!(h.states.len(), g.states.len());
            assert_eq!(*h.answer_tokens.last().unwrap(), vocab.special(Special::Eos));
            assert!(h.answer_tokens[..h.answer_tokens.len() - 1].iter().all(|&t| !vocab.is_special(t)));
        }
    }

    #[test]
    fn long_answers_are_rejected() {
        let examples = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let vocab = build_vocab(&examples);
        let cfg = ModelConfig { max_answer_len: 1, ..ModelConfig::default() };
        assert!(matches!(prepare(&examples[0], &vocab, &cfg), Err(Error::Truncation { .. })));
    }
}
