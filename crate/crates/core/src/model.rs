//! The full model: shared encoder, entailment decoder and answer decoder.

use std::collections::BTreeMap;

use duplex_autograd::{Matrix, ParamId, ParamStore, Tape, Var};

use crate::answer::{AnswerDecoder, GenerationOutput};
use crate::config::ModelConfig;
use crate::encoder::Encoder;
use crate::entail::EntailDecoder;
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::pipeline::Instance;
use crate::preprocess::PrefixedSequence;
use crate::tokenizer::{Special, Vocab};

/// Parameter groups with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder and answer decoder.
    Backbone,
    /// Entailment decoder.
    Auxiliary,
}

pub const ENCODER_PREFIX: &str = "encoder.";
pub const ANSWER_PREFIX: &str = "answer.";
pub const ENTAIL_PREFIX: &str = "entail.";

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with(ENTAIL_PREFIX) {
        ParamGroup::Auxiliary
    } else {
        ParamGroup::Backbone
    }
}

/// Loss terms of one example recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub answer: Var,
    /// Absent when the entailment branch is not trained.
    pub entail: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub entail: Option<EntailDecoder>,
    pub answer: AnswerDecoder,
}

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(3).wrapping_add(k)
}

impl Model {
    /// Randomly initialized model; `config.vocab_size` must be set.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set before building a model".into()));
        }
        let c = config;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut Init::new(&mut store, stream(seed, 0)),
            c.vocab_size,
            c.max_len,
            c.d_model,
            c.n_heads,
            c.ff_width,
            c.encoder_layers,
        );
        let answer = AnswerDecoder::new(
            &mut Init::new(&mut store, stream(seed, 1)),
            c.vocab_size,
            c.max_answer_len,
            c.d_model,
            c.n_heads,
            c.ff_width,
            c.decoder_layers,
        );
        let entail = c.entail_decoder.then(|| {
            EntailDecoder::new(
                &mut Init::new(&mut store, stream(seed, 2)),
                c.d_model,
                c.n_heads,
                c.ff_width,
                c.rgcn_layers,
                c.inter_layers,
                c.variant,
                c.fusion_symmetric,
            )
        });
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            entail,
            answer,
        })
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        group_of(self.store.name(id))
    }

    /// Parameters of the entailment decoder.
    pub fn auxiliary_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group(id) == ParamGroup::Auxiliary).collect()
    }

    /// Records the answer loss and, when trained, the entailment loss.
    pub fn losses(&self, tape: &mut Tape, inst: &Instance) -> Result<LossVars> {
        let enc = self.encoder.encode(tape, &self.store, &inst.seq)?;
        let mut input = vec![self.start_token()];
        input.extend(&inst.answer_tokens[..inst.answer_tokens.len() - 1]);
        let logits = self.answer.decode_teacher_forced(tape, &self.store, enc.token_states, &input)?;
        let targets: Vec<usize> = inst.answer_tokens.iter().map(|&t| t as usize).collect();
        let answer = crate::training::answer_loss(tape, logits, &targets, self.config.answer_loss_mean);
        let entail = match &self.entail {
            Some(dec) if self.config.trains_entailment() => {
                let logits = dec.forward(tape, &self.store, &enc, &inst.entail)?;
                let gold: Vec<usize> = inst.states.iter().map(|s| s.class_index()).collect();
                Some(crate::training::entail_loss(tape, logits, &gold))
            }
            _ => None,
        };
        let total = crate::training::total_loss(tape, answer, entail, self.config.lambda);
        Ok(LossVars { answer, entail, total })
    }

    /// Entailment logits for one instance, one row per EDU.
    pub fn entail_logits(&self, inst: &Instance) -> Result<Option<Matrix>> {
        let Some(dec) = &self.entail else { return Ok(None) };
        let mut tape = Tape::new();
        let enc = self.encoder.encode(&mut tape, &self.store, &inst.seq)?;
        let logits = dec.forward(&mut tape, &self.store, &enc, &inst.entail)?;
        Ok(Some(tape.value(logits).clone()))
    }

    /// Generates an answer using only the encoder and the answer decoder.
    pub fn generate(&self, seq: &PrefixedSequence, vocab: &Vocab) -> Result<GenerationOutput> {
        let memory = self.encoder.encode_eval(&self.store, seq)?.token_states;
        self.answer.generate(&self.store, &memory, vocab, self.config.beam_width, self.config.max_answer_len)
    }

    /// Per-token log-probabilities of `tokens` as an answer to `seq`.
    pub fn score_answer(&self, seq: &PrefixedSequence, tokens: &[u32]) -> Result<Vec<f64>> {
        let memory = self.encoder.encode_eval(&self.store, seq)?.token_states;
        self.answer.score(&self.store, &memory, self.start_token(), tokens)
    }

    fn start_token(&self) -> u32 {
        (self.config.vocab_size - Special::ALL.len() + Special::Bos.offset()) as u32
    }

    /// Draws fresh entailment-decoder parameters from `seed`.
    pub fn reinit_entailment(&mut self, seed: u64) {
        let ids = self.auxiliary_params();
        let mut init = Init::new(&mut self.store, seed);
        for id in ids {
            let rows = init.store.get(id).rows();
            init.redraw(id, 1.0 / (rows as f64).sqrt());
        }
    }

    /// Copies matching tensors from `weights` into the model.
    ///
    /// With `strict`, every model parameter must be present and shapes must
    /// agree. Otherwise missing names are skipped and the names that were
    /// loaded are returned.
    pub fn load_weights(&mut self, weights: &BTreeMap<String, Matrix>, strict: bool) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            match weights.get(&name) {
                Some(m) if m.shape() == self.store.get(id).shape() => {
                    *self.store.get_mut(id) = m.clone();
                    loaded.push(name);
                }
                Some(m) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} does not match {:?}",
                        m.shape(),
                        self.store.get(id).shape()
                    )))
                }
                None if strict => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                None => {}
            }
        }
        if strict && weights.len() != loaded.len() {
            let extra = weights.keys().find(|k| self.store.id(k).is_none()).cloned().unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(loaded)
    }

    pub fn weights(&self) -> BTreeMap<String, Matrix> {
        self.store.iter().map(|(_, n, m)| (n.to_string(), m.clone())).collect()
    }
}
