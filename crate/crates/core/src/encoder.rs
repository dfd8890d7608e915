//! Shared sequence encoder.

use duplex_autograd::{Matrix, ParamId, ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Init, LayerNorm};
use crate::preprocess::PrefixedSequence;

/// Encoder states recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `H_e`, one row per input token.
    pub token_states: Var,
    /// `H_s`, the rows of `H_e` at the special positions.
    pub sentence_states: Var,
    /// `E`, the rows of `H_e` covered by EDU spans, in order.
    pub edu_token_states: Var,
}

/// Encoder states detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub token_states: Matrix,
    pub sentence_states: Matrix,
    pub edu_token_states: Matrix,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        vocab_size: usize,
        max_len: usize,
        d: usize,
        n_heads: usize,
        ff: usize,
        n_layers: usize,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let embedding = init.normal("encoder.embedding".into(), vocab_size, d, std);
        let positions = init.normal("encoder.positions".into(), max_len, d, std);
        let layers = (0..n_layers)
            .map(|l| EncoderLayer::new(init, &format!("encoder.layer{l}"), d, n_heads, ff))
            .collect();
        let final_norm = (n_layers > 0).then(|| LayerNorm::new(init, "encoder.final_norm", d));
        Self {
            embedding,
            positions,
            layers,
            final_norm,
            vocab_size,
            max_len,
        }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, seq: &PrefixedSequence) -> Result<EncoderVars> {
        if seq.len() > self.max_len {
            return Err(Error::Truncation {
                id: String::new(),
                len: seq.len(),
                max: self.max_len,
            });
        }
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad, size: self.vocab_size });
        }
        let ids: Vec<usize> = seq.tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.param(store, self.embedding);
        let pos = tape.param(store, self.positions);
        let tok = tape.gather_rows(emb, &ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_rows(pos, &positions);
        let mut h = tape.add(tok, pos);
        for layer in &self.layers {
            h = layer.forward(tape, store, h, None);
        }
        if let Some(norm) = &self.final_norm {
            h = norm.forward(tape, store, h);
        }
        let sentence_states = tape.gather_rows(h, &seq.special_positions());
        let edu_rows: Vec<usize> = seq.edu_token_spans().into_iter().flatten().collect();
        let edu_token_states = tape.gather_rows(h, &edu_rows);
        Ok(EncoderVars {
            token_states: h,
            sentence_states,
            edu_token_states,
        })
    }

    /// Runs the encoder on a scratch tape and returns plain matrices.
    pub fn encode_eval(&self, store: &ParamStore, seq: &PrefixedSequence) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let v = self.encode(&mut tape, store, seq)?;
        Ok(EncoderOutput {
            token_states: tape.value(v.token_states).clone(),
            sentence_states: tape.value(v.sentence_states).clone(),
            edu_token_states: tape.value(v.edu_token_states).clone(),
        })
    }
}
