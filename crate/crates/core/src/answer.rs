//! Autoregressive answer decoder and beam search.

use std::cmp::Ordering;

use duplex_autograd::{log_softmax_rows, Matrix, ParamId, ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, DecoderLayer, Init, LayerNorm, Linear};
use crate::tokenizer::{Special, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    /// Generated ids after the start token, including the end token when
    /// one was emitted.
    pub token_ids: Vec<u32>,
    pub text: String,
    pub token_log_probs: Vec<f64>,
    pub total_log_prob: f64,
    /// Set when no hypothesis emitted the end token within the length limit.
    pub forced: bool,
}

#[derive(Clone, Debug)]
pub struct AnswerDecoder {
    pub embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub output: Linear,
    pub max_len: usize,
}

impl AnswerDecoder {
    /// `max_len` bounds the decoder input, start token included.
    pub fn new(init: &mut Init, vocab_size: usize, max_len: usize, d: usize, n_heads: usize, ff: usize, n_layers: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let embedding = init.normal("answer.embedding".into(), vocab_size, d, std);
        let positions = init.normal("answer.positions".into(), max_len, d, std);
        let layers = (0..n_layers)
            .map(|l| DecoderLayer::new(init, &format!("answer.layer{l}"), d, n_heads, ff))
            .collect();
        let final_norm = LayerNorm::new(init, "answer.final_norm", d);
        let output = Linear::new(init, "answer.output", d, vocab_size, true);
        Self {
            embedding,
            positions,
            layers,
            final_norm,
            output,
            max_len,
        }
    }

    /// Logits for every position of `input`; row `i` predicts `input[i + 1]`.
    pub fn decode_teacher_forced(&self, tape: &mut Tape, store: &ParamStore, memory: Var, input: &[u32]) -> Result<Var> {
        if input.is_empty() || input.len() > self.max_len {
            return Err(Error::Shape(format!(
                "decoder input of length {} outside 1..={}",
                input.len(),
                self.max_len
            )));
        }
        let vocab_size = store.get(self.embedding).rows();
        if let Some(&bad) = input.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad, size: vocab_size });
        }
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let emb = tape.param(store, self.embedding);
        let pos = tape.param(store, self.positions);
        let tok = tape.gather_rows(emb, &ids);
        let steps: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather_rows(pos, &steps);
        let mut h = tape.add(tok, pos);
        let causal = causal_mask(ids.len());
        for layer in &self.layers {
            h = layer.forward(tape, store, h, memory, &causal);
        }
        let h = self.final_norm.forward(tape, store, h);
        Ok(self.output.forward(tape, store, h))
    }

    /// Log-probabilities of `tokens` following the start token.
    pub fn score(&self, store: &ParamStore, memory: &Matrix, start: u32, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut input = vec![start];
        input.extend(&tokens[..tokens.len().saturating_sub(1)]);
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let logits = self.decode_teacher_forced(&mut tape, store, mem, &input)?;
        let lp = log_softmax_rows(tape.value(logits));
        Ok(tokens.iter().enumerate().map(|(i, &t)| lp.get(i, t as usize)).collect())
    }

    pub fn step_scorer<'a>(&'a self, store: &'a ParamStore, memory: &'a Matrix) -> DecoderScorer<'a> {
        DecoderScorer { decoder: self, store, memory }
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        memory: &Matrix,
        vocab: &Vocab,
        beam: usize,
        max_tokens: usize,
    ) -> Result<GenerationOutput> {
        let start = vocab.special(Special::Bos);
        let end = vocab.special(Special::Eos);
        let limit = max_tokens.min(self.max_len);
        let mut scorer = self.step_scorer(store, memory);
        let hyp = beam_search(&mut scorer, start, end, beam, limit)?;
        Ok(GenerationOutput {
            text: vocab.decode(&hyp.tokens),
            token_ids: hyp.tokens,
            token_log_probs: hyp.log_probs,
            total_log_prob: hyp.score,
            forced: !hyp.finished,
        })
    }
}

/// Next-token log-probabilities given a prefix that starts with the start
/// token.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Scores next tokens with the decoder over a fixed encoder memory.
pub struct DecoderScorer<'a> {
    decoder: &'a AnswerDecoder,
    store: &'a ParamStore,
    memory: &'a Matrix,
}

impl StepScorer for DecoderScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mem = tape.constant(self.memory.clone());
        let logits = self.decoder.decode_teacher_forced(&mut tape, self.store, mem, prefix)?;
        let logits = tape.value(logits);
        let last = Matrix::from_vec(1, logits.cols(), logits.row(logits.rows() - 1).to_vec());
        Ok(log_softmax_rows(&last).into_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn extend(&self, token: u32, log_prob: f64, end: u32) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut log_probs = self.log_probs.clone();
        log_probs.push(log_prob);
        Self {
            tokens,
            log_probs,
            score: self.score + log_prob,
            finished: token == end,
        }
    }
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search without length normalization.
///
/// At each step every live hypothesis is extended by every token. Candidates
/// are ranked by cumulative log-probability with ties going to the lower
/// token id. End-token candidates ranked within the top `beam` are moved to
/// the finished pool and the best `beam` other candidates stay live. The
/// search stops once the best finished score is at least the best live score
/// (log-probabilities never increase a score) or after `max_len` tokens.
pub fn beam_search(
    scorer: &mut impl StepScorer,
    start: u32,
    end: u32,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(usize, u32, f64, f64)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let mut prefix = vec![start];
            prefix.extend(&hyp.tokens);
            let lp = scorer.log_probs(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                candidates.push((parent, tok as u32, l, hyp.score + l));
            }
        }
        candidates.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(beam);
        for (rank_pos, &(parent, tok, l, _)) in candidates.iter().enumerate() {
            if tok == end {
                if rank_pos < beam {
                    finished.push(live[parent].extend(tok, l, end));
                }
            } else if next.len() < beam {
                next.push(live[parent].extend(tok, l, end));
            }
            if rank_pos + 1 >= beam && next.len() == beam {
                break;
            }
        }
        if next.is_empty() {
            break;
        }
        live = next;
        finished.sort_by(rank);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if finished.first().is_some_and(|f| f.score >= best_live) {
            break;
        }
    }
    if let Some(best) = finished.into_iter().min_by(rank) {
        return Ok(best);
    }
    live.sort_by(rank);
    Ok(live.into_iter().next().expect("beam keeps at least one hypothesis"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed log-probabilities over three tokens `a`, `b` and end (`2`),
    /// keyed by the prefix after the start token.
    struct Table;

    impl StepScorer for Table {
        fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
            let p: &[f64] = match &prefix[1..] {
                [] => &[0.5, 0.4, 0.1],
                [0] => &[0.3, 0.3, 0.4],
                [1] => &[0.05, 0.05, 0.9],
                [0, 0] => &[0.2, 0.2, 0.6],
                [0, 1] => &[0.1, 0.1, 0.8],
                _ => &[0.3, 0.3, 0.4],
            };
            Ok(p.iter().map(|x| x.ln()).collect())
        }
    }

    /// Best complete sequence of at most three tokens by exhaustive search.
    fn exhaustive(max_len: usize) -> (Vec<u32>, f64) {
        let mut best: (Vec<u32>, f64) = (vec![], f64::NEG_INFINITY);
        let mut stack = vec![(vec![], 0.0)];
        while let Some((seq, score)) = stack.pop() {
            if seq.len() == max_len {
                continue;
            }
            let mut prefix = vec![9];
            prefix.extend(&seq);
            let lp = Table.log_probs(&prefix).unwrap();
            for t in 0..3u32 {
                let mut s = seq.clone();
                s.push(t);
                let sc = score + lp[t as usize];
                if t == 2 {
                    if sc > best.1 {
                        best = (s, sc);
                    }
                } else {
                    stack.push((s, sc));
                }
            }
        }
        best
    }

    #[test]
    fn beam_two_matches_exhaustive_search() {
        let (seq, score) = exhaustive(3);
        let hyp = beam_search(&mut Table, 9, 2, 2, 3).unwrap();
        assert_eq!(hyp.tokens, seq);
        assert!((hyp.score - score).abs() < 1e-12);
        assert!(hyp.finished);
        // Greedy commits to `a` and misses the better `b </s>`.
        assert_eq!(seq, vec![1, 2]);
        let greedy = beam_search(&mut Table, 9, 2, 1, 3).unwrap();
        assert_eq!(greedy.tokens, vec![0, 2]);
        assert!(hyp.score >= greedy.score);
    }

    #[test]
    fn beam_one_is_greedy() {
        let hyp = beam_search(&mut Table, 9, 2, 1, 5).unwrap();
        let mut prefix = vec![9];
        let mut expected = Vec::new();
        for _ in 0..5 {
            let lp = Table.log_probs(&prefix).unwrap();
            let mut arg = 0;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[arg] {
                    arg = i;
                }
            }
            expected.push(arg as u32);
            prefix.push(arg as u32);
            if arg == 2 {
                break;
            }
        }
        assert_eq!(hyp.tokens, expected);
        assert_eq!(hyp.score, hyp.log_probs.iter().sum::<f64>());
    }

    struct NeverEnds;

    impl StepScorer for NeverEnds {
        fn log_probs(&mut self, _: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![0.6f64.ln(), 0.4f64.ln(), f64::NEG_INFINITY])
        }
    }

    #[test]
    fn forced_termination_is_flagged() {
        let hyp = beam_search(&mut NeverEnds, 9, 2, 3, 4).unwrap();
        assert!(!hyp.finished);
        assert_eq!(hyp.tokens, vec![0, 0, 0, 0]);
    }

    struct Flat;

    impl StepScorer for Flat {
        fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
            Ok(if prefix.len() == 1 { vec![0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY] } else { vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0] })
        }
    }

    #[test]
    fn ties_go_to_lower_token_id() {
        let hyp = beam_search(&mut Flat, 9, 2, 2, 3).unwrap();
        assert_eq!(hyp.tokens, vec![0, 2]);
    }
}
