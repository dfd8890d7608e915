//! Transformer building blocks on top of the autodiff tape.
//!
//! All layers use the row convention `y = x W + b`, with `x` holding one
//! token (or sentence) per row.

use duplex_autograd::{Matrix, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let m = Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut self.rng));
        self.store.insert(name, m)
    }

    /// Normal with standard deviation `1 / sqrt(rows)`.
    pub fn fan_in(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.normal(name, rows, cols, 1.0 / (rows as f64).sqrt())
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.insert(name, Matrix::filled(rows, cols, value))
    }

    /// Draws a fresh value for an existing parameter, keeping its shape.
    pub fn redraw(&mut self, id: ParamId, std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let m = self.store.get_mut(id);
        for x in m.data_mut() {
            *x = dist.sample(&mut self.rng);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = init.fan_in(format!("{name}.weight"), d_in, d_out);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), 1, d_out, 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            gain: init.constant(format!("{name}.gain"), 1, d, 1.0),
            bias: init.constant(format!("{name}.bias"), 1, d, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention with an optional additive mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            query: init.fan_in(format!("{name}.query"), d, d),
            key: init.fan_in(format!("{name}.key"), d, d),
            value: init.fan_in(format!("{name}.value"), d, d),
            output: init.fan_in(format!("{name}.output"), d, d),
            n_heads,
        }
    }

    /// Returns the attended output and the per-head attention weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: Option<&Matrix>,
    ) -> (Var, Vec<Var>) {
        let (wq, wk, wv, wo) = (
            tape.param(store, self.query),
            tape.param(store, self.key),
            tape.param(store, self.value),
            tape.param(store, self.output),
        );
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(memory, wk);
        let v = tape.matmul(memory, wv);
        let d = tape.shape(q).1;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, mask);
            heads.push(tape.matmul(attn, vh));
            weights.push(attn);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        (tape.matmul(joined, wo), weights)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: Option<&Matrix>,
    ) -> Var {
        self.forward_with_weights(tape, store, queries, memory, mask).0
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, width: usize) -> Self {
        Self {
            inner: Linear::new(init, &format!("{name}.inner"), d, width, true),
            outer: Linear::new(init, &format!("{name}.outer"), width, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(tape, store, x);
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, name: &str, d: usize, n_heads: usize, ff: usize) -> Self {
        Self {
            attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, n_heads),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, ff),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<&Matrix>) -> Var {
        let h = self.attn_norm.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, h, mask);
        let x = tape.add(x, a);
        let h = self.ffn_norm.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// Pre-norm block with causal self-attention and cross-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, name: &str, d: usize, n_heads: usize, ff: usize) -> Self {
        Self {
            self_norm: LayerNorm::new(init, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, n_heads),
            cross_norm: LayerNorm::new(init, &format!("{name}.cross_norm"), d),
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), d, n_heads),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, ff),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        causal: &Matrix,
    ) -> Var {
        let h = self.self_norm.forward(tape, store, x);
        let a = self.self_attn.forward(tape, store, h, h, Some(causal));
        let x = tape.add(x, a);
        let h = self.cross_norm.forward(tape, store, x);
        let c = self.cross_attn.forward(tape, store, h, memory, None);
        let x = tape.add(x, c);
        let h = self.ffn_norm.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// Additive mask hiding future positions.
pub fn causal_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_distributions_and_respect_mask() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 3);
        let mha = MultiHeadAttention::new(&mut init, "a", 4, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin()));
        let inf = f64::NEG_INFINITY;
        let mask = Matrix::from_rows(&[vec![0.0, inf, 0.0], vec![inf, 0.0, inf], vec![0.0, 0.0, 0.0]]);
        let (_, weights) = mha.forward_with_weights(&mut tape, &store, x, x, Some(&mask));
        for w in weights {
            let w = tape.value(w);
            for i in 0..3 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..3 {
                    if mask.get(i, j) == inf {
                        assert_eq!(w.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 1), f64::NEG_INFINITY);
        assert_eq!(m.get(2, 1), 0.0);
    }
}
