//! Entailment reasoning decoder.
//!
//! Three views of the sentence-level states are built: the encoder's own
//! `H_s`, the explicit-graph view `H_p` from a gated R-GCN over the Levi
//! discourse graph, and the implicit-graph view `H_i` from local/contextual
//! attention over the EDU tokens. Each view goes through a shared
//! inter-sentence transformer, the results are averaged, and every EDU row is
//! classified into an entailment state.

use std::ops::Range;

use duplex_autograd::{Matrix, ParamId, ParamStore, Tape, Var};

use crate::config::Variant;
use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::graph::{build_decoupling_masks, build_levi_graph, DecouplingMasks, EdgeType, LeviGraph, Vertex};
use crate::nn::{EncoderLayer, Init, Linear, MultiHeadAttention};
use crate::preprocess::{DiscourseRelation, PrefixedSequence, RelationLabel};

/// Per-example inputs of the entailment decoder that do not depend on
/// parameters.
#[derive(Clone, Debug)]
pub struct EntailInputs {
    pub graph: LeviGraph,
    /// Row-normalized adjacency per edge type, `None` for absent types.
    pub adjacency: Vec<Option<Matrix>>,
    pub masks: DecouplingMasks,
    /// Row of each EDU's special token inside `E`.
    pub edu_special_rows: Vec<usize>,
    pub n_edus: usize,
}

impl EntailInputs {
    pub fn new(seq: &PrefixedSequence, relations: &[DiscourseRelation]) -> Result<Self> {
        let n_edus = seq.n_edus();
        let graph = build_levi_graph(n_edus, relations, seq.scenario_row())?;
        let spans = seq.edu_token_spans();
        let masks = build_decoupling_masks(&spans)?;
        let mut edu_special_rows = Vec::with_capacity(spans.len());
        let mut offset = 0;
        for s in &spans {
            edu_special_rows.push(offset);
            offset += s.len();
        }
        Ok(Self::from_parts(graph, masks, edu_special_rows, n_edus))
    }

    pub fn from_parts(graph: LeviGraph, masks: DecouplingMasks, edu_special_rows: Vec<usize>, n_edus: usize) -> Self {
        let adjacency = adjacency_by_type(&graph);
        Self {
            graph,
            adjacency,
            masks,
            edu_special_rows,
            n_edus,
        }
    }
}

pub fn adjacency_by_type(graph: &LeviGraph) -> Vec<Option<Matrix>> {
    EdgeType::ALL
        .iter()
        .map(|&t| graph.edges.iter().any(|e| e.kind == t).then(|| graph.normalized_adjacency(t)))
        .collect()
}

/// One gated relational graph convolution layer.
#[derive(Clone, Debug)]
pub struct RgcnLayer {
    /// `w_r`, one `d x d` matrix per edge type.
    pub weights: Vec<ParamId>,
    /// `w_{r,g}`, one `d x 1` gate vector per edge type.
    pub gates: Vec<ParamId>,
}

impl RgcnLayer {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        let mut weights = Vec::new();
        let mut gates = Vec::new();
        for t in EdgeType::ALL {
            weights.push(init.fan_in(format!("{name}.weight.{}", t.as_str()), d, d));
            gates.push(init.fan_in(format!("{name}.gate.{}", t.as_str()), d, 1));
        }
        Self { weights, gates }
    }

    /// Returns the new node states and the gate column of every present edge
    /// type. `gate_override` replaces every gate with a constant.
    pub fn forward_with_gates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        adjacency: &[Option<Matrix>],
        gate_override: Option<f64>,
    ) -> (Var, Vec<Var>) {
        let (n, d) = tape.shape(h);
        let mut total: Option<Var> = None;
        let mut gates = Vec::new();
        for (t, adj) in adjacency.iter().enumerate() {
            let Some(adj) = adj else { continue };
            let w = tape.param(store, self.weights[t]);
            let hw = tape.matmul(h, w);
            let a = tape.constant(adj.clone());
            let msg = tape.matmul(a, hw);
            let g = match gate_override {
                Some(c) => tape.constant(Matrix::filled(n, 1, c)),
                None => {
                    let wg = tape.param(store, self.gates[t]);
                    let logit = tape.matmul(h, wg);
                    tape.sigmoid(logit)
                }
            };
            gates.push(g);
            let term = tape.mul_col(msg, g);
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let total = total.unwrap_or_else(|| tape.constant(Matrix::zeros(n, d)));
        (tape.relu(total), gates)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, adjacency: &[Option<Matrix>]) -> Var {
        self.forward_with_gates(tape, store, h, adjacency, None).0
    }
}

/// Decoupled local/contextual attention with gated fusion.
#[derive(Clone, Debug)]
pub struct ImplicitReasoner {
    pub attn: MultiHeadAttention,
    pub local_fuse: Linear,
    pub context_fuse: Linear,
    pub gate: Linear,
    /// Use `E - G_c` instead of `E - G_l` in the contextual branch.
    pub symmetric: bool,
}

/// Intermediate values of the fusion step.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub local: Var,
    pub contextual: Var,
    pub gate: Var,
    pub fused: Var,
}

impl ImplicitReasoner {
    pub fn new(init: &mut Init, name: &str, d: usize, n_heads: usize, symmetric: bool) -> Self {
        Self {
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, n_heads),
            local_fuse: Linear::new(init, &format!("{name}.local_fuse"), 4 * d, d, true),
            context_fuse: Linear::new(init, &format!("{name}.context_fuse"), 4 * d, d, true),
            gate: Linear::new(init, &format!("{name}.gate"), 2 * d, d, true),
            symmetric,
        }
    }

    /// Fuses given local and contextual views of `e`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, e: Var, g_l: Var, g_c: Var) -> Fusion {
        let diff_l = tape.sub(e, g_l);
        let prod_l = tape.mul(e, g_l);
        let x1 = tape.concat_cols(&[e, g_l, diff_l, prod_l]);
        let e1 = self.local_fuse.forward(tape, store, x1);
        let e1 = tape.relu(e1);

        let diff2 = if self.symmetric { tape.sub(e, g_c) } else { diff_l };
        let prod_c = tape.mul(e, g_c);
        let x2 = tape.concat_cols(&[e, g_c, diff2, prod_c]);
        let e2 = self.context_fuse.forward(tape, store, x2);
        let e2 = tape.relu(e2);

        let x3 = tape.concat_cols(&[e1, e2]);
        let g = self.gate.forward(tape, store, x3);
        let g = tape.sigmoid(g);
        let spread = tape.sub(g_l, g_c);
        let weighted = tape.mul(g, spread);
        let fused = tape.add(g_c, weighted);
        Fusion {
            local: g_l,
            contextual: g_c,
            gate: g,
            fused,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, e: Var, masks: &DecouplingMasks) -> Fusion {
        let g_l = self.attn.forward(tape, store, e, e, Some(&masks.local));
        let g_c = self.attn.forward(tape, store, e, e, Some(&masks.contextual));
        self.fuse(tape, store, e, g_l, g_c)
    }
}

#[derive(Clone, Debug)]
pub struct EntailDecoder {
    pub relation_embedding: ParamId,
    pub rgcn: Vec<RgcnLayer>,
    pub implicit: ImplicitReasoner,
    pub inter: Vec<EncoderLayer>,
    pub classifier: Linear,
    pub variant: Variant,
}

impl EntailDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        d: usize,
        n_heads: usize,
        ff: usize,
        rgcn_layers: usize,
        inter_layers: usize,
        variant: Variant,
        symmetric: bool,
    ) -> Self {
        let relation_embedding =
            init.normal("entail.relation_embedding".into(), RelationLabel::ALL.len(), d, 1.0 / (d as f64).sqrt());
        let rgcn = (0..rgcn_layers)
            .map(|l| RgcnLayer::new(init, &format!("entail.rgcn{l}"), d))
            .collect();
        let implicit = ImplicitReasoner::new(init, "entail.implicit", d, n_heads, symmetric);
        let inter = (0..inter_layers)
            .map(|l| EncoderLayer::new(init, &format!("entail.inter{l}"), d, n_heads, ff))
            .collect();
        let classifier = Linear::new(init, "entail.classifier", d, 3, true);
        Self {
            relation_embedding,
            rgcn,
            implicit,
            inter,
            classifier,
            variant,
        }
    }

    /// Initial Levi-graph node states: EDU and scenario rows of `H_s`,
    /// relation vertices from the label embedding.
    pub fn graph_nodes(&self, tape: &mut Tape, store: &ParamStore, h_s: Var, graph: &LeviGraph) -> Var {
        let table = tape.param(store, self.relation_embedding);
        let parts: Vec<Var> = graph
            .vertices
            .iter()
            .map(|v| match *v {
                Vertex::Edu(k) => tape.gather_rows(h_s, &[k]),
                Vertex::Scenario { row } => tape.gather_rows(h_s, &[row]),
                Vertex::Relation { label, .. } => tape.gather_rows(table, &[label.index()]),
            })
            .collect();
        tape.concat_rows(&parts)
    }

    /// `H_p`: EDU and scenario rows replaced by their final R-GCN states.
    pub fn explicit_graph_reason(&self, tape: &mut Tape, store: &ParamStore, h_s: Var, inputs: &EntailInputs) -> Var {
        if self.rgcn.is_empty() {
            return h_s;
        }
        let mut h = self.graph_nodes(tape, store, h_s, &inputs.graph);
        for layer in &self.rgcn {
            h = layer.forward(tape, store, h, &inputs.adjacency);
        }
        let mut vertices = Vec::new();
        let mut rows = Vec::new();
        for (i, v) in inputs.graph.vertices.iter().enumerate() {
            match *v {
                Vertex::Edu(k) => {
                    vertices.push(i);
                    rows.push(k);
                }
                Vertex::Scenario { row } => {
                    vertices.push(i);
                    rows.push(row);
                }
                Vertex::Relation { .. } => {}
            }
        }
        let updated = tape.gather_rows(h, &vertices);
        tape.scatter_rows(h_s, updated, &rows)
    }

    /// `H_i`: each EDU row replaced by the fused state at its special token.
    pub fn implicit_graph_reason(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_s: Var,
        e: Var,
        inputs: &EntailInputs,
    ) -> Var {
        let fusion = self.implicit.forward(tape, store, e, &inputs.masks);
        let rows = tape.gather_rows(fusion.fused, &inputs.edu_special_rows);
        let positions: Vec<usize> = (0..inputs.n_edus).collect();
        tape.scatter_rows(h_s, rows, &positions)
    }

    /// Runs the shared inter-sentence transformer without positional terms.
    pub fn inter_transform(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.inter.iter().fold(x, |h, layer| layer.forward(tape, store, h, None))
    }

    /// `H~_s`, the mean of the three transformed views.
    pub fn inter_attention_reason(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_s: Var,
        h_p: Var,
        h_i: Var,
    ) -> Result<Var> {
        let shape = tape.shape(h_s);
        for v in [h_p, h_i] {
            if tape.shape(v) != shape {
                return Err(Error::Shape(format!(
                    "inter-sentence inputs {:?} and {:?} differ",
                    shape,
                    tape.shape(v)
                )));
            }
        }
        let a = self.inter_transform(tape, store, h_s);
        let b = self.inter_transform(tape, store, h_p);
        let c = self.inter_transform(tape, store, h_i);
        let ab = tape.add(a, b);
        let abc = tape.add(ab, c);
        Ok(tape.scale(abc, 1.0 / 3.0))
    }

    /// Entailment logits, one row of three per EDU.
    pub fn classify_states(&self, tape: &mut Tape, store: &ParamStore, h: Var, n_edus: usize) -> Var {
        let rows: Vec<usize> = (0..n_edus).collect();
        let edus = tape.gather_rows(h, &rows);
        self.classifier.forward(tape, store, edus)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, enc: &EncoderVars, inputs: &EntailInputs) -> Result<Var> {
        let h_s = enc.sentence_states;
        let summary = match self.variant {
            Variant::Full => {
                let h_p = self.explicit_graph_reason(tape, store, h_s, inputs);
                let h_i = self.implicit_graph_reason(tape, store, h_s, enc.edu_token_states, inputs);
                self.inter_attention_reason(tape, store, h_s, h_p, h_i)?
            }
            Variant::InterAttentionOnly => self.inter_transform(tape, store, h_s),
        };
        Ok(self.classify_states(tape, store, summary, inputs.n_edus))
    }
}

/// Token ranges of EDUs inside `E` given their lengths.
pub fn spans_from_lengths(lengths: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}
