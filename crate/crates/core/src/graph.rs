//! Explicit Levi discourse graph and the implicit-graph decoupling masks.

use std::fmt::Write as _;
use std::ops::Range;

use duplex_autograd::Matrix;

use crate::error::{Error, Result};
use crate::preprocess::{DiscourseRelation, RelationLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    DefaultIn,
    DefaultOut,
    ReverseIn,
    ReverseOut,
    SelfLoop,
    Global,
}

impl EdgeType {
    pub const ALL: [EdgeType; 6] = [
        EdgeType::DefaultIn,
        EdgeType::DefaultOut,
        EdgeType::ReverseIn,
        EdgeType::ReverseOut,
        EdgeType::SelfLoop,
        EdgeType::Global,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::DefaultIn => "default-in",
            EdgeType::DefaultOut => "default-out",
            EdgeType::ReverseIn => "reverse-in",
            EdgeType::ReverseOut => "reverse-out",
            EdgeType::SelfLoop => "self",
            EdgeType::Global => "global",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Vertex {
    /// 0-based EDU index; initialized from sentence row `edu`.
    Edu(usize),
    /// Relation `relation` of the input list, initialized from the relation
    /// embedding row of `label`.
    Relation { relation: usize, label: RelationLabel },
    /// Initialized from the sentence row of the scenario.
    Scenario { row: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeType,
}

/// Vertices are ordered EDUs, then relations, then the scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeviGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

impl LeviGraph {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn scenario_vertex(&self) -> usize {
        self.vertices.len() - 1
    }

    /// Sources of edges of type `kind` entering `p`, i.e. `N_r(p)`.
    pub fn neighbors(&self, p: usize, kind: EdgeType) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.dst == p && e.kind == kind)
            .map(|e| e.src)
            .collect()
    }

    /// `c_{p,r}`: number of incoming neighbors of `p` under `kind`.
    pub fn neighbor_count(&self, p: usize, kind: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.dst == p && e.kind == kind).count()
    }

    /// Row-normalized adjacency for one edge type: entry `[p, q]` is
    /// `1 / c_{p,r}` for every edge `q -> p` of that type.
    pub fn normalized_adjacency(&self, kind: EdgeType) -> Matrix {
        let n = self.n_vertices();
        let mut a = Matrix::zeros(n, n);
        for e in self.edges.iter().filter(|e| e.kind == kind) {
            a.set(e.dst, e.src, a.get(e.dst, e.src) + 1.0);
        }
        for p in 0..n {
            let c: f64 = a.row(p).iter().sum();
            if c > 0.0 {
                a.row_mut(p).iter_mut().for_each(|x| *x /= c);
            }
        }
        a
    }

    /// Graphviz DOT rendering for inspection.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph levi {\n");
        for (i, v) in self.vertices.iter().enumerate() {
            let label = match v {
                Vertex::Edu(k) => format!("edu {}", k + 1),
                Vertex::Relation { label, .. } => label.as_str().to_string(),
                Vertex::Scenario { .. } => "scenario".to_string(),
            };
            let _ = writeln!(s, "  v{i} [label=\"{label}\"];");
        }
        for e in &self.edges {
            let _ = writeln!(s, "  v{} -> v{} [label=\"{}\"];", e.src, e.dst, e.kind.as_str());
        }
        s.push_str("}\n");
        s
    }
}

/// Builds the Levi graph over `n_edus` EDUs, their relations and the scenario.
///
/// For a relation vertex `r` between head `h` and dependent `d`: `h -> r` is
/// default-in, `r -> d` default-out, `d -> r` reverse-in and `r -> h`
/// reverse-out. Every vertex has a self edge and the scenario exchanges a
/// global edge in each direction with every other vertex.
pub fn build_levi_graph(
    n_edus: usize,
    relations: &[DiscourseRelation],
    scenario_row: usize,
) -> Result<LeviGraph> {
    for (i, r) in relations.iter().enumerate() {
        for edu in [r.head, r.dependent] {
            if edu == 0 || edu > n_edus {
                return Err(Error::DanglingRelation { relation: i, edu, n_edus });
            }
        }
    }
    let mut vertices: Vec<Vertex> = (0..n_edus).map(Vertex::Edu).collect();
    vertices.extend(
        relations
            .iter()
            .enumerate()
            .map(|(i, r)| Vertex::Relation { relation: i, label: r.label }),
    );
    vertices.push(Vertex::Scenario { row: scenario_row });
    let scenario = vertices.len() - 1;

    let mut edges = Vec::new();
    for (i, r) in relations.iter().enumerate() {
        let rv = n_edus + i;
        let (h, d) = (r.head - 1, r.dependent - 1);
        edges.push(Edge { src: h, dst: rv, kind: EdgeType::DefaultIn });
        edges.push(Edge { src: rv, dst: d, kind: EdgeType::DefaultOut });
        edges.push(Edge { src: d, dst: rv, kind: EdgeType::ReverseIn });
        edges.push(Edge { src: rv, dst: h, kind: EdgeType::ReverseOut });
    }
    for v in 0..vertices.len() {
        edges.push(Edge { src: v, dst: v, kind: EdgeType::SelfLoop });
    }
    for v in 0..scenario {
        edges.push(Edge { src: scenario, dst: v, kind: EdgeType::Global });
        edges.push(Edge { src: v, dst: scenario, kind: EdgeType::Global });
    }
    Ok(LeviGraph { vertices, edges })
}

/// Additive attention masks over the concatenated EDU tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingMasks {
    /// 0 where both tokens belong to the same EDU, `-inf` otherwise.
    pub local: Matrix,
    /// Exact complement of `local`.
    pub contextual: Matrix,
}

/// Builds the masks from ordered, disjoint EDU token spans.
pub fn build_decoupling_masks(spans: &[Range<usize>]) -> Result<DecouplingMasks> {
    for i in 1..spans.len() {
        if spans[i].start < spans[i - 1].end {
            return Err(Error::OverlappingSpans(i));
        }
    }
    if let Some(i) = spans.iter().position(|s| s.start > s.end) {
        return Err(Error::OverlappingSpans(i));
    }
    let owner: Vec<usize> = spans
        .iter()
        .enumerate()
        .flat_map(|(k, s)| std::iter::repeat_n(k, s.len()))
        .collect();
    let n = owner.len();
    let local = Matrix::from_fn(n, n, |i, j| if owner[i] == owner[j] { 0.0 } else { f64::NEG_INFINITY });
    let contextual = Matrix::from_fn(n, n, |i, j| if owner[i] != owner[j] { 0.0 } else { f64::NEG_INFINITY });
    Ok(DecouplingMasks { local, contextual })
}
