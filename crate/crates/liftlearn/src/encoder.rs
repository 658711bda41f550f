//! Transition-graph construction and the relational graph encoder that turns
//! a transition into per-object key embeddings.
//!
//! Each transition ⟨s, s′⟩ becomes a typed directed graph over the objects:
//! one edge per true atom of s, one per atom added (s′∖s) and deleted (s∖s′),
//! a self-loop per typed object, and a self-loop per known action argument.
//! Every edge also gets a reverse-typed counterpart. Node features start as
//! small Gaussian noise in the first half of the dimensions (redrawn on every
//! forward pass, so object identity cannot be memorized) and are refined by
//! L rounds of per-edge-type message passing with mean aggregation.

use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Transition;
use crate::domain::LiftedDomain;
use crate::tape::{Arr, Tape, Var};

/// Stable numbering of forward edge types; the reverse of forward type `f`
/// is `num_forward + f`.
#[derive(Debug, Clone)]
pub struct EdgeTypeTable {
    num_predicates: usize,
    num_types: usize,
    /// Per action: offset of its first argument-marker type, and its arity.
    marker_offsets: Vec<(usize, usize)>,
    num_forward: usize,
}

impl EdgeTypeTable {
    pub fn new(domain: &LiftedDomain) -> Self {
        let r = domain.predicates.len();
        let t = domain.types.len();
        let mut marker_offsets = Vec::with_capacity(domain.schemas.len());
        let mut next = 3 * r + t;
        for s in &domain.schemas {
            marker_offsets.push((next, s.arity));
            next += s.arity;
        }
        EdgeTypeTable { num_predicates: r, num_types: t, marker_offsets, num_forward: next }
    }

    pub fn total(&self) -> usize {
        2 * self.num_forward
    }

    pub fn state(&self, pred: usize) -> usize {
        pred
    }

    pub fn added(&self, pred: usize) -> usize {
        self.num_predicates + pred
    }

    pub fn deleted(&self, pred: usize) -> usize {
        2 * self.num_predicates + pred
    }

    pub fn object_type(&self, ty: usize) -> usize {
        debug_assert!(ty < self.num_types);
        3 * self.num_predicates + ty
    }

    /// Marker for slot `k` of action `a`; `None` if `k` is out of range.
    pub fn arg_marker(&self, action: usize, k: usize) -> Option<usize> {
        let (off, arity) = self.marker_offsets[action];
        (k < arity).then_some(off + k)
    }

    pub fn reverse(&self, forward: usize) -> usize {
        self.num_forward + forward
    }
}

/// Typed edge list over `num_nodes` objects, reverse-closed by construction.
#[derive(Debug, Clone)]
pub struct TransitionGraph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize, usize)>,
}

impl TransitionGraph {
    fn push(&mut self, table: &EdgeTypeTable, ty: usize, src: usize, dst: usize) {
        self.edges.push((ty, src, dst));
        self.edges.push((table.reverse(ty), dst, src));
    }
}

/// Build the typed graph for one transition. `observed_params` gives, per
/// schema, the parameter positions whose bindings are observed; the marker
/// self-loop for position k uses slot k of that action.
pub fn build_transition_graph(
    transition: &Transition,
    domain: &LiftedDomain,
    object_types: &[Option<usize>],
    observed_params: &[Vec<usize>],
    table: &EdgeTypeTable,
) -> TransitionGraph {
    let mut g = TransitionGraph { num_nodes: object_types.len(), edges: Vec::new() };
    for &(r, i, j) in &transition.state.atoms {
        g.push(table, table.state(r), i, j);
    }
    for &(r, i, j) in transition.next_state.atoms.difference(&transition.state.atoms) {
        g.push(table, table.added(r), i, j);
    }
    for &(r, i, j) in transition.state.atoms.difference(&transition.next_state.atoms) {
        g.push(table, table.deleted(r), i, j);
    }
    for (o, ty) in object_types.iter().enumerate() {
        if let Some(t) = ty {
            g.push(table, table.object_type(*t), o, o);
        }
    }
    let _ = &domain.schemas[transition.schema]; // schema index must be valid
    for (&k, &obj) in observed_params[transition.schema].iter().zip(&transition.observed_args) {
        let ty = table
            .arg_marker(transition.schema, k)
            .expect("observed parameter position exceeds schema arity");
        g.push(table, ty, obj, obj);
    }
    g
}

/// Edges grouped by type with precomputed mean-aggregation scaling, ready to
/// replay on a tape many times.
#[derive(Debug, Clone)]
pub struct GroupedGraph {
    pub num_nodes: usize,
    pub groups: Vec<EdgeGroup>,
}

#[derive(Debug, Clone)]
pub struct EdgeGroup {
    pub edge_type: usize,
    pub sources: Rc<Vec<usize>>,
    pub targets: Rc<Vec<usize>>,
    /// 1/in-degree (within this type) per node, 0 for untouched nodes.
    pub inv_degree: Rc<Vec<f64>>,
}

impl GroupedGraph {
    pub fn new(graph: &TransitionGraph, table: &EdgeTypeTable) -> Self {
        let mut by_type: Vec<(Vec<usize>, Vec<usize>)> = vec![Default::default(); table.total()];
        for &(ty, src, dst) in &graph.edges {
            by_type[ty].0.push(src);
            by_type[ty].1.push(dst);
        }
        let groups = by_type
            .into_iter()
            .enumerate()
            .filter(|(_, (srcs, _))| !srcs.is_empty())
            .map(|(ty, (sources, targets))| {
                let mut deg = vec![0.0; graph.num_nodes];
                for &t in &targets {
                    deg[t] += 1.0;
                }
                let inv_degree = deg.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
                EdgeGroup {
                    edge_type: ty,
                    sources: Rc::new(sources),
                    targets: Rc::new(targets),
                    inv_degree: Rc::new(inv_degree),
                }
            })
            .collect();
        GroupedGraph { num_nodes: graph.num_nodes, groups }
    }
}

/// Learnable encoder weights: per layer a weight matrix per edge type, a
/// self-transform, and a bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub rel: Vec<Arr>,
    pub self_w: Arr,
    pub bias: Arr,
}

pub struct EncoderVars {
    pub layers: Vec<(Vec<Var>, Var, Var)>,
}

impl EncoderParams {
    pub fn init(num_edge_types: usize, num_layers: usize, d: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        let mat = |rng: &mut dyn rand::RngCore| {
            Array2::from_shape_fn((d, d), |_| normal.sample(rng)).into_dyn()
        };
        let layers = (0..num_layers)
            .map(|_| EncoderLayer {
                rel: (0..num_edge_types).map(|_| mat(rng)).collect(),
                self_w: mat(rng),
                bias: Array1::zeros(d).into_dyn(),
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn push(&self, tape: &mut Tape) -> EncoderVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    l.rel.iter().map(|w| tape.leaf(w.clone())).collect(),
                    tape.leaf(l.self_w.clone()),
                    tape.leaf(l.bias.clone()),
                )
            })
            .collect();
        EncoderVars { layers }
    }
}

/// Draw fresh initial node features: first d/2 columns 0.1·N(0,1), rest zero.
pub fn init_node_features(num_nodes: usize, d: usize, rng: &mut impl Rng) -> Arr {
    assert!(d.is_multiple_of(2), "feature width must be even");
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((num_nodes, d), |(_, j)| {
        if j < d / 2 {
            0.1 * normal.sample(rng)
        } else {
            0.0
        }
    })
    .into_dyn()
}

/// Run the relational message-passing stack on the tape and return the key
/// matrix (O×d). Each round: per-edge-type mean of transformed neighbor
/// features, plus a self-transform and bias, through a ReLU.
pub fn rgcn_forward(tape: &mut Tape, graph: &GroupedGraph, vars: &EncoderVars, features: Var) -> Var {
    let mut h = features;
    for (rel, self_w, bias) in &vars.layers {
        let mut acc = tape.matmul(h, *self_w);
        for group in &graph.groups {
            let gathered = tape.gather_rows(h, Rc::clone(&group.sources));
            let msgs = tape.matmul(gathered, rel[group.edge_type]);
            let summed = tape.scatter_add_rows(msgs, Rc::clone(&group.targets), graph.num_nodes);
            let meaned = tape.scale_rows_const(summed, Rc::clone(&group.inv_degree));
            acc = tape.add(acc, meaned);
        }
        let biased = tape.add_row_vec(acc, *bias);
        h = tape.relu(biased);
    }
    h
}
