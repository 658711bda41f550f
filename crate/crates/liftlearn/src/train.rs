//! Loss computation, PCGrad combination, AdamW, and the training loop.
//!
//! Each step builds one tape holding every learnable tensor, runs the batch
//! forward, and sweeps the tape twice: once from the main (successor
//! prediction) loss and once from the auxiliary (minimal effects / maximal
//! preconditions) loss. The two gradient vectors are combined with PCGrad so
//! the auxiliary objective can never oppose the main one, then applied with
//! decoupled weight decay.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjacency::state_to_adjacency;
use crate::assign::{
    correspondence, hard_selection, make_selection, sinkhorn_rectangular, QueryBank, SINKHORN_EPS,
    SINKHORN_T_MAX,
};
use crate::data::{TraceSet, Transition, Variant};
use crate::domain::LiftedDomain;
use crate::encoder::{
    build_transition_graph, init_node_features, rgcn_forward, EdgeTypeTable, EncoderParams,
    EncoderVars, GroupedGraph,
};
use crate::mlp::{mlp_effect_logits, MlpParams, MlpVars};
use crate::pddl::object_type_indices;
use crate::schema_model::{
    case_masks, case_probabilities, case_slice, ground_project, precondition_probability,
    predict_successor, tau_schedule, CaseMasks, SchemaParams, CASE_ADD, CASE_DEL,
};
use crate::tape::{Arr, Gradients, Tape, Var};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub m: usize,
    pub encoder_layers: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub alpha: f64,
    pub tau_floor: f64,
    pub seed: u64,
    pub variant: Variant,
    pub mlp_effects: bool,
    pub sinkhorn_eps: f64,
    pub sinkhorn_t_max: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant, alpha: f64, seed: u64) -> Self {
        TrainConfig {
            d: 32,
            m: 5,
            encoder_layers: 3,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch: 200,
            steps: 10000,
            alpha,
            tau_floor: 0.0,
            seed,
            variant,
            mlp_effects: false,
            sinkhorn_eps: SINKHORN_EPS,
            sinkhorn_t_max: SINKHORN_T_MAX,
        }
    }

    /// Training adjustments for the noisy-trace setting.
    pub fn with_noise_adjustments(mut self) -> Self {
        self.batch = 50;
        self.tau_floor = 0.1;
        self
    }
}

/// Everything learnable plus optimizer moments; the checkpoint payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub config: TrainConfig,
    pub domain: LiftedDomain,
    /// M_a per action: config.m, or the true arity in the full variant.
    pub slots: Vec<usize>,
    pub encoder: Option<EncoderParams>,
    pub queries: Option<QueryBank>,
    pub schema: SchemaParams,
    pub mlp: Option<MlpParams>,
    pub adam_m: Vec<Arr>,
    pub adam_v: Vec<Arr>,
    pub step: usize,
}

pub struct ModelVars {
    pub list: Vec<Var>,
    pub encoder: Option<EncoderVars>,
    pub queries: Vec<Var>,
    pub slot_logits: Vec<Var>,
    pub eff: Vec<Var>,
    pub pre: Vec<Var>,
    pub mlp: Option<MlpVars>,
}

impl ModelState {
    pub fn init(domain: &LiftedDomain, config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e3779b97f4a7c15));
        let slots: Vec<usize> = match config.variant {
            Variant::Full => domain.schemas.iter().map(|s| s.arity).collect(),
            _ => vec![config.m; domain.schemas.len()],
        };
        let table = EdgeTypeTable::new(domain);
        let uses_encoder = config.variant != Variant::Full;
        let encoder = uses_encoder.then(|| {
            EncoderParams::init(table.total(), config.encoder_layers, config.d, &mut rng)
        });
        let queries = uses_encoder.then(|| QueryBank::init(&slots, config.d, &mut rng));
        let schema = SchemaParams::init(&slots, domain.predicates.len(), &mut rng);
        let mlp = config
            .mlp_effects
            .then(|| MlpParams::init(domain.schemas.len(), domain.predicates.len(), config.m, &mut rng));
        let mut state = ModelState {
            config,
            domain: domain.clone(),
            slots,
            encoder,
            queries,
            schema,
            mlp,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            step: 0,
        };
        state.adam_m = state.param_refs().iter().map(|p| Arr::zeros(p.shape())).collect();
        state.adam_v = state.adam_m.clone();
        state
    }

    /// All learnable tensors in a fixed order (matched by `push`).
    pub fn param_refs(&self) -> Vec<&Arr> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            for l in &e.layers {
                out.extend(l.rel.iter());
                out.push(&l.self_w);
                out.push(&l.bias);
            }
        }
        if let Some(q) = &self.queries {
            out.extend(q.queries.iter());
            out.extend(q.slot_logits.iter());
        }
        out.extend(self.schema.eff.iter());
        out.extend(self.schema.pre.iter());
        if let Some(m) = &self.mlp {
            out.push(&m.w1);
            out.push(&m.b1);
            out.push(&m.w2);
            out.push(&m.b2);
            out.extend(m.w_out.iter());
            out.extend(m.b_out.iter());
        }
        out
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Arr> {
        let mut out: Vec<&mut Arr> = Vec::new();
        if let Some(e) = &mut self.encoder {
            for l in &mut e.layers {
                out.extend(l.rel.iter_mut());
                out.push(&mut l.self_w);
                out.push(&mut l.bias);
            }
        }
        if let Some(q) = &mut self.queries {
            out.extend(q.queries.iter_mut());
            out.extend(q.slot_logits.iter_mut());
        }
        out.extend(self.schema.eff.iter_mut());
        out.extend(self.schema.pre.iter_mut());
        if let Some(m) = &mut self.mlp {
            out.push(&mut m.w1);
            out.push(&mut m.b1);
            out.push(&mut m.w2);
            out.push(&mut m.b2);
            out.extend(m.w_out.iter_mut());
            out.extend(m.b_out.iter_mut());
        }
        out
    }

    /// Push every learnable onto the tape, in `param_refs` order.
    pub fn push(&self, tape: &mut Tape) -> ModelVars {
        let mut list = Vec::new();
        let encoder = self.encoder.as_ref().map(|e| {
            let vars = e.push(tape);
            for (rel, sw, b) in &vars.layers {
                list.extend(rel.iter().copied());
                list.push(*sw);
                list.push(*b);
            }
            vars
        });
        let (queries, slot_logits) = match &self.queries {
            Some(q) => {
                let qs: Vec<Var> = q.queries.iter().map(|x| tape.leaf(x.clone())).collect();
                let ws: Vec<Var> = q.slot_logits.iter().map(|x| tape.leaf(x.clone())).collect();
                list.extend(qs.iter().copied());
                list.extend(ws.iter().copied());
                (qs, ws)
            }
            None => (Vec::new(), Vec::new()),
        };
        let eff: Vec<Var> = self.schema.eff.iter().map(|x| tape.leaf(x.clone())).collect();
        let pre: Vec<Var> = self.schema.pre.iter().map(|x| tape.leaf(x.clone())).collect();
        list.extend(eff.iter().copied());
        list.extend(pre.iter().copied());
        let mlp = self.mlp.as_ref().map(|m| {
            let vars = m.push(tape);
            list.push(vars.w1);
            list.push(vars.b1);
            list.push(vars.w2);
            list.push(vars.b2);
            list.extend(vars.w_out.iter().copied());
            list.extend(vars.b_out.iter().copied());
            vars
        });
        ModelVars { list, encoder, queries, slot_logits, eff, pre, mlp }
    }

    /// Human-readable labels matching `param_refs` order.
    pub fn param_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            for (li, l) in e.layers.iter().enumerate() {
                for t in 0..l.rel.len() {
                    out.push(format!("encoder.l{li}.rel{t}"));
                }
                out.push(format!("encoder.l{li}.self"));
                out.push(format!("encoder.l{li}.bias"));
            }
        }
        if let Some(q) = &self.queries {
            for a in 0..q.queries.len() {
                out.push(format!("queries.q{a}"));
            }
            for a in 0..q.slot_logits.len() {
                out.push(format!("queries.w{a}"));
            }
        }
        for a in 0..self.schema.eff.len() {
            out.push(format!("schema.eff{a}"));
        }
        for a in 0..self.schema.pre.len() {
            out.push(format!("schema.pre{a}"));
        }
        if let Some(m) = &self.mlp {
            out.push("mlp.w1".into());
            out.push("mlp.b1".into());
            out.push("mlp.w2".into());
            out.push("mlp.b2".into());
            for a in 0..m.w_out.len() {
                out.push(format!("mlp.w_out{a}"));
            }
            for a in 0..m.b_out.len() {
                out.push(format!("mlp.b_out{a}"));
            }
        }
        out
    }

    /// Write the checkpoint as JSON. f64 values survive the round trip
    /// bit-exactly, so save/load/save is byte-identical.
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self).map_err(std::io::Error::other)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(file).map_err(std::io::Error::other)
    }
}

/// N = R·O² + 2·Σ_r M^{|p_r|}.
pub fn scaling_constant(arities: &[usize], o: usize, m: usize) -> f64 {
    let r = arities.len();
    let lifted: usize = arities.iter().map(|&a| m.pow(a as u32)).sum();
    (r * o * o + 2 * lifted) as f64
}

/// Standard nonnegative BCE with sum aggregation, target `a_next` (constant).
fn loss_bce_adjacency(tape: &mut Tape, pred: Var, a_next: &Arr) -> Var {
    let clamped = tape.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let y = tape.constant(a_next.clone());
    let lp = tape.ln_clamp(clamped, f64::MIN_POSITIVE);
    let pos = tape.mul(y, lp);
    let om = tape.one_minus(clamped);
    let lom = tape.ln_clamp(om, f64::MIN_POSITIVE);
    let oy = tape.one_minus(y);
    let neg = tape.mul(oy, lom);
    let both = tape.add(pos, neg);
    let s = tape.sum(both);
    tape.neg(s)
}

/// −Σ mask ⊙ ln(clamp(x)): BCE of `x` against an all-ones target.
fn bce_target_one(tape: &mut Tape, x: Var, pair_mask: &Arr) -> Var {
    let clamped = tape.clamp(x, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let lx = tape.ln_clamp(clamped, f64::MIN_POSITIVE);
    let mask = tape.constant(pair_mask.clone());
    let masked = tape.mul(lx, mask);
    let s = tape.sum(masked);
    tape.neg(s)
}

/// PCGrad: project the auxiliary gradient orthogonal to the main one if they
/// conflict, cap its norm by the main norm, and scale by α.
pub fn pcgrad_combine(grad_main: &[Arr], grad_aux: &[Arr], alpha: f64) -> Vec<Arr> {
    let dot: f64 = grad_main
        .iter()
        .zip(grad_aux)
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let norm_sq = |g: &[Arr]| g.iter().map(|a| a.iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
    let main_sq = norm_sq(grad_main);
    let mut aux: Vec<Arr> = grad_aux.to_vec();
    if dot < 0.0 && main_sq > 0.0 {
        let coef = dot / main_sq;
        for (a, m) in aux.iter_mut().zip(grad_main) {
            *a = &*a - &(m * coef);
        }
    }
    let aux_norm = norm_sq(&aux).sqrt();
    let cap = if aux_norm == 0.0 { 0.0 } else { (main_sq.sqrt() / aux_norm).min(1.0) };
    grad_main
        .iter()
        .zip(&aux)
        .map(|(m, a)| m + &(a * (alpha * cap)))
        .collect()
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (action {action}, transition {transition}): main={main}, aux={aux}")]
    NonFinite { step: usize, action: String, transition: usize, main: f64, aux: f64 },
    #[error("traces do not cover action {0}")]
    MissingAction(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_main: f64,
    pub l_aux: f64,
    pub tau: f64,
    pub grad_main_norm: f64,
    pub grad_aux_norm: f64,
    pub val_l_main: Option<f64>,
}

/// One transition, preprocessed for replay on every step it is drawn.
struct Prepared {
    id: usize,
    schema: usize,
    adjacency: Rc<Arr>,
    target: Arr,
    graph: Option<GroupedGraph>,
    forced: Vec<(usize, usize)>,
    binding: Vec<usize>,
}

pub struct Trainer {
    pub model: ModelState,
    masks: Vec<CaseMasks>,
    prepared: Vec<Prepared>,
    val_prepared: Vec<Prepared>,
    by_action: Vec<Vec<usize>>,
    num_objects: usize,
    n_scale: f64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(domain: &LiftedDomain, traces: &TraceSet, config: TrainConfig) -> Result<Self, TrainError> {
        let model = ModelState::init(domain, config);
        Trainer::resume(model, domain, traces)
    }

    /// Build a trainer around an existing model (fresh or from a checkpoint).
    pub fn resume(model: ModelState, domain: &LiftedDomain, traces: &TraceSet) -> Result<Self, TrainError> {
        let config = model.config.clone();
        let num_objects = traces.objects.len();
        let table = EdgeTypeTable::new(domain);
        let object_types: Vec<Option<usize>> = {
            // trace objects carry type names; map them through the domain
            let instance = crate::domain::Instance {
                objects: traces.objects.clone(),
                init: Default::default(),
                goal: Default::default(),
            };
            object_type_indices(&instance, domain)
        };
        let r = domain.predicates.len();
        let uses_encoder = config.variant != Variant::Full;

        let prepare = |list: &[Transition]| -> Vec<Prepared> {
            list.iter()
                .enumerate()
                .map(|(id, t)| {
                    let graph = uses_encoder.then(|| {
                        let g = build_transition_graph(
                            t,
                            domain,
                            &object_types,
                            &traces.observed_params,
                            &table,
                        );
                        GroupedGraph::new(&g, &table)
                    });
                    Prepared {
                        id,
                        schema: t.schema,
                        graph,
                        adjacency: Rc::new(
                            state_to_adjacency(&t.state, r, num_objects).into_dyn(),
                        ),
                        target: state_to_adjacency(&t.next_state, r, num_objects).into_dyn(),
                        forced: traces.observed_params[t.schema]
                            .iter()
                            .copied()
                            .zip(t.observed_args.iter().copied())
                            .collect(),
                        binding: t.full_binding.clone(),
                    }
                })
                .collect()
        };
        let prepared = prepare(&traces.train);
        let val_prepared = prepare(&traces.val);

        let mut by_action = vec![Vec::new(); domain.schemas.len()];
        for (i, p) in prepared.iter().enumerate() {
            by_action[p.schema].push(i);
        }
        for (a, ids) in by_action.iter().enumerate() {
            if ids.is_empty() {
                return Err(TrainError::MissingAction(domain.schemas[a].name.clone()));
            }
        }

        let arities: Vec<usize> = domain.predicates.iter().map(|p| p.arity).collect();
        let n_scale = scaling_constant(&arities, num_objects, config.m);
        let masks = model
            .slots
            .iter()
            .map(|&m| case_masks(domain, m))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            masks,
            prepared,
            val_prepared,
            by_action,
            num_objects,
            n_scale,
            rng,
        })
    }

    /// Equal per-action counts (⌊B/A⌋ or ⌈B/A⌉), with replacement only when a
    /// stratum is smaller than its quota.
    fn stratified_batch(&mut self) -> Vec<usize> {
        let a = self.by_action.len();
        let base = self.model.config.batch / a;
        let extra = self.model.config.batch % a;
        let mut order: Vec<usize> = (0..a).collect();
        order.shuffle(&mut self.rng);
        let mut batch = Vec::with_capacity(self.model.config.batch);
        for (rank, &action) in order.iter().enumerate() {
            let quota = base + usize::from(rank < extra);
            let stratum = &self.by_action[action];
            if stratum.len() >= quota {
                batch.extend(stratum.choose_multiple(&mut self.rng, quota));
            } else {
                for _ in 0..quota {
                    batch.push(stratum[self.rng.gen_range(0..stratum.len())]);
                }
            }
        }
        batch
    }

    /// Forward one transition to its clamped-BCE contribution on the tape.
    /// Also returns the (per-transition) effect-probability tensor in the MLP
    /// ablation, whose no-effect slice feeds the auxiliary loss.
    fn forward_transition(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        item_idx: usize,
        tau: f64,
        val: bool,
    ) -> (Var, Option<Var>) {
        let cfg = self.model.config.clone();
        // fresh node features per forward pass, drawn before the item borrow
        let feats = (cfg.variant != Variant::Full)
            .then(|| init_node_features(self.num_objects, cfg.d, &mut self.rng));
        let item = if val { &self.val_prepared[item_idx] } else { &self.prepared[item_idx] };
        let a = item.schema;
        let m_a = self.model.slots[a];

        let selection = if cfg.variant == Variant::Full {
            tape.constant(hard_selection(&item.binding, self.num_objects))
        } else {
            let graph = item.graph.as_ref().expect("graph prepared for encoder variants");
            let fv = tape.constant(feats.expect("features drawn"));
            let keys = rgcn_forward(tape, graph, vars.encoder.as_ref().unwrap(), fv);
            let c = correspondence(tape, vars.queries[a], keys, cfg.d);
            let sk = sinkhorn_rectangular(tape, c, cfg.sinkhorn_eps, cfg.sinkhorn_t_max);
            make_selection(tape, sk.assignment, vars.slot_logits[a], &item.forced, self.num_objects)
        };

        let masks = &self.masks[a];
        let (add, del, mlp_no_eff) = if let Some(mlp_vars) = &vars.mlp {
            let lifted = tape.lift_state(selection, Rc::clone(&item.adjacency));
            let logits = mlp_effect_logits(
                tape,
                mlp_vars,
                lifted,
                a,
                self.model.domain.predicates.len(),
                m_a,
            );
            let probs = case_probabilities(tape, logits, masks);
            (
                case_slice(tape, probs, CASE_ADD),
                case_slice(tape, probs, CASE_DEL),
                Some(case_slice(tape, probs, 0)),
            )
        } else {
            let probs = case_probabilities(tape, vars.eff[a], masks);
            (
                case_slice(tape, probs, CASE_ADD),
                case_slice(tape, probs, CASE_DEL),
                None,
            )
        };
        let pre_probs = case_probabilities(tape, vars.pre[a], masks);
        let pre_pos = case_slice(tape, pre_probs, CASE_ADD);
        let pre_neg = case_slice(tape, pre_probs, CASE_DEL);

        let g_add = ground_project(tape, add, selection);
        let g_del = ground_project(tape, del, selection);
        let g_pos = ground_project(tape, pre_pos, selection);
        let g_neg = ground_project(tape, pre_neg, selection);

        let p_pre = precondition_probability(tape, g_pos, g_neg, &item.adjacency, tau);
        let pred = predict_successor(tape, &item.adjacency, p_pre, g_add, g_del);
        let l = loss_bce_adjacency(tape, pred, &item.target);
        (l, mlp_no_eff)
    }

    /// The auxiliary loss terms L_eff and L_pre on the tape. In the MLP
    /// ablation the per-transition no-effect slices are averaged instead of
    /// reading a static tensor.
    fn loss_auxiliary(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        mlp_no_eff: &[(usize, Var)],
    ) -> (Var, Var) {
        let a_count = self.model.domain.schemas.len();
        let mut l_eff_total: Option<Var> = None;
        if vars.mlp.is_some() {
            let scale = 1.0 / mlp_no_eff.len().max(1) as f64;
            for &(action, no_eff) in mlp_no_eff {
                let term = bce_target_one(tape, no_eff, &self.masks[action].pair);
                let scaled = tape.scale(term, scale);
                l_eff_total = Some(match l_eff_total {
                    Some(acc) => tape.add(acc, scaled),
                    None => scaled,
                });
            }
        } else {
            for a in 0..a_count {
                let probs = case_probabilities(tape, vars.eff[a], &self.masks[a]);
                let no_eff = case_slice(tape, probs, 0);
                let term = bce_target_one(tape, no_eff, &self.masks[a].pair);
                l_eff_total = Some(match l_eff_total {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
        }

        let mut l_pre_total: Option<Var> = None;
        for a in 0..a_count {
            let probs = case_probabilities(tape, vars.pre[a], &self.masks[a]);
            let no_pre = case_slice(tape, probs, 0);
            let present = tape.one_minus(no_pre);
            // Weighted BCE: the per-entry −log(1 − P_no_pre) is multiplied by
            // σ(w_i)σ(w_j). Precondition maximization only counts for active
            // slots, and a slot whose preconditions stay unlearned is pushed
            // toward deactivation; this is the force that recovers arities.
            let clamped = tape.clamp(present, BCE_CLAMP, 1.0 - BCE_CLAMP);
            let lx = tape.ln_clamp(clamped, f64::MIN_POSITIVE);
            let nll = tape.neg(lx);
            let weighted = if self.model.config.variant == Variant::Full {
                nll
            } else {
                let sw = tape.sigmoid(vars.slot_logits[a]);
                let outer = tape.outer(sw, sw);
                tape.mul_bcast_last2(outer, nll)
            };
            let mask = tape.constant(self.masks[a].pair.clone());
            let masked = tape.mul(weighted, mask);
            let term = tape.sum(masked);
            l_pre_total = Some(match l_pre_total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        (l_eff_total.expect("≥1 action"), l_pre_total.expect("≥1 action"))
    }

    /// Run one optimization step; returns the metrics row.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let step = self.model.step;
        let tau = tau_schedule(step, self.model.config.tau_floor);
        let batch = self.stratified_batch();
        let bsz = batch.len() as f64;

        let mut tape = Tape::new();
        let vars = self.model.push(&mut tape);

        let mut adj_sum: Option<Var> = None;
        let mut mlp_no_eff = Vec::new();
        let mut batch_first = (0usize, 0usize); // (transition id, action) for diagnostics
        for (bi, &idx) in batch.iter().enumerate() {
            if bi == 0 {
                batch_first = (self.prepared[idx].id, self.prepared[idx].schema);
            }
            let (l, no_eff) = self.forward_transition(&mut tape, &vars, idx, tau, false);
            if let Some(ne) = no_eff {
                mlp_no_eff.push((self.prepared[idx].schema, ne));
            }
            adj_sum = Some(match adj_sum {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        let l_main = tape.scale(adj_sum.expect("nonempty batch"), 1.0 / (bsz * self.n_scale));
        let (l_eff, l_pre) = self.loss_auxiliary(&mut tape, &vars, &mlp_no_eff);
        let aux_sum = tape.add(l_eff, l_pre);
        let l_aux = tape.scale(aux_sum, 1.0 / self.n_scale);

        let main_val = *tape.value(l_main).first().unwrap();
        let aux_val = *tape.value(l_aux).first().unwrap();
        if !main_val.is_finite() || !aux_val.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                action: self.model.domain.schemas[batch_first.1].name.clone(),
                transition: batch_first.0,
                main: main_val,
                aux: aux_val,
            });
        }

        let g_main_sweep = tape.backward(l_main);
        let g_aux_sweep = tape.backward(l_aux);
        let extract = |sweep: &Gradients| -> Vec<Arr> {
            vars.list
                .iter()
                .map(|&v| sweep.grad(&tape, v))
                .collect()
        };
        let g_main = extract(&g_main_sweep);
        let g_aux = extract(&g_aux_sweep);
        let norm = |g: &[Arr]| {
            g.iter().map(|a| a.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
        };
        let (gm_norm, ga_norm) = (norm(&g_main), norm(&g_aux));
        let total = pcgrad_combine(&g_main, &g_aux, self.model.config.alpha);
        drop(tape);

        self.adamw_update(&total);
        self.model.step += 1;

        Ok(StepMetrics {
            step,
            l_main: main_val,
            l_aux: aux_val,
            tau,
            grad_main_norm: gm_norm,
            grad_aux_norm: ga_norm,
            val_l_main: None,
        })
    }

    /// L_main + L_aux on a fixed item list with node features drawn from a
    /// dedicated stream, so repeated calls are deterministic. Used for
    /// finite-difference verification of the analytic gradients.
    pub fn total_loss_and_grads(
        &mut self,
        items: &[usize],
        feature_seed: u64,
        with_grads: bool,
    ) -> (f64, Vec<Arr>) {
        let tau = tau_schedule(self.model.step, self.model.config.tau_floor);
        let saved = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(feature_seed));
        let mut tape = Tape::new();
        let vars = self.model.push(&mut tape);
        let mut adj_sum: Option<Var> = None;
        let mut mlp_no_eff = Vec::new();
        for &idx in items {
            let (l, no_eff) = self.forward_transition(&mut tape, &vars, idx, tau, false);
            if let Some(ne) = no_eff {
                mlp_no_eff.push((self.prepared[idx].schema, ne));
            }
            adj_sum = Some(match adj_sum {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        let l_main = tape.scale(
            adj_sum.expect("nonempty item list"),
            1.0 / (items.len() as f64 * self.n_scale),
        );
        let (l_eff, l_pre) = self.loss_auxiliary(&mut tape, &vars, &mlp_no_eff);
        let aux_sum = tape.add(l_eff, l_pre);
        let l_aux = tape.scale(aux_sum, 1.0 / self.n_scale);
        let total = tape.add(l_main, l_aux);
        let val = *tape.value(total).first().unwrap();
        let grads = if with_grads {
            let sweep = tape.backward(total);
            vars.list.iter().map(|&v| sweep.grad(&tape, v)).collect()
        } else {
            Vec::new()
        };
        self.rng = saved;
        (val, grads)
    }

    fn adamw_update(&mut self, grads: &[Arr]) {
        let cfg = self.model.config.clone();
        let t = (self.model.step + 1) as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let mut m_moms = std::mem::take(&mut self.model.adam_m);
        let mut v_moms = std::mem::take(&mut self.model.adam_v);
        for (((p, g), m), v) in self
            .model
            .param_refs_mut()
            .into_iter()
            .zip(grads)
            .zip(m_moms.iter_mut())
            .zip(v_moms.iter_mut())
        {
            ndarray::Zip::from(&mut *p).and(g).and(&mut *m).and(&mut *v).for_each(
                |p, &g, m, v| {
                    *p -= cfg.lr * cfg.weight_decay * *p;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= cfg.lr * mh / (vh.sqrt() + 1e-8);
                },
            );
        }
        self.model.adam_m = m_moms;
        self.model.adam_v = v_moms;
    }

    /// Mean validation main loss over (a sample of) the validation split,
    /// forward only.
    pub fn validation_loss(&mut self, max_items: usize) -> f64 {
        let tau = tau_schedule(self.model.step, self.model.config.tau_floor);
        let count = self.val_prepared.len().min(max_items);
        if count == 0 {
            return f64::NAN;
        }
        let mut tape = Tape::new();
        let vars = self.model.push(&mut tape);
        let mut total = 0.0;
        for idx in 0..count {
            let (l, _) = self.forward_transition(&mut tape, &vars, idx, tau, true);
            total += *tape.value(l).first().unwrap();
        }
        total / (count as f64 * self.n_scale)
    }

    /// Train for the configured number of steps, reporting metrics rows to
    /// `sink` (every step; validation loss filled in every `val_every`).
    pub fn run(
        &mut self,
        val_every: usize,
        sink: &mut dyn FnMut(&StepMetrics),
    ) -> Result<(), TrainError> {
        while self.model.step < self.model.config.steps {
            let mut metrics = self.step()?;
            if val_every > 0 && metrics.step % val_every == 0 {
                metrics.val_l_main = Some(self.validation_loss(100));
            }
            sink(&metrics);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scaling_constant_blocks3() {
        // R=4 (two unary, two binary), O=5, M=5 → 4·25 + 2·(5+5+25+25) = 220
        assert_eq!(scaling_constant(&[1, 1, 2, 2], 5, 5), 220.0);
        assert_eq!(scaling_constant(&[1], 1, 1), 3.0);
    }

    #[test]
    fn pcgrad_hand_examples() {
        // aux = 0 → total = main
        let gm = vec![array![1.0, 2.0].into_dyn()];
        let ga = vec![array![0.0, 0.0].into_dyn()];
        let total = pcgrad_combine(&gm, &ga, 1.0);
        assert_eq!(total[0], gm[0]);

        // conflicting: main (1,0), aux (−1,1) → projected aux (0,1), total (1,1)
        let gm = vec![array![1.0, 0.0].into_dyn()];
        let ga = vec![array![-1.0, 1.0].into_dyn()];
        let total = pcgrad_combine(&gm, &ga, 1.0);
        assert!((total[0][[0]] - 1.0).abs() < 1e-12);
        assert!((total[0][[1]] - 1.0).abs() < 1e-12);

        // aligned, ‖aux‖ = 10‖main‖ → total = 2·main
        let gm = vec![array![1.0, 0.0].into_dyn()];
        let ga = vec![array![10.0, 0.0].into_dyn()];
        let total = pcgrad_combine(&gm, &ga, 1.0);
        assert!((total[0][[0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pcgrad_properties_random() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let alpha = 0.7;
        for _ in 0..1000 {
            let gm: Arr = ndarray::Array1::from_shape_fn(6, |_| normal.sample(&mut rng)).into_dyn();
            let ga: Arr = ndarray::Array1::from_shape_fn(6, |_| normal.sample(&mut rng)).into_dyn();
            let total = pcgrad_combine(std::slice::from_ref(&gm), &[ga], alpha);
            let aux_part = &total[0] - &gm;
            let dot: f64 = aux_part.iter().zip(gm.iter()).map(|(a, b)| a * b).sum();
            assert!(dot >= -1e-10, "aux component opposes main: {dot}");
            let aux_norm = aux_part.iter().map(|x| x * x).sum::<f64>().sqrt();
            let main_norm = gm.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(aux_norm <= alpha * main_norm + 1e-10);
        }
    }
}
