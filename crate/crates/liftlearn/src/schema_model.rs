//! Lifted effect/precondition tensors, their grounding through a selection,
//! precondition satisfaction, and successor prediction.
//!
//! Per action the model holds two logit tensors of shape R×M×M×3; a softmax
//! over the last axis yields the case probabilities (none / add / delete for
//! effects, none / positive / negative for preconditions). For unary
//! predicates the off-diagonal (i≠j) entries are pinned to the "none" case by
//! a large negative constant added to the add/delete logits, so they carry no
//! gradient and contribute exact zeros.

use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::LiftedDomain;
use crate::tape::{Arr, Tape, Var};

/// Stand-in for −∞ in masked logits; exp(−1e9) underflows to exactly 0.
pub const MASK_NEG: f64 = -1e9;

pub const CASE_NONE: usize = 0;
pub const CASE_ADD: usize = 1;
pub const CASE_DEL: usize = 2;

/// Learnable effect and precondition logits for every action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaParams {
    pub eff: Vec<Arr>,
    pub pre: Vec<Arr>,
}

impl SchemaParams {
    /// `slots[a]` is M_a. Logits start as small noise around zero, which puts
    /// every unmasked case near the uniform (⅓,⅓,⅓).
    pub fn init(slots: &[usize], num_predicates: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.1).unwrap();
        let tensor = |m: usize, rng: &mut dyn rand::RngCore| -> Arr {
            Array4::from_shape_fn((num_predicates, m, m, 3), |_| normal.sample(rng)).into_dyn()
        };
        let eff = slots.iter().map(|&m| tensor(m, rng)).collect();
        let pre = slots.iter().map(|&m| tensor(m, rng)).collect();
        SchemaParams { eff, pre }
    }
}

/// Masks for one slot count M: `keep` is 1 on learnable entries and 0 on
/// unary off-diagonals (all three cases); `pin` adds MASK_NEG to the add and
/// delete logits there; `pair` is the R×M×M indicator of learnable (r,i,j).
#[derive(Debug, Clone)]
pub struct CaseMasks {
    pub keep: Arr,
    pub pin: Arr,
    pub pair: Arr,
}

pub fn case_masks(domain: &LiftedDomain, m: usize) -> CaseMasks {
    let r = domain.predicates.len();
    let mut keep = Array4::ones((r, m, m, 3));
    let mut pin = Array4::zeros((r, m, m, 3));
    let mut pair = ArrayD::ones(ndarray::IxDyn(&[r, m, m]));
    for (p, sig) in domain.predicates.iter().enumerate() {
        if sig.arity == 1 {
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        for c in 0..3 {
                            keep[[p, i, j, c]] = 0.0;
                        }
                        pin[[p, i, j, CASE_ADD]] = MASK_NEG;
                        pin[[p, i, j, CASE_DEL]] = MASK_NEG;
                        pair[[p, i, j]] = 0.0;
                    }
                }
            }
        }
    }
    CaseMasks { keep: keep.into_dyn(), pin: pin.into_dyn(), pair }
}

/// Softmax case probabilities from masked logits: R×M×M×3 on the tape.
pub fn case_probabilities(tape: &mut Tape, logits: Var, masks: &CaseMasks) -> Var {
    let keep = tape.constant(masks.keep.clone());
    let pin = tape.constant(masks.pin.clone());
    let kept = tape.mul(logits, keep);
    let masked = tape.add(kept, pin);
    tape.softmax_last(masked)
}

/// One case slice (R×M×M) of the probability tensor.
pub fn case_slice(tape: &mut Tape, probs: Var, case: usize) -> Var {
    tape.select_last(probs, case)
}

/// P̃_r = S̃ᵀ P_r S̃ for every relation: (R×M×M, M×O) → R×O×O.
pub fn ground_project(tape: &mut Tape, lifted: Var, selection: Var) -> Var {
    tape.project(lifted, selection)
}

/// p_pre = [Π (1 − P̃⁺⊙(1−A)) (1 − P̃⁻⊙A)]^{1/(τ·R·O² + (1−τ))}, in log space
/// with per-factor flooring so a hard violation gives p_pre ≈ 0 with finite
/// gradients.
pub fn precondition_probability(
    tape: &mut Tape,
    pre_pos: Var,
    pre_neg: Var,
    adjacency: &Arr,
    tau: f64,
) -> Var {
    let n = adjacency.len() as f64; // R·O²
    let a = tape.constant(adjacency.clone());
    let one_minus_a = tape.one_minus(a);
    let viol_pos = tape.mul(pre_pos, one_minus_a);
    let viol_neg = tape.mul(pre_neg, a);
    let f_pos = tape.one_minus(viol_pos);
    let f_neg = tape.one_minus(viol_neg);
    let lp = tape.ln_clamp(f_pos, 1e-30);
    let ln = tape.ln_clamp(f_neg, 1e-30);
    let logs = tape.add(lp, ln);
    let total = tape.sum(logs);
    let exponent = 1.0 / (tau * n + (1.0 - tau));
    let scaled = tape.scale(total, exponent);
    tape.exp(scaled)
}

/// Â′ = A + p_pre·((1−A)⊙P̃_add − A⊙P̃_del).
pub fn predict_successor(
    tape: &mut Tape,
    adjacency: &Arr,
    p_pre: Var,
    add: Var,
    del: Var,
) -> Var {
    let a = tape.constant(adjacency.clone());
    let one_minus_a = tape.one_minus(a);
    let gain = tape.mul(add, one_minus_a);
    let loss = tape.mul(del, a);
    let delta = tape.sub(gain, loss);
    let scaled = tape.mul_scalar_v(p_pre, delta);
    tape.add(a, scaled)
}

/// τ(t) = max(0.1^{t/500}, floor): exponential through τ(0)=1, τ(500)=0.1.
pub fn tau_schedule(step: usize, floor: f64) -> f64 {
    let tau = 0.1f64.powf(step as f64 / 500.0);
    tau.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::state_to_adjacency;
    use crate::assign::hard_selection;
    use crate::data::{random_walk_collect, Variant, WalkBounds};
    use crate::domain::LiftedAtom;
    use crate::pddl::{parse_domain, parse_problem};
    use crate::presets::preset;
    use ndarray::{Array2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_cases() {
        let (domain, _, _) = preset("blocks3").unwrap().parse().unwrap();
        let masks = case_masks(&domain, 2);
        let mut tape = Tape::new();
        let r = domain.predicates.len();
        let mut logits = Array4::zeros((r, 2, 2, 3));
        logits[[0, 0, 0, 0]] = 1.0;
        logits[[0, 0, 0, 1]] = 2.0;
        logits[[0, 0, 0, 2]] = 3.0;
        let lv = tape.leaf(logits.into_dyn());
        let probs = case_probabilities(&mut tape, lv, &masks);
        let p = tape.value(probs);
        assert!((p[[0, 0, 0, 0]] - 0.0900).abs() < 1e-3);
        assert!((p[[0, 0, 0, 1]] - 0.2447).abs() < 1e-3);
        assert!((p[[0, 0, 0, 2]] - 0.6652).abs() < 1e-3);
        // zero logits → uniform (use a binary predicate's off-diagonal)
        let on = domain.predicates.iter().position(|s| s.name == "on").unwrap();
        assert!((p[[on, 0, 1, 0]] - 1.0 / 3.0).abs() < 1e-9);
        // unary off-diagonal pinned to (1, 0, 0): clear is unary
        let clear = domain.predicates.iter().position(|s| s.name == "clear").unwrap();
        assert_eq!(p[[clear, 0, 1, 0]], 1.0);
        assert_eq!(p[[clear, 0, 1, 1]], 0.0);
        assert_eq!(p[[clear, 0, 1, 2]], 0.0);
        // rows sum to one
        for lane in p.lanes(ndarray::Axis(3)) {
            assert!((lane.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn grounding_bounds_and_onehot_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, m, o) = (2, 3, 5);
        // random selection with column sums ≤ 1 (scaled soft rows)
        let mut s = Array2::from_shape_fn((m, o), |_| rng.gen::<f64>());
        for mut row in s.rows_mut() {
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum / m as f64 * 0.9);
        }
        let p = Array3::from_shape_fn((r, m, m), |_| rng.gen::<f64>());
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone().into_dyn());
        let sv = tape.leaf(s.clone().into_dyn());
        let g = ground_project(&mut tape, pv, sv);
        let gv = tape.value(g);
        for (rr, gi) in gv.iter().enumerate() {
            assert!((0.0..=1.0).contains(gi), "entry {rr}: {gi}");
        }
        // direct double-sum oracle
        for k in 0..r {
            for a in 0..o {
                for b in 0..o {
                    let mut acc = 0.0;
                    for i in 0..m {
                        for j in 0..m {
                            acc += s[[i, a]] * p[[k, i, j]] * s[[j, b]];
                        }
                    }
                    assert!((gv[[k, a, b]] - acc).abs() < 1e-12);
                }
            }
        }

        // one-hot M=O selection relabels slot indices
        let sel = hard_selection(&[2, 0, 1], 3);
        let p = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64);
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone().into_dyn());
        let sv = tape.leaf(sel);
        let g = ground_project(&mut tape, pv, sv);
        let gv = tape.value(g);
        let slot_of = [1usize, 2, 0]; // object index → slot
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(gv[[0, a, b]], p[[0, slot_of[a], slot_of[b]]]);
            }
        }
    }

    #[test]
    fn precondition_probability_examples() {
        // factors (0.9, 1, 1, 1) over R·O² = 4
        let mut tape = Tape::new();
        // P̃⁺ = 0.1 on an absent atom → that factor is 1 − 0.1 = 0.9
        let mut pos = ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2]));
        pos[[0, 0, 0]] = 0.1;
        let a = ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2]));
        let posv = tape.leaf(pos);
        let negv = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2])));
        let p1 = precondition_probability(&mut tape, posv, negv, &a, 1.0);
        assert!((tape.value(p1).first().unwrap() - 0.9f64.powf(0.25)).abs() < 1e-9);
        let p0 = precondition_probability(&mut tape, posv, negv, &a, 0.0);
        assert!((tape.value(p0).first().unwrap() - 0.9).abs() < 1e-9);

        // no preconditions → 1
        let zero = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2])));
        let pe = precondition_probability(&mut tape, zero, zero, &a, 0.3);
        assert!((tape.value(pe).first().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_anchors() {
        assert_eq!(tau_schedule(0, 0.0), 1.0);
        assert!((tau_schedule(500, 0.0) - 0.1).abs() < 1e-12);
        assert!((tau_schedule(1000, 0.0) - 0.01).abs() < 1e-12);
        assert_eq!(tau_schedule(5000, 0.1), 0.1);
        for t in 0..2000 {
            assert!(tau_schedule(t + 1, 0.0) <= tau_schedule(t, 0.0));
        }
    }

    /// With one-hot selections and binary case tensors taken from the true
    /// schemas, the pipeline must reproduce the symbolic successor exactly.
    #[test]
    fn hard_parameter_equivalence_blocks() {
        let p = preset("blocks3").unwrap();
        let domain = parse_domain(p.domain_text).unwrap();
        let train = parse_problem(p.train_text, &domain).unwrap();
        let bounds = WalkBounds { train_min: 40, train_max: 40, val_min: 1, val_max: 1 };
        let traces =
            random_walk_collect(&train, &domain, Variant::Full, bounds, 1_000_000, 9).unwrap();
        let o = train.objects.len();
        let r = domain.predicates.len();

        for t in traces.train.iter().chain(traces.val.iter()) {
            let schema = &domain.schemas[t.schema];
            let m = schema.arity;
            // binary lifted tensors from the ground-truth schema
            let mut add = Array3::zeros((r, m, m));
            let mut del = Array3::zeros((r, m, m));
            let mut pos = Array3::zeros((r, m, m));
            let mut neg = Array3::zeros((r, m, m));
            let fill = |arr: &mut Array3<f64>, atoms: &std::collections::BTreeSet<LiftedAtom>| {
                for at in atoms {
                    let (i, j) = match at.args.len() {
                        1 => (at.args[0], at.args[0]),
                        _ => (at.args[0], at.args[1]),
                    };
                    arr[[at.predicate, i, j]] = 1.0;
                }
            };
            fill(&mut add, &schema.add);
            fill(&mut del, &schema.del);
            fill(&mut pos, &schema.pre_pos);
            fill(&mut neg, &schema.pre_neg);

            let sel = hard_selection(&t.full_binding, o);
            let a = state_to_adjacency(&t.state, r, o);
            let a_next = state_to_adjacency(&t.next_state, r, o);

            let mut tape = Tape::new();
            let sv = tape.leaf(sel);
            let addv = tape.leaf(add.into_dyn());
            let delv = tape.leaf(del.into_dyn());
            let posv = tape.leaf(pos.into_dyn());
            let negv = tape.leaf(neg.into_dyn());
            let g_add = ground_project(&mut tape, addv, sv);
            let g_del = ground_project(&mut tape, delv, sv);
            let g_pos = ground_project(&mut tape, posv, sv);
            let g_neg = ground_project(&mut tape, negv, sv);
            let a_dyn = a.clone().into_dyn();
            let p_pre = precondition_probability(&mut tape, g_pos, g_neg, &a_dyn, 0.0);
            assert!((tape.value(p_pre).first().unwrap() - 1.0).abs() < 1e-12);
            let pred = predict_successor(&mut tape, &a_dyn, p_pre, g_add, g_del);
            let pv = tape.value(pred);
            for ((idx, want), got) in a_next.indexed_iter().zip(pv.iter()) {
                assert!((want - got).abs() < 1e-12, "mismatch at {idx:?}");
                assert!((0.0..=1.0).contains(got));
            }
        }
    }
}
