//! Object-to-slot assignment: correspondence scores, log-space rectangular
//! Sinkhorn with a slack row, and the slot-weighted selection matrix.
//!
//! The Sinkhorn normalization runs on the tape so gradients flow through the
//! unrolled iterations that were actually executed. The slack row absorbs
//! unmatched objects (its dual is pinned to zero and it is exempt from row
//! normalization); slot activations σ(w) take the place of a slack column.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Arr, Tape, Var};

pub const SINKHORN_EPS: f64 = 1e-4;
pub const SINKHORN_T_MAX: usize = 200;

/// Learnable per-action query matrices (M×d) and slot logits (length M).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryBank {
    pub queries: Vec<Arr>,
    pub slot_logits: Vec<Arr>,
}

impl QueryBank {
    /// `slots[a]` is M_a: the query/slot count for action `a`.
    pub fn init(slots: &[usize], d: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        let queries = slots
            .iter()
            .map(|&m| Array2::from_shape_fn((m, d), |_| normal.sample(rng)).into_dyn())
            .collect();
        // Neutral start (sigma = 0.5): slots that never earn prediction support
        // are pushed down early, before their effect logits fade, and the
        // gradient-norm cap keeps the auxiliary loss from reviving them later.
        let slot_logits = slots.iter().map(|&m| Array1::zeros(m).into_dyn()).collect();
        QueryBank { queries, slot_logits }
    }
}

/// C = Q Kᵀ / √d.
pub fn correspondence(tape: &mut Tape, q: Var, k: Var, d: usize) -> Var {
    let qk = tape.matmul_bt(q, k);
    tape.scale(qk, 1.0 / (d as f64).sqrt())
}

pub struct SinkhornOutput {
    pub assignment: Var,
    pub converged: bool,
    pub iterations: usize,
}

/// Log-space rectangular Sinkhorn over the M real rows of `c` plus an
/// implicit zero slack row. Row duals u (slack's pinned to 0) and column
/// duals v alternate until the ℓ∞ change of both drops below `eps`. Returns
/// exp(u_i + C_ij + v_j) for the real rows only.
pub fn sinkhorn_rectangular(
    tape: &mut Tape,
    c: Var,
    eps: f64,
    t_max: usize,
) -> SinkhornOutput {
    let shape = tape.value(c).shape().to_vec();
    let (m, o) = (shape[0], shape[1]);
    let zeros_slack = tape.constant(Array2::zeros((1, o)).into_dyn());

    // duals as tape vars: u is M (column vector semantics), v is O (row vector)
    let mut u = tape.constant(Array1::zeros(m).into_dyn());
    let mut v = tape.constant(Array1::zeros(o).into_dyn());
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..t_max {
        iterations += 1;
        let u_prev = tape.value(u).clone();
        let v_prev = tape.value(v).clone();

        // u_i = -lse_j (C_ij + v_j) for real rows; slack stays 0
        let cv = tape.add_row_vec(c, v);
        let lse_u = tape.lse_rows(cv);
        u = tape.neg(lse_u);

        // v_j = -lse_i over real rows shifted by u plus the slack row (dual 0)
        let cu = tape.add_col_vec(c, u);
        let stacked = tape.concat_rows(cu, zeros_slack);
        let lse_v = tape.lse_cols(stacked);
        v = tape.neg(lse_v);

        let du = max_abs_diff(tape.value(u), &u_prev);
        let dv = max_abs_diff(tape.value(v), &v_prev);
        if du < eps && dv < eps {
            converged = true;
            break;
        }
    }

    let cv = tape.add_row_vec(c, v);
    let cuv = tape.add_col_vec(cv, u);
    let assignment = tape.exp(cuv);
    SinkhornOutput { assignment, converged, iterations }
}

fn max_abs_diff(a: &Arr, b: &Arr) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// S̃ = diag(σ(w)) S, with forced slots replaced by exact one-hot rows before
/// the scaling. In the full-STRIPS variant every slot is forced and σ(w) is
/// treated as 1, which `hard_selection` below produces without a tape.
pub fn make_selection(
    tape: &mut Tape,
    s: Var,
    w: Var,
    forced: &[(usize, usize)],
    num_objects: usize,
) -> Var {
    let m = tape.value(w).len();
    let mut s_eff = s;
    if !forced.is_empty() {
        // zero out forced rows, then add the one-hot pattern back as constants
        let mut keep = Array2::ones((m, num_objects));
        let mut onehot = Array2::zeros((m, num_objects));
        for &(slot, obj) in forced {
            assert!(obj < num_objects, "forced object index out of range");
            for j in 0..num_objects {
                keep[[slot, j]] = 0.0;
            }
            onehot[[slot, obj]] = 1.0;
        }
        let keep = tape.constant(keep.into_dyn());
        let onehot = tape.constant(onehot.into_dyn());
        let masked = tape.mul(s_eff, keep);
        s_eff = tape.add(masked, onehot);
    }
    let sw = tape.sigmoid(w);
    tape.row_scale(sw, s_eff)
}

/// Exact selection for the full-STRIPS variant: M_a = arity rows, each the
/// one-hot of the bound object, no learnable parts.
pub fn hard_selection(binding: &[usize], num_objects: usize) -> Arr {
    let mut s = Array2::zeros((binding.len(), num_objects));
    for (slot, &obj) in binding.iter().enumerate() {
        s[[slot, obj]] = 1.0;
    }
    s.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn run_sinkhorn(c: Arr, eps: f64) -> (Arr, bool) {
        let mut tape = Tape::new();
        let cv = tape.leaf(c);
        let out = sinkhorn_rectangular(&mut tape, cv, eps, SINKHORN_T_MAX);
        (tape.value(out.assignment).clone(), out.converged)
    }

    #[test]
    fn strong_diagonal_gives_identity() {
        // M = O: the slack mass decays only harmonically, so run long and
        // judge the assignment rather than the convergence flag.
        let c = array![[10.0, -10.0], [-10.0, 10.0]].into_dyn();
        let mut tape = Tape::new();
        let cv = tape.leaf(c);
        let out = sinkhorn_rectangular(&mut tape, cv, 1e-9, 5000);
        let s = tape.value(out.assignment);
        assert!((s[[0, 0]] - 1.0).abs() < 1e-3);
        assert!((s[[1, 1]] - 1.0).abs() < 1e-3);
        assert!(s[[0, 1]] < 1e-3 && s[[1, 0]] < 1e-3);
    }

    #[test]
    fn uniform_row_by_symmetry() {
        let c = Array2::zeros((1, 3)).into_dyn();
        let (s, conv) = run_sinkhorn(c, 1e-10);
        assert!(conv);
        for j in 0..3 {
            assert!((s[[0, j]] - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn marginals_hold_on_random_rectangles() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..50 {
            let m = rng.gen_range(1..=5);
            let o = rng.gen_range(m..=12);
            let c = Array2::from_shape_fn((m, o), |_| normal.sample(&mut rng)).into_dyn();
            let (s, conv) = run_sinkhorn(c, 1e-6);
            // column sums (incl. the discarded slack) are normalized every
            // iteration, so they hold regardless of convergence
            for j in 0..o {
                let col: f64 = (0..m).map(|i| s[[i, j]]).sum();
                assert!(col <= 1.0 + 1e-4, "col sum {col}");
            }
            // row sums are guaranteed only at convergence (m = o may stall)
            if conv {
                for i in 0..m {
                    let row: f64 = (0..o).map(|j| s[[i, j]]).sum();
                    assert!((row - 1.0).abs() < 1e-4, "row sum {row}");
                }
            } else {
                assert_eq!(m, o, "only the square case may fail to converge");
            }
        }
    }

    #[test]
    fn log_space_matches_probability_space_iteration() {
        // naive probability-space reference with the same slack-row scheme
        let c = array![[1.0, -0.5, 0.3], [0.2, 0.9, -1.1]].into_dyn();
        let (m, o) = (2, 3);
        let mut a = vec![1.0f64; m]; // row scalings (slack's fixed at 1)
        let mut b = vec![1.0f64; o];
        let k: Vec<Vec<f64>> =
            (0..m).map(|i| (0..o).map(|j| f64::exp(c[[i, j]])).collect()).collect();
        for _ in 0..500 {
            for i in 0..m {
                let s: f64 = (0..o).map(|j| k[i][j] * b[j]).sum();
                a[i] = 1.0 / s;
            }
            for j in 0..o {
                let s: f64 = (0..m).map(|i| k[i][j] * a[i]).sum::<f64>() + 1.0; // + slack
                b[j] = 1.0 / s;
            }
        }
        let (s_log, conv) = run_sinkhorn(c, 1e-12);
        assert!(conv);
        for i in 0..m {
            for j in 0..o {
                let naive = a[i] * k[i][j] * b[j];
                assert!((s_log[[i, j]] - naive).abs() <= 1e-5, "({i},{j})");
            }
        }
    }

    #[test]
    fn gradient_through_sinkhorn_matches_finite_differences() {
        let c0 = array![[0.4, -0.2, 0.7], [-0.3, 0.5, 0.1]].into_dyn();
        let loss = |c: &Arr| -> f64 {
            let mut tape = Tape::new();
            let cv = tape.leaf(c.clone());
            let out = sinkhorn_rectangular(&mut tape, cv, 1e-12, 500);
            // weighted readout to break symmetry
            let wmat = Array2::from_shape_fn((2, 3), |(i, j)| (1 + i + 2 * j) as f64).into_dyn();
            let w = tape.constant(wmat);
            let prod = tape.mul(out.assignment, w);
            let s = tape.sum(prod);
            *tape.value(s).first().unwrap()
        };
        let mut tape = Tape::new();
        let cv = tape.leaf(c0.clone());
        let out = sinkhorn_rectangular(&mut tape, cv, 1e-12, 500);
        let wmat = Array2::from_shape_fn((2, 3), |(i, j)| (1 + i + 2 * j) as f64).into_dyn();
        let w = tape.constant(wmat);
        let prod = tape.mul(out.assignment, w);
        let s = tape.sum(prod);
        let grads = tape.backward(s);
        let g = grads.grad(&tape, cv);
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut cp = c0.clone();
                cp[[i, j]] += eps;
                let mut cm = c0.clone();
                cm[[i, j]] -= eps;
                let fd = (loss(&cp) - loss(&cm)) / (2.0 * eps);
                let rel = (g[[i, j]] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-3, "({i},{j}): grad {} vs fd {fd}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn selection_respects_forcing_and_weights() {
        let mut tape = Tape::new();
        let s = tape.leaf(array![[0.3, 0.7], [0.6, 0.4]].into_dyn());
        let w = tape.leaf(array![0.0, 100.0].into_dyn());
        let sel = make_selection(&mut tape, s, w, &[(0, 1)], 2);
        let v = tape.value(sel);
        assert!((v[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((v[[0, 1]] - 0.5).abs() < 1e-12); // σ(0)·1
        assert!((v[[1, 0]] - 0.6).abs() < 1e-9); // σ(100)≈1
    }

    #[test]
    fn hard_selection_is_permutation_rows() {
        let s = hard_selection(&[3, 0], 4);
        assert_eq!(s[[0, 3]], 1.0);
        assert_eq!(s[[1, 0]], 1.0);
        assert_eq!(s.sum(), 2.0);
    }
}
