//! MLP-effects ablation: effect logits become a function of the lifted
//! sub-state Ã = S̃ A S̃ᵀ instead of static parameters. One shared network
//! feeds per-action output slices; preconditions stay static learnables.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Arr, Tape, Var};

pub const HIDDEN: usize = 256;

/// Shared two-hidden-layer network. The final layer is stored as one slice
/// per action (jointly they form the single shared output layer) and starts
/// at zero so initial case probabilities are uniform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Arr,
    pub b1: Arr,
    pub w2: Arr,
    pub b2: Arr,
    /// per action: HIDDEN × (R·M·M·3)
    pub w_out: Vec<Arr>,
    pub b_out: Vec<Arr>,
}

pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_out: Vec<Var>,
    pub b_out: Vec<Var>,
}

impl MlpParams {
    pub fn init(num_actions: usize, num_predicates: usize, m: usize, rng: &mut impl Rng) -> Self {
        let input = num_predicates * m * m;
        let out = num_predicates * m * m * 3;
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n1 = he(input);
        let n2 = he(HIDDEN);
        MlpParams {
            w1: Array2::from_shape_fn((input, HIDDEN), |_| n1.sample(rng)).into_dyn(),
            b1: Array1::zeros(HIDDEN).into_dyn(),
            w2: Array2::from_shape_fn((HIDDEN, HIDDEN), |_| n2.sample(rng)).into_dyn(),
            b2: Array1::zeros(HIDDEN).into_dyn(),
            w_out: (0..num_actions).map(|_| Array2::zeros((HIDDEN, out)).into_dyn()).collect(),
            b_out: (0..num_actions).map(|_| Array1::zeros(out).into_dyn()).collect(),
        }
    }

    pub fn push(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w_out: self.w_out.iter().map(|w| tape.leaf(w.clone())).collect(),
            b_out: self.b_out.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }
}

/// Ã_r = S̃ A_r S̃ᵀ: lift the ground adjacency into slot space.
pub fn lift_state(tape: &mut Tape, selection: Var, adjacency: std::rc::Rc<Arr>) -> Var {
    tape.lift_state(selection, adjacency)
}

/// Flatten Ã, run the network, take action `a`'s slice, reshape to R×M×M×3.
/// Masking/softmax are applied downstream exactly as for static logits.
pub fn mlp_effect_logits(
    tape: &mut Tape,
    vars: &MlpVars,
    lifted: Var,
    action: usize,
    num_predicates: usize,
    m: usize,
) -> Var {
    let input = tape.reshape(lifted, &[1, num_predicates * m * m]);
    let h1 = tape.matmul(input, vars.w1);
    let h1b = tape.add_row_vec(h1, vars.b1);
    let h1a = tape.relu(h1b);
    let h2 = tape.matmul(h1a, vars.w2);
    let h2b = tape.add_row_vec(h2, vars.b2);
    let h2a = tape.relu(h2b);
    let out = tape.matmul(h2a, vars.w_out[action]);
    let outb = tape.add_row_vec(out, vars.b_out[action]);
    tape.reshape(outb, &[num_predicates, m, m, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::hard_selection;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    #[test]
    fn lift_state_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, m, o) = (2, 3, 4);
        let s = Array2::from_shape_fn((m, o), |_| rng.gen::<f64>() * 0.4).into_dyn();
        let a = Array3::from_shape_fn((r, o, o), |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let lifted = lift_state(&mut tape, sv, Rc::new(a.clone().into_dyn()));
        let lv = tape.value(lifted);
        for k in 0..r {
            for i in 0..m {
                for j in 0..m {
                    let mut acc = 0.0;
                    for x in 0..o {
                        for y in 0..o {
                            acc += s[[i, x]] * a[[k, x, y]] * s[[j, y]];
                        }
                    }
                    assert!((lv[[k, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn onehot_lift_is_subadjacency() {
        let (r, o) = (2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array3::from_shape_fn((r, o, o), |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        let pick = [4usize, 1, 2];
        let s = hard_selection(&pick, o);
        let mut tape = Tape::new();
        let sv = tape.leaf(s);
        let lifted = lift_state(&mut tape, sv, Rc::new(a.clone().into_dyn()));
        let lv = tape.value(lifted);
        for k in 0..r {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(lv[[k, i, j]], a[[k, pick[i], pick[j]]]);
                }
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (actions, r, m) = (2, 2, 3);
        let params = MlpParams::init(actions, r, m, &mut rng);
        let mut tape = Tape::new();
        let vars = params.push(&mut tape);
        let lifted = tape.constant(Array3::from_elem((r, m, m), 0.7).into_dyn());
        let logits = mlp_effect_logits(&mut tape, &vars, lifted, 1, r, m);
        assert!(tape.value(logits).iter().all(|&x| x == 0.0));
        let probs = tape.softmax_last(logits);
        assert!(tape.value(probs).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (actions, r, m) = (1, 1, 2);
        let mut params = MlpParams::init(actions, r, m, &mut rng);
        // nonzero final layer so gradients flow everywhere
        let normal = Normal::new(0.0, 0.3).unwrap();
        params.w_out[0].mapv_inplace(|_| normal.sample(&mut rng));
        let lifted_val = Array3::from_shape_fn((r, m, m), |_| rng.gen::<f64>()).into_dyn();

        let loss_of = |p: &MlpParams| {
            let mut tape = Tape::new();
            let vars = p.push(&mut tape);
            let lifted = tape.constant(lifted_val.clone());
            let logits = mlp_effect_logits(&mut tape, &vars, lifted, 0, r, m);
            let probs = tape.softmax_last(logits);
            let sq = tape.mul(probs, probs);
            let s = tape.sum(sq);
            *tape.value(s).first().unwrap()
        };

        let mut tape = Tape::new();
        let vars = params.push(&mut tape);
        let lifted = tape.constant(lifted_val.clone());
        let logits = mlp_effect_logits(&mut tape, &vars, lifted, 0, r, m);
        let probs = tape.softmax_last(logits);
        let sq = tape.mul(probs, probs);
        let s = tape.sum(sq);
        let grads = tape.backward(s);

        let eps = 1e-6;
        type ParamAccess = Box<dyn Fn(&mut MlpParams) -> &mut f64>;
        let checks: Vec<(Var, ParamAccess)> = vec![
            (vars.w1, Box::new(|p| &mut p.w1[[0, 5]])),
            (vars.b1, Box::new(|p| &mut p.b1[[7]])),
            (vars.w2, Box::new(|p| &mut p.w2[[3, 9]])),
            (vars.w_out[0], Box::new(|p| &mut p.w_out[0][[11, 2]])),
            (vars.b_out[0], Box::new(|p| &mut p.b_out[0][[4]])),
        ];
        let coords: &[&[usize]] = &[&[0, 5], &[7], &[3, 9], &[11, 2], &[4]];
        for ((var, access), coord) in checks.into_iter().zip(coords) {
            let g = grads.grad(&tape, var)[*coord];
            let mut pp = params.clone();
            *access(&mut pp) += eps;
            let mut pm = params.clone();
            *access(&mut pm) -= eps;
            let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * eps);
            assert!(
                (g - fd).abs() <= 1e-3 * fd.abs().max(1e-7),
                "coord {coord:?}: grad {g} vs fd {fd}"
            );
        }
    }
}
