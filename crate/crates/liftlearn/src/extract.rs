//! Deriving symbolic schemas from trained parameters and emitting PDDL.

use ndarray::{Array1, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Variant;
use crate::domain::{ActionSchema, LiftedAtom, LiftedDomain};
use crate::schema_model::{case_masks, CASE_ADD, CASE_DEL};
use crate::train::ModelState;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DerivationThresholds {
    pub slot: f64,
    pub atom: f64,
}

impl Default for DerivationThresholds {
    fn default() -> Self {
        DerivationThresholds { slot: 0.5, atom: 0.5 }
    }
}

impl DerivationThresholds {
    /// Raised atom threshold for models trained on noisy traces.
    pub fn noisy() -> Self {
        DerivationThresholds { slot: 0.5, atom: 0.75 }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain (tape-free) masked softmax over the last axis of a logits tensor.
pub fn case_probs_plain(logits: &Array4<f64>, keep: &ndarray::ArrayD<f64>, pin: &ndarray::ArrayD<f64>) -> Array4<f64> {
    let mut masked = logits * &keep.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    masked += &pin.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    for mut lane in masked.lanes_mut(Axis(3)) {
        let m = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|x| (x - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|x| x / s);
    }
    masked
}

/// Atoms of one case whose probability, masked by the active-slot pattern,
/// exceeds the threshold. `slot_of` maps slot index → parameter position.
fn collect_atoms(
    probs: &Array4<f64>,
    case: usize,
    active: &[bool],
    slot_of: &[Option<usize>],
    arities: &[usize],
    threshold: f64,
) -> std::collections::BTreeSet<LiftedAtom> {
    let (r, m) = (probs.shape()[0], probs.shape()[1]);
    let mut out = std::collections::BTreeSet::new();
    for p in 0..r {
        for i in 0..m {
            for j in 0..m {
                if !(active[i] && active[j]) {
                    continue;
                }
                if arities[p] == 1 && i != j {
                    continue;
                }
                if probs[[p, i, j, case]] > threshold {
                    let args = if arities[p] == 1 {
                        vec![slot_of[i].unwrap()]
                    } else {
                        vec![slot_of[i].unwrap(), slot_of[j].unwrap()]
                    };
                    out.insert(LiftedAtom { predicate: p, args });
                }
            }
        }
    }
    out
}

/// Threshold one action's parameters into a symbolic schema.
pub fn derive_schema(
    model: &ModelState,
    action: usize,
    thresholds: DerivationThresholds,
) -> ActionSchema {
    let domain = &model.domain;
    let m = model.slots[action];
    let arities: Vec<usize> = domain.predicates.iter().map(|p| p.arity).collect();

    let active: Vec<bool> = match (&model.queries, model.config.variant) {
        (Some(q), v) if v != Variant::Full => {
            let w = q.slot_logits[action].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            (0..m).map(|i| sigmoid(w[i]) > thresholds.slot).collect()
        }
        _ => vec![true; m],
    };
    let mut slot_of = vec![None; m];
    let mut arity = 0;
    for (i, &a) in active.iter().enumerate() {
        if a {
            slot_of[i] = Some(arity);
            arity += 1;
        }
    }

    let masks = case_masks(domain, m);
    let to4 = |a: &crate::tape::Arr| a.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
    let eff = case_probs_plain(&to4(&model.schema.eff[action]), &masks.keep, &masks.pin);
    let pre = case_probs_plain(&to4(&model.schema.pre[action]), &masks.keep, &masks.pin);

    ActionSchema {
        name: domain.schemas[action].name.clone(),
        arity,
        param_types: vec![None; arity],
        pre_pos: collect_atoms(&pre, CASE_ADD, &active, &slot_of, &arities, thresholds.atom),
        pre_neg: collect_atoms(&pre, CASE_DEL, &active, &slot_of, &arities, thresholds.atom),
        add: collect_atoms(&eff, CASE_ADD, &active, &slot_of, &arities, thresholds.atom),
        del: collect_atoms(&eff, CASE_DEL, &active, &slot_of, &arities, thresholds.atom),
    }
}

/// Derive every action of the model into a `learned_` domain.
pub fn derive_domain(model: &ModelState, thresholds: DerivationThresholds) -> LiftedDomain {
    let mut domain = model.domain.clone();
    domain.name = format!("learned_{}", domain.name);
    domain.schemas = (0..model.domain.schemas.len())
        .map(|a| {
            let mut s = derive_schema(model, a, thresholds);
            s.name = format!("learned_{}", s.name);
            s
        })
        .collect();
    domain
}

/// Hand-constructed model parameters encoding a symbolic domain: hard logits
/// (±L with L large) and fully active slots. Used for round-trip tests and
/// the hard-parameter property checks.
pub fn logits_from_schema(
    schema: &ActionSchema,
    num_predicates: usize,
    arities: &[usize],
) -> (crate::tape::Arr, crate::tape::Arr, crate::tape::Arr) {
    let m = schema.arity;
    let hard = 30.0;
    let mut eff = Array4::zeros((num_predicates, m, m, 3));
    let mut pre = Array4::zeros((num_predicates, m, m, 3));
    // default everything decisively to "none"
    for t in [&mut eff, &mut pre] {
        for p in 0..num_predicates {
            for i in 0..m {
                for j in 0..m {
                    t[[p, i, j, 0]] = hard;
                }
            }
        }
    }
    let set = |t: &mut Array4<f64>, atoms: &std::collections::BTreeSet<LiftedAtom>, case: usize| {
        for at in atoms {
            let (i, j) = if arities[at.predicate] == 1 {
                (at.args[0], at.args[0])
            } else {
                (at.args[0], at.args[1])
            };
            t[[at.predicate, i, j, 0]] = -hard;
            t[[at.predicate, i, j, case]] = hard;
        }
    };
    set(&mut eff, &schema.add, CASE_ADD);
    set(&mut eff, &schema.del, CASE_DEL);
    set(&mut pre, &schema.pre_pos, CASE_ADD);
    set(&mut pre, &schema.pre_neg, CASE_DEL);
    let w = Array1::from_elem(m, 30.0);
    (eff.into_dyn(), pre.into_dyn(), w.into_dyn())
}

/// Render a learned domain as PDDL text; `parse_domain` on the output yields
/// a structurally equal domain.
pub fn emit_pddl(domain: &LiftedDomain) -> String {
    let mut out = String::new();
    let has_neg = domain.schemas.iter().any(|s| !s.pre_neg.is_empty());
    out.push_str(&format!("(define (domain {})\n", domain.name));
    out.push_str("  (:requirements :strips");
    if has_neg {
        out.push_str(" :negative-preconditions");
    }
    out.push_str(")\n  (:predicates\n");
    for p in &domain.predicates {
        match p.arity {
            1 => out.push_str(&format!("    ({} ?x)\n", p.name)),
            _ => out.push_str(&format!("    ({} ?x ?y)\n", p.name)),
        }
    }
    out.push_str("  )\n");
    for s in &domain.schemas {
        let params: Vec<String> = (0..s.arity).map(|i| format!("?x{}", i + 1)).collect();
        out.push_str(&format!("\n  (:action {}\n    :parameters ({})\n", s.name, params.join(" ")));
        let atom = |a: &LiftedAtom| -> String {
            let name = &domain.predicates[a.predicate].name;
            let args: Vec<String> = a.args.iter().map(|&k| format!("?x{}", k + 1)).collect();
            format!("({} {})", name, args.join(" "))
        };
        let mut pre_parts: Vec<String> = s.pre_pos.iter().map(&atom).collect();
        pre_parts.extend(s.pre_neg.iter().map(|a| format!("(not {})", atom(a))));
        out.push_str(&format!("    :precondition (and {})\n", pre_parts.join(" ")));
        let mut eff_parts: Vec<String> = s.add.iter().map(&atom).collect();
        eff_parts.extend(s.del.iter().map(|a| format!("(not {})", atom(a))));
        out.push_str(&format!("    :effect (and {}))\n", eff_parts.join(" ")));
    }
    out.push_str(")\n");
    out
}

/// Case-probability tensors (R×M×M each for add and del) evaluated from
/// ground-truth-style hard logits; helper for tests.
pub fn hard_case_probs(
    eff: &crate::tape::Arr,
    domain: &LiftedDomain,
    m: usize,
) -> (Array3<f64>, Array3<f64>) {
    let masks = case_masks(domain, m);
    let probs = case_probs_plain(
        &eff.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned(),
        &masks.keep,
        &masks.pin,
    );
    (
        probs.index_axis(Axis(3), CASE_ADD).to_owned(),
        probs.index_axis(Axis(3), CASE_DEL).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pddl::parse_domain;
    use crate::presets::preset;

    #[test]
    fn emit_parse_round_trip() {
        let (domain, _, _) = preset("blocks3").unwrap().parse().unwrap();
        let text = emit_pddl(&domain);
        let reparsed = parse_domain(&text).unwrap();
        assert_eq!(reparsed.predicates, domain.predicates);
        assert_eq!(reparsed.schemas.len(), domain.schemas.len());
        for (a, b) in reparsed.schemas.iter().zip(&domain.schemas) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.arity, b.arity);
            assert_eq!(a.pre_pos, b.pre_pos);
            assert_eq!(a.pre_neg, b.pre_neg);
            assert_eq!(a.add, b.add);
            assert_eq!(a.del, b.del);
        }
    }

    #[test]
    fn schema_logits_round_trip() {
        // derive_schema ∘ logits_from_schema = identity for every bundled domain
        use crate::data::Variant;
        use crate::train::{ModelState, TrainConfig};
        for p in crate::presets::PRESETS {
            let (domain, _, _) = p.parse().unwrap();
            let arities: Vec<usize> = domain.predicates.iter().map(|s| s.arity).collect();
            for (ai, schema) in domain.schemas.iter().enumerate() {
                let cfg = TrainConfig::new(Variant::Full, 1.0, 0);
                let mut model = ModelState::init(&domain, cfg);
                let (eff, pre, _w) = logits_from_schema(schema, arities.len(), &arities);
                model.schema.eff[ai] = eff;
                model.schema.pre[ai] = pre;
                let derived = derive_schema(&model, ai, DerivationThresholds::default());
                // param_types are not recoverable from traces; compare the rest
                assert_eq!(derived.arity, schema.arity, "{} / {}", p.name, schema.name);
                assert_eq!(derived.pre_pos, schema.pre_pos, "{} / {}", p.name, schema.name);
                assert_eq!(derived.pre_neg, schema.pre_neg, "{} / {}", p.name, schema.name);
                assert_eq!(derived.add, schema.add, "{} / {}", p.name, schema.name);
                assert_eq!(derived.del, schema.del, "{} / {}", p.name, schema.name);
            }
        }
    }

    #[test]
    fn empty_schema_emits_empty_blocks() {
        let (mut domain, _, _) = preset("blocks3").unwrap().parse().unwrap();
        domain.schemas = vec![ActionSchema {
            name: "noop".into(),
            arity: 0,
            param_types: vec![],
            pre_pos: Default::default(),
            pre_neg: Default::default(),
            add: Default::default(),
            del: Default::default(),
        }];
        let text = emit_pddl(&domain);
        assert!(text.contains("(:action noop"));
        assert!(text.contains(":precondition (and )"));
        let reparsed = parse_domain(&text).unwrap();
        assert_eq!(reparsed.schemas[0].arity, 0);
    }
}
