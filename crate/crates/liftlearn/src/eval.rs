//! Successor-set evaluation of learned domains against ground truth,
//! plus the syntactic schema diff used for diagnostics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjacency::state_to_adjacency;
use crate::domain::{
    applicable_groundings, successor_unchecked, DomainError, GroundState, LiftedAtom, LiftedDomain,
};
use crate::extract::{case_probs_plain, derive_schema, DerivationThresholds};
use crate::mlp::{lift_state, mlp_effect_logits};
use crate::schema_model::{case_masks, CASE_ADD, CASE_DEL};
use crate::tape::Tape;
use crate::train::ModelState;

pub const DEFAULT_GROUNDING_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("aggregate_runs requires at least one report")]
    NoReports,
}

/// All distinct symbolic successors of `state`. The boolean is a timeout flag,
/// set when the candidate-binding count exceeds `cap`.
pub fn successor_set(
    state: &GroundState,
    domain: &LiftedDomain,
    object_types: &[Option<usize>],
    cap: usize,
) -> (BTreeSet<GroundState>, bool) {
    match applicable_groundings(state, domain, object_types, cap) {
        Ok(actions) => (
            actions
                .into_iter()
                .map(|(ai, b)| successor_unchecked(state, &domain.schemas[ai], &b))
                .collect(),
            false,
        ),
        Err(DomainError::GroundingLimit { .. }) => (BTreeSet::new(), true),
        Err(e) => unreachable!("applicable_groundings: {e}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateRecord {
    pub state: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<StateRecord>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub sound: bool,
    pub complete: bool,
    /// States skipped because either side hit the grounding cap.
    pub excluded: usize,
    pub timeout: bool,
}

fn finish_report(records: Vec<StateRecord>, excluded: usize) -> EvaluationReport {
    let tp: usize = records.iter().map(|r| r.tp).sum();
    let fp: usize = records.iter().map(|r| r.fp).sum();
    let fn_: usize = records.iter().map(|r| r.fn_).sum();
    let ratio = |num: usize, den: usize| if den > 0 { num as f64 / den as f64 } else { 1.0 };
    EvaluationReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        sound: fp == 0,
        complete: fn_ == 0,
        excluded,
        timeout: excluded > 0,
        records,
        tp,
        fp,
        fn_,
    }
}

/// Score predicted successor sets against the ground-truth domain on a set of
/// test states. `predict` returns (successor set, timeout flag) for a state
/// and its instance index; timed-out states are excluded from the totals.
pub fn evaluate_with(
    mut predict: impl FnMut(&GroundState, usize) -> (BTreeSet<GroundState>, bool),
    truth: &LiftedDomain,
    states: &[(usize, GroundState)],
    object_types: &[Vec<Option<usize>>],
    cap: usize,
) -> EvaluationReport {
    let mut records = Vec::with_capacity(states.len());
    let mut excluded = 0;
    for (id, (inst, state)) in states.iter().enumerate() {
        let (pred, pred_to) = predict(state, *inst);
        let (true_, true_to) = successor_set(state, truth, &object_types[*inst], cap);
        if pred_to || true_to {
            excluded += 1;
            continue;
        }
        let tp = pred.intersection(&true_).count();
        records.push(StateRecord { state: id, tp, fp: pred.len() - tp, fn_: true_.len() - tp });
    }
    finish_report(records, excluded)
}

/// Compare a learned domain to ground truth via successor sets.
pub fn evaluate(
    learned: &LiftedDomain,
    truth: &LiftedDomain,
    states: &[(usize, GroundState)],
    object_types: &[Vec<Option<usize>>],
    cap: usize,
) -> EvaluationReport {
    // Learned schemas are untyped, so the type vector only matters for truth.
    evaluate_with(
        |s, inst| successor_set(s, learned, &object_types[inst], cap),
        truth,
        states,
        object_types,
        cap,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n_s: usize,
    pub n_c: usize,
    pub n_sc: usize,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

pub fn aggregate_runs(reports: &[EvaluationReport]) -> Result<RunAggregate, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let n = reports.len() as f64;
    Ok(RunAggregate {
        n_s: reports.iter().filter(|r| r.sound).count(),
        n_c: reports.iter().filter(|r| r.complete).count(),
        n_sc: reports.iter().filter(|r| r.sound && r.complete).count(),
        mean_precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
        mean_recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
    })
}

/// Successor sets of an MLP-effects model: static preconditions are derived
/// symbolically, effects come from thresholded MLP outputs per grounding.
/// The encoder is not used, since no successor state is available at
/// evaluation time.
pub fn mlp_eval_successors(
    state: &GroundState,
    model: &ModelState,
    thresholds: DerivationThresholds,
    object_types: &[Option<usize>],
    cap: usize,
) -> (BTreeSet<GroundState>, bool) {
    let domain = &model.domain;
    let r = domain.predicates.len();
    let num_objects = object_types.len();
    let mlp = model.mlp.as_ref().expect("mlp_eval_successors requires an MLP model");

    // Precondition-only schemas over the active slots of each action.
    let derived: Vec<_> = (0..domain.schemas.len())
        .map(|a| derive_schema(model, a, thresholds))
        .collect();
    let mut pre_domain = domain.clone();
    pre_domain.schemas = derived
        .iter()
        .map(|s| {
            let mut p = s.clone();
            p.add.clear();
            p.del.clear();
            p
        })
        .collect();
    let groundings = match applicable_groundings(state, &pre_domain, object_types, cap) {
        Ok(g) => g,
        Err(DomainError::GroundingLimit { .. }) => return (BTreeSet::new(), true),
        Err(e) => unreachable!("applicable_groundings: {e}"),
    };

    // Parameter position k of action a sits at its k-th active slot.
    let active_slots: Vec<Vec<usize>> = (0..domain.schemas.len())
        .map(|a| {
            let m = model.slots[a];
            match &model.queries {
                Some(q) if model.config.variant != crate::data::Variant::Full => {
                    let w = q.slot_logits[a].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    (0..m).filter(|&i| 1.0 / (1.0 + (-w[i]).exp()) > thresholds.slot).collect()
                }
                _ => (0..m).collect(),
            }
        })
        .collect();

    let adjacency = std::rc::Rc::new(state_to_adjacency(state, r, num_objects).into_dyn());
    let mut out = BTreeSet::new();
    for (ai, binding) in groundings {
        let m = model.slots[ai];
        let mut sel = ndarray::Array2::<f64>::zeros((m, num_objects));
        for (k, &obj) in binding.iter().enumerate() {
            sel[[active_slots[ai][k], obj]] = 1.0;
        }
        let mut tape = Tape::new();
        let vars = mlp.push(&mut tape);
        let sel_v = tape.constant(sel.into_dyn());
        let lifted = lift_state(&mut tape, sel_v, adjacency.clone());
        let logits = mlp_effect_logits(&mut tape, &vars, lifted, ai, r, m);
        let logits_val = tape
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let masks = case_masks(domain, m);
        let probs = case_probs_plain(&logits_val, &masks.keep, &masks.pin);

        let mut next = state.atoms.clone();
        let slot_obj = |slot: usize| active_slots[ai].iter().position(|&s| s == slot).map(|k| binding[k]);
        for p in 0..r {
            for i in 0..m {
                for j in 0..m {
                    if domain.predicates[p].arity == 1 && i != j {
                        continue;
                    }
                    let (Some(oi), Some(oj)) = (slot_obj(i), slot_obj(j)) else { continue };
                    if probs[[p, i, j, CASE_DEL]] > 0.5 {
                        next.remove(&(p, oi, oj));
                    }
                    if probs[[p, i, j, CASE_ADD]] > 0.5 {
                        next.insert((p, oi, oj));
                    }
                }
            }
        }
        out.insert(GroundState { atoms: next });
    }
    (out, false)
}

/// Evaluate an MLP-effects model against ground truth.
pub fn evaluate_mlp(
    model: &ModelState,
    thresholds: DerivationThresholds,
    truth: &LiftedDomain,
    states: &[(usize, GroundState)],
    object_types: &[Vec<Option<usize>>],
    cap: usize,
) -> EvaluationReport {
    evaluate_with(
        |s, inst| mlp_eval_successors(s, model, thresholds, &object_types[inst], cap),
        truth,
        states,
        object_types,
        cap,
    )
}

// ---------------------------------------------------------------------------
// Schema diff

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LiteralKind {
    PrePos,
    PreNeg,
    Add,
    Del,
}

type Literal = (LiteralKind, LiftedAtom);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaDiffEntry {
    pub name: String,
    /// learned parameter index -> truth parameter index under the best alignment
    pub alignment: Vec<Option<usize>>,
    pub arity_mismatch: bool,
    pub common: Vec<String>,
    pub learned_only: Vec<String>,
    pub truth_only: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffReport {
    pub entries: Vec<SchemaDiffEntry>,
}

fn literals(schema: &crate::domain::ActionSchema) -> Vec<Literal> {
    let mut out = Vec::new();
    out.extend(schema.pre_pos.iter().map(|a| (LiteralKind::PrePos, a.clone())));
    out.extend(schema.pre_neg.iter().map(|a| (LiteralKind::PreNeg, a.clone())));
    out.extend(schema.add.iter().map(|a| (LiteralKind::Add, a.clone())));
    out.extend(schema.del.iter().map(|a| (LiteralKind::Del, a.clone())));
    out
}

fn remap(lit: &Literal, map: &[Option<usize>]) -> Option<Literal> {
    let args: Option<Vec<usize>> = lit.1.args.iter().map(|&v| map[v]).collect();
    args.map(|args| (lit.0, LiftedAtom { predicate: lit.1.predicate, args }))
}

/// All injective maps from `k` learned variables into `n` truth variables,
/// in lexicographic order.
fn injective_maps(k: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(k: usize, n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in 0..n {
            if !used[v] {
                used[v] = true;
                cur.push(v);
                rec(k, n, cur, used, out);
                cur.pop();
                used[v] = false;
            }
        }
    }
    rec(k, n, &mut cur, &mut used, &mut out);
    out
}

fn literal_display(domain: &LiftedDomain, lit: &Literal) -> String {
    let name = &domain.predicates[lit.1.predicate].name;
    let args: Vec<String> = lit.1.args.iter().map(|&v| format!("?x{}", v + 1)).collect();
    let atom = format!("({} {})", name, args.join(" "));
    match lit.0 {
        LiteralKind::PrePos => format!("pre  {atom}"),
        LiteralKind::PreNeg => format!("pre  (not {atom})"),
        LiteralKind::Add => format!("add  {atom}"),
        LiteralKind::Del => format!("del  {atom}"),
    }
}

/// Align learned and truth variables per action (exhaustive injective search,
/// ≤ M! candidates) and report literal sets under the best alignment.
/// Actions are matched by name with an optional `learned_` prefix stripped.
pub fn schema_diff(learned: &LiftedDomain, truth: &LiftedDomain) -> DiffReport {
    let mut entries = Vec::new();
    for ls in &learned.schemas {
        let base = ls.name.strip_prefix("learned_").unwrap_or(&ls.name);
        let Some(ts) = truth.schemas.iter().find(|t| t.name == base) else { continue };

        // Align the smaller parameter list into the larger one.
        let (k, n, learned_into_truth) = if ls.arity <= ts.arity {
            (ls.arity, ts.arity, true)
        } else {
            (ts.arity, ls.arity, false)
        };
        let l_lits = literals(ls);
        let t_lits: BTreeSet<Literal> = literals(ts).into_iter().collect();

        let mut best: Option<(usize, Vec<Option<usize>>)> = None;
        for map in injective_maps(k, n) {
            // expand into a learned->truth map (None for unaligned learned vars)
            let full: Vec<Option<usize>> = if learned_into_truth {
                map.iter().map(|&v| Some(v)).collect()
            } else {
                let mut inv = vec![None; ls.arity];
                for (t_var, &l_var) in map.iter().enumerate() {
                    inv[l_var] = Some(t_var);
                }
                inv
            };
            let score = l_lits
                .iter()
                .filter(|l| remap(l, &full).is_some_and(|m| t_lits.contains(&m)))
                .count();
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, full));
            }
        }
        let (_, alignment) = best.unwrap_or((0, vec![None; ls.arity]));

        let mut common = Vec::new();
        let mut learned_only = Vec::new();
        let mut matched: BTreeSet<Literal> = BTreeSet::new();
        for l in &l_lits {
            match remap(l, &alignment) {
                Some(m) if t_lits.contains(&m) => {
                    matched.insert(m.clone());
                    common.push(literal_display(truth, &m));
                }
                _ => learned_only.push(literal_display(learned, l)),
            }
        }
        let truth_only: Vec<String> = t_lits
            .iter()
            .filter(|t| !matched.contains(t))
            .map(|t| literal_display(truth, t))
            .collect();

        entries.push(SchemaDiffEntry {
            name: base.to_string(),
            arity_mismatch: ls.arity != ts.arity,
            alignment,
            common,
            learned_only,
            truth_only,
        });
    }
    DiffReport { entries }
}

/// Render a diff report as annotated text.
pub fn render_diff(report: &DiffReport) -> String {
    let mut out = String::new();
    for e in &report.entries {
        out.push_str(&format!("action {}", e.name));
        if e.arity_mismatch {
            out.push_str("  [arity mismatch]");
        }
        out.push('\n');
        let align: Vec<String> = e
            .alignment
            .iter()
            .enumerate()
            .map(|(l, t)| match t {
                Some(t) => format!("?x{}→?x{}", l + 1, t + 1),
                None => format!("?x{}→·", l + 1),
            })
            .collect();
        out.push_str(&format!("  alignment: {}\n", align.join(" ")));
        for (label, lits) in
            [("common", &e.common), ("learned only", &e.learned_only), ("truth only", &e.truth_only)]
        {
            for l in lits {
                out.push_str(&format!("  {label:12} {l}\n"));
            }
        }
    }
    out
}
