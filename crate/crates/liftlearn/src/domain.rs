//! Lifted STRIPS domain representation and ground transition semantics.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A ground atom `p_r(o_i, o_j)` by indices. Unary atoms are stored with `i == j`.
pub type Atom = (usize, usize, usize);

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("precondition violated: {atom} of {action}")]
    PreconditionViolation { action: String, atom: String },
    #[error("non-injective binding for action {0}")]
    NonInjectiveBinding(String),
    #[error("binding arity mismatch for action {0}: expected {1}, got {2}")]
    BindingArity(String, usize, usize),
    #[error("grounding limit exceeded: {candidates} candidate bindings > cap {cap}")]
    GroundingLimit { candidates: usize, cap: usize },
}

/// Predicate signature. Only arities 1 and 2 are supported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateSig {
    pub name: String,
    pub arity: usize,
}

/// An atom over schema variables, e.g. `on(x0, x1)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LiftedAtom {
    pub predicate: usize,
    pub args: Vec<usize>,
}

impl LiftedAtom {
    pub fn unary(predicate: usize, x: usize) -> Self {
        LiftedAtom { predicate, args: vec![x] }
    }
    pub fn binary(predicate: usize, x: usize, y: usize) -> Self {
        LiftedAtom { predicate, args: vec![x, y] }
    }

    /// Ground this atom with a variable binding, in `(r, i, j)` form.
    pub fn ground(&self, binding: &[usize]) -> Atom {
        match self.args.len() {
            1 => (self.predicate, binding[self.args[0]], binding[self.args[0]]),
            2 => (self.predicate, binding[self.args[0]], binding[self.args[1]]),
            n => panic!("unsupported atom arity {n}"),
        }
    }
}

/// Lifted action schema with positive/negative preconditions and add/delete effects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSchema {
    pub name: String,
    pub arity: usize,
    /// Per-parameter type index into `LiftedDomain::types`, `None` if untyped.
    pub param_types: Vec<Option<usize>>,
    pub pre_pos: BTreeSet<LiftedAtom>,
    pub pre_neg: BTreeSet<LiftedAtom>,
    pub add: BTreeSet<LiftedAtom>,
    pub del: BTreeSet<LiftedAtom>,
}

impl ActionSchema {
    pub fn new(name: impl Into<String>, arity: usize) -> Self {
        ActionSchema {
            name: name.into(),
            arity,
            param_types: vec![None; arity],
            pre_pos: BTreeSet::new(),
            pre_neg: BTreeSet::new(),
            add: BTreeSet::new(),
            del: BTreeSet::new(),
        }
    }
}

/// A lifted domain: predicates, object types, and action schemas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftedDomain {
    pub name: String,
    pub predicates: Vec<PredicateSig>,
    pub types: Vec<String>,
    pub schemas: Vec<ActionSchema>,
}

impl LiftedDomain {
    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p.name == name)
    }
    pub fn schema_index(&self, name: &str) -> Option<usize> {
        self.schemas.iter().position(|a| a.name == name)
    }
}

/// A state as a set of ground atoms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct GroundState {
    pub atoms: BTreeSet<Atom>,
}

impl GroundState {
    pub fn from_atoms(atoms: impl IntoIterator<Item = Atom>) -> Self {
        GroundState { atoms: atoms.into_iter().collect() }
    }
    pub fn contains(&self, atom: &Atom) -> bool {
        self.atoms.contains(atom)
    }
    pub fn len(&self) -> usize {
        self.atoms.len()
    }
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// A problem instance: objects, initial state, goal (parsed but unused by learning).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    /// (name, type) pairs in declaration order.
    pub objects: Vec<(String, Option<String>)>,
    pub init: GroundState,
    pub goal: BTreeSet<Atom>,
}

impl Instance {
    pub fn object_count(&self) -> usize {
        self.objects.len()
    }
}

fn format_ground_atom(domain: &LiftedDomain, objects: &[(String, Option<String>)], atom: Atom) -> String {
    let (r, i, j) = atom;
    let p = &domain.predicates[r];
    if p.arity == 1 {
        format!("{}({})", p.name, objects[i].0)
    } else {
        format!("{}({},{})", p.name, objects[i].0, objects[j].0)
    }
}

/// Check whether the grounded preconditions of `schema` hold under `binding`.
/// Returns the first failing grounded atom, if any.
pub fn first_failing_precondition(
    state: &GroundState,
    schema: &ActionSchema,
    binding: &[usize],
) -> Option<(LiftedAtom, bool)> {
    for atom in &schema.pre_pos {
        if !state.contains(&atom.ground(binding)) {
            return Some((atom.clone(), true));
        }
    }
    for atom in &schema.pre_neg {
        if state.contains(&atom.ground(binding)) {
            return Some((atom.clone(), false));
        }
    }
    None
}

/// Apply a ground action: `(state \ Del) ∪ Add`. The input state is unmodified.
pub fn apply_ground_action(
    state: &GroundState,
    schema: &ActionSchema,
    binding: &[usize],
) -> Result<GroundState, DomainError> {
    if binding.len() != schema.arity {
        return Err(DomainError::BindingArity(schema.name.clone(), schema.arity, binding.len()));
    }
    let mut seen = BTreeSet::new();
    for &o in binding {
        if !seen.insert(o) {
            return Err(DomainError::NonInjectiveBinding(schema.name.clone()));
        }
    }
    if let Some((atom, positive)) = first_failing_precondition(state, schema, binding) {
        let desc = if positive {
            format!("{:?}", atom)
        } else {
            format!("not {:?}", atom)
        };
        return Err(DomainError::PreconditionViolation { action: schema.name.clone(), atom: desc });
    }
    let mut next = state.atoms.clone();
    for atom in &schema.del {
        next.remove(&atom.ground(binding));
    }
    for atom in &schema.add {
        next.insert(atom.ground(binding));
    }
    Ok(GroundState { atoms: next })
}

/// Unchecked successor computation, for callers that have already verified applicability.
pub fn successor_unchecked(state: &GroundState, schema: &ActionSchema, binding: &[usize]) -> GroundState {
    let mut next = state.atoms.clone();
    for atom in &schema.del {
        next.remove(&atom.ground(binding));
    }
    for atom in &schema.add {
        next.insert(atom.ground(binding));
    }
    GroundState { atoms: next }
}

/// All injective bindings of all schemas whose grounded preconditions hold in `state`.
/// Deterministic order: schema order, then lexicographic binding.
pub fn applicable_groundings(
    state: &GroundState,
    domain: &LiftedDomain,
    object_types: &[Option<usize>],
    cap: usize,
) -> Result<Vec<(usize, Vec<usize>)>, DomainError> {
    let num_objects = object_types.len();
    let mut out = Vec::new();
    for (ai, schema) in domain.schemas.iter().enumerate() {
        let candidates = (0..schema.arity).try_fold(1usize, |acc, k| {
            acc.checked_mul(num_objects.saturating_sub(k))
        });
        match candidates {
            Some(c) if c <= cap => {}
            _ => {
                return Err(DomainError::GroundingLimit {
                    candidates: candidates.unwrap_or(usize::MAX),
                    cap,
                })
            }
        }
        let mut binding = Vec::with_capacity(schema.arity);
        let mut used = vec![false; num_objects];
        extend_bindings(state, schema, object_types, &mut binding, &mut used, &mut |b| {
            out.push((ai, b.to_vec()));
        });
    }
    Ok(out)
}

/// Recursive binding enumeration with early pruning: a precondition atom is
/// checked as soon as all of its variables are bound.
fn extend_bindings(
    state: &GroundState,
    schema: &ActionSchema,
    object_types: &[Option<usize>],
    binding: &mut Vec<usize>,
    used: &mut [bool],
    emit: &mut dyn FnMut(&[usize]),
) {
    let depth = binding.len();
    if depth == schema.arity {
        emit(binding);
        return;
    }
    let wanted = schema.param_types[depth];
    'next_object: for o in 0..object_types.len() {
        if used[o] {
            continue;
        }
        if let Some(t) = wanted {
            if object_types[o] != Some(t) {
                continue;
            }
        }
        binding.push(o);
        used[o] = true;
        let bound = binding.len();
        for atom in &schema.pre_pos {
            if atom.args.iter().any(|&v| v == bound - 1) && atom.args.iter().all(|&v| v < bound)
                && !state.contains(&atom.ground(binding)) {
                    binding.pop();
                    used[o] = false;
                    continue 'next_object;
                }
        }
        for atom in &schema.pre_neg {
            if atom.args.iter().any(|&v| v == bound - 1) && atom.args.iter().all(|&v| v < bound)
                && state.contains(&atom.ground(binding)) {
                    binding.pop();
                    used[o] = false;
                    continue 'next_object;
                }
        }
        extend_bindings(state, schema, object_types, binding, used, emit);
        binding.pop();
        used[o] = false;
    }
}

/// Render a ground atom for diagnostics.
pub fn atom_display(domain: &LiftedDomain, objects: &[(String, Option<String>)], atom: Atom) -> String {
    format_ground_atom(domain, objects, atom)
}

impl fmt::Display for PredicateSig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.arity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pddl::{parse_domain, parse_problem};
    use crate::presets::preset;

    fn blocks() -> LiftedDomain {
        parse_domain(preset("blocks3").unwrap().domain_text).unwrap()
    }

    /// {clear(a), clear(b), on-table(a), on-table(b), eq(a,a), eq(b,b)}
    fn two_block_state(domain: &LiftedDomain) -> GroundState {
        let clear = domain.predicate_index("clear").unwrap();
        let table = domain.predicate_index("on-table").unwrap();
        let eq = domain.predicate_index("eq").unwrap();
        GroundState::from_atoms([
            (clear, 0, 0),
            (clear, 1, 1),
            (table, 0, 0),
            (table, 1, 1),
            (eq, 0, 0),
            (eq, 1, 1),
        ])
    }

    #[test]
    fn stack_adds_on_and_clears() {
        let domain = blocks();
        let state = two_block_state(&domain);
        let stack = &domain.schemas[domain.schema_index("stack").unwrap()];
        let next = apply_ground_action(&state, stack, &[0, 1]).unwrap();
        let on = domain.predicate_index("on").unwrap();
        let clear = domain.predicate_index("clear").unwrap();
        let table = domain.predicate_index("on-table").unwrap();
        assert!(next.contains(&(on, 0, 1)));
        assert!(!next.contains(&(clear, 1, 1)));
        assert!(!next.contains(&(table, 0, 0)));
        // frame property: everything else is unchanged
        assert!(next.contains(&(clear, 0, 0)));
        assert!(next.contains(&(table, 1, 1)));
    }

    #[test]
    fn newtower_reverses_stack() {
        let domain = blocks();
        let state = two_block_state(&domain);
        let stack = &domain.schemas[domain.schema_index("stack").unwrap()];
        let stacked = apply_ground_action(&state, stack, &[0, 1]).unwrap();
        let newtower = &domain.schemas[domain.schema_index("newtower").unwrap()];
        let back = apply_ground_action(&stacked, newtower, &[0, 1]).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn empty_effects_are_identity() {
        let domain = blocks();
        let state = two_block_state(&domain);
        let noop = ActionSchema::new("noop", 1);
        assert_eq!(apply_ground_action(&state, &noop, &[0]).unwrap(), state);
    }

    #[test]
    fn apply_is_pure_and_rejects_bad_bindings() {
        let domain = blocks();
        let state = two_block_state(&domain);
        let stack = &domain.schemas[domain.schema_index("stack").unwrap()];
        let a = apply_ground_action(&state, stack, &[0, 1]).unwrap();
        let b = apply_ground_action(&state, stack, &[0, 1]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            apply_ground_action(&state, stack, &[0, 0]),
            Err(DomainError::NonInjectiveBinding(_))
        ));
        assert!(matches!(
            apply_ground_action(&state, stack, &[0]),
            Err(DomainError::BindingArity(..))
        ));
        // stacked block is no longer clear: precondition violation
        let stacked = apply_ground_action(&state, stack, &[0, 1]).unwrap();
        assert!(matches!(
            apply_ground_action(&stacked, stack, &[1, 0]),
            Err(DomainError::PreconditionViolation { .. })
        ));
    }

    #[test]
    fn two_block_state_admits_only_stacks() {
        let domain = blocks();
        let state = two_block_state(&domain);
        let got = applicable_groundings(&state, &domain, &[None, None], 1_000).unwrap();
        let stack = domain.schema_index("stack").unwrap();
        assert_eq!(got, vec![(stack, vec![0, 1]), (stack, vec![1, 0])]);
    }

    #[test]
    fn empty_state_has_no_applicable_actions() {
        let domain = blocks();
        let got = applicable_groundings(&GroundState::default(), &domain, &[None, None], 1_000).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn grounding_limit_errors() {
        let p = preset("blocks3").unwrap();
        let domain = parse_domain(p.domain_text).unwrap();
        let inst = parse_problem(p.train_text, &domain).unwrap();
        let types = vec![None; inst.objects.len()];
        assert!(matches!(
            applicable_groundings(&inst.init, &domain, &types, 10),
            Err(DomainError::GroundingLimit { .. })
        ));
    }
}
