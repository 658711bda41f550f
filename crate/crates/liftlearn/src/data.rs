//! Trace collection: random walks, BFS state sampling, observed-argument
//! reduction, and the line-oriented trace file format.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    applicable_groundings, successor_unchecked, Atom, DomainError, GroundState, Instance, LiftedDomain,
};
use crate::pddl::object_type_indices;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("dead end: no applicable action after {restarts} restarts")]
    DeadEnd { restarts: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace format error: {0}")]
    Format(String),
}

/// The three action-label observation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    StripsPlus,
    NamesOnly,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "strips+" | "strips_plus" => Ok(Variant::StripsPlus),
            "names" | "names_only" => Ok(Variant::NamesOnly),
            other => Err(format!("unknown variant `{other}` (expected full | strips+ | names)")),
        }
    }
}

/// One labeled transition. `observed_args` is the variant-dependent visible
/// part of the binding; `full_binding` is generation-side ground truth and is
/// empty when reloaded from a file that hides it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub state: GroundState,
    pub schema: usize,
    pub observed_args: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub full_binding: Vec<usize>,
    pub next_state: GroundState,
}

/// Per-split per-action sample bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WalkBounds {
    pub train_min: usize,
    pub train_max: usize,
    pub val_min: usize,
    pub val_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSet {
    pub domain_name: String,
    pub variant: Variant,
    pub objects: Vec<(String, Option<String>)>,
    pub train: Vec<Transition>,
    pub val: Vec<Transition>,
    /// For the STRIPS+ variant: per schema, the kept parameter positions.
    pub observed_params: Vec<Vec<usize>>,
}

impl TraceSet {
    pub fn per_action_counts(&self, num_schemas: usize) -> (Vec<usize>, Vec<usize>) {
        let mut tr = vec![0; num_schemas];
        let mut va = vec![0; num_schemas];
        for t in &self.train {
            tr[t.schema] += 1;
        }
        for t in &self.val {
            va[t.schema] += 1;
        }
        (tr, va)
    }
}

const RESTART_LIMIT: usize = 1000;

/// Collect training and validation transitions with a uniform random walk from
/// the instance's initial state. The walk stops once every action name has at
/// least its minimum count in both splits; per-action counts are truncated at
/// the maxima. Deterministic for a given seed.
pub fn random_walk_collect(
    instance: &Instance,
    domain: &LiftedDomain,
    variant: Variant,
    bounds: WalkBounds,
    grounding_cap: usize,
    seed: u64,
) -> Result<TraceSet, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = domain.schemas.len();
    let object_types = object_type_indices(instance, domain);

    let mut train: Vec<Transition> = Vec::new();
    let mut val: Vec<Transition> = Vec::new();
    let mut tr_counts = vec![0usize; a];
    let mut va_counts = vec![0usize; a];

    let done = |tr: &[usize], va: &[usize]| {
        tr.iter().all(|&c| c >= bounds.train_min) && va.iter().all(|&c| c >= bounds.val_min)
    };

    let mut state = instance.init.clone();
    let mut restarts = 0usize;
    while !done(&tr_counts, &va_counts) {
        let actions = applicable_groundings(&state, domain, &object_types, grounding_cap)?;
        if actions.is_empty() {
            restarts += 1;
            if restarts > RESTART_LIMIT {
                return Err(DataError::DeadEnd { restarts });
            }
            state = instance.init.clone();
            continue;
        }
        let (schema, binding) = actions[rng.gen_range(0..actions.len())].clone();
        let next = successor_unchecked(&state, &domain.schemas[schema], &binding);
        let transition = Transition {
            state: state.clone(),
            schema,
            observed_args: Vec::new(),
            full_binding: binding,
            next_state: next.clone(),
        };
        // assign to the split whose quota for this action is least filled
        let tr_fill = tr_counts[schema] as f64 / bounds.train_min.max(1) as f64;
        let va_fill = va_counts[schema] as f64 / bounds.val_min.max(1) as f64;
        let to_train = if bounds.val_min == 0 { true } else { tr_fill <= va_fill };
        if to_train && tr_counts[schema] < bounds.train_max {
            tr_counts[schema] += 1;
            train.push(transition);
        } else if !to_train && va_counts[schema] < bounds.val_max {
            va_counts[schema] += 1;
            val.push(transition);
        } else if tr_counts[schema] < bounds.train_max {
            tr_counts[schema] += 1;
            train.push(transition);
        } else if va_counts[schema] < bounds.val_max {
            va_counts[schema] += 1;
            val.push(transition);
        }
        state = next;
    }

    let observed_params = match variant {
        Variant::Full => domain.schemas.iter().map(|s| (0..s.arity).collect()).collect(),
        Variant::NamesOnly => vec![Vec::new(); a],
        Variant::StripsPlus => {
            let states: Vec<&GroundState> = train.iter().chain(val.iter()).map(|t| &t.state).collect();
            (0..a).map(|ai| strips_plus_params(domain, ai, &states)).collect()
        }
    };
    for t in train.iter_mut().chain(val.iter_mut()) {
        t.observed_args = observed_params[t.schema].iter().map(|&k| t.full_binding[k]).collect();
    }

    Ok(TraceSet {
        domain_name: domain.name.clone(),
        variant,
        objects: instance.objects.clone(),
        train,
        val,
        observed_params,
    })
}

/// Minimal set of parameter positions from which all remaining parameters are
/// uniquely determined through positive precondition atoms, judged against the
/// functional dependencies that actually hold in the sampled states.
pub fn strips_plus_params(domain: &LiftedDomain, schema_idx: usize, states: &[&GroundState]) -> Vec<usize> {
    let schema = &domain.schemas[schema_idx];
    let r_count = domain.predicates.len();

    // empirical functionality of each predicate over the observed states
    let mut fwd = vec![true; r_count]; // i determines j
    let mut bwd = vec![true; r_count]; // j determines i
    let mut singleton = vec![true; r_count]; // unary predicate true of exactly one object
    for state in states {
        let mut fwd_seen: HashMap<(usize, usize), usize> = HashMap::new();
        let mut bwd_seen: HashMap<(usize, usize), usize> = HashMap::new();
        let mut uni_count = vec![0usize; r_count];
        for &(r, i, j) in &state.atoms {
            if domain.predicates[r].arity == 1 {
                uni_count[r] += 1;
            } else {
                if *fwd_seen.entry((r, i)).or_insert(j) != j {
                    fwd[r] = false;
                }
                if *bwd_seen.entry((r, j)).or_insert(i) != i {
                    bwd[r] = false;
                }
            }
        }
        for r in 0..r_count {
            if domain.predicates[r].arity == 1 && uni_count[r] != 1 {
                singleton[r] = false;
            }
        }
    }

    let determines_all = |kept: &[usize]| -> bool {
        let mut det = vec![false; schema.arity];
        for &k in kept {
            det[k] = true;
        }
        loop {
            let mut changed = false;
            for atom in &schema.pre_pos {
                match atom.args.as_slice() {
                    [x] => {
                        if singleton[atom.predicate] && !det[*x] {
                            det[*x] = true;
                            changed = true;
                        }
                    }
                    [x, y] => {
                        if fwd[atom.predicate] && det[*x] && !det[*y] {
                            det[*y] = true;
                            changed = true;
                        }
                        if bwd[atom.predicate] && det[*y] && !det[*x] {
                            det[*x] = true;
                            changed = true;
                        }
                    }
                    _ => {}
                }
            }
            if !changed {
                break;
            }
        }
        det.iter().all(|&d| d)
    };

    for size in 0..=schema.arity {
        let mut best: Option<Vec<usize>> = None;
        subsets_of_size(schema.arity, size, &mut |kept| {
            if best.is_none() && determines_all(kept) {
                best = Some(kept.to_vec());
            }
        });
        if let Some(kept) = best {
            return kept;
        }
    }
    (0..schema.arity).collect()
}

fn subsets_of_size(n: usize, k: usize, emit: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, emit: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            emit(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, emit);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::new(), emit);
}

/// Breadth-first sample of up to `total` unique states, interleaved across
/// instances. Returns `(instance index, state)` pairs and whether the
/// reachable space was exhausted before reaching `total`.
pub fn bfs_sample_states(
    instances: &[Instance],
    domain: &LiftedDomain,
    total: usize,
    grounding_cap: usize,
) -> Result<(Vec<(usize, GroundState)>, bool), DataError> {
    let mut queues: Vec<VecDeque<GroundState>> = Vec::new();
    let mut visited: Vec<BTreeSet<GroundState>> = Vec::new();
    let mut out = Vec::new();
    for (idx, inst) in instances.iter().enumerate() {
        let mut q = VecDeque::new();
        q.push_back(inst.init.clone());
        queues.push(q);
        let mut v = BTreeSet::new();
        v.insert(inst.init.clone());
        visited.push(v);
        if out.len() < total {
            out.push((idx, inst.init.clone()));
        }
    }
    let object_types: Vec<Vec<Option<usize>>> =
        instances.iter().map(|i| object_type_indices(i, domain)).collect();

    while out.len() < total {
        let mut any = false;
        for idx in 0..instances.len() {
            if out.len() >= total {
                break;
            }
            let Some(state) = queues[idx].pop_front() else { continue };
            any = true;
            let actions = applicable_groundings(&state, domain, &object_types[idx], grounding_cap)?;
            for (ai, binding) in actions {
                let next = successor_unchecked(&state, &domain.schemas[ai], &binding);
                if visited[idx].insert(next.clone()) {
                    if out.len() < total {
                        out.push((idx, next.clone()));
                    }
                    queues[idx].push_back(next);
                    if out.len() >= total {
                        break;
                    }
                }
            }
        }
        if !any {
            return Ok((out, true)); // reachable space exhausted
        }
    }
    Ok((out, false))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    domain: String,
    variant: Variant,
    predicates: Vec<(String, usize)>,
    objects: Vec<(String, Option<String>)>,
    actions: Vec<String>,
    observed_params: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    split: String,
    state: Vec<Atom>,
    action: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    args: Vec<usize>,
    next_state: Vec<Atom>,
}

/// Write a trace set as one JSON record per line, header first.
pub fn write_traces<W: Write>(w: &mut W, traces: &TraceSet, domain: &LiftedDomain) -> Result<(), DataError> {
    let header = TraceHeader {
        domain: traces.domain_name.clone(),
        variant: traces.variant,
        predicates: domain.predicates.iter().map(|p| (p.name.clone(), p.arity)).collect(),
        objects: traces.objects.clone(),
        actions: domain.schemas.iter().map(|s| s.name.clone()).collect(),
        observed_params: traces.observed_params.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| DataError::Format(e.to_string()))?)?;
    for (split, list) in [("train", &traces.train), ("val", &traces.val)] {
        for t in list {
            let rec = TraceRecord {
                split: split.into(),
                state: t.state.atoms.iter().copied().collect(),
                action: domain.schemas[t.schema].name.clone(),
                args: t.observed_args.clone(),
                next_state: t.next_state.atoms.iter().copied().collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| DataError::Format(e.to_string()))?)?;
        }
    }
    Ok(())
}

/// Read a trace file produced by [`write_traces`].
pub fn read_traces<R: BufRead>(r: R, domain: &LiftedDomain) -> Result<TraceSet, DataError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Format("empty trace file".into()))??;
    let header: TraceHeader =
        serde_json::from_str(&header_line).map_err(|e| DataError::Format(e.to_string()))?;
    let mut traces = TraceSet {
        domain_name: header.domain,
        variant: header.variant,
        objects: header.objects,
        train: Vec::new(),
        val: Vec::new(),
        observed_params: header.observed_params,
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| DataError::Format(e.to_string()))?;
        let schema = domain
            .schema_index(&rec.action)
            .ok_or_else(|| DataError::Format(format!("unknown action {}", rec.action)))?;
        // Only the observed arguments survive serialization; under the fully
        // observed variant that is the whole binding, which training needs.
        let full_binding =
            if traces.variant == Variant::Full { rec.args.clone() } else { Vec::new() };
        let t = Transition {
            state: GroundState::from_atoms(rec.state),
            schema,
            observed_args: rec.args,
            full_binding,
            next_state: GroundState::from_atoms(rec.next_state),
        };
        match rec.split.as_str() {
            "train" => traces.train.push(t),
            "val" => traces.val.push(t),
            other => return Err(DataError::Format(format!("unknown split {other}"))),
        }
    }
    Ok(traces)
}

/// Noise injection: flip randomly chosen atoms in both states of a transition.
///
/// The flip count is Poisson with mean `level`; each flip picks one of the two
/// states, then a relation with probability proportional to
/// `min(#true, #false)` atoms in it, then add-vs-remove with probability 1/2,
/// then a uniform eligible atom. Relations without both true and false atoms
/// are never perturbed, and neither is the materialized `eq` relation: the
/// identity atoms are part of the encoding, not of the observed state.
pub fn inject_noise(
    transition: &Transition,
    domain: &LiftedDomain,
    num_objects: usize,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Transition {
    let mut out = transition.clone();
    if level <= 0.0 {
        return out;
    }
    let flips = sample_poisson(level, rng);
    for _ in 0..flips {
        let target = if rng.gen_bool(0.5) { &mut out.state } else { &mut out.next_state };
        flip_one(target, domain, num_objects, rng);
    }
    out
}

fn flip_one(state: &mut GroundState, domain: &LiftedDomain, num_objects: usize, rng: &mut ChaCha8Rng) {
    let r_count = domain.predicates.len();
    let mut true_counts = vec![0usize; r_count];
    for &(r, _, _) in &state.atoms {
        true_counts[r] += 1;
    }
    let capacity = |r: usize| -> usize {
        if domain.predicates[r].arity == 1 {
            num_objects
        } else {
            num_objects * num_objects
        }
    };
    let eq = domain.predicate_index("eq");
    let weights: Vec<usize> = (0..r_count)
        .map(|r| {
            if eq == Some(r) {
                0
            } else {
                true_counts[r].min(capacity(r) - true_counts[r])
            }
        })
        .collect();
    let total: usize = weights.iter().sum();
    if total == 0 {
        return;
    }
    let mut pick = rng.gen_range(0..total);
    let mut rel = 0;
    for (r, &w) in weights.iter().enumerate() {
        if pick < w {
            rel = r;
            break;
        }
        pick -= w;
    }
    let add = rng.gen_bool(0.5);
    if add {
        let false_count = capacity(rel) - true_counts[rel];
        let mut k = rng.gen_range(0..false_count);
        if domain.predicates[rel].arity == 1 {
            for i in 0..num_objects {
                if !state.atoms.contains(&(rel, i, i)) {
                    if k == 0 {
                        state.atoms.insert((rel, i, i));
                        return;
                    }
                    k -= 1;
                }
            }
        } else {
            for i in 0..num_objects {
                for j in 0..num_objects {
                    if !state.atoms.contains(&(rel, i, j)) {
                        if k == 0 {
                            state.atoms.insert((rel, i, j));
                            return;
                        }
                        k -= 1;
                    }
                }
            }
        }
    } else {
        let k = rng.gen_range(0..true_counts[rel]);
        let atom = *state.atoms.iter().filter(|&&(r, _, _)| r == rel).nth(k).unwrap();
        state.atoms.remove(&atom);
    }
}

fn sample_poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    // Knuth's method; means here are small (≤ 8)
    let l = (-mean).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}
