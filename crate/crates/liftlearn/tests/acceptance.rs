//! End-to-end acceptance runs: train on generated traces and check that the
//! extracted domains reproduce the ground-truth successor sets on held-out
//! instances. One test per criterion; each prints a PASS/FAIL line (visible
//! with `--nocapture` / `--show-output`). These are by far the slowest tests
//! in the workspace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use liftlearn::data::{bfs_sample_states, inject_noise, random_walk_collect, Variant};
use liftlearn::eval::{evaluate, evaluate_mlp, EvaluationReport, DEFAULT_GROUNDING_CAP};
use liftlearn::extract::{derive_domain, DerivationThresholds};
use liftlearn::pddl::object_type_indices;
use liftlearn::presets::preset;
use liftlearn::train::{TrainConfig, Trainer};

const TEST_STATES: usize = 1500;

#[derive(Clone, Copy)]
struct RunSpec {
    preset: &'static str,
    variant: Variant,
    seed: u64,
    steps: usize,
    noise: f64,
    mlp: bool,
}

impl RunSpec {
    fn new(preset: &'static str, variant: Variant, seed: u64, steps: usize) -> Self {
        RunSpec { preset, variant, seed, steps, noise: 0.0, mlp: false }
    }
}

fn run(spec: &RunSpec) -> EvaluationReport {
    let p = preset(spec.preset).unwrap();
    let (domain, train, test) = p.parse().unwrap();

    let mut bounds = p.bounds;
    if spec.noise > 0.0 {
        bounds.train_min = bounds.train_min.max(200);
    }
    let mut traces = random_walk_collect(
        &train,
        &domain,
        spec.variant,
        bounds,
        DEFAULT_GROUNDING_CAP,
        spec.seed,
    )
    .unwrap();
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f697365);
        let num_objects = traces.objects.len();
        for t in traces.train.iter_mut().chain(traces.val.iter_mut()) {
            *t = inject_noise(t, &domain, num_objects, spec.noise, &mut rng);
        }
    }

    let mut cfg = TrainConfig::new(spec.variant, p.alpha, spec.seed);
    if spec.noise > 0.0 {
        cfg = cfg.with_noise_adjustments();
    }
    cfg.mlp_effects = spec.mlp;
    cfg.steps = spec.steps;
    let mut trainer = Trainer::new(&domain, &traces, cfg).unwrap();
    trainer.run(usize::MAX, &mut |_| {}).unwrap();

    let thresholds = if spec.noise > 0.0 {
        DerivationThresholds::noisy()
    } else {
        DerivationThresholds::default()
    };
    let (states, _) = bfs_sample_states(&test, &domain, TEST_STATES, DEFAULT_GROUNDING_CAP).unwrap();
    let types: Vec<Vec<Option<usize>>> =
        test.iter().map(|i| object_type_indices(i, &domain)).collect();
    if spec.mlp {
        evaluate_mlp(&trainer.model, thresholds, &domain, &states, &types, DEFAULT_GROUNDING_CAP)
    } else {
        let learned = derive_domain(&trainer.model, thresholds);
        evaluate(&learned, &domain, &states, &types, DEFAULT_GROUNDING_CAP)
    }
}

fn perfect(r: &EvaluationReport) -> bool {
    r.precision == 1.0 && r.recall == 1.0 && !r.timeout
}

/// Runs seeds 0..3 for each spec template, requiring `need` successes per
/// domain. Prints one line per run and a PASS/FAIL line per criterion.
fn check_criterion(
    name: &str,
    specs: &[RunSpec],
    need: usize,
    ok: impl Fn(&EvaluationReport) -> bool,
) {
    let mut all_pass = true;
    for spec in specs {
        let mut hits = 0;
        for seed in 0..3u64 {
            let r = run(&RunSpec { seed, ..*spec });
            let good = ok(&r);
            hits += good as usize;
            println!(
                "  {} {:?} noise={} mlp={} seed={}: P={:.4} R={:.4} excluded={} -> {}",
                spec.preset,
                spec.variant,
                spec.noise,
                spec.mlp,
                seed,
                r.precision,
                r.recall,
                r.excluded,
                if good { "ok" } else { "MISS" }
            );
        }
        if hits < need {
            all_pass = false;
        }
        println!("  {}: {}/3 seeds (need {})", spec.preset, hits, need);
    }
    println!("{}: {}", if all_pass { "PASS" } else { "FAIL" }, name);
    assert!(all_pass, "criterion failed: {name}");
}

#[test]
fn criterion_full_actions_recovery() {
    let specs = [
        RunSpec::new("blocks3", Variant::Full, 0, 2500),
        RunSpec::new("gripper", Variant::Full, 0, 2500),
    ];
    check_criterion(
        "full STRIPS actions: precision = recall = 1.0 on all seeds",
        &specs,
        3,
        perfect,
    );
}

#[test]
fn criterion_names_only_recovery() {
    let specs = [
        RunSpec::new("blocks3", Variant::NamesOnly, 0, 3500),
        RunSpec::new("gripper", Variant::NamesOnly, 0, 3500),
        RunSpec::new("visitall", Variant::NamesOnly, 0, 3500),
    ];
    check_criterion(
        "action names only: precision = recall = 1.0 in >= 2/3 seeds",
        &specs,
        2,
        perfect,
    );
}

#[test]
fn criterion_strips_plus_recovery() {
    let specs = [
        RunSpec::new("miconic", Variant::StripsPlus, 0, 3500),
        RunSpec::new("npuzzle", Variant::StripsPlus, 0, 3500),
    ];
    check_criterion(
        "STRIPS+ actions: precision = recall = 1.0 in >= 2/3 seeds",
        &specs,
        2,
        perfect,
    );
}

#[test]
fn criterion_noise_robustness() {
    let mut level1 = RunSpec::new("blocks3", Variant::NamesOnly, 0, 8000);
    level1.noise = 1.0;
    let mut level2 = level1;
    level2.noise = 2.0;
    check_criterion(
        "noise levels 1 and 2: precision and recall >= 0.95 in >= 2/3 seeds",
        &[level1, level2],
        2,
        |r| r.precision >= 0.95 && r.recall >= 0.95 && !r.timeout,
    );
}

#[test]
fn criterion_mlp_effects_ablation() {
    let mut specs = [
        RunSpec::new("blocks3", Variant::NamesOnly, 0, 3500),
        RunSpec::new("gripper", Variant::NamesOnly, 0, 3500),
        RunSpec::new("miconic", Variant::NamesOnly, 0, 3500),
        RunSpec::new("visitall", Variant::NamesOnly, 0, 3500),
    ];
    for s in &mut specs {
        s.mlp = true;
    }
    check_criterion(
        "MLP-effects ablation: sound and complete in >= 2/3 seeds",
        &specs,
        2,
        |r| r.sound && r.complete && !r.timeout,
    );
}
