//! `liftlearn` command-line pipeline: generate traces, train, extract PDDL,
//! evaluate against ground truth, and run the whole thing over a seed list.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use liftlearn::data::{
    bfs_sample_states, inject_noise, random_walk_collect, read_traces, write_traces, TraceSet,
    Variant, WalkBounds,
};
use liftlearn::domain::{GroundState, Instance, LiftedDomain};
use liftlearn::eval::{
    aggregate_runs, evaluate, evaluate_mlp, render_diff, schema_diff, EvaluationReport,
    DEFAULT_GROUNDING_CAP,
};
use liftlearn::extract::{derive_domain, emit_pddl, DerivationThresholds};
use liftlearn::pddl::{object_type_indices, parse_domain, parse_problem};
use liftlearn::presets::preset;
use liftlearn::train::{ModelState, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "liftlearn", version, about = "Learn lifted STRIPS schemas from traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate random-walk traces for a domain/problem pair.
    Gen(GenArgs),
    /// Train a model on previously generated traces.
    Train(TrainArgs),
    /// Derive symbolic schemas from a checkpoint and emit PDDL.
    Extract(ExtractArgs),
    /// Evaluate a learned domain against ground truth on held-out instances.
    Eval(EvalArgs),
    /// Print a variable-aligned diff between learned and ground-truth schemas.
    Diff(DiffArgs),
    /// Full pipeline (gen → train → extract → eval) over a seed list.
    Run(RunArgs),
}

#[derive(Args, Clone)]
#[derive(Default)]
struct SourceArgs {
    /// Bundled preset name (blocks3, gripper, visitall, miconic, npuzzle).
    #[arg(long, conflicts_with_all = ["domain", "problem", "problems"])]
    preset: Option<String>,
    /// Ground-truth domain file.
    #[arg(long)]
    domain: Option<PathBuf>,
    /// Training problem file.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Held-out test problem files.
    #[arg(long, value_delimiter = ',')]
    problems: Vec<PathBuf>,
}

struct Source {
    domain: LiftedDomain,
    train: Instance,
    test: Vec<Instance>,
    bounds: WalkBounds,
    alpha: f64,
}

#[derive(Args, Clone)]
struct GenArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "names")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise level: expected number of flipped atoms per transition.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Directory containing traces.txt; receives model.ckpt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise level the traces were generated with (switches to the
    /// noise-adjusted training configuration when > 0).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    mlp_effects: bool,
    /// Auxiliary-loss weight; defaults to the preset value or 1.0.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Clone)]
struct ExtractArgs {
    /// Directory containing model.ckpt; receives learned.pddl.
    #[arg(long)]
    out: PathBuf,
    /// Atom threshold for schema derivation.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Directory containing learned.pddl / model.ckpt; receives metrics.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    test_states: usize,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Clone)]
struct DiffArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Directory containing learned.pddl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML experiment config; command-line flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    variant: Option<Variant>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    mlp_effects: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    test_states: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}


/// TOML mirror of the run flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    domain: Option<PathBuf>,
    problem: Option<PathBuf>,
    #[serde(default)]
    problems: Vec<PathBuf>,
    variant: Option<String>,
    #[serde(default)]
    seeds: Vec<u64>,
    noise: Option<f64>,
    mlp_effects: Option<bool>,
    alpha: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    out: Option<PathBuf>,
    test_states: Option<usize>,
    threshold: Option<f64>,
}

fn fail(msg: impl std::fmt::Display) -> std::io::Error {
    std::io::Error::other(msg.to_string())
}

const DEFAULT_BOUNDS: WalkBounds =
    WalkBounds { train_min: 100, train_max: 1000, val_min: 50, val_max: 500 };
const NOISE_TRAIN_MIN: usize = 200;

impl SourceArgs {
    fn load(&self) -> std::io::Result<Source> {
        if let Some(name) = &self.preset {
            let p = preset(name).ok_or_else(|| fail(format!("unknown preset '{name}'")))?;
            let (domain, train, test) = p.parse().map_err(fail)?;
            return Ok(Source { domain, train, test, bounds: p.bounds, alpha: p.alpha });
        }
        let domain_path =
            self.domain.as_ref().ok_or_else(|| fail("either --preset or --domain is required"))?;
        let problem_path =
            self.problem.as_ref().ok_or_else(|| fail("--problem is required with --domain"))?;
        let domain = parse_domain(&fs::read_to_string(domain_path)?).map_err(fail)?;
        let train = parse_problem(&fs::read_to_string(problem_path)?, &domain).map_err(fail)?;
        let mut test = Vec::new();
        for path in &self.problems {
            test.push(parse_problem(&fs::read_to_string(path)?, &domain).map_err(fail)?);
        }
        Ok(Source { domain, train, test, bounds: DEFAULT_BOUNDS, alpha: 1.0 })
    }
}

fn generate(src: &Source, variant: Variant, seed: u64, noise: f64) -> std::io::Result<TraceSet> {
    let mut bounds = src.bounds;
    if noise > 0.0 {
        bounds.train_min = bounds.train_min.max(NOISE_TRAIN_MIN);
    }
    let mut traces =
        random_walk_collect(&src.train, &src.domain, variant, bounds, DEFAULT_GROUNDING_CAP, seed)
            .map_err(fail)?;
    if noise > 0.0 {
        use rand::SeedableRng;
        // separate stream from the walk so noise doesn't perturb trace content
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f697365);
        let num_objects = traces.objects.len();
        for t in traces.train.iter_mut().chain(traces.val.iter_mut()) {
            *t = inject_noise(t, &src.domain, num_objects, noise, &mut rng);
        }
    }
    Ok(traces)
}

fn cmd_gen(args: &GenArgs) -> std::io::Result<()> {
    let src = args.source.load()?;
    let traces = generate(&src, args.variant, args.seed, args.noise)?;
    fs::create_dir_all(&args.out)?;
    let mut file = std::io::BufWriter::new(fs::File::create(args.out.join("traces.txt"))?);
    write_traces(&mut file, &traces, &src.domain).map_err(fail)?;
    file.flush()?;
    let (tr, va) = traces.per_action_counts(src.domain.schemas.len());
    println!("wrote {} train / {} val transitions ({:?} / {:?})", traces.train.len(), traces.val.len(), tr, va);
    Ok(())
}

fn build_config(src: &Source, args: &TrainArgs, variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant, args.alpha.unwrap_or(src.alpha), args.seed);
    if args.noise > 0.0 {
        cfg = cfg.with_noise_adjustments();
    }
    cfg.mlp_effects = args.mlp_effects;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.batch {
        cfg.batch = b;
    }
    cfg
}

fn cmd_train(args: &TrainArgs) -> std::io::Result<()> {
    let src = args.source.load()?;
    let file = BufReader::new(fs::File::open(args.out.join("traces.txt"))?);
    let traces = read_traces(file, &src.domain).map_err(fail)?;
    let cfg = build_config(&src, args, traces.variant);
    let steps = cfg.steps;
    let mut trainer = Trainer::new(&src.domain, &traces, cfg).map_err(fail)?;
    trainer
        .run(500, &mut |m| {
            if m.step % 500 == 0 || m.step + 1 == steps {
                println!(
                    "step {:>5}  L_main {:.5}  L_aux {:.4}  tau {:.3}  val {}",
                    m.step,
                    m.l_main,
                    m.l_aux,
                    m.tau,
                    m.val_l_main.map_or("-".into(), |v| format!("{v:.5}")),
                );
            }
        })
        .map_err(fail)?;
    trainer.model.save(&args.out.join("model.ckpt"))?;
    println!("saved checkpoint after {} steps", trainer.model.step);
    Ok(())
}

fn thresholds_for(override_: Option<f64>) -> DerivationThresholds {
    let mut t = DerivationThresholds::default();
    if let Some(a) = override_ {
        t.atom = a;
    }
    t
}

fn cmd_extract(args: &ExtractArgs) -> std::io::Result<()> {
    let model = ModelState::load(&args.out.join("model.ckpt"))?;
    let learned = derive_domain(&model, thresholds_for(args.threshold));
    fs::write(args.out.join("learned.pddl"), emit_pddl(&learned))?;
    println!("wrote learned.pddl ({} actions)", learned.schemas.len());
    Ok(())
}

/// Sampled test states (instance index, state) plus per-instance object types.
type TestStates = (Vec<(usize, GroundState)>, Vec<Vec<Option<usize>>>);

fn test_states_for(src: &Source, total: usize) -> std::io::Result<TestStates> {
    if src.test.is_empty() {
        return Err(fail("no test instances: pass --problems or use a preset"));
    }
    let (states, _) =
        bfs_sample_states(&src.test, &src.domain, total, DEFAULT_GROUNDING_CAP).map_err(fail)?;
    let types = src.test.iter().map(|i| object_type_indices(i, &src.domain)).collect();
    Ok((states, types))
}

fn run_eval(
    src: &Source,
    out: &Path,
    test_states: usize,
    threshold: Option<f64>,
) -> std::io::Result<EvaluationReport> {
    let (states, types) = test_states_for(src, test_states)?;
    let ckpt = out.join("model.ckpt");
    let model = ckpt.exists().then(|| ModelState::load(&ckpt)).transpose()?;
    let report = match &model {
        Some(m) if m.config.mlp_effects => {
            evaluate_mlp(m, thresholds_for(threshold), &src.domain, &states, &types, DEFAULT_GROUNDING_CAP)
        }
        _ => {
            let text = fs::read_to_string(out.join("learned.pddl"))?;
            let learned = parse_domain(&text).map_err(fail)?;
            evaluate(&learned, &src.domain, &states, &types, DEFAULT_GROUNDING_CAP)
        }
    };
    fs::write(out.join("metrics.txt"), render_metrics(&report))?;
    Ok(report)
}

fn render_metrics(r: &EvaluationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "states {}  excluded {}  TP {}  FP {}  FN {}\n",
        r.records.len(),
        r.excluded,
        r.tp,
        r.fp,
        r.fn_
    ));
    out.push_str(&format!(
        "precision {:.4}  recall {:.4}  sound {}  complete {}  timeout {}\n",
        r.precision, r.recall, r.sound, r.complete, r.timeout
    ));
    out.push_str("state tp fp fn\n");
    for rec in &r.records {
        out.push_str(&format!("{} {} {} {}\n", rec.state, rec.tp, rec.fp, rec.fn_));
    }
    out
}

fn cmd_eval(args: &EvalArgs) -> std::io::Result<()> {
    let src = args.source.load()?;
    let report = run_eval(&src, &args.out, args.test_states, args.threshold)?;
    println!(
        "precision {:.4}  recall {:.4}  sound {}  complete {}",
        report.precision, report.recall, report.sound, report.complete
    );
    Ok(())
}

fn cmd_diff(args: &DiffArgs) -> std::io::Result<()> {
    let src = args.source.load()?;
    let text = fs::read_to_string(args.out.join("learned.pddl"))?;
    let learned = parse_domain(&text).map_err(fail)?;
    print!("{}", render_diff(&schema_diff(&learned, &src.domain)));
    Ok(())
}

fn merge_run_args(mut args: RunArgs) -> std::io::Result<RunArgs> {
    let Some(path) = &args.config else { return Ok(args) };
    let file: FileConfig = toml::from_str(&fs::read_to_string(path)?).map_err(fail)?;
    let s = &mut args.source;
    if s.preset.is_none() && s.domain.is_none() {
        s.preset = file.preset;
        s.domain = file.domain;
        s.problem = file.problem;
        s.problems = file.problems;
    }
    if args.variant.is_none() {
        args.variant = file
            .variant
            .map(|v| v.parse::<Variant>().map_err(fail))
            .transpose()?;
    }
    if args.seeds.is_empty() {
        args.seeds = file.seeds;
    }
    args.noise = args.noise.or(file.noise);
    args.mlp_effects = args.mlp_effects || file.mlp_effects.unwrap_or(false);
    args.alpha = args.alpha.or(file.alpha);
    args.steps = args.steps.or(file.steps);
    args.batch = args.batch.or(file.batch);
    args.out = args.out.or(file.out);
    args.test_states = args.test_states.or(file.test_states);
    args.threshold = args.threshold.or(file.threshold);
    Ok(args)
}

fn cmd_run(args: RunArgs) -> std::io::Result<()> {
    let args = merge_run_args(args)?;
    let src = args.source.load()?;
    let out = args.out.clone().ok_or_else(|| fail("--out is required"))?;
    let variant = args.variant.unwrap_or(Variant::NamesOnly);
    let noise = args.noise.unwrap_or(0.0);
    let seeds = if args.seeds.is_empty() { vec![0] } else { args.seeds.clone() };
    let threshold = args.threshold.or((noise > 0.0).then_some(0.75));

    let mut reports = Vec::new();
    for &seed in &seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&seed_dir)?;
        println!("== seed {seed} ==");
        let traces = generate(&src, variant, seed, noise)?;
        let mut file = std::io::BufWriter::new(fs::File::create(seed_dir.join("traces.txt"))?);
        write_traces(&mut file, &traces, &src.domain).map_err(fail)?;
        file.flush()?;

        let train_args = TrainArgs {
            source: args.source.clone(),
            out: seed_dir.clone(),
            seed,
            noise,
            mlp_effects: args.mlp_effects,
            alpha: args.alpha,
            steps: args.steps,
            batch: args.batch,
        };
        let cfg = build_config(&src, &train_args, variant);
        let steps = cfg.steps;
        let mut trainer = Trainer::new(&src.domain, &traces, cfg).map_err(fail)?;
        trainer
            .run(500, &mut |m| {
                if m.step % 500 == 0 || m.step + 1 == steps {
                    println!(
                        "step {:>5}  L_main {:.5}  L_aux {:.4}  tau {:.3}  val {}",
                        m.step,
                        m.l_main,
                        m.l_aux,
                        m.tau,
                        m.val_l_main.map_or("-".into(), |v| format!("{v:.5}")),
                    );
                }
            })
            .map_err(fail)?;
        trainer.model.save(&seed_dir.join("model.ckpt"))?;

        let thresholds = thresholds_for(threshold);
        let learned = derive_domain(&trainer.model, thresholds);
        fs::write(seed_dir.join("learned.pddl"), emit_pddl(&learned))?;

        let report = run_eval(&src, &seed_dir, args.test_states.unwrap_or(1500), threshold)?;
        println!(
            "seed {seed}: precision {:.4}  recall {:.4}  sound {}  complete {}",
            report.precision, report.recall, report.sound, report.complete
        );
        reports.push(report);
    }

    let agg = aggregate_runs(&reports).map_err(fail)?;
    let mut summary = String::new();
    summary.push_str(&format!(
        "runs {}  N_s {}  N_c {}  N_sc {}\n",
        reports.len(),
        agg.n_s,
        agg.n_c,
        agg.n_sc
    ));
    summary.push_str(&format!(
        "mean precision {:.4}  mean recall {:.4}\n",
        agg.mean_precision, agg.mean_recall
    ));
    for (seed, r) in seeds.iter().zip(&reports) {
        summary.push_str(&format!(
            "seed {seed}: precision {:.4} recall {:.4} sound {} complete {}\n",
            r.precision, r.recall, r.sound, r.complete
        ));
    }
    fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Diff(a) => cmd_diff(&a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
