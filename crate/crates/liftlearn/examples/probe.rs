//! Quick training probe: train one configuration and print loss curves, the
//! final slot activations, the extracted PDDL, the diff against ground truth,
//! and held-out successor-set metrics.
//!
//! Usage: `probe [full|strips+|names] [steps] [preset] [seed] [t_max] [noise]`

use liftlearn::data::{bfs_sample_states, inject_noise, random_walk_collect, Variant};
use liftlearn::eval::{evaluate, render_diff, schema_diff};
use liftlearn::extract::{derive_domain, emit_pddl, DerivationThresholds};
use liftlearn::pddl::object_type_indices;
use liftlearn::presets::preset;
use liftlearn::train::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = match args.get(1).map(|s| s.as_str()) {
        Some("full") => Variant::Full,
        Some("strips+") => Variant::StripsPlus,
        _ => Variant::NamesOnly,
    };
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let dom = args.get(3).map(|s| s.as_str()).unwrap_or("blocks3");
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t_max: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(200);
    let noise: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let p = preset(dom).unwrap();
    let (domain, train, test) = p.parse().unwrap();
    let mut bounds = p.bounds;
    if noise > 0.0 {
        bounds.train_min = bounds.train_min.max(200);
    }
    let mut traces = random_walk_collect(&train, &domain, variant, bounds, 1_000_000, seed).unwrap();
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f697365);
        let num_objects = traces.objects.len();
        for t in traces.train.iter_mut().chain(traces.val.iter_mut()) {
            *t = inject_noise(t, &domain, num_objects, noise, &mut rng);
        }
    }
    println!("train={} val={}", traces.train.len(), traces.val.len());
    let mut cfg = TrainConfig::new(variant, p.alpha, seed);
    if noise > 0.0 {
        cfg = cfg.with_noise_adjustments();
    }
    cfg.steps = steps;
    cfg.sinkhorn_t_max = t_max;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&domain, &traces, cfg).unwrap();
    println!("prep: {:?}", t0.elapsed());
    let t0 = Instant::now();
    trainer
        .run(500, &mut |m| {
            if m.step % 100 == 0 || m.step + 1 == steps {
                println!(
                    "step {} L_main={:.5} L_aux={:.4} tau={:.3} |gm|={:.4} |ga|={:.4} val={:?}",
                    m.step, m.l_main, m.l_aux, m.tau, m.grad_main_norm, m.grad_aux_norm, m.val_l_main
                );
            }
        })
        .unwrap();
    let dt = t0.elapsed();
    println!("{} steps in {:?} ({:?}/step)", steps, dt, dt / steps as u32);
    if let Some(q) = &trainer.model.queries {
        for (a, w) in q.slot_logits.iter().enumerate() {
            let probs: Vec<String> =
                w.iter().map(|&x| format!("{:.3}", 1.0 / (1.0 + (-x).exp()))).collect();
            println!("sigma(w) {}: [{}]", domain.schemas[a].name, probs.join(", "));
        }
    }

    let thresholds =
        if noise > 0.0 { DerivationThresholds::noisy() } else { DerivationThresholds::default() };
    let learned = derive_domain(&trainer.model, thresholds);
    println!("{}", emit_pddl(&learned));
    println!("{}", render_diff(&schema_diff(&learned, &domain)));

    let types: Vec<Vec<Option<usize>>> =
        test.iter().map(|i| object_type_indices(i, &domain)).collect();
    let t0 = Instant::now();
    let (states, _) = bfs_sample_states(&test, &domain, 1500, 1_000_000).unwrap();
    let report = evaluate(&learned, &domain, &states, &types, 1_000_000);
    println!(
        "eval: {} states, P={:.4} R={:.4} sound={} complete={} excluded={} ({:?})",
        states.len(),
        report.precision,
        report.recall,
        report.sound,
        report.complete,
        report.excluded,
        t0.elapsed()
    );
}
