// temporary probe
use graft_core::harness::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let extend_steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let extend_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let spec = SynthSpec::default();
    let pair = generate_synthetic_pair(&spec).unwrap();
    let cfg = ExperimentConfig { n_seeds: 2, extend_steps, extend_lr, ..ExperimentConfig::default() };
    let t0 = Instant::now();
    let models = prepare_models(&pair, &cfg).unwrap();
    println!("prepare: {:?}; extend loss last {:?}", t0.elapsed(), models.extended_loss.last());
    let outcome = run_extend_experiment(&pair, &cfg, &models, None).unwrap();
    for c in [&outcome.base_target, &outcome.extended_target, &outcome.scratch_target, &outcome.base_source, &outcome.extended_source] {
        println!("{:<18} mean F1 {:.3}  per-seed {:?}", c.condition, c.mean_f1, c.f1_per_seed.iter().map(|f| (f*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
}
