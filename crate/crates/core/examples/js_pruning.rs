//! Stability pruning on a synthetic architecture trajectory: alpha and beta
//! drift toward fixed targets and the pruner removes ops once an edge's
//! importance distribution stops moving.
//!
//! cargo run --release --example js_pruning -- [theta0] [seed]

use std::collections::BTreeMap;

use cellsearch::cell::{ArchParams, CellSpec, NUM_OPS};
use cellsearch::pruner::{finalize_edges, is_converged, ImportanceState, PrunerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cellsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let theta0: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(PrunerConfig::default().theta0);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CellSpec::default();
    let config = PrunerConfig {
        theta0,
        ..PrunerConfig::default()
    };
    config.validate()?;

    let target_alpha: Vec<f64> = (0..spec.genotype_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target_beta: Vec<f64> = (0..spec.n_edges()).map(|_| rng.gen_range(0.2..1.0)).collect();
    let mut arch = ArchParams::new(spec.n_edges());
    let mut state = ImportanceState::new(spec.n_edges(), config);
    println!("theta0 = {theta0}");
    for epoch in 1..=200 {
        for (a, t) in arch.alpha.iter_mut().zip(&target_alpha) {
            *a += 0.1 * (t - *a) + rng.gen_range(-0.002..0.002);
        }
        for (b, t) in arch.beta.iter_mut().zip(&target_beta) {
            *b += 0.1 * (t - *b);
        }
        let report = state.check_epoch(&spec, &mut arch, epoch)?;
        let active: usize = (0..spec.n_edges()).map(|e| arch.n_active_ops(e)).sum();
        let max_js = report.edges.iter().filter_map(|c| c.js).fold(0.0, f64::max);
        let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
        for e in &report.events {
            *kinds.entry(e.kind.to_string()).or_default() += 1;
        }
        let kinds: Vec<String> = kinds.iter().map(|(k, n)| format!("{k} x{n}")).collect();
        println!(
            "epoch {epoch:>3}: max JS {max_js:.2e}, {active:>2}/{} ops active, events [{}]",
            spec.n_edges() * NUM_OPS,
            kinds.join(", ")
        );
        if is_converged(&arch) {
            let (genotype, events, _) = finalize_edges(&spec, &mut arch, epoch)?;
            println!("converged; {} edges dropped to reach two inputs per node", events.len());
            for e in &genotype.edges {
                println!("  {} -> {}: {}", e.src, e.dst, e.op);
            }
            return Ok(());
        }
    }
    println!("no convergence within 200 epochs");
    Ok(())
}
