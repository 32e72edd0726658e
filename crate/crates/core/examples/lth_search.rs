//! Single-level search with stability pruning on the synthetic task.
//!
//! cargo run --release --example lth_search -- [seed]

use cellsearch::backbone::{generate_dataset, pretrain_backbone, DataConfig, PretrainConfig};
use cellsearch::pruner::PruneKind;
use cellsearch::search::{run_search, SearchConfig, SearchMode};

fn main() -> cellsearch::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = generate_dataset(seed, &DataConfig::default())?;
    let (backbone, pre) = pretrain_backbone(&data, &PretrainConfig::default(), seed)?;
    println!("backbone val dice {:.4}", pre.best_val_dice);

    let config = SearchConfig {
        mode: SearchMode::Lth,
        seed,
        ..SearchConfig::default()
    };
    let result = run_search(config, &backbone, &data)?;
    println!(
        "converged {} after {} epochs in {:.2}s",
        result.converged, result.epochs_used, result.wall_time_secs
    );
    for epoch in config.warmup_epochs + 1..=result.epochs_used {
        let at: Vec<_> = result.events.iter().filter(|e| e.epoch == epoch).collect();
        let removed: usize = at.iter().map(|e| e.ops_removed.len()).sum();
        let outliers = at.iter().filter(|e| e.kind == PruneKind::Outlier).count();
        println!("  epoch {epoch:>3}: {removed:>2} ops removed ({outliers} outlier events)");
    }
    for e in &result.genotype.edges {
        println!("  {} -> {}: {}", e.src, e.dst, e.op);
    }
    for w in &result.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
