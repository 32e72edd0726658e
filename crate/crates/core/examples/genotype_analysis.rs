//! Similarity matrices and emergence epochs over a 200-epoch baseline search.
//!
//! cargo run --release --example genotype_analysis -- [seed]

use cellsearch::analysis::{emergence_epochs, similarity_matrix, Representation, DEFAULT_CHECKPOINTS};
use cellsearch::backbone::{generate_dataset, pretrain_backbone, DataConfig, PretrainConfig};
use cellsearch::search::{run_search, SearchConfig, SearchMode};

fn main() -> cellsearch::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = generate_dataset(seed, &DataConfig::default())?;
    let (backbone, _) = pretrain_backbone(&data, &PretrainConfig::default(), seed)?;
    let config = SearchConfig {
        mode: SearchMode::Baseline,
        seed,
        ..SearchConfig::default()
    };
    let result = run_search(config, &backbone, &data)?;
    let spec = config.cell;
    let traj = &result.trajectory;

    for rep in Representation::ALL {
        let m = similarity_matrix(&spec, traj, rep, &DEFAULT_CHECKPOINTS)?;
        println!("{rep} similarity:");
        let mut out = Vec::new();
        m.write_csv(&mut out).expect("write to memory");
        for line in String::from_utf8_lossy(&out).lines() {
            let cells: Vec<String> = line
                .split(',')
                .map(|c| match c.parse::<usize>() {
                    Ok(_) => c.to_string(),
                    Err(_) => c.parse::<f64>().map_or(c.to_string(), |v| format!("{v:.3}")),
                })
                .collect();
            println!("  {}", cells.join("\t"));
        }
    }

    let em = emergence_epochs(&spec, traj, &result.genotype, config.warmup_epochs + 1, config.max_epochs)?;
    println!("emergence of the final cell (first epoch in top-k):");
    for e in &em.edges {
        println!(
            "  {} -> {} {:<14} top3 {:>3}  top2 {:>3}  top1 {:>3}",
            e.src, e.dst, e.op.to_string(), e.top3.epoch, e.top2.epoch, e.top1.epoch
        );
    }
    println!(
        "medians: top3 {} top2 {} top1 {}; edges fixed first at {} and for good from {}",
        em.median_top3, em.median_top2, em.median_top1, em.edges_first.epoch, em.edges_persistent.epoch
    );
    Ok(())
}
