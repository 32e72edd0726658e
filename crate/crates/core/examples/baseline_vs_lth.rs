//! Baseline bilevel search vs single-level search with pruning: search
//! time, then Stage III test Dice for each (reinit vs lth reset) next to the
//! plain identity-skip U-Net.
//!
//! cargo run --release --example baseline_vs_lth -- [seed] [patients] [slices]

use cellsearch::backbone::{evaluate_backbone, generate_dataset, pretrain_backbone, DataConfig, PretrainConfig};
use cellsearch::search::{run_search, train_final, FinalConfig, InitPolicy, SearchConfig, SearchMode};

fn main() -> cellsearch::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seed = args.first().copied().unwrap_or(0);
    let defaults = DataConfig::default();
    let data_cfg = DataConfig {
        n_patients: args.get(1).map_or(defaults.n_patients, |&n| n as usize),
        slices_per_patient: args.get(2).map_or(defaults.slices_per_patient, |&n| n as usize),
        ..defaults
    };
    let data = generate_dataset(seed, &data_cfg)?;
    let (backbone, _) = pretrain_backbone(&data, &PretrainConfig::default(), seed)?;
    let reference = evaluate_backbone(&backbone, &data.test, data.size)?.mean_foreground;
    println!("identity-skip test dice {reference:.4}");

    let base_cfg = SearchConfig {
        seed,
        ..SearchConfig::default()
    };
    let lth = run_search(base_cfg, &backbone, &data)?;
    let baseline = run_search(
        SearchConfig {
            mode: SearchMode::Baseline,
            ..base_cfg
        },
        &backbone,
        &data,
    )?;
    println!(
        "search time: lth {:.2}s ({} epochs), baseline {:.2}s ({} epochs), speed-up {:.1}x",
        lth.wall_time_secs,
        lth.epochs_used,
        baseline.wall_time_secs,
        baseline.epochs_used,
        baseline.wall_time_secs / lth.wall_time_secs
    );

    let final_cfg = FinalConfig::default();
    let spec = base_cfg.cell;
    let lth_final = train_final(
        &backbone,
        &data,
        &spec,
        &lth.genotype,
        &lth.init_snapshot,
        InitPolicy::LthReset,
        Some(&lth.arch),
        &final_cfg,
        seed,
    )?;
    let base_final = train_final(
        &backbone,
        &data,
        &spec,
        &baseline.genotype,
        &baseline.init_snapshot,
        InitPolicy::Reinit,
        Some(&baseline.arch),
        &final_cfg,
        seed,
    )?;
    println!(
        "stage III test dice: lth {:.4} (best epoch {}), baseline {:.4} (best epoch {})",
        lth_final.test_dice, lth_final.best_epoch, base_final.test_dice, base_final.best_epoch
    );
    Ok(())
}
