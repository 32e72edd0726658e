//! Pretrains the toy U-Net on the synthetic task and reports validation Dice.
//!
//! cargo run --release --example pretrain -- [seed] [epochs]

use std::time::Instant;

use cellsearch::backbone::{evaluate_backbone, generate_dataset, pretrain_backbone, DataConfig, PretrainConfig};

fn main() -> cellsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(PretrainConfig::default().epochs);

    let data = generate_dataset(seed, &DataConfig::default())?;
    let start = Instant::now();
    let config = PretrainConfig {
        epochs,
        ..PretrainConfig::default()
    };
    let (net, report) = pretrain_backbone(&data, &config, seed)?;
    for (e, (l, d)) in report.train_loss.iter().zip(&report.val_dice).enumerate() {
        if (e + 1) % 10 == 0 || e == 0 {
            println!("epoch {:>3}  loss {l:.4}  val dice {d:.4}", e + 1);
        }
    }
    let test = evaluate_backbone(&net, &data.test, data.size)?;
    println!(
        "best epoch {} val dice {:.4}, test dice {:.4}, {:.1}s",
        report.best_epoch,
        report.best_val_dice,
        test.mean_foreground,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
