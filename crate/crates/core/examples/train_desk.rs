//! Train a reduced-width model on the synthetic three-site dataset, saving
//! checkpoints and the loss log.
//!
//! ```text
//! cargo run --release --example train_desk -- [iterations] [out_dir]
//! ```

mod common;

use std::path::PathBuf;
use std::time::Instant;

use harmon::nets::ModelConfig;
use harmon::train::{train, TrainConfig, Trainer, CHECKPOINT_DIR, FINAL_CHECKPOINT};

fn main() -> harmon::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("harmon-desk"));

    let data = common::splits(20, 0, 0)?.train;
    println!("{} training triplets", data.len());

    let cfg = TrainConfig {
        model: ModelConfig { n_sites: 3, canvas: common::CANVAS, width_mult: 0.125, res_blocks: 4 },
        batch_size: 4,
        iterations,
        checkpoint_every: 500,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    let reports = train(&mut trainer, &data, Some(&out), None)?;
    let secs = start.elapsed().as_secs_f64();
    println!("{iterations} iterations in {secs:.1}s ({:.3}s/it)", secs / iterations.max(1) as f64);
    for r in reports.iter().step_by((reports.len() / 10).max(1)).chain(reports.last()) {
        println!(
            "it {:>6}  G {:.4}  D {:.4}  cyc {:.4}  id {:.4}  nash {:.3}",
            r.iteration, r.total_g, r.total_d, r.cyc, r.id, r.nash
        );
    }
    println!("final checkpoint: {}", out.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT).display());
    Ok(())
}
