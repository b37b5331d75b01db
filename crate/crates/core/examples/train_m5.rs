//! Desk-scale M5 run: 8000 training images, 5 epochs, full augmentation,
//! EMA evaluation on the 10000-image test set after every epoch, and a final
//! evaluation of the raw weights.
//!
//! A run this short is only a few hundred steps, so the 0.999 average is still
//! dominated by the initial weights; the raw weights show what was learned.
//!
//! ```text
//! cargo run --release -p simplecnn --example train_m5 [epochs] [subset] [seed]
//! ```

use std::time::Instant;

use simplecnn::data::{data_dir, RawDataset};
use simplecnn::models::Network;
use simplecnn::trainer::{evaluate, train_run_with, EvalModel, TrainConfig};

fn main() -> simplecnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut next = |default: u64| args.next().and_then(|s| s.parse().ok()).unwrap_or(default);
    let config = TrainConfig {
        epochs: next(5) as usize,
        subset: Some(next(8000) as usize),
        seed: next(1),
        track_train_acc: false,
        out_dir: Some("runs/example_m5".into()),
        ..TrainConfig::default()
    };

    let dir = data_dir();
    let (train, test) = (RawDataset::load_train(&dir)?, RawDataset::load_test(&dir)?);
    let start = Instant::now();
    let outcome = train_run_with(&config, &train, &test, &mut |m| {
        println!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  test(ema) {:.4}  [{:.0?}]",
            m.epoch,
            m.lr,
            m.mean_loss,
            m.test_acc.unwrap_or(f64::NAN),
            start.elapsed()
        );
    })?;
    let last = &outcome.final_checkpoint;
    let raw = evaluate(&EvalModel { net: &Network::from_name(&last.model)?, params: &last.params }, &test, 500)?;
    println!("final raw weights: test {:.4}", raw.accuracy);
    println!("outputs written to runs/example_m5/");
    Ok(())
}
