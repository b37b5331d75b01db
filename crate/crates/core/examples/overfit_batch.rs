//! Drives M5 to 100% accuracy on one fixed batch of 120 MNIST images.
//!
//! ```text
//! cargo run --release -p simplecnn --example overfit_batch [model] [max_steps]
//! ```

use std::time::Instant;

use simplecnn::data::{clean_batch, data_dir, RawDataset};
use simplecnn::models::Network;
use simplecnn::trainer::{overfit_batch, Trainer};

fn main() -> simplecnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args.next().unwrap_or_else(|| "m5".into());
    let max_steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);

    let train = RawDataset::load_train(&data_dir())?;
    let batch = clean_batch(&train, &(0..120).collect::<Vec<_>>());
    let mut trainer = Trainer::new(Network::from_name(&model)?, 0, 0.999, true);

    let start = Instant::now();
    match overfit_batch(&mut trainer, &batch, 1e-3, max_steps)? {
        Some(steps) => println!("{model}: 120/120 after {steps} steps ({:.1?})", start.elapsed()),
        None => println!("{model}: not fitted within {max_steps} steps ({:.1?})", start.elapsed()),
    }
    Ok(())
}
