//! Trains M3 for a few steps, saves a checkpoint, reloads it, resumes, and
//! checks that the resumed run matches an uninterrupted one bit for bit.
//!
//! ```text
//! cargo run --release -p simplecnn --example checkpoint_roundtrip
//! ```

use simplecnn::data::{clean_batch, data_dir, RawDataset};
use simplecnn::models::{load_checkpoint, save_checkpoint, CheckpointMeta, Network};
use simplecnn::trainer::Trainer;

fn main() -> simplecnn::Result<()> {
    let train = RawDataset::load_train(&data_dir())?;
    let batches: Vec<_> = (0..4)
        .map(|b| clean_batch(&train, &(b * 32..(b + 1) * 32).collect::<Vec<_>>()))
        .collect();

    let mut straight = Trainer::new(Network::from_name("m3")?, 5, 0.999, true);
    for b in &batches {
        straight.train_step(b, 1e-3, 1)?;
    }

    let mut first = Trainer::new(Network::from_name("m3")?, 5, 0.999, true);
    for b in &batches[..2] {
        first.train_step(b, 1e-3, 1)?;
    }
    let path = std::env::temp_dir().join("simplecnn_example.ckpt");
    save_checkpoint(&path, &first.checkpoint(CheckpointMeta { epoch: 1, seed: 5, test_accuracy: None }))?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);

    let mut resumed = Trainer::from_checkpoint(Network::from_name("m3")?, load_checkpoint(&path)?)?;
    for b in &batches[2..] {
        resumed.train_step(b, 1e-3, 1)?;
    }
    let same = resumed.params == straight.params && resumed.ema_view()? == straight.ema_view()?;
    println!("checkpoint {} ({bytes} bytes); resumed run identical: {same}", path.display());
    std::fs::remove_file(&path).ok();
    Ok(())
}
