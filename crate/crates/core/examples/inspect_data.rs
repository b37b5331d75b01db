//! Loads the MNIST IDX files, prints their sizes and class counts, and draws
//! one digit before and after a random translation + rotation.
//!
//! ```text
//! cargo run --release -p simplecnn --example inspect_data [index] [seed]
//! ```

use simplecnn::data::idx::IMAGE_SIDE;
use simplecnn::data::{apply_affine, data_dir, sample_affine, AugmentConfig, RawDataset};
use simplecnn::rng::seeded;

fn draw(pixels: &[f32]) {
    for row in pixels.chunks(IMAGE_SIDE) {
        let line: String = row
            .iter()
            .map(|&p| match p {
                p if p > 170.0 => '#',
                p if p > 85.0 => '+',
                p if p > 20.0 => '.',
                _ => ' ',
            })
            .collect();
        println!("|{line}|");
    }
}

fn main() -> simplecnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let index: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let dir = data_dir();
    let train = RawDataset::load_train(&dir)?;
    let test = RawDataset::load_test(&dir)?;
    println!("train: {} images, test: {} images, {IMAGE_SIDE}x{IMAGE_SIDE}", train.len(), test.len());
    let mut counts = [0usize; 10];
    for &l in train.labels() {
        counts[l as usize] += 1;
    }
    println!("train class counts: {counts:?}");
    println!("first test labels: {:?}", &test.labels()[..10]);

    let image: Vec<f32> = train.image(index).iter().map(|&p| p as f32).collect();
    println!("\ntrain[{index}], label {}", train.label(index));
    draw(&image);

    let params = sample_affine(&mut seeded(seed), &AugmentConfig::default());
    println!("\nshift ({}, {}) px, rotation {:.1} deg", params.dx, params.dy, params.theta);
    draw(&apply_affine(&image, params));
    Ok(())
}
