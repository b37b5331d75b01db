//! Majority voting on a synthetic prediction pool: three model types whose
//! networks share most errors within a type and a few across types.
//!
//! ```text
//! cargo run --release -p simplecnn --example ensemble_vote
//! ```

use rand::Rng;

use simplecnn::ensemble::{best_of, sample_ensembles, EnsembleConfig, PredictionMatrix, Strategy};
use simplecnn::rng::seeded;

fn main() -> simplecnn::Result<()> {
    let images = 10_000;
    let mut rng = seeded(3);
    let truth: Vec<u8> = (0..images).map(|_| rng.gen_range(0..10)).collect();
    let mut matrix = PredictionMatrix::new(truth.clone())?;
    for (t, ty) in ["m3", "m5", "m7"].iter().enumerate() {
        // Images this type finds hard, plus a few every type finds hard.
        let hard: Vec<usize> = (0..45).map(|i| (i * 167 + t * 53) % images).chain((0..20).map(|i| i * 491)).collect();
        for j in 0..10 {
            let mut labels = truth.clone();
            for &i in &hard {
                if rng.gen_bool(0.6) {
                    labels[i] = (truth[i] + 1) % 10;
                }
            }
            for _ in 0..10 {
                let i = rng.gen_range(0..images);
                labels[i] = (truth[i] + 2) % 10;
            }
            matrix.upsert(&format!("{ty}-{j}"), ty, labels)?;
        }
    }

    let singles: Vec<f64> = (0..matrix.rows.len()).map(|r| matrix.accuracy(r)).collect();
    let (i, best) = best_of(&singles)?;
    println!("30 single networks, best {} at {:.4}%", matrix.rows[i].id, best * 100.0);

    let strategies = [
        Strategy::Homogeneous("m3".into()),
        Strategy::Homogeneous("m5".into()),
        Strategy::Homogeneous("m7".into()),
        Strategy::Heterogeneous,
        Strategy::TwoLevel,
        Strategy::TwoLevelBest { top_k: 10 },
    ];
    println!("{:<20} {:>10} {:>9} {:>8}", "strategy", "mean %", "± 95%", "best %");
    for strategy in strategies {
        let dist = sample_ensembles(&matrix, &EnsembleConfig::new(strategy.clone(), 0))?;
        println!(
            "{:<20} {:>10.4} {:>9.4} {:>8.2}",
            strategy.to_string(),
            dist.mean * 100.0,
            dist.ci_half_width.unwrap_or(0.0) * 100.0,
            dist.best()?.0 * 100.0
        );
    }
    Ok(())
}
