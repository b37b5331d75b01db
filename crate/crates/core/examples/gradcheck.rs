//! Runs the finite-difference oracle over every layer kind and prints the
//! worst relative error per layer.
//!
//! ```text
//! cargo run --release -p simplecnn --example gradcheck [seeds]
//! ```

use std::collections::BTreeMap;

use simplecnn::nn::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};

fn main() -> simplecnn::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut worst: BTreeMap<String, (f64, String)> = BTreeMap::new();
    for report in run_suite(seeds, DEFAULT_STEP)? {
        let kind = report.op.split(" seed=").next().unwrap_or_default().to_string();
        let err = report.max_rel_error();
        let slot = worst.entry(kind).or_insert((0.0, String::new()));
        if err >= slot.0 {
            *slot = (err, report.op.clone());
        }
    }
    for (kind, (err, case)) in &worst {
        let verdict = if *err < DEFAULT_TOLERANCE { "ok" } else { "FAIL" };
        println!("{kind:<24} {err:.2e}  ({case})  {verdict}");
    }
    Ok(())
}
