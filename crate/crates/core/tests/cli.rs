//! End-to-end runs of the `simplecnn` binary on small synthetic IDX files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;

use simplecnn::data::idx::{encode_idx_images, encode_idx_labels, IdxImages, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use simplecnn::ensemble::PredictionMatrix;
use simplecnn::rng::seeded;

/// Writes `train` and `test` random digits with a faint class-dependent bar.
fn synthetic_data(dir: &Path, train: usize, test: usize) {
    let mut rng = seeded(99);
    let mut write = |count: usize, images: &str, labels: &str| {
        let mut pixels = vec![0u8; count * 784];
        let digits: Vec<u8> = (0..count).map(|_| rng.gen_range(0..10)).collect();
        for (i, &d) in digits.iter().enumerate() {
            let img = &mut pixels[i * 784..(i + 1) * 784];
            for p in img.iter_mut() {
                if rng.gen_bool(0.05) {
                    *p = rng.gen();
                }
            }
            let row = 4 + 2 * d as usize;
            img[row * 28 + 4..row * 28 + 24].iter_mut().for_each(|p| *p = 255);
        }
        let idx = IdxImages { count, rows: 28, cols: 28, pixels };
        fs::write(dir.join(images), encode_idx_images(&idx)).unwrap();
        fs::write(dir.join(labels), encode_idx_labels(&digits)).unwrap();
    };
    write(train, TRAIN_IMAGES, TRAIN_LABELS);
    write(test, TEST_IMAGES, TEST_LABELS);
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("data")).unwrap();
        synthetic_data(&dir.path().join("data"), 90, 40);
        Env { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_simplecnn"))
            .args(args)
            .arg("--data-dir")
            .arg(self.path("data"))
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, p: &str) -> Vec<u8> {
        fs::read(self.path(p)).unwrap_or_else(|e| panic!("{p}: {e}"))
    }
}

const SHORT: &[&str] = &["--epochs", "2", "--seed", "7", "--subset", "60"];

#[test]
fn train_is_deterministic_and_manifest_replays() {
    let env = Env::new();
    env.ok(&[&["train", "m3", "--out", "a"], SHORT].concat());
    env.ok(&[&["train", "m3", "--out", "b"], SHORT].concat());
    for f in ["metrics.csv", "final.ckpt", "best.ckpt"] {
        assert_eq!(env.read(&format!("a/{f}")), env.read(&format!("b/{f}")), "{f}");
    }
    let manifest = String::from_utf8(env.read("a/manifest.txt")).unwrap();
    assert!(manifest.contains("command = train"));
    assert!(manifest.contains("config.seed = 7"));
    assert!(manifest.contains("digest.train-images-idx3-ubyte = "));

    // Replaying the manifest into the same directory rewrites identical files.
    let before = env.read("a/final.ckpt");
    env.ok(&["train", "--config", "a/manifest.txt"]);
    assert_eq!(env.read("a/final.ckpt"), before);
    assert_eq!(env.read("a/manifest.txt"), manifest.as_bytes());

    // A flag overrides the file.
    env.ok(&["train", "--config", "a/manifest.txt", "--seed", "8", "--out", "c"]);
    assert_ne!(env.read("c/final.ckpt"), before);
}

#[test]
fn manifest_rejects_changed_inputs() {
    let env = Env::new();
    env.ok(&["train", "m3", "--epochs", "1", "--subset", "30", "--out", "a"]);
    synthetic_data(&env.path("data"), 91, 40);
    let out = env.run(&["train", "--config", "a/manifest.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest mismatch"));
}

#[test]
fn ablation_flags_are_recorded() {
    let env = Env::new();
    let stdout = env.ok(&["train", "m5", "--no-translate", "--no-rotate", "--epochs", "1", "--subset", "30", "--out", "aug"]);
    let manifest = String::from_utf8(env.read("aug/manifest.txt")).unwrap();
    assert!(manifest.contains("config.translate = false"));
    assert!(manifest.contains("config.rotate = false"));
    assert!(stdout.contains(" bn"));

    let stdout = env.ok(&["train", "m5", "--bn-mode", "none", "--epochs", "1", "--subset", "30", "--out", "nobn"]);
    let model_line = stdout.lines().find(|l| l.starts_with("model ")).unwrap();
    assert!(model_line.starts_with("model m5:none|"));
    assert!(!model_line.contains(" bn"), "{model_line}");
    let manifest = String::from_utf8(env.read("nobn/manifest.txt")).unwrap();
    assert!(manifest.contains("config.model = m5:none"));
}

#[test]
fn bad_model_and_config_fail() {
    let env = Env::new();
    let out = env.run(&["train", "m4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown model"));
    assert_eq!(env.run(&["train", "m5", "--batch-size", "1"]).status.code(), Some(1));
    fs::write(env.path("bad.txt"), "epochs = many\n").unwrap();
    assert_eq!(env.run(&["train", "m5", "--config", "bad.txt"]).status.code(), Some(1));
    assert_eq!(env.run(&["train", "m5", "--epochs", "x"]).status.code(), Some(2));
}

#[test]
fn eval_rows_and_vote() {
    let env = Env::new();
    env.ok(&[&["train", "m3", "--out", "r"], SHORT].concat());
    env.ok(&["eval", "r/final.ckpt", "--ema", "--matrix", "p/m.csv"]);
    env.ok(&["eval", "r/final.ckpt", "--raw", "--matrix", "p/m.csv"]);
    let m = PredictionMatrix::read_csv(&env.path("p/m.csv")).unwrap();
    let ids: Vec<&str> = m.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["r/final:ema", "r/final:raw"]);

    let before = env.read("p/m.csv");
    let out = env.ok(&["eval", "r/final.ckpt", "--raw", "--matrix", "p/m.csv"]);
    assert!(out.contains("replaced"));
    assert_eq!(env.read("p/m.csv"), before);
    assert!(env.path("p/m.r_final_raw.manifest.txt").exists());

    // Three rows of one type: every sampled ensemble is the same one.
    let mut m = PredictionMatrix::read_csv(&env.path("p/m.csv")).unwrap();
    let labels = m.rows[0].labels.clone();
    m.rows.clear();
    for (i, shift) in [0u8, 1, 0].iter().enumerate() {
        m.upsert(&format!("n{i}"), "m3", labels.iter().map(|l| (l + shift) % 10).collect()).unwrap();
    }
    m.write_csv(&env.path("three.csv")).unwrap();
    let args = ["vote", "three.csv", "--strategy", "homogeneous:m3", "--trials", "25", "--seed", "3", "--out", "d1.csv"];
    let stdout = env.ok(&args);
    assert!(stdout.contains("homogeneous:m3"));
    let samples = String::from_utf8(env.read("d1_samples.csv")).unwrap();
    let values: std::collections::BTreeSet<&str> = samples.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values.len(), 1);

    let mut again = args;
    again[args.len() - 1] = "d2.csv";
    env.ok(&again);
    assert_eq!(env.read("d1.csv"), env.read("d2.csv"));
    assert_eq!(env.read("d1_samples.csv"), env.read("d2_samples.csv"));

    let out = env.run(&["vote", "three.csv", "--strategy", "heterogeneous"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pool too small"));
}

#[test]
fn experiments_produce_table_shaped_reports() {
    let env = Env::new();
    let tiny = ["--nets", "3", "--epochs", "1", "--subset", "40", "--trials", "20", "--out", "exp"];
    let out = env.ok(&[&["experiment", "2", "--scale", "desk"], &tiny[..]].concat());
    for label in ["M3+M3+M3", "M5+M5+M5", "M7+M7+M7", "M3+M5+M7"] {
        assert!(out.lines().any(|l| l.starts_with(label)), "{label} missing in\n{out}");
    }
    assert!(out.contains("99.8014±0.0015"));
    let table = env.read("exp/table2.txt");
    let manifest = String::from_utf8(env.read("exp/table2.manifest.txt")).unwrap();
    assert!(manifest.contains("config.scale = desk") && manifest.contains("config.nets = 3"));

    // Table 3 reuses the same nine runs.
    let rerun = env.run(&[&["experiment", "3"], &tiny[..]].concat());
    assert!(rerun.status.success());
    assert!(String::from_utf8_lossy(&rerun.stderr).contains("cached"));
    assert!(!String::from_utf8_lossy(&rerun.stderr).contains("epoch"));

    env.ok(&["experiment", "--config", "exp/table2.manifest.txt"]);
    assert_eq!(env.read("exp/table2.txt"), table);

    let out = env.ok(&[&["experiment", "6"], &tiny[..]].concat());
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with('✓') || l.starts_with('✗')).collect();
    assert_eq!(rows.len(), 4, "{out}");
    for (row, marks) in rows.iter().zip(["✗", "✓", "✗", "✓"].iter().zip(["✗", "✗", "✓", "✓"])) {
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!((cells[0], cells[1]), (*marks.0, marks.1));
    }
}

#[test]
fn unknown_table_is_a_usage_error() {
    let env = Env::new();
    for t in ["0", "8", "x"] {
        let out = env.run(&["experiment", t]);
        assert_eq!(out.status.code(), Some(2), "table {t}");
    }
    assert_eq!(env.run(&["experiment"]).status.code(), Some(1));
}

#[test]
fn fetch_data_verifies_digests() {
    let env = Env::new();
    // The synthetic files are not the published ones.
    let out = env.run(&["fetch-data", "--base-url", "http://127.0.0.1:9/"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest mismatch"));

    let empty = env.path("empty");
    let out = Command::new(env!("CARGO_BIN_EXE_simplecnn"))
        .args(["fetch-data", "--base-url", "http://127.0.0.1:9/", "--data-dir"])
        .arg(&empty)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("download of"));
}

#[test]
fn fetch_data_accepts_the_real_files() {
    let dir = simplecnn::data::data_dir();
    if !dir.join(TRAIN_IMAGES).exists() {
        eprintln!("MNIST not present in {}; skipped", dir.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        fs::copy(dir.join(name), tmp.path().join(name)).unwrap();
    }
    let out = Command::new(env!("CARGO_BIN_EXE_simplecnn"))
        .args(["fetch-data", "--base-url", "http://127.0.0.1:9/", "--data-dir"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("ok").count(), 4);
    assert!(tmp.path().join("fetch.manifest.txt").exists());
}

#[test]
fn gradcheck_command() {
    let env = Env::new();
    let out = env.ok(&["gradcheck", "--seeds", "2", "--out", "gc"]);
    assert!(out.contains("conv2d") && out.contains("14 cases"));
    let csv = String::from_utf8(env.read("gc/report.csv")).unwrap();
    assert!(csv.starts_with("op,input,max_rel_error,max_abs_error"));
    // An impossible tolerance fails with a nonzero status.
    assert_eq!(env.run(&["gradcheck", "--seeds", "1", "--tolerance", "0", "--out", "gc2"]).status.code(), Some(1));
}
