use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use memsnn::io::idx::encode_idx;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_memsnn"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn memsnn")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Synthetic digits: class `c` lights a 4x4 block at a class-specific spot.
fn write_dataset(dir: &Path, prefix: &str, n: usize) {
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c as u8);
        let (r0, c0) = (4 + (c / 5) * 10, 2 + (c % 5) * 5);
        for r in r0..r0 + 4 {
            for k in c0..c0 + 4 {
                pixels[i * 784 + r * 28 + k] = 200 + (i % 50) as u8;
            }
        }
    }
    let (im, lb) = encode_idx(&pixels, 28, 28, &labels);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), im).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lb).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> String {
        self.root.join("data").display().to_string()
    }

    fn model(&self) -> String {
        self.root.join("trained/model.msnn").display().to_string()
    }

    fn program(&self) -> String {
        self.root.join("converted/program.msnp").display().to_string()
    }

    fn out(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        fs::create_dir_all(&data).unwrap();
        write_dataset(&data, "train", 200);
        write_dataset(&data, "t10k", 40);
        let f = Fixture { _dir: dir, root };
        let (d, t, c) = (f.data(), f.out("trained"), f.out("converted"));
        ok(&["--data-dir", &d, "--out", &t, "train", "--epochs", "2"]);
        ok(&["--data-dir", &d, "--out", &c, "convert", "--model", &f.model()]);
        f
    })
}

fn read(dir: &str, name: &str) -> Vec<u8> {
    fs::read(Path::new(dir).join(name)).unwrap_or_else(|e| panic!("{dir}/{name}: {e}"))
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_is_data_error() {
    let f = fixture();
    let o = run(&["--data-dir", "/nonexistent", "--out", &f.out("x"), "infer", "--program", &f.program()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_usage_error() {
    let f = fixture();
    let cfg = f.root.join("bad.toml");
    fs::write(&cfg, "[sim]\nsteps = 10\nbogus = 1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", &f.out("y"), "error-surface"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupt_model_is_data_error() {
    let f = fixture();
    let bad = f.root.join("bad.msnn");
    fs::write(&bad, b"XXXX0000").unwrap();
    let o = run(&["--data-dir", &f.data(), "--out", &f.out("z"), "convert", "--model", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_writes_model_and_manifest() {
    let f = fixture();
    let dir = f.out("trained");
    let log = String::from_utf8(read(&dir, "train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest: serde_json::Value = serde_json::from_slice(&read(&dir, "manifest.json")).unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["config"].as_str().unwrap().contains("[device]"));
    let summary: serde_json::Value = serde_json::from_slice(&read(&dir, "model.json")).unwrap();
    assert_eq!(summary["param_count"], 150 + 1800 + 1920);
}

#[test]
fn infer_is_deterministic_across_threads() {
    let f = fixture();
    let (a, b, c) = (f.out("inf_a"), f.out("inf_b"), f.out("inf_c"));
    let (data, program) = (f.data(), f.program());
    for (out, threads) in [(&a, "1"), (&b, "1"), (&c, "3")] {
        ok(&[
            "--data-dir",
            &data,
            "--seed",
            "7",
            "--out",
            out,
            "--threads",
            threads,
            "infer",
            "--program",
            &program,
            "--dump-raster",
            "3",
        ]);
    }
    let (a, b, c) = (a.as_str(), b.as_str(), c.as_str());
    for name in ["predictions.csv", "infer.json", "raster_3.csv"] {
        assert_eq!(read(a, name), read(b, name), "{name}");
        assert_eq!(read(a, name), read(c, name), "{name}");
    }
    let preds = String::from_utf8(read(a, "predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 41);
    assert!(preds.starts_with("image,label,winner,count_0"));
}

#[test]
fn sweep_has_baseline_plus_sigma_rows() {
    let f = fixture();
    let out = f.out("sweep");
    ok(&[
        "--data-dir",
        &f.data(),
        "--out",
        &out,
        "sweep",
        "--program",
        &f.program(),
        "--kind",
        "bias",
        "--sigmas",
        "0.05,0.1,0.2,0.3",
        "--trials",
        "2",
        "--images",
        "20",
    ]);
    let text = String::from_utf8(read(&out, "sweep.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(&rows[0][1], "0.0");
    assert_eq!(&rows[0][2], "1");
    assert_eq!(&rows[1][2], "2");
    assert_eq!(&rows[0][7], "0.0");
}

#[test]
fn sweep_rejects_unknown_kind() {
    let f = fixture();
    let o = run(&[
        "--data-dir",
        &f.data(),
        "--out",
        &f.out("sk"),
        "sweep",
        "--program",
        &f.program(),
        "--kind",
        "magic",
        "--sigmas",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn replay_reproduces_outputs() {
    let f = fixture();
    let (a, b) = (f.out("curve_a"), f.out("curve_b"));
    ok(&[
        "--data-dir",
        &f.data(),
        "--seed",
        "5",
        "--out",
        &a,
        "accuracy-curve",
        "--model",
        &f.model(),
        "--steps",
        "1,5,10",
        "--t-write",
        "1e-8,1e-6",
    ]);
    let manifest = Path::new(&a).join("manifest.json");
    ok(&["--out", &b, "replay", manifest.to_str().unwrap()]);
    assert_eq!(read(&a, "accuracy_curve.csv"), read(&b, "accuracy_curve.csv"));
    let text = String::from_utf8(read(&a, "accuracy_curve.csv")).unwrap();
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn error_surface_and_cost() {
    let f = fixture();
    let out = f.out("surf");
    ok(&["--out", &out, "error-surface", "--model", &f.model(), "--x-points", "3", "--w-points", "5"]);
    let text = String::from_utf8(read(&out, "error_surface.csv")).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(Path::new(&out).join("weighted_error.csv").exists());

    let out = f.out("cost");
    ok(&["--data-dir", &f.data(), "--out", &out, "cost", "--program", &f.program(), "--images", "5"]);
    let r: serde_json::Value = serde_json::from_slice(&read(&out, "cost.json")).unwrap();
    assert_eq!(r["step_latency_ns"], 42.0);
    assert_eq!(r["pipeline_latency_ns"], 210.0);
    assert!(r["energy"]["total"].as_f64().unwrap() > 0.0);
}
