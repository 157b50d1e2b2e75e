use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn alrgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alrgan"))
        .args(args)
        .env_remove("ALR_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(path).unwrap().trim_end().to_string()
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or("").to_string()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

/// A config file small enough for quick runs.
fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("eval_size = 24\ndataset_size = 16\n{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(dir: &Path, cfg: &str, steps: usize, out: &str) -> Output {
    let out = dir.join(out);
    alrgan(&["train", "--config", cfg, "--steps", &steps.to_string(), "--output", out.to_str().unwrap()])
}

#[test]
fn default_config_trains_two_hundred_finite_rows() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let res = alrgan(&["train", "--steps", "200", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let losses = out.join("losses.csv");
    assert_eq!(first_line(&losses), golden("losses_header.csv"));
    let records = rows(&losses);
    assert_eq!(records.len(), 200);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), i);
        assert!(r.iter().skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()), "{r:?}");
    }
    assert_eq!(first_line(&out.join("metrics.csv")), golden("metrics_header.csv"));
    assert_eq!(rows(&out.join("metrics.csv")).len(), 1);
    assert!(out.join("final.ckpt").exists());
}

#[test]
fn same_seed_gives_identical_losses_and_env_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "");
    for name in ["a", "b"] {
        assert_eq!(code(&train(dir.path(), &cfg, 12, name)), 0);
    }
    let read = |name: &str| std::fs::read(dir.path().join(name).join("losses.csv")).unwrap();
    assert_eq!(read("a"), read("b"));

    let out = dir.path().join("c");
    let res = Command::new(env!("CARGO_BIN_EXE_alrgan"))
        .args(["train", "--config", &cfg, "--steps", "12", "--output", out.to_str().unwrap()])
        .env("ALR_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0);
    assert_ne!(read("a"), read("c"));
    assert!(std::fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 7"));
}

#[test]
fn zero_steps_writes_an_empty_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "");
    let res = train(dir.path(), &cfg, 0, "zero");
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let losses = dir.path().join("zero/losses.csv");
    assert_eq!(first_line(&losses), golden("losses_header.csv"));
    assert!(rows(&losses).is_empty());
}

#[test]
fn bad_configs_exit_two_with_a_message() {
    let dir = TempDir::new().unwrap();
    for (extra, needle) in [("gama = 0.2\n", "gama"), ("gamma = 1.5\n", "gamma"), ("batch_size = 1\n", "batch_size")] {
        let cfg = small_config(dir.path(), extra);
        let res = train(dir.path(), &cfg, 1, "bad");
        assert_eq!(code(&res), 2, "{extra}");
        assert!(text(&res.stderr).contains(needle), "{}", text(&res.stderr));
    }
    let res = alrgan(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&res), 2);
    let res = Command::new(env!("CARGO_BIN_EXE_alrgan"))
        .args(["train", "--steps", "0", "--output", dir.path().join("env").to_str().unwrap()])
        .env("ALR_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&res), 2);
}

#[test]
fn exploding_training_exits_three_with_a_dump() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "lr_generator = 1e300\nlr_discriminator = 1e300\n");
    let res = train(dir.path(), &cfg, 20, "boom");
    assert_eq!(code(&res), 3, "{}", text(&res.stderr));
    let dump = std::fs::read_to_string(dir.path().join("boom/fault.txt")).unwrap();
    assert!(!dump.trim().is_empty());
}

#[test]
fn gradcheck_passes_and_reports_failures() {
    let res = alrgan(&["gradcheck", "--points", "2"]);
    assert_eq!(code(&res), 0, "{}", text(&res.stdout));
    assert!(text(&res.stdout).contains("checks passed"));

    let res = alrgan(&["gradcheck", "--points", "2", "--inject-fault", "softplus"]);
    assert_eq!(code(&res), 1);
    let err = text(&res.stderr);
    assert!(err.contains("softplus"), "{err}");
    assert!(!err.contains("tanh"), "{err}");

    let res = alrgan(&["gradcheck", "--points", "2", "--tol", "1e-12"]);
    assert_eq!(code(&res), 1);
    assert!(text(&res.stdout).contains("FAIL"));
}

#[test]
fn ablation_emits_five_rows_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("abl");
    let res = alrgan(&["ablate", "--config", &cfg, "--steps", "2", "--seeds", "1,2", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let csv = out.join("ablation.csv");
    assert_eq!(first_line(&csv), golden("ablation_header.csv"));
    let records = rows(&csv);
    assert_eq!(records.len(), 10);
    let names: Vec<&str> = records.iter().take(5).map(|r| &r[0]).collect();
    assert_eq!(names, ["Base", "Base+ALR", "Base+ALR+PR", "Full", "Base+ALR*"]);
    for r in &records {
        let (variant, kind, layout) = (&r[0], &r[2], r[14].parse::<f64>().unwrap());
        match variant {
            "Base" => assert!(kind == "none" && layout == 0.0, "{r:?}"),
            "Base+ALR*" => assert!(kind == "fixed" && layout > 0.0, "{r:?}"),
            _ => assert!(kind == "adaptive", "{r:?}"),
        }
    }
}

#[test]
fn sweep_writes_one_row_per_value_and_rejects_unknown_params() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("sw");
    let res = alrgan(&["sweep", "--config", &cfg, "--steps", "1", "--param", "gamma", "--values", "0.2", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let csv = out.join("sweep_gamma.csv");
    assert_eq!(first_line(&csv), golden("sweep_header.csv"));
    assert_eq!(rows(&csv).len(), 1);

    let res = alrgan(&["sweep", "--config", &cfg, "--steps", "1", "--param", "m", "--values", "1,2", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    assert_eq!(rows(&out.join("sweep_m.csv")).len(), 2);

    let res = alrgan(&["sweep", "--config", &cfg, "--param", "zeta", "--values", "1", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}

#[test]
fn eval_and_gen_read_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "");
    assert_eq!(code(&train(dir.path(), &cfg, 3, "run")), 0);
    let ckpt = dir.path().join("run/final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let res = alrgan(&["eval", "--config", &cfg, "--checkpoint", ckpt]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let out = text(&res.stdout);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("step,toy_fid"));
    assert!(lines.next().unwrap().starts_with("3,"));

    let gen = |name: &str| {
        let out = dir.path().join(name);
        let res = alrgan(&[
            "gen",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt,
            "--caption",
            "red circle center plain",
            "--count",
            "1",
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", text(&res.stderr));
        out
    };
    let (a, b) = (gen("g1"), gen("g2"));
    for (stage, side) in [(0, 8), (1, 16), (2, 32)] {
        let file = format!("sample0_stage{stage}.ppm");
        let bytes = std::fs::read(a.join(&file)).unwrap();
        let header = format!("P6\n{side} {side}\n255\n");
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + 3 * side * side);
        assert_eq!(bytes, std::fs::read(b.join(&file)).unwrap());
    }

    let res = alrgan(&["gen", "--config", &cfg, "--checkpoint", ckpt, "--caption", "purple blob", "--output", dir.path().join("g3").to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}
