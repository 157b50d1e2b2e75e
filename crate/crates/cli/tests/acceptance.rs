//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2a, 2b, 3, 6 and 7 must pass for the target to succeed.
//! Criteria 2c, 4 and 5 are reported as measured; 4 and 5 read the
//! committed artifacts in `results/` unless `ALRGAN_ACCEPTANCE_RERUN=1`,
//! which regenerates them with the CLI (about three hours on one core).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use alrgan::alr::{self, WeightNet};
use alrgan::gan::optim::Adam;
use alrgan::metrics::{self, GaussianStats};
use alrgan::nn::{stream_rng, Binder, Group, ParamStore};
use alrgan::{gradsuite, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn report(id: &str, what: &str, hard: bool, o: &Outcome, failures: &mut Vec<String>) {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    println!("{verdict} {id} {what}: {}", o.detail);
    if hard && !o.passed {
        failures.push(id.to_string());
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn alrgan(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_alrgan"))
        .args(args)
        .env_remove("ALR_SEED")
        .output()
        .expect("binary runs")
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let results = match gradsuite::run(10, None, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let seconds = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let worst = |kind: gradsuite::Kind| {
        results.iter().filter(|r| r.kind == kind).map(|r| r.max_error).fold(0.0, f64::max)
    };
    outcome(
        failed.is_empty() && seconds < 120.0,
        format!(
            "{} checks at 10 points, worst op {:.1e} (tol 1e-4), worst composite {:.1e} (tol 1e-3), {seconds:.1}s; failed {failed:?}",
            results.len(),
            worst(gradsuite::Kind::Op),
            worst(gradsuite::Kind::Composite),
        ),
    )
}

/// Column-softmax of standard-uniform logits scaled to [-3, 3].
fn random_ssm(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
    let logits: Vec<f64> = (0..t * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut out = vec![0.0; t * n];
    for c in 0..n {
        let max = (0..t).map(|r| logits[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..t).map(|r| (logits[r * n + c] - max).exp()).sum();
        for r in 0..t {
            out[r * n + c] = (logits[r * n + c] - max).exp() / z;
        }
    }
    Tensor::new(vec![t, n], out).unwrap()
}

fn split_invariants() -> Outcome {
    let mut rng = stream_rng(0xacc2, 0);
    let mut violations = 0;
    for _ in 0..1000 {
        let (t, n) = (rng.random_range(1..9), rng.random_range(1..17));
        let gamma = if rng.random_bool(0.1) { [0.0, 1.0][rng.random_range(0..2)] } else { rng.random_range(0.0..1.0) };
        let (a, b) = (random_ssm(&mut rng, t, n), random_ssm(&mut rng, t, n));
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = alr::split_residual_vars(&mut tape, x, y, gamma).unwrap();
        let (r, e, h) = (tape.data(s.r), tape.data(s.easy), tape.data(s.hard));
        for row in 0..n {
            for col in 0..t {
                let k = row * t + col;
                // Independent residual: |Θ* − Θ| read from the [T, N] inputs.
                let want = (b.data()[col * n + row] - a.data()[col * n + row]).abs();
                let ok = r[k] == want
                    && e[k] + h[k] == r[k]
                    && e[k] * h[k] == 0.0
                    && (e[k] == 0.0 || e[k] < gamma)
                    && (h[k] == 0.0 || h[k] >= gamma);
                violations += (!ok) as usize;
            }
        }
    }
    outcome(violations == 0, format!("1000 random (Θ, Θ*, γ) draws, {violations} entry violations"))
}

fn zero_residual_terms() -> Outcome {
    let mut rng = stream_rng(0xacc2, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, n, d) = (8, 16, 32);
        let theta = random_ssm(&mut rng, t, n);
        let mut store = ParamStore::new();
        let a_net = WeightNet::new(&mut store, "a", Group::Generator, d, t, &mut rng);
        let b_net = WeightNet::new(&mut store, "b", Group::Generator, d, t, &mut rng);
        let hs = Tensor::from_fn(&[d, n], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&store);
        let x = tape.constant(theta.clone());
        let y = tape.constant(theta);
        let hs = tape.constant(hs);
        let s = alr::split_residual_vars(&mut tape, x, y, 0.2).unwrap();
        let alpha = a_net.forward(&mut tape, &mut p, s.easy, hs).unwrap();
        let beta = b_net.forward(&mut tape, &mut p, s.hard, hs).unwrap();
        let terms = alr::alr_terms(&mut tape, &s, alpha, beta, d).unwrap();
        worst = worst.max(tape.item(terms.easy).abs()).max(tape.item(terms.hard).abs());
    }
    outcome(worst == 0.0, format!("θ = θ* on 100 instances, largest easy/hard term {worst:e}"))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weight networks alone, trained on the loss with a fixed split.
fn ordering_descent() -> Outcome {
    let (t, n, d, steps) = (8, 16, 32, 2000);
    let mut rng = stream_rng(0xacc2, 2);
    let theta = random_ssm(&mut rng, t, n);
    let star = random_ssm(&mut rng, t, n);
    let hs = Tensor::from_fn(&[d, n], |_| rng.random_range(-1.0..1.0));
    let mut store = ParamStore::new();
    let a_net = WeightNet::new(&mut store, "alpha", Group::Generator, d, t, &mut rng);
    let b_net = WeightNet::new(&mut store, "beta", Group::Generator, d, t, &mut rng);
    let mut adam = Adam::new(&store, Group::Generator, 1e-2, 0.9, 0.999);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut hard_norm = 0.0;
    for step in 0..=steps {
        let mut tape = Tape::new();
        let mut p = Binder::new(&store, &[Group::Generator]);
        let x = tape.constant(theta.clone());
        let y = tape.constant(star.clone());
        let h = tape.constant(hs.clone());
        let s = alr::split_residual_vars(&mut tape, x, y, alr::DEFAULT_GAMMA).unwrap();
        let alpha = a_net.forward(&mut tape, &mut p, s.easy, h).unwrap();
        let beta = b_net.forward(&mut tape, &mut p, s.hard, h).unwrap();
        let max_a = tape.data(alpha).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_b = tape.data(beta).iter().copied().fold(f64::INFINITY, f64::min);
        trace.push(softplus(max_a - min_b));
        hard_norm = tape.data(s.hard).iter().map(|v| v * v).sum::<f64>().sqrt();
        if step == steps {
            break;
        }
        let loss = alr::alr_loss(&mut tape, &s, alpha, beta, d).unwrap();
        tape.backward(loss).unwrap();
        let grads = p.grads(&tape);
        adam.update(&mut store, &grads).unwrap();
    }
    let last = *trace.last().unwrap();
    let best = trace.iter().copied().fold(f64::INFINITY, f64::min);
    let rises = trace.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    // With b = min β the loss is at least b·‖R_hard‖_F + softplus(−b), so at
    // its minimum the ordering term is at least −ln(1 − min(‖R_hard‖_F, ½)).
    let bound = -(1.0 - hard_norm.min(0.5)).ln();
    outcome(
        last < 0.1 && rises == 0,
        format!(
            "N={n} T={t} D={d}, {steps} Adam steps: softplus(max α − min β) {:.4} → {last:.4} (best {best:.4}, {rises} rises); ‖R_hard‖_F = {hard_norm:.3} bounds the optimum at {bound:.3}",
            trace[0]
        ),
    )
}

/// Newton–Schulz square root of a 3×3 matrix with positive spectrum.
fn newton_schulz(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    let norm = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut y = m.map(|r| r.map(|v| v / norm));
    let mut z = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..100 {
        let zy = mul(z, y);
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                t[i][j] = 0.5 * ((if i == j { 3.0 } else { 0.0 }) - zy[i][j]);
            }
        }
        y = mul(y, t);
        z = mul(t, z);
    }
    y.map(|r| r.map(|v| v * norm.sqrt()))
}

fn metric_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        ok &= pass;
        notes.push(format!("{name} {got:.6}"));
    };
    let stats = |mean: Vec<f64>, cov: Vec<f64>| GaussianStats { mean, cov, count: 50 };
    let a = stats(vec![0.3, -1.0], vec![2.0, 0.5, 0.5, 1.0]);
    check("fid(a,a)", metrics::fid(&a, &a).unwrap(), 0.0, 1e-9);
    let f1 = metrics::fid(&stats(vec![0.0], vec![1.0]), &stats(vec![1.0], vec![1.0])).unwrap();
    check("fid mean-only", f1, 1.0, 1e-9);
    let f2 = metrics::fid(&stats(vec![0.0], vec![1.0]), &stats(vec![0.0], vec![4.0])).unwrap();
    check("fid variance-only", f2, 1.0, 1e-9);

    let mut rng = stream_rng(0xacc3, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut draw = || {
            let l: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    c[i][j] = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
                }
            }
            c
        };
        let (ca, cb) = (draw(), draw());
        let mut prod = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                prod[i][j] = (0..3).map(|k| ca[i][k] * cb[k][j]).sum();
            }
        }
        let root = newton_schulz(prod);
        let oracle = root[0][0] + root[1][1] + root[2][2];
        let flat = |c: [[f64; 3]; 3]| c.iter().flatten().copied().collect::<Vec<_>>();
        let got = metrics::trace_sqrt_product(&stats(vec![0.0; 3], flat(ca)), &stats(vec![0.0; 3], flat(cb))).unwrap();
        worst = worst.max((got - oracle).abs());
    }
    ok &= worst <= 1e-6;
    notes.push(format!("eigen vs Newton-Schulz worst {worst:.1e} on 100 cases"));

    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        ok &= pass;
        notes.push(format!("{name} {got:.6}"));
    };
    let uniform = Tensor::full(&[6, 4], 0.25);
    check("IS uniform", metrics::inception_score(&uniform).unwrap(), 1.0, 1e-9);
    let c = 5;
    let one_hot = Tensor::from_fn(&[c, c], |k| if k / c == k % c { 1.0 } else { 0.0 });
    check("IS one-hot", metrics::inception_score(&one_hot).unwrap(), c as f64, 1e-6);

    let (trials, pool, r, dim) = (10_000, 1000, 100, 16);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let queries: Vec<Vec<f64>> = (0..trials).map(|_| unit(&mut rng)).collect();
    let candidates: Vec<Vec<f64>> = (0..pool).map(|_| unit(&mut rng)).collect();
    let truth: Vec<usize> = (0..trials).map(|_| rng.random_range(0..pool)).collect();
    let plan = metrics::sample_trials(&truth, pool, r, &mut rng).unwrap();
    let rp = metrics::r_precision(&queries, &candidates, &plan).unwrap();
    check("R-precision chance", rp, 1.0, 1.0);
    outcome(ok, notes.join(", "))
}

fn read_ppm(path: &Path) -> Option<(usize, Vec<u8>)> {
    let bytes = std::fs::read(path).ok()?;
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned();
    let mut parts = text.split_whitespace();
    (parts.next()? == "P6").then_some(())?;
    let (w, h): (usize, usize) = (parts.next()?.parse().ok()?, parts.next()?.parse().ok()?);
    (w == h).then_some((w, bytes))
}

fn test_mode_generation(dir: &Path) -> Outcome {
    let run = dir.join("gen_train");
    let res = alrgan(&["train", "--steps", "20", "--output", run.to_str().unwrap()]);
    if !res.status.success() {
        return outcome(false, format!("train failed: {}", String::from_utf8_lossy(&res.stderr)));
    }
    let ckpt = run.join("final.ckpt");
    let gen = |name: &str| {
        let out = dir.join(name);
        let res = alrgan(&["gen", "--checkpoint", ckpt.to_str().unwrap(), "--count", "3", "--output", out.to_str().unwrap()]);
        (res.status.success(), out)
    };
    let ((ok_a, a), (ok_b, b)) = (gen("gen_a"), gen("gen_b"));
    if !(ok_a && ok_b) {
        return outcome(false, "gen failed");
    }
    let mut sides = Vec::new();
    let mut identical = true;
    for k in 0..3 {
        for stage in 0..3 {
            let file = format!("sample{k}_stage{stage}.ppm");
            let (Some((side, x)), Some((_, y))) = (read_ppm(&a.join(&file)), read_ppm(&b.join(&file))) else {
                return outcome(false, format!("missing or malformed {file}"));
            };
            identical &= x == y;
            if k == 0 {
                sides.push(side);
            }
        }
    }
    // The generator itself, fed a caption alone.
    let cfg = alrgan::config::RunConfig::default().gan;
    let model = alrgan::gan::Model::new(&cfg).unwrap();
    let ids = alrgan::experiment::caption_tokens("red circle center plain", cfg.words).unwrap();
    let input = alrgan::gan::train::caption_input(&model, &ids, &mut stream_rng(1, 0)).unwrap();
    let mut tape = Tape::new();
    let mut p = Binder::frozen(&model.store);
    let direct = model.generate(&mut tape, &mut p, &input, alrgan::gan::Mode::Test).is_ok();
    outcome(
        identical && sides == [8, 16, 32] && input.real.is_empty() && direct,
        format!("3 captions × 3 stages, sides {sides:?}, repeat identical {identical}, caption-only generation {direct}"),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let run = |name: &str| {
        let out = dir.join(name);
        let res = alrgan(&["train", "--steps", "100", "--output", out.to_str().unwrap()]);
        res.status.success().then(|| std::fs::read(out.join("losses.csv")).unwrap())
    };
    match (run("det_a"), run("det_b")) {
        (Some(a), Some(b)) => {
            let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
            outcome(a == b && rows == 100, format!("two 100-step runs, {rows} rows, byte-identical {}", a == b))
        }
        _ => outcome(false, "train failed"),
    }
}

type Rows = Vec<BTreeMap<String, String>>;

fn read_rows(path: &Path) -> Result<Rows, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            Ok(header.iter().zip(r.iter()).map(|(k, v)| (k.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row.get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

/// Artifacts directory: the committed results, or a fresh CLI run.
fn artifacts(scratch: &Path) -> PathBuf {
    let results = repo_root().join("results");
    if std::env::var("ALRGAN_ACCEPTANCE_RERUN").as_deref() != Ok("1") {
        return results;
    }
    let out = scratch.join("results");
    let config = results.join("experiment.toml");
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    alrgan(&["ablate", "--config", c, "--output", o, "--seeds", "1,2,3"]);
    alrgan(&["sweep", "--config", c, "--output", o, "--param", "gamma", "--values", "0,0.1,0.2,0.3,0.5,0.8"]);
    out
}

fn ablation_direction(dir: &Path) -> Outcome {
    let rows = match read_rows(&dir.join("ablation.csv")) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("no ablation artifact ({e})")),
    };
    let config = std::fs::read_to_string(dir.join("experiment.toml")).unwrap_or_default();
    let cfg = alrgan::config::RunConfig::parse(&config).ok();
    let setup_ok = cfg.as_ref().is_some_and(|c| c.gan.stages == 3 && c.gan.base_resolution == 8);
    let seeds: std::collections::BTreeSet<String> = rows.iter().map(|r| r["seed"].clone()).collect();
    let min_steps = rows.iter().map(|r| num(r, "steps")).fold(f64::INFINITY, f64::min);
    let hours = rows.iter().map(|r| num(r, "seconds")).sum::<f64>() / 3600.0;
    let mean = |variant: &str, key: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r["variant"] == variant).map(|r| num(r, key)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let la = |v: &str| mean(v, "tail_layout_agreement");
    let fid = |v: &str| mean(v, "tail_toy_fid");
    let (base, alr, pr, full, fixed) = ("Base", "Base+ALR", "Base+ALR+PR", "Full", "Base+ALR*");
    let checks = [
        ("setup m=3 8/16/32px, 3 seeds, >=5000 steps", setup_ok && seeds.len() >= 3 && min_steps >= 5000.0),
        ("runtime < 4 h", hours < 4.0),
        ("LA Base+ALR >= Base + 0.05", la(alr) >= la(base) + 0.05),
        ("FID Base+ALR < Base", fid(alr) < fid(base)),
        ("LA Full > Base+ALR", la(full) > la(alr)),
        ("FID Full < Base+ALR", fid(full) < fid(alr)),
        ("LA Base+ALR+PR >= Base+ALR", la(pr) >= la(alr)),
        ("FID Base+ALR+PR <= Base+ALR", fid(pr) <= fid(alr)),
        ("LA Full >= Base+ALR+PR", la(full) >= la(pr)),
        ("FID Full <= Base+ALR+PR", fid(full) <= fid(pr)),
        ("LA Base+ALR > Base+ALR*", la(alr) > la(fixed)),
        ("FID Base+ALR < Base+ALR*", fid(alr) < fid(fixed)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let means = |la: &dyn Fn(&str) -> f64, fid: &dyn Fn(&str) -> f64| {
        [base, alr, pr, full, fixed]
            .iter()
            .map(|v| format!("{v} LA {:.3} FID {:.4}", la(v), fid(v)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let tail = means(&la, &fid);
    let last = means(&|v| mean(v, "layout_agreement"), &|v| mean(v, "toy_fid"));
    outcome(
        failed.is_empty(),
        format!(
            "{} seeds, {hours:.2} h; tail means {tail}; failed {failed:?}; final snapshots (not judged) {last}",
            seeds.len()
        ),
    )
}

fn gamma_sweep(dir: &Path) -> Outcome {
    let rows = match read_rows(&dir.join("sweep_gamma.csv")) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("no sweep artifact ({e})")),
    };
    let seeds: std::collections::BTreeSet<String> = rows.iter().map(|r| r["seed"].clone()).collect();
    let at = |g: f64| rows.iter().find(|r| (num(r, "value") - g).abs() < 1e-12).map(|r| num(r, "tail_layout_agreement"));
    let (Some(mid), Some(lo), Some(hi)) = (at(0.2), at(0.0), at(0.8)) else {
        return outcome(false, "sweep lacks one of γ = 0, 0.2, 0.8");
    };
    let all: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{:.3}/{:.3}", r["value"], num(r, "tail_layout_agreement"), num(r, "layout_agreement")))
        .collect();
    outcome(
        seeds.len() == 1 && mid >= lo && mid >= hi,
        format!("shared seed {}, tail/final LA by γ {}", seeds.len() == 1, all.join(" ")),
    )
}

fn main() {
    let scratch = TempDir::new().unwrap();
    let mut failures = Vec::new();
    report("1", "gradient suite", true, &gradient_suite(), &mut failures);
    report("2a", "residual split partition", true, &split_invariants(), &mut failures);
    report("2b", "zero residual terms", true, &zero_residual_terms(), &mut failures);
    report("2c", "weight-only ordering descent", false, &ordering_descent(), &mut failures);
    report("3", "metric oracles", true, &metric_oracles(), &mut failures);
    let results = artifacts(scratch.path());
    report("4", "ablation direction", false, &ablation_direction(&results), &mut failures);
    report("5", "gamma sweep shape", false, &gamma_sweep(&results), &mut failures);
    report("6", "test-mode generation", true, &test_mode_generation(scratch.path()), &mut failures);
    report("7", "training determinism", true, &determinism(scratch.path()), &mut failures);
    if !failures.is_empty() {
        eprintln!("required criteria failed: {failures:?}");
        std::process::exit(1);
    }
}
