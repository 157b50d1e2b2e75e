//! Gradient-check suite: every differentiable tape operation and every
//! composite objective, each at several seeded random points.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alr::{self, WeightNet};
use crate::config::GanConfig;
use crate::error::Result;
use crate::gan::check::{objective_grad_check_on, pick_entries};
use crate::gan::losses::{self, GWeights, MatchInput};
use crate::gan::model::{conditioning_augment, StageTerms};
use crate::gan::train::{sample_input, sample_rng};
use crate::gan::{Dataset, Model};
use crate::lvr::{self, LvrWeights};
use crate::nn::{stream_rng, uniform_init, Binder, Group, ParamStore};
use crate::par;
use crate::ssm;
use crate::tensor::{grad_check_on, Fault, Tape, Tensor, Var};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite objectives.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Seeded points per check.
pub const POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Op,
    Composite,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: Kind,
    /// Largest relative error over all points.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Body = fn(&mut Tape, Var) -> Result<Var>;

struct Case {
    name: &'static str,
    kind: Kind,
    point: fn(&mut ChaCha8Rng) -> Tensor,
    body: Body,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Magnitudes in `[lo, hi]` with random signs, keeping clear of kinks at 0.
fn away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.05 apart, in random order (no max/min ties
/// within a finite-difference step).
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let jitter = 0.4 / n as f64;
    Tensor::new(shape.to_vec(), vals.iter().map(|v| v + rng.random_range(0.0..jitter)).collect())
        .expect("positive extents")
}

/// Reduces any output to a scalar with fixed, uneven weights so every
/// output entry contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |k| (1.3 * k as f64 + 0.5).sin());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn part(tape: &mut Tape, x: Var, offset: &mut usize, shape: &[usize]) -> Result<Var> {
    let v = tape.slice(x, *offset, shape)?;
    *offset += shape.iter().product::<usize>();
    Ok(v)
}

fn two(tape: &mut Tape, x: Var, shape: &[usize]) -> Result<(Var, Var)> {
    let mut o = 0;
    Ok((part(tape, x, &mut o, shape)?, part(tape, x, &mut o, shape)?))
}

fn op_cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $point:expr, $body:expr) => {
            Case { name: $name, kind: Kind::Op, point: $point, body: $body }
        };
    }
    vec![
        case!("add", |r| uniform(r, &[24], -1.0, 1.0), |t, x| {
            let (a, b) = two(t, x, &[3, 4])?;
            let y = t.add(a, b)?;
            project(t, y)
        }),
        case!("sub", |r| uniform(r, &[24], -1.0, 1.0), |t, x| {
            let (a, b) = two(t, x, &[3, 4])?;
            let y = t.sub(a, b)?;
            project(t, y)
        }),
        case!("mul", |r| uniform(r, &[24], -1.0, 1.0), |t, x| {
            let (a, b) = two(t, x, &[3, 4])?;
            let y = t.mul(a, b)?;
            project(t, y)
        }),
        case!("div", |r| away(r, &[24], 0.5, 2.0), |t, x| {
            let (a, b) = two(t, x, &[3, 4])?;
            let y = t.div(a, b)?;
            project(t, y)
        }),
        case!("scale", |r| uniform(r, &[6], -1.0, 1.0), |t, x| {
            let y = t.scale(x, -2.5);
            project(t, y)
        }),
        case!("shift", |r| uniform(r, &[6], -1.0, 1.0), |t, x| {
            let y = t.add_scalar(x, 0.75);
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        case!("channel_mul", |r| uniform(r, &[36], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let a = part(t, x, &mut o, &[2, 3, 4])?;
            let m = part(t, x, &mut o, &[3, 4])?;
            let y = t.channel_mul(a, m)?;
            project(t, y)
        }),
        case!("channel_bias", |r| uniform(r, &[15], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let a = part(t, x, &mut o, &[3, 2, 2])?;
            let b = part(t, x, &mut o, &[3])?;
            let y = t.channel_bias(a, b)?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        case!("abs", |r| away(r, &[8], 0.1, 1.0), |t, x| {
            let y = t.abs(x);
            project(t, y)
        }),
        case!("sqrt", |r| uniform(r, &[8], 0.5, 2.0), |t, x| {
            let y = t.sqrt(x);
            project(t, y)
        }),
        case!("exp", |r| uniform(r, &[8], -1.0, 1.0), |t, x| {
            let y = t.exp(x);
            project(t, y)
        }),
        case!("log", |r| uniform(r, &[8], 0.5, 2.0), |t, x| {
            let y = t.ln(x);
            project(t, y)
        }),
        case!("clamp_log", |r| uniform(r, &[8], 0.1, 0.9), |t, x| {
            let y = t.clamp_log(x, 1e-7, 1.0 - 1e-7);
            project(t, y)
        }),
        case!("softplus", |r| uniform(r, &[8], -3.0, 3.0), |t, x| {
            let y = t.softplus(x);
            project(t, y)
        }),
        case!("sigmoid", |r| uniform(r, &[8], -3.0, 3.0), |t, x| {
            let y = t.sigmoid(x);
            project(t, y)
        }),
        case!("tanh", |r| uniform(r, &[8], -2.0, 2.0), |t, x| {
            let y = t.tanh(x);
            project(t, y)
        }),
        case!("leaky_relu", |r| away(r, &[8], 0.1, 1.0), |t, x| {
            let y = t.leaky_relu(x, 0.2);
            project(t, y)
        }),
        case!("sum", |r| uniform(r, &[2, 3], -1.0, 1.0), |t, x| {
            let y = t.sum(x);
            t.mul(y, y)
        }),
        case!("mean", |r| uniform(r, &[2, 3], -1.0, 1.0), |t, x| {
            let y = t.mean(x);
            t.mul(y, y)
        }),
        case!("frobenius_norm", |r| uniform(r, &[2, 3], -1.0, 1.0), |t, x| Ok(t.frobenius_norm(x))),
        case!("l1_norm", |r| away(r, &[2, 3], 0.1, 1.0), |t, x| Ok(t.l1_norm(x))),
        case!("extremum", |r| spread(r, &[2, 4]), |t, x| {
            let a = t.max(x);
            let b = t.min(x);
            let b = t.scale(b, 3.0);
            t.add(a, b)
        }),
        case!("max_axis", |r| spread(r, &[3, 4]), |t, x| {
            let y = t.max_axis(x, 0)?;
            project(t, y)
        }),
        case!("sum_axis", |r| uniform(r, &[3, 4], -1.0, 1.0), |t, x| {
            let y = t.sum_axis(x, 1)?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        case!("softmax", |r| uniform(r, &[3, 4], -2.0, 2.0), |t, x| {
            let a = t.softmax_axis(x, 0)?;
            let b = t.softmax_axis(x, 1)?;
            let y = t.add(a, b)?;
            project(t, y)
        }),
        case!("log_softmax", |r| uniform(r, &[3, 4], -2.0, 2.0), |t, x| {
            let a = t.log_softmax_axis(x, 0)?;
            let b = t.log_softmax_axis(x, 1)?;
            let y = t.add(a, b)?;
            project(t, y)
        }),
        case!("matmul", |r| uniform(r, &[18], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let a = part(t, x, &mut o, &[2, 3])?;
            let b = part(t, x, &mut o, &[3, 4])?;
            let y = t.matmul(a, b)?;
            project(t, y)
        }),
        case!("transpose", |r| uniform(r, &[2, 3], -1.0, 1.0), |t, x| {
            let y = t.transpose(x)?;
            project(t, y)
        }),
        case!("reshape", |r| uniform(r, &[2, 3], -1.0, 1.0), |t, x| {
            let y = t.reshape(x, &[3, 2])?;
            project(t, y)
        }),
        case!("slice", |r| uniform(r, &[10], -1.0, 1.0), |t, x| {
            let y = t.slice(x, 3, &[2, 2])?;
            project(t, y)
        }),
        case!("concat", |r| uniform(r, &[20], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let a = part(t, x, &mut o, &[1, 2, 4])?;
            let b = part(t, x, &mut o, &[3, 2, 2])?;
            let b = t.reshape(b, &[3, 2, 2])?;
            let b = t.upsample2(b)?;
            let b = t.slice(b, 0, &[1, 2, 4])?;
            let y = t.concat(&[a, b])?;
            project(t, y)
        }),
        case!("stack", |r| uniform(r, &[8], -1.0, 1.0), |t, x| {
            let (a, b) = two(t, x, &[4])?;
            let y = t.stack(&[a, b, a])?;
            project(t, y)
        }),
        case!("pad_cols", |r| uniform(r, &[2, 3], -1.0, 1.0), |t, x| {
            let y = t.pad_cols(x, 5)?;
            let y = t.exp(y);
            project(t, y)
        }),
        case!("gather_rows", |r| uniform(r, &[5, 3], -1.0, 1.0), |t, x| {
            let y = t.gather_rows(x, &[4, 0, 4, 2])?;
            project(t, y)
        }),
        case!("conv3x3", |r| uniform(r, &[97], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let a = part(t, x, &mut o, &[2, 5, 4])?;
            let w = part(t, x, &mut o, &[3, 2, 3, 3])?;
            let b = part(t, x, &mut o, &[3])?;
            let y = t.conv3x3(a, w, Some(b))?;
            project(t, y)
        }),
        case!("upsample2", |r| uniform(r, &[2, 3, 3], -1.0, 1.0), |t, x| {
            let y = t.upsample2(x)?;
            project(t, y)
        }),
        case!("mean_pool2", |r| uniform(r, &[2, 4, 4], -1.0, 1.0), |t, x| {
            let y = t.mean_pool2(x)?;
            project(t, y)
        }),
        case!("affine", |r| uniform(r, &[22], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let a = part(t, x, &mut o, &[2, 3])?;
            let w = part(t, x, &mut o, &[4, 3])?;
            let b = part(t, x, &mut o, &[4])?;
            let y = t.affine(a, w, Some(b))?;
            project(t, y)
        }),
    ]
}

const D: usize = 4;
const T: usize = 3;
const GRID: (usize, usize) = (2, 2);
const N: usize = 4;

/// `W [D,T]`, `H [D,N]`, `H* [D,N]` packed into one input.
fn features(rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rng, &[D * T + 2 * D * N], -1.5, 1.5)
}

fn unpack(t: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
    let mut o = 0;
    Ok((
        part(t, x, &mut o, &[D, T])?,
        part(t, x, &mut o, &[D, N])?,
        part(t, x, &mut o, &[D, N])?,
    ))
}

/// Weight networks with non-zero output layers so inputs influence them.
fn weight_nets() -> (ParamStore, WeightNet, WeightNet) {
    let mut rng = stream_rng(7, 0);
    let mut store = ParamStore::new();
    let a = WeightNet::new(&mut store, "alpha", Group::Generator, D, T, &mut rng);
    let b = WeightNet::new(&mut store, "beta", Group::Generator, D, T, &mut rng);
    for net in [a, b] {
        let shape = store.get(net.out.w).shape().to_vec();
        let v = uniform_init(&mut rng, &shape, 1);
        store.set(net.out.w, v).expect("same shape");
    }
    (store, a, b)
}

fn alr_body(t: &mut Tape, x: Var) -> Result<Var> {
    let (w, h, hs) = unpack(t, x)?;
    let theta = ssm::compute_ssm(t, w, h, GRID)?;
    let theta_star = ssm::compute_ssm(t, w, hs, GRID)?;
    let split = alr::split_residual(t, &theta, &theta_star, 0.2)?;
    let (store, a, b) = weight_nets();
    let mut p = Binder::frozen(&store);
    let alpha = a.forward(t, &mut p, split.easy, hs)?;
    let beta = b.forward(t, &mut p, split.hard, hs)?;
    alr::alr_loss(t, &split, alpha, beta, D)
}

fn masks(t: &mut Tape, x: Var) -> Result<(ssm::LayoutMask, Var, ssm::LayoutMask, Var)> {
    let (w, h, hs) = unpack(t, x)?;
    let theta = ssm::compute_ssm(t, w, h, GRID)?;
    let theta_star = ssm::compute_ssm(t, w, hs, GRID)?;
    let m = ssm::layout_mask(t, &theta)?;
    let ms = ssm::layout_mask(t, &theta_star)?;
    Ok((m, h, ms, hs))
}

fn probs(t: &mut Tape, x: Var, n: usize) -> Result<Vec<Var>> {
    (0..n)
        .map(|k| {
            let v = t.slice(x, k, &[1])?;
            Ok(t.sigmoid(v))
        })
        .collect()
}

fn composite_cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $point:expr, $body:expr) => {
            Case { name: $name, kind: Kind::Composite, point: $point, body: $body }
        };
    }
    vec![
        case!("ssm_tvm", features, |t, x| {
            let (w, h, _) = unpack(t, x)?;
            let theta = ssm::compute_ssm(t, w, h, GRID)?;
            let q = ssm::compute_tvm(t, &theta, w)?;
            project(t, q)
        }),
        case!("ssm_alr", features, alr_body),
        case!("alr_fixed", features, |t, x| {
            let (w, h, hs) = unpack(t, x)?;
            let theta = ssm::compute_ssm(t, w, h, GRID)?;
            let theta_star = ssm::compute_ssm(t, w, hs, GRID)?;
            alr::fixed_alr_loss(t, theta.theta, theta_star.theta)
        }),
        case!("pr", features, |t, x| {
            let (m, h, ms, hs) = masks(t, x)?;
            lvr::pr_loss(t, &m, h, &ms, hs)
        }),
        case!("sr", features, |t, x| {
            let (m, h, ms, hs) = masks(t, x)?;
            lvr::sr_loss(t, &m, h, &ms, hs)
        }),
        case!("lvr", features, |t, x| {
            let (m, h, ms, hs) = masks(t, x)?;
            let pr = lvr::pr_loss(t, &m, h, &ms, hs)?;
            let sr = lvr::sr_loss(t, &m, h, &ms, hs)?;
            lvr::lvr_loss(t, LvrWeights { eta1: 1.0, eta2: 0.5 }, pr, sr)
        }),
        case!("g_adv", |r| uniform(r, &[2], -2.0, 2.0), |t, x| {
            let p = probs(t, x, 2)?;
            losses::g_adv_loss(t, p[0], p[1])
        }),
        case!("d_adv", |r| uniform(r, &[4], -2.0, 2.0), |t, x| {
            let p = probs(t, x, 4)?;
            losses::d_adv_loss(t, p[0], p[1], p[2], p[3])
        }),
        case!("total_g", |r| uniform(r, &[9], 0.1, 2.0), |t, x| {
            let p = probs(t, x, 4)?;
            let adv = [losses::g_adv_loss(t, p[0], p[1])?, losses::g_adv_loss(t, p[2], p[3])?];
            let s: Vec<Var> = (4..9).map(|k| t.slice(x, k, &[])).collect::<Result<_>>()?;
            let stage = StageTerms {
                layout: Some(s[0]),
                rec: Some(s[1]),
                lvr: Some(s[2]),
                ..Default::default()
            };
            let w = GWeights { lambda1: 0.1, lambda2: 5.0, kl: 1.0 };
            let total = losses::total_g_loss(t, w, &adv, &[stage], Some(s[3]), Some(s[4]))?;
            t.mul(total, total)
        }),
        case!("total_d", |r| uniform(r, &[8], -2.0, 2.0), |t, x| {
            let p = probs(t, x, 8)?;
            let a = losses::d_adv_loss(t, p[0], p[1], p[2], p[3])?;
            let b = losses::d_adv_loss(t, p[4], p[5], p[6], p[7])?;
            losses::total_d_loss(t, &[a, b])
        }),
        case!("rec", |r| uniform(r, &[24], -1.0, 1.0), |t, x| {
            let (a, b) = two(t, x, &[3, 2, 2])?;
            losses::rec_loss(t, a, b)
        }),
        case!("conditioning_augment", |r| uniform(r, &[6], -1.0, 1.0), |t, x| {
            let (mu, lv) = two(t, x, &[3])?;
            let (s, kl) = conditioning_augment(t, mu, lv, &[0.3, -1.1, 0.8])?;
            let p = project(t, s)?;
            t.add(p, kl)
        }),
        case!("matching", |r| uniform(r, &[2 * (D * N + D * T)], -1.0, 1.0), |t, x| {
            let mut o = 0;
            let valid = [vec![true; T], vec![true, true, false]];
            let mut batch = Vec::new();
            for v in valid {
                let regions = part(t, x, &mut o, &[D, N])?;
                let words = part(t, x, &mut o, &[D, T])?;
                let count = v.iter().filter(|&&b| b).count() as f64;
                let avg = Tensor::from_fn(&[T, 1], |j| if v[j] { 1.0 / count } else { 0.0 });
                let avg = t.constant(avg);
                let mean = t.matmul(words, avg)?;
                let word_mean = t.reshape(mean, &[D])?;
                batch.push(MatchInput { regions, words, word_mean, valid: v });
            }
            losses::matching_loss(t, &batch, 0.5)
        }),
    ]
}

/// Smallest configuration the end-to-end generator check runs on.
pub fn tiny_config(seed: u64) -> GanConfig {
    GanConfig {
        seed,
        stages: 2,
        base_resolution: 8,
        feature_dim: 16,
        sentence_dim: 16,
        words: 4,
        noise_dim: 8,
        batch_size: 2,
        ..GanConfig::default()
    }
}

/// Entries of the generator the end-to-end check perturbs.
pub const GENERATOR_ENTRIES: usize = 50;

/// A model at a generic point: generator tensors that start at zero are
/// redrawn. The zero-initialised weight-network outputs otherwise tie every
/// layout weight, which puts the max/min ordering term on a kink.
fn generic_model(cfg: &GanConfig) -> Result<Model> {
    let mut model = Model::new(cfg)?;
    let mut rng = stream_rng(cfg.seed, 0x9e);
    let zeros: Vec<_> = model
        .store
        .ids_in(Group::Generator)
        .filter(|&id| model.store.get(id).data().iter().all(|&v| v == 0.0))
        .collect();
    for id in zeros {
        let shape = model.store.get(id).shape().to_vec();
        let fan_in = shape.get(1).copied().unwrap_or(4);
        model.store.set(id, uniform_init(&mut rng, &shape, fan_in))?;
    }
    Ok(model)
}

/// Relative error of the full generator objective w.r.t. a random subset
/// of generator entries at point `k`.
fn generator_point(k: usize, new_tape: &(dyn Fn() -> Tape + Sync)) -> Result<f64> {
    let cfg = tiny_config(1000 + k as u64);
    let model = generic_model(&cfg)?;
    let data = Dataset::build(&cfg, cfg.batch_size, crate::data::Split::Train)?;
    let inputs = data
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| sample_input(&model, pair, &mut sample_rng(cfg.seed, 0, i), true))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream_rng(cfg.seed, 0x9c);
    let entries = pick_entries(&model, Group::Generator, GENERATOR_ENTRIES, &mut rng)?;
    objective_grad_check_on(new_tape, &model, &inputs, &entries, EPS)
}

/// Names of every check in suite order.
pub fn check_names() -> Vec<&'static str> {
    let mut v: Vec<_> = op_cases().iter().chain(&composite_cases()).map(|c| c.name).collect();
    v.push("generator_objective");
    v
}

/// Runs every check at `points` seeded points. `tolerance` overrides both
/// default tolerances; `fault` corrupts one op's backward on every tape.
pub fn run(points: usize, tolerance: Option<f64>, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let new_tape = move || match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let cases: Vec<Case> = op_cases().into_iter().chain(composite_cases()).collect();
    let mut results = par::try_map(&cases, |c| {
        let mut worst = 0.0f64;
        for k in 0..points {
            let mut rng = stream_rng(0x6ead + k as u64, 0);
            let x = (c.point)(&mut rng);
            let err = grad_check_on(new_tape, c.body, &x, EPS)?;
            worst = worst.max(err);
        }
        Ok(result(c.name, c.kind, worst, tolerance))
    })?;
    let errors = par::try_map_range(points, |k| generator_point(k, &new_tape))?;
    let worst = errors.into_iter().fold(0.0, f64::max);
    results.push(result("generator_objective", Kind::Composite, worst, tolerance));
    Ok(results)
}

fn result(name: &'static str, kind: Kind, max_error: f64, tolerance: Option<f64>) -> CheckResult {
    let tolerance = tolerance.unwrap_or(match kind {
        Kind::Op => OP_TOLERANCE,
        Kind::Composite => COMPOSITE_TOLERANCE,
    });
    // NaN errors fail.
    let passed = max_error <= tolerance;
    CheckResult { name, kind, max_error, tolerance, passed }
}
