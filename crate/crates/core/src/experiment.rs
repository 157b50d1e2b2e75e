//! Train, evaluate, ablate and sweep drivers. Every run writes plain CSV so
//! results can be plotted without this crate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{GanConfig, RunConfig};
use crate::data::{self, vocab, ScenePair, Split};
use crate::error::{Error, Result};
use crate::gan::train::{caption_input, sample_input};
use crate::gan::{checkpoint, Dataset, LossRecord, Mode, Model, Trainer};
use crate::metrics::{self, FeatureMap, GaussianStats};
use crate::nn::{stream_rng, Binder};
use crate::par;
use crate::tensor::{Tape, Tensor};

/// Seed of the held-out scenes; fixed so every run is scored on the same set.
pub const EVAL_DATA_SEED: u64 = 0xe7a1;
/// Noise stream for evaluation and image dumps.
const EVAL_NOISE_STREAM: u64 = 0xe7a10;
const TRIAL_STREAM: u64 = 0x7e1a;
/// Seed of the fixed random feature map behind toy-FID.
pub const FID_FEATURE_SEED: u64 = 0xf1d;
/// Candidate pool size for R-precision (capped by the eval set size).
pub const R_PRECISION_POOL: usize = 100;
/// Floor added to occupancy before normalising the oracle similarity matrix.
pub const ORACLE_EPS: f64 = 1e-3;

/// Headline metrics of one model on the held-out set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub toy_fid: f64,
    pub inception_score: f64,
    pub r_precision: f64,
    pub layout_agreement: f64,
    /// Same measure on the real-image encoder's similarity matrices: the
    /// targets the layout term pulls toward, so a ceiling on what it can
    /// teach.
    pub target_layout_agreement: f64,
}

impl EvalMetrics {
    /// Field-wise mean; `None` for an empty slice.
    pub fn mean(all: &[EvalMetrics]) -> Option<EvalMetrics> {
        let n = all.len() as f64;
        let avg = |f: fn(&EvalMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        (!all.is_empty()).then(|| EvalMetrics {
            toy_fid: avg(|m| m.toy_fid),
            inception_score: avg(|m| m.inception_score),
            r_precision: avg(|m| m.r_precision),
            layout_agreement: avg(|m| m.layout_agreement),
            target_layout_agreement: avg(|m| m.target_layout_agreement),
        })
    }
}

/// Held-out scenes plus the statistics of their real final-stage images.
pub struct EvalSet {
    pub pairs: Vec<ScenePair>,
    real: GaussianStats,
    features: FeatureMap,
}

impl EvalSet {
    pub fn build(cfg: &GanConfig, size: usize) -> Result<Self> {
        let data_cfg = GanConfig { seed: EVAL_DATA_SEED, ..cfg.clone() };
        let pairs = Dataset::build(&data_cfg, size, Split::Eval)?.pairs;
        let features = FeatureMap::new(FID_FEATURE_SEED);
        let last = cfg.stages - 1;
        let real = par::try_map(&pairs, |p| features.features(&p.images[last]))?;
        Ok(EvalSet { real: GaussianStats::from_samples(&real)?, pairs, features })
    }
}

struct SceneScore {
    features: Vec<f64>,
    probs: Vec<f64>,
    query: Vec<f64>,
    candidate: Vec<f64>,
    agreement: f64,
    target_agreement: f64,
}

/// 2×2 average of a `[T, s, s]` occupancy map.
fn halve(truth: &Tensor) -> Result<Tensor> {
    let s = truth.shape();
    let (t, side) = (s[0], s[1]);
    let half = side / 2;
    let d = truth.data();
    let out = Tensor::from_fn(&[t, half, half], |k| {
        let (j, r, c) = (k / (half * half), (k / half) % half, k % half);
        let at = |y: usize, x: usize| d[(j * side + y) * side + x];
        0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1))
    });
    Ok(out)
}

/// Group-pooled argmax agreement of one `[T, N]` matrix with the oracle.
fn agreement(theta: &Tensor, truth: &Tensor, groups: &[Option<usize>], parts: usize) -> Result<f64> {
    let theta = metrics::pool_rows(theta, groups, parts)?;
    let oracle = metrics::pool_rows(&data::oracle_ssm(truth, ORACLE_EPS)?, groups, parts)?;
    metrics::layout_agreement(&theta, &oracle)
}

/// Layout agreement of one scene: the group-pooled argmax agreement between
/// each similarity matrix a refinement stage consumes and the occupancy
/// oracle at that resolution, averaged over stages. A single-stage model
/// has no refinement, so its stage-0 features are scored instead.
fn score_scene(model: &Model, features: &FeatureMap, pair: &ScenePair, k: usize) -> Result<SceneScore> {
    let cfg = &model.cfg;
    let input = sample_input(model, pair, &mut stream_rng(EVAL_NOISE_STREAM, k as u64), false)?;
    let mut tape = Tape::new();
    let mut p = Binder::frozen(&model.store);
    let g = model.generate(&mut tape, &mut p, &input, Mode::Test)?;
    let mut thetas: Vec<_> = g.thetas.iter().map(|t| t.theta).collect();
    if thetas.is_empty() {
        thetas.push(model.similarity(&mut tape, &g.text, &input.text.valid, g.features[0])?.theta);
    }
    let groups = data::token_groups(&pair.tokens);
    let parts = pair.spec.objects.len() + 1;
    let mut total = 0.0;
    for (i, &theta) in thetas.iter().enumerate() {
        total += agreement(tape.value(theta), &pair.layout_truth[i], &groups, parts)?;
    }
    let model_agreement = total / thetas.len() as f64;
    let mut total = 0.0;
    for (i, real) in pair.images.iter().enumerate() {
        let img = tape.constant(real.clone());
        let h = model.encoder.forward(&mut tape, &mut p, img)?;
        let theta = model.similarity(&mut tape, &g.text, &input.text.valid, h)?;
        total += agreement(tape.value(theta.theta), &halve(&pair.layout_truth[i])?, &groups, parts)?;
    }
    let target_agreement = total / pair.images.len() as f64;
    let last = cfg.stages - 1;
    let image = g.images[last];
    let regions = model.encoder.forward(&mut tape, &mut p, image)?;
    let r = tape.value(regions);
    let n = r.shape()[1] * r.shape()[2];
    let query = r.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let image = tape.value(image);
    Ok(SceneScore {
        features: features.features(image)?,
        probs: metrics::color_probs(image),
        query,
        candidate: input.text.word_mean.data().to_vec(),
        agreement: model_agreement,
        target_agreement,
    })
}

/// Test-mode generation for every held-out caption, then toy-FID against
/// the real images, inception score from the colour classifier,
/// R-precision of image regions against captions and layout agreement.
pub fn evaluate(model: &Model, set: &EvalSet) -> Result<EvalMetrics> {
    let indexed: Vec<(usize, &ScenePair)> = set.pairs.iter().enumerate().collect();
    let scores = par::try_map(&indexed, |&(k, pair)| score_scene(model, &set.features, pair, k))?;
    let n = scores.len();
    let fake: Vec<Vec<f64>> = scores.iter().map(|s| s.features.clone()).collect();
    let toy_fid = metrics::fid(&GaussianStats::from_samples(&fake)?, &set.real)?;
    let probs = Tensor::new(
        vec![n, metrics::COLOR_CLASSES],
        scores.iter().flat_map(|s| s.probs.iter().copied()).collect(),
    )?;
    let inception_score = metrics::inception_score(&probs)?;
    let queries: Vec<Vec<f64>> = scores.iter().map(|s| s.query.clone()).collect();
    let candidates: Vec<Vec<f64>> = scores.iter().map(|s| s.candidate.clone()).collect();
    let truth: Vec<usize> = (0..n).collect();
    let trials = metrics::sample_trials(&truth, n, R_PRECISION_POOL.min(n), &mut stream_rng(TRIAL_STREAM, 0))?;
    let r_precision = metrics::r_precision(&queries, &candidates, &trials)?;
    let layout_agreement = scores.iter().map(|s| s.agreement).sum::<f64>() / n as f64;
    let target_layout_agreement = scores.iter().map(|s| s.target_agreement).sum::<f64>() / n as f64;
    Ok(EvalMetrics { toy_fid, inception_score, r_precision, layout_agreement, target_layout_agreement })
}

/// Header of `metrics.csv`.
pub const METRICS_HEADER: [&str; 18] = [
    "step",
    "toy_fid",
    "inception_score",
    "r_precision",
    "layout_agreement",
    "target_layout_agreement",
    "g_total",
    "d_total",
    "g_adv",
    "layout",
    "rec",
    "pr",
    "sr",
    "lvr",
    "kl",
    "matching",
    "encoder_matching",
    "d_grad_norm",
];

/// Header of `losses.csv` (the [`LossRecord`] fields).
pub const LOSSES_HEADER: [&str; 13] = [
    "step",
    "g_total",
    "d_total",
    "g_adv",
    "layout",
    "rec",
    "pr",
    "sr",
    "lvr",
    "kl",
    "matching",
    "encoder_matching",
    "d_grad_norm",
];

fn metrics_row(step: u64, m: &EvalMetrics, l: &LossRecord) -> Vec<String> {
    let mut row = vec![step.to_string()];
    row.extend(
        [
            m.toy_fid,
            m.inception_score,
            m.r_precision,
            m.layout_agreement,
            m.target_layout_agreement,
            l.g_total,
            l.d_total,
            l.g_adv,
            l.layout,
            l.rec,
            l.pr,
            l.sr,
            l.lvr,
            l.kl,
            l.matching,
            l.encoder_matching,
            l.d_grad_norm,
        ]
        .iter()
        .map(f64::to_string),
    );
    row
}

/// Outcome of [`train_run`].
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    /// Final model.
    pub metrics: EvalMetrics,
    /// Mean over the evaluations after the first half of training, final
    /// included; steadier than one snapshot of an oscillating GAN.
    pub tail: EvalMetrics,
    pub tail_evals: usize,
    /// Last training step's losses; all zero when no step ran.
    pub last: LossRecord,
    pub seconds: f64,
}

/// Output files of a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const LOSSES: &str = "losses.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const FINAL: &str = "final.ckpt";
    pub const SUMMARY: &str = "summary.json";
    pub const FAULT: &str = "fault.txt";
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Trains one model as configured and writes `config.toml`, `losses.csv`
/// (one row per step), `metrics.csv` (every `eval_every` steps and at the
/// end), checkpoints and `summary.json` under `output_dir`. A numeric fault
/// leaves the rows so far plus `fault.txt` and returns the error.
pub fn train_run(cfg: &RunConfig, log: &(dyn Fn(&str) + Sync)) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir.join(files::CHECKPOINTS))?;
    std::fs::write(dir.join(files::CONFIG), cfg.to_toml()?)?;
    let gan = &cfg.gan;
    let data = Dataset::build(gan, cfg.dataset_size, Split::Train)?;
    let eval = EvalSet::build(gan, cfg.eval_size)?;
    let mut trainer = Trainer::new(Model::new(gan)?, data)?;
    let mut losses = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join(files::LOSSES))?;
    losses.write_record(LOSSES_HEADER)?;
    let mut metrics = csv::Writer::from_path(dir.join(files::METRICS))?;
    metrics.write_record(METRICS_HEADER)?;
    let mut last = LossRecord::default();
    let mut tail = Vec::new();
    let in_tail = |step: usize| 2 * step > gan.steps;
    for _ in 0..gan.steps {
        last = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                losses.flush()?;
                metrics.flush()?;
                std::fs::write(dir.join(files::FAULT), format!("{e}\n"))?;
                return Err(e);
            }
        };
        losses.serialize(&last)?;
        let step = trainer.step as usize;
        if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) && step < gan.steps {
            let m = evaluate(&trainer.model, &eval)?;
            metrics.write_record(metrics_row(trainer.step, &m, &last))?;
            metrics.flush()?;
            if in_tail(step) {
                tail.push(m);
            }
            log(&format!(
                "step {step}: layout_agreement {:.4} (target {:.4}) toy_fid {:.4} g {:.4} d {:.4}",
                m.layout_agreement, m.target_layout_agreement, m.toy_fid, last.g_total, last.d_total
            ));
        }
        if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
            let path = dir.join(files::CHECKPOINTS).join(format!("step{step:06}.ckpt"));
            checkpoint::save(&path, &trainer.model, trainer.step)?;
        }
    }
    losses.flush()?;
    let m = evaluate(&trainer.model, &eval)?;
    metrics.write_record(metrics_row(trainer.step, &m, &last))?;
    metrics.flush()?;
    tail.push(m);
    checkpoint::save(&dir.join(files::FINAL), &trainer.model, trainer.step)?;
    let summary = RunSummary {
        steps: trainer.step,
        metrics: m,
        tail: EvalMetrics::mean(&tail).expect("final evaluation"),
        tail_evals: tail.len(),
        last,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(files::SUMMARY), &summary)?;
    log(&format!(
        "done {} steps in {:.0}s: layout_agreement {:.4} toy_fid {:.4} IS {:.4} R-precision {:.2}",
        summary.steps, summary.seconds, m.layout_agreement, m.toy_fid, m.inception_score, m.r_precision
    ));
    Ok(summary)
}

/// Ablation variants, each a set of objective flags on top of the base
/// multi-stage GAN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    BaseAlr,
    BaseAlrPr,
    Full,
    /// Layout term with fixed weights (plain Frobenius distance).
    BaseAlrFixed,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::BaseAlr,
        Variant::BaseAlrPr,
        Variant::Full,
        Variant::BaseAlrFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::BaseAlr => "Base+ALR",
            Variant::BaseAlrPr => "Base+ALR+PR",
            Variant::Full => "Full",
            Variant::BaseAlrFixed => "Base+ALR*",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseAlr => "base_alr",
            Variant::BaseAlrPr => "base_alr_pr",
            Variant::Full => "full",
            Variant::BaseAlrFixed => "base_alr_fixed",
        }
    }

    /// The reconstruction term travels with the layout term: both live in
    /// the layout refinement stage, and the reconstruction is what teaches
    /// a stage to refine from real-image features.
    pub fn apply(self, cfg: &mut GanConfig) {
        let (alr, pr, sr, adaptive) = match self {
            Variant::Base => (false, false, false, true),
            Variant::BaseAlr => (true, false, false, true),
            Variant::BaseAlrPr => (true, true, false, true),
            Variant::Full => (true, true, true, true),
            Variant::BaseAlrFixed => (true, false, false, false),
        };
        cfg.alr = alr;
        cfg.rec = alr;
        cfg.pr = pr;
        cfg.sr = sr;
        cfg.adaptive_weights = adaptive;
    }

    /// `none`, `adaptive` or `fixed`.
    pub fn layout_kind(self) -> &'static str {
        match self {
            Variant::Base => "none",
            Variant::BaseAlrFixed => "fixed",
            _ => "adaptive",
        }
    }
}

/// One row of `ablation.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub layout_kind: &'static str,
    pub steps: u64,
    pub toy_fid: f64,
    pub inception_score: f64,
    pub r_precision: f64,
    pub layout_agreement: f64,
    pub target_layout_agreement: f64,
    pub tail_toy_fid: f64,
    pub tail_inception_score: f64,
    pub tail_r_precision: f64,
    pub tail_layout_agreement: f64,
    pub tail_evals: usize,
    pub layout: f64,
    pub rec: f64,
    pub pr: f64,
    pub sr: f64,
    pub lvr: f64,
    pub seconds: f64,
}

/// Header of `ablation.csv`.
pub const ABLATION_HEADER: [&str; 20] = [
    "variant",
    "seed",
    "layout_kind",
    "steps",
    "toy_fid",
    "inception_score",
    "r_precision",
    "layout_agreement",
    "target_layout_agreement",
    "tail_toy_fid",
    "tail_inception_score",
    "tail_r_precision",
    "tail_layout_agreement",
    "tail_evals",
    "layout",
    "rec",
    "pr",
    "sr",
    "lvr",
    "seconds",
];

/// Output file of [`ablate`] inside `output_dir`.
pub const ABLATION_CSV: &str = "ablation.csv";

fn run_dir(base: &Path, parts: &[String]) -> PathBuf {
    parts.iter().fold(base.to_path_buf(), |p, s| p.join(s))
}

/// Trains every variant for every seed (shared seeds across variants) and
/// writes `ablation.csv`, one row per (seed, variant).
pub fn ablate(cfg: &RunConfig, seeds: &[u64], log: &(dyn Fn(&str) + Sync)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let runs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.iter().map(move |&v| (s, v)))
        .collect();
    let rows = par::try_map(&runs, |&(seed, variant)| {
        let mut run = cfg.clone();
        run.gan.seed = seed;
        variant.apply(&mut run.gan);
        run.output_dir = run_dir(&cfg.output_dir, &[format!("seed{seed}"), variant.slug().into()]);
        let tag = format!("[{} seed {seed}] ", variant.name());
        let s = train_run(&run, &|m| log(&format!("{tag}{m}")))?;
        Ok(AblationRow {
            variant: variant.name(),
            seed,
            layout_kind: variant.layout_kind(),
            steps: s.steps,
            toy_fid: s.metrics.toy_fid,
            inception_score: s.metrics.inception_score,
            r_precision: s.metrics.r_precision,
            layout_agreement: s.metrics.layout_agreement,
            target_layout_agreement: s.metrics.target_layout_agreement,
            tail_toy_fid: s.tail.toy_fid,
            tail_inception_score: s.tail.inception_score,
            tail_r_precision: s.tail.r_precision,
            tail_layout_agreement: s.tail.layout_agreement,
            tail_evals: s.tail_evals,
            layout: s.last.layout,
            rec: s.last.rec,
            pr: s.last.pr,
            sr: s.last.sr,
            lvr: s.last.lvr,
            seconds: s.seconds,
        })
    })?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join(ABLATION_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Parameters [`sweep`] can vary.
pub const SWEEP_PARAMS: [&str; 5] = ["gamma", "eta1", "eta2", "m", "lambda1"];

/// Sets `param` to `value`; `m` is the number of stages.
pub fn set_param(cfg: &mut GanConfig, param: &str, value: f64) -> Result<()> {
    match param {
        "gamma" => cfg.gamma = value,
        "eta1" => cfg.eta1 = value,
        "eta2" => cfg.eta2 = value,
        "lambda1" => cfg.lambda1 = value,
        "m" => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("m must be a positive integer, got {value}")));
            }
            cfg.stages = value as usize;
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {param:?}; expected one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    cfg.validate()
}

/// One row of `sweep_<param>.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub steps: u64,
    pub toy_fid: f64,
    pub inception_score: f64,
    pub r_precision: f64,
    pub layout_agreement: f64,
    pub target_layout_agreement: f64,
    pub tail_toy_fid: f64,
    pub tail_inception_score: f64,
    pub tail_r_precision: f64,
    pub tail_layout_agreement: f64,
    pub tail_evals: usize,
    pub seconds: f64,
}

/// Header of `sweep_<param>.csv`.
pub const SWEEP_HEADER: [&str; 15] = [
    "param",
    "value",
    "seed",
    "steps",
    "toy_fid",
    "inception_score",
    "r_precision",
    "layout_agreement",
    "target_layout_agreement",
    "tail_toy_fid",
    "tail_inception_score",
    "tail_r_precision",
    "tail_layout_agreement",
    "tail_evals",
    "seconds",
];

pub fn sweep_csv(param: &str) -> String {
    format!("sweep_{param}.csv")
}

/// One run per value, all with the configured seed; writes
/// `sweep_<param>.csv`.
pub fn sweep(cfg: &RunConfig, param: &str, values: &[f64], log: &(dyn Fn(&str) + Sync)) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let runs = values
        .iter()
        .map(|&v| {
            let mut run = cfg.clone();
            set_param(&mut run.gan, param, v)?;
            run.output_dir = run_dir(&cfg.output_dir, &[format!("sweep_{param}"), format!("{param}={v}")]);
            Ok((v, run))
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let rows = par::try_map(&runs, |(v, run)| {
        let tag = format!("[{param}={v}] ");
        let s = train_run(run, &|m| log(&format!("{tag}{m}")))?;
        Ok(SweepRow {
            param: param.to_string(),
            value: *v,
            seed: run.gan.seed,
            steps: s.steps,
            toy_fid: s.metrics.toy_fid,
            inception_score: s.metrics.inception_score,
            r_precision: s.metrics.r_precision,
            layout_agreement: s.metrics.layout_agreement,
            target_layout_agreement: s.metrics.target_layout_agreement,
            tail_toy_fid: s.tail.toy_fid,
            tail_inception_score: s.tail.inception_score,
            tail_r_precision: s.tail.r_precision,
            tail_layout_agreement: s.tail.layout_agreement,
            tail_evals: s.tail_evals,
            seconds: s.seconds,
        })
    })?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join(sweep_csv(param)))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Metrics of a saved model on the held-out set.
pub fn eval_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(u64, EvalMetrics)> {
    cfg.validate()?;
    let (model, step) = checkpoint::load(path, &cfg.gan)?;
    let set = EvalSet::build(&cfg.gan, cfg.eval_size)?;
    Ok((step, evaluate(&model, &set)?))
}

/// Binary portable pixmap of a `[3, s, s]` image in [−1, 1].
pub fn ppm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("ppm", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for k in 0..n {
        for c in 0..3 {
            let v = ((d[c * n + k].clamp(-1.0, 1.0) + 1.0) * 127.5).round();
            out.push(v as u8);
        }
    }
    Ok(out)
}

/// Caption tokens padded to `words`.
pub fn caption_tokens(text: &str, words: usize) -> Result<Vec<usize>> {
    let mut ids = vocab::parse(text)?;
    if ids.is_empty() {
        return Err(Error::Data("caption has no words".into()));
    }
    if ids.len() > words {
        return Err(Error::Config(format!("caption has {} tokens but the model takes {words}", ids.len())));
    }
    ids.resize(words, vocab::PAD);
    Ok(ids)
}

/// Test-mode images of one caption, one per stage.
pub fn generate_images(model: &Model, tokens: &[usize], k: usize) -> Result<Vec<Tensor>> {
    let cfg = &model.cfg;
    let mut rng = stream_rng(EVAL_NOISE_STREAM ^ cfg.seed, k as u64);
    let input = caption_input(model, tokens, &mut rng)?;
    let mut tape = Tape::new();
    let mut p = Binder::frozen(&model.store);
    let g = model.generate(&mut tape, &mut p, &input, Mode::Test)?;
    Ok(g.images.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Writes `sample{k}_stage{i}.ppm` for each caption plus `captions.txt`.
/// Without captions, the first `count` held-out captions are used.
pub fn gen(cfg: &RunConfig, path: &Path, captions: &[String], count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (model, _) = checkpoint::load(path, &cfg.gan)?;
    let tokens: Vec<Vec<usize>> = if captions.is_empty() {
        let data_cfg = GanConfig { seed: EVAL_DATA_SEED, ..cfg.gan.clone() };
        let max = data_cfg.max_objects();
        (0..count)
            .map(|i| {
                let spec = data::sample_scene_upto(data::scene_seed(EVAL_DATA_SEED, Split::Eval, i), max);
                data::tokens(&spec, data_cfg.words)
            })
            .collect::<Result<_>>()?
    } else {
        captions.iter().map(|c| caption_tokens(c, cfg.gan.words)).collect::<Result<_>>()?
    };
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut list = std::fs::File::create(out.join("captions.txt"))?;
    for (k, ids) in tokens.iter().enumerate() {
        let images = generate_images(&model, ids, k)?;
        for (i, img) in images.iter().enumerate() {
            let file = out.join(format!("sample{k}_stage{i}.ppm"));
            std::fs::write(&file, ppm_bytes(img)?)?;
            written.push(file);
        }
        let text: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != vocab::PAD)
            .map(|&id| vocab::word(id))
            .collect::<Result<_>>()?;
        writeln!(list, "sample{k}: {}", text.join(" "))?;
    }
    Ok(written)
}
