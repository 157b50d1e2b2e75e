//! Networks: text encoder, conditioning augmentation, the initial feature
//! module, refinement stages, shared real-image encoder and discriminators.

use rand_chacha::ChaCha8Rng;

use crate::alr::{self, WeightNet};
use crate::config::GanConfig;
use crate::data::vocab;
use crate::error::{Error, Result};
use crate::lvr::{self, LvrWeights};
use crate::nn::{stream_rng, uniform_init, Affine, Binder, Conv, Group, Init, ParamId, ParamStore, LEAK};
use crate::ssm::{self, SemMatrix};
use crate::tensor::{Tape, Tensor, Var};

/// RNG stream used for parameter initialisation.
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, group: Group, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            first: Conv::new(store, &format!("{name}.0"), group, c, c, Init::Uniform, rng),
            second: Conv::new(store, &format!("{name}.1"), group, c, c, Init::Uniform, rng),
        }
    }

    /// `x + conv(leaky(conv(x)))`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let y = self.first.forward(tape, p, x)?;
        let y = tape.leaky_relu(y, LEAK);
        let y = self.second.forward(tape, p, y)?;
        tape.add(x, y)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    /// `[vocab, D]` lookup table.
    pub embedding: ParamId,
    pub project: Affine,
}

/// Caption encoding on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    /// `[D, T]`.
    pub words: Var,
    /// Mean of the non-padding word vectors, `[D]`.
    pub word_mean: Var,
    /// `[D_s]`.
    pub sentence: Var,
}

/// Caption encoding detached from any tape.
#[derive(Clone, Debug)]
pub struct TextConsts {
    pub words: Tensor,
    pub word_mean: Tensor,
    pub sentence: Tensor,
    /// `true` for real (non-padding) tokens.
    pub valid: Vec<bool>,
}

impl TextConsts {
    pub fn bind(&self, tape: &mut Tape) -> TextVars {
        TextVars {
            words: tape.constant(self.words.clone()),
            word_mean: tape.constant(self.word_mean.clone()),
            sentence: tape.constant(self.sentence.clone()),
        }
    }
}

pub fn token_mask(tokens: &[usize]) -> Vec<bool> {
    tokens.iter().map(|&t| t != vocab::PAD).collect()
}

impl TextEncoder {
    /// Embedding lookup; the sentence vector is the projection of the mean
    /// non-padding word.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, tokens: &[usize]) -> Result<TextVars> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab::SIZE) {
            return Err(Error::Vocabulary(format!("unknown token id {bad}")));
        }
        let valid = token_mask(tokens);
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Data("caption has no words".into()));
        }
        let table = p.var(tape, self.embedding);
        let rows = tape.gather_rows(table, tokens)?;
        let words = tape.transpose(rows)?;
        let t = tokens.len();
        let avg = Tensor::from_fn(&[t, 1], |j| if valid[j] { 1.0 / count as f64 } else { 0.0 });
        let avg = tape.constant(avg);
        let mean = tape.matmul(words, avg)?;
        let d = tape.shape(mean)[0];
        let word_mean = tape.reshape(mean, &[d])?;
        let sentence = self.project.forward(tape, p, word_mean)?;
        Ok(TextVars { words, word_mean, sentence })
    }
}

/// Conditioning augmentation: resample the sentence vector from a learned
/// diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct CondAug {
    pub mean: Affine,
    pub log_var: Affine,
}

impl CondAug {
    /// Returns `(s, kl)` with `s = μ + σ·ε` and `kl` the per-dimension mean
    /// of `KL(N(μ, σ²) ‖ N(0, 1))`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, s_raw: Var, eps: &[f64]) -> Result<(Var, Var)> {
        let mu = self.mean.forward(tape, p, s_raw)?;
        let lv = self.log_var.forward(tape, p, s_raw)?;
        conditioning_augment(tape, mu, lv, eps)
    }
}

/// `s = μ + exp(½ logσ²)·ε`, `kl = mean(½(μ² + σ² − logσ² − 1))`.
pub fn conditioning_augment(tape: &mut Tape, mu: Var, log_var: Var, eps: &[f64]) -> Result<(Var, Var)> {
    let shape = tape.shape(mu).to_vec();
    let half = tape.scale(log_var, 0.5);
    let sigma = tape.exp(half);
    let e = tape.constant(Tensor::new(shape, eps.to_vec())?);
    let noise = tape.mul(sigma, e)?;
    let s = tape.add(mu, noise)?;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(log_var);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -1.0);
    let m = tape.mean(c);
    Ok((s, tape.scale(m, 0.5)))
}

/// Maps (sentence, noise) to the first feature grid.
#[derive(Clone, Debug)]
pub struct Iftm {
    pub input: Affine,
    pub blocks: [ResBlock; 2],
    pub channels: usize,
    pub side: usize,
}

impl Iftm {
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, s: Var, z: Var) -> Result<Var> {
        let x = tape.concat(&[s, z])?;
        let y = self.input.forward(tape, p, x)?;
        let y = tape.reshape(y, &[self.channels, self.side, self.side])?;
        let mut h = tape.leaky_relu(y, LEAK);
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

/// One refinement stage: `[Q; H] → conv → residual → 2× upsample → conv`,
/// plus the two weight networks of its layout loss.
#[derive(Clone, Debug)]
pub struct Stage {
    pub joint: Conv,
    pub block: ResBlock,
    pub up: Conv,
    pub alpha: WeightNet,
    pub beta: WeightNet,
}

impl Stage {
    /// `q` is `[D, N]`, `h_prev` is `[D, s, s]`; returns `[D, 2s, 2s]`.
    pub fn body(&self, tape: &mut Tape, p: &mut Binder, q: Var, h_prev: Var) -> Result<Var> {
        let shape = tape.shape(h_prev).to_vec();
        let q = tape.reshape(q, &shape)?;
        let x = tape.concat(&[q, h_prev])?;
        let x = self.joint.forward(tape, p, x)?;
        let x = tape.leaky_relu(x, LEAK);
        let x = self.block.forward(tape, p, x)?;
        let x = tape.upsample2(x)?;
        let x = self.up.forward(tape, p, x)?;
        Ok(tape.leaky_relu(x, LEAK))
    }
}

/// Real-image encoder: `[3, 2s, 2s] → [D, s, s]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageEncoder {
    pub first: Conv,
    pub second: Conv,
}

impl ImageEncoder {
    /// `[3, s, s]` image to `[D, s/2, s/2]` region features, for any even `s`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, img: Var) -> Result<Var> {
        let s = tape.shape(img).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] < 2 || !s[1].is_multiple_of(2) {
            return Err(Error::dim("encode_real_image", &s, &[3, 0, 0]));
        }
        let x = self.first.forward(tape, p, img)?;
        let x = tape.leaky_relu(x, LEAK);
        let x = tape.mean_pool2(x)?;
        self.second.forward(tape, p, x)
    }
}

/// Conv stack down to 4×4 with an unconditional head and a
/// sentence-conditioned head, both sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv>,
    pub sentence: Affine,
    pub joint: Conv,
    pub uncond: Affine,
    pub cond: Affine,
    pub channels: usize,
    pub side: usize,
}

impl Discriminator {
    /// `(D(img), D(img, s))`, each of shape `[1]`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, img: Var, s_raw: Var) -> Result<(Var, Var)> {
        let s = tape.shape(img).to_vec();
        if s != [3, self.side, self.side] {
            return Err(Error::dim("discriminator", &s, &[3, self.side, self.side]));
        }
        let mut x = img;
        for (i, c) in self.convs.iter().enumerate() {
            if i > 0 {
                x = tape.mean_pool2(x)?;
            }
            x = c.forward(tape, p, x)?;
            x = tape.leaky_relu(x, LEAK);
        }
        let flat_len = tape.value(x).numel();
        let flat = tape.reshape(x, &[flat_len])?;
        let u = self.uncond.forward(tape, p, flat)?;
        let u = tape.sigmoid(u);
        let sp = self.sentence.forward(tape, p, s_raw)?;
        let xc = tape.channel_bias(x, sp)?;
        let xc = tape.leaky_relu(xc, LEAK);
        let xc = self.joint.forward(tape, p, xc)?;
        let xc = tape.leaky_relu(xc, LEAK);
        let flat = tape.reshape(xc, &[flat_len])?;
        let c = self.cond.forward(tape, p, flat)?;
        Ok((u, tape.sigmoid(c)))
    }
}

/// All networks and their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: GanConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub ca: CondAug,
    pub iftm: Iftm,
    /// `stages[k]` is generator stage `k + 1`.
    pub stages: Vec<Stage>,
    pub to_rgb: Vec<Conv>,
    /// Shared by every stage: maps stage `i`'s image to stage `i`'s input
    /// grid. Trained only by the matching loss on real pairs.
    pub encoder: ImageEncoder,
    pub discriminators: Vec<Discriminator>,
}

impl Model {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let (d, ds, t) = (cfg.feature_dim, cfg.sentence_dim, cfg.words);
        let g = Group::Generator;
        let e = Group::Encoder;
        let rng = &mut rng;

        let embedding = store.add("text.embedding", e, uniform_init(rng, &[vocab::SIZE, d], 1));
        let text = TextEncoder {
            embedding,
            project: Affine::new(&mut store, "text.project", e, d, ds, Init::Uniform, rng),
        };
        let ca = CondAug {
            mean: Affine::new(&mut store, "ca.mean", g, ds, ds, Init::Uniform, rng),
            log_var: Affine::new(&mut store, "ca.log_var", g, ds, ds, Init::Uniform, rng),
        };
        let b = cfg.base_resolution;
        let iftm = Iftm {
            input: Affine::new(&mut store, "iftm.input", g, ds + cfg.noise_dim, d * b * b, Init::Uniform, rng),
            blocks: [
                ResBlock::new(&mut store, "iftm.block0", g, d, rng),
                ResBlock::new(&mut store, "iftm.block1", g, d, rng),
            ],
            channels: d,
            side: b,
        };
        let mut stages = Vec::new();
        for i in 1..cfg.stages {
            let n = format!("stage{i}");
            stages.push(Stage {
                joint: Conv::new(&mut store, &format!("{n}.joint"), g, 2 * d, d, Init::Uniform, rng),
                block: ResBlock::new(&mut store, &format!("{n}.block"), g, d, rng),
                up: Conv::new(&mut store, &format!("{n}.up"), g, d, d, Init::Uniform, rng),
                alpha: WeightNet::new(&mut store, &format!("{n}.alpha"), g, d, t, rng),
                beta: WeightNet::new(&mut store, &format!("{n}.beta"), g, d, t, rng),
            });
        }
        let to_rgb = (0..cfg.stages)
            .map(|i| Conv::new(&mut store, &format!("to_rgb{i}"), g, d, 3, Init::Uniform, rng))
            .collect();
        let encoder = ImageEncoder {
            first: Conv::new(&mut store, "encoder.0", e, 3, d, Init::Uniform, rng),
            second: Conv::new(&mut store, "encoder.1", e, d, d, Init::Uniform, rng),
        };
        let discriminators = (0..cfg.stages)
            .map(|i| {
                let side = cfg.side(i);
                let n = format!("disc{i}");
                let depth = (side / 4).trailing_zeros() as usize + 1;
                let dg = Group::Discriminator;
                let convs = (0..depth)
                    .map(|k| {
                        let cin = if k == 0 { 3 } else { d };
                        Conv::new(&mut store, &format!("{n}.conv{k}"), dg, cin, d, Init::Uniform, rng)
                    })
                    .collect();
                Discriminator {
                    convs,
                    sentence: Affine::new(&mut store, &format!("{n}.sentence"), dg, ds, d, Init::Uniform, rng),
                    joint: Conv::new(&mut store, &format!("{n}.joint"), dg, d, d, Init::Uniform, rng),
                    uncond: Affine::new(&mut store, &format!("{n}.uncond"), dg, d * 16, 1, Init::Uniform, rng),
                    cond: Affine::new(&mut store, &format!("{n}.cond"), dg, d * 16, 1, Init::Uniform, rng),
                    channels: d,
                    side,
                }
            })
            .collect();
        Ok(Model { cfg: cfg.clone(), store, text, ca, iftm, stages, to_rgb, encoder, discriminators })
    }

    /// Encodes a caption with frozen text-encoder parameters.
    pub fn text_consts(&self, tokens: &[usize]) -> Result<TextConsts> {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&self.store);
        let v = self.text.forward(&mut tape, &mut p, tokens)?;
        Ok(TextConsts {
            words: tape.value(v.words).clone(),
            word_mean: tape.value(v.word_mean).clone(),
            sentence: tape.value(v.sentence).clone(),
            valid: token_mask(tokens),
        })
    }

    /// `[3, s, s]` image in [−1, 1] from a `[D, s, s]` feature map.
    pub fn render(&self, tape: &mut Tape, p: &mut Binder, stage: usize, h: Var) -> Result<Var> {
        let x = self.to_rgb[stage].forward(tape, p, h)?;
        Ok(tape.tanh(x))
    }

    /// Similarity matrix between the caption words and a `[D, s, s]` map.
    pub fn similarity(&self, tape: &mut Tape, text: &TextVars, valid: &[bool], h: Var) -> Result<SemMatrix> {
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2]])?;
        ssm::compute_ssm_masked(tape, text.words, flat, (s[1], s[2]), Some(valid))
    }

    /// Applies refinement stage `i ≥ 1` given its similarity matrix.
    pub fn refine(&self, tape: &mut Tape, p: &mut Binder, i: usize, text: &TextVars, theta: &SemMatrix, h_prev: Var) -> Result<Var> {
        let q = ssm::compute_tvm(tape, theta, text.words)?;
        self.stages[i - 1].body(tape, p, q, h_prev)
    }
}

/// Inputs for one caption.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub tokens: Vec<usize>,
    pub text: TextConsts,
    /// Real image per stage; empty in test mode.
    pub real: Vec<Tensor>,
    pub noise: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Layout and reconstruction terms of one refinement stage. Disabled terms
/// are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageTerms {
    /// Adaptive layout term, or the fixed-weight distance when adaptive
    /// weights are off.
    pub layout: Option<Var>,
    pub adaptive: bool,
    pub rec: Option<Var>,
    pub pr: Option<Var>,
    pub sr: Option<Var>,
    pub lvr: Option<Var>,
}

/// Result of a generator pass on one caption.
#[derive(Clone, Debug)]
pub struct Generation {
    pub text: TextVars,
    pub s: Var,
    pub kl: Var,
    /// `[D, s_i, s_i]` per stage.
    pub features: Vec<Var>,
    pub images: Vec<Var>,
    /// Similarity matrix used by stage `i ≥ 1` (index `i − 1`).
    pub thetas: Vec<SemMatrix>,
    /// Train mode only; index `i − 1` for stage `i`.
    pub terms: Vec<StageTerms>,
}

impl Model {
    /// Runs every stage. Train mode also encodes the real images and builds
    /// the layout, reconstruction and refinement terms the flags enable.
    pub fn generate(&self, tape: &mut Tape, p: &mut Binder, input: &SampleInput, mode: Mode) -> Result<Generation> {
        let cfg = &self.cfg;
        if mode == Mode::Train && input.real.len() != cfg.stages {
            return Err(Error::Contract(format!(
                "train mode needs {} real images, got {}",
                cfg.stages,
                input.real.len()
            )));
        }
        let text = input.text.bind(tape);
        let valid = &input.text.valid;
        let (s, kl) = self.ca.forward(tape, p, text.sentence, &input.eps)?;
        let z = tape.constant(Tensor::new(vec![cfg.noise_dim], input.noise.clone())?);
        let mut h = self.iftm.forward(tape, p, s, z)?;
        let mut features = vec![h];
        let mut images = vec![self.render(tape, p, 0, h)?];
        let mut thetas = Vec::new();
        let mut terms = Vec::new();
        for i in 1..cfg.stages {
            let theta = self.similarity(tape, &text, valid, h)?;
            if mode == Mode::Train {
                terms.push(self.stage_terms(tape, p, i, &text, valid, &theta, h, &input.real)?);
            }
            h = self.refine(tape, p, i, &text, &theta, h)?;
            thetas.push(theta);
            features.push(h);
            images.push(self.render(tape, p, i, h)?);
        }
        Ok(Generation { text, s, kl, features, images, thetas, terms })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage_terms(
        &self,
        tape: &mut Tape,
        p: &mut Binder,
        i: usize,
        text: &TextVars,
        valid: &[bool],
        theta: &SemMatrix,
        h_prev: Var,
        real: &[Tensor],
    ) -> Result<StageTerms> {
        let cfg = &self.cfg;
        let mut out = StageTerms { adaptive: cfg.adaptive_weights, ..Default::default() };
        if !(cfg.alr || cfg.rec || cfg.pr || cfg.sr) {
            return Ok(out);
        }
        let img = tape.constant(real[i].clone());
        let h_star = self.encoder.forward(tape, p, img)?;
        let theta_star = self.similarity(tape, text, valid, h_star)?;
        if cfg.rec {
            let rebuilt = self.refine(tape, p, i, text, &theta_star, h_star)?;
            let rebuilt = self.render(tape, p, i, rebuilt)?;
            out.rec = Some(super::losses::rec_loss(tape, img, rebuilt)?);
        }
        let d = cfg.feature_dim;
        let n = theta.subregions();
        let h_flat = tape.reshape(h_prev, &[d, n])?;
        let hs_flat = tape.reshape(h_star, &[d, n])?;
        if cfg.alr {
            out.layout = Some(if cfg.adaptive_weights {
                let split = alr::split_residual(tape, theta, &theta_star, cfg.gamma)?;
                let stage = &self.stages[i - 1];
                let alpha = stage.alpha.forward(tape, p, split.easy, hs_flat)?;
                let beta = stage.beta.forward(tape, p, split.hard, hs_flat)?;
                alr::alr_loss(tape, &split, alpha, beta, d)?
            } else {
                alr::fixed_alr_loss(tape, theta.theta, theta_star.theta)?
            });
        }
        if cfg.pr || cfg.sr {
            let mask = ssm::layout_mask(tape, theta)?;
            let mask_star = if cfg.detach_real_masks {
                let fixed = tape.constant(tape.value(theta_star.theta).clone());
                ssm::layout_mask(tape, &SemMatrix { theta: fixed, ..theta_star })?
            } else {
                ssm::layout_mask(tape, &theta_star)?
            };
            let weights = LvrWeights::new(cfg.eta1, cfg.eta2)?;
            let zero = tape.constant(Tensor::scalar(0.0));
            let pr = if cfg.pr { Some(lvr::pr_loss(tape, &mask, h_flat, &mask_star, hs_flat)?) } else { None };
            let sr = if cfg.sr { Some(lvr::sr_loss(tape, &mask, h_flat, &mask_star, hs_flat)?) } else { None };
            out.lvr = Some(lvr::lvr_loss(tape, weights, pr.unwrap_or(zero), sr.unwrap_or(zero))?);
            out.pr = pr;
            out.sr = sr;
        }
        Ok(out)
    }
}
