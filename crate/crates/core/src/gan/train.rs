//! Alternating discriminator / generator updates.
//!
//! Each caption gets its own tape, built in parallel. Cross-sample coupling
//! (the matching loss) runs on a small separate tape whose input gradients
//! are fed back into the per-sample tapes as backward seeds. Gradients are
//! summed in sample order, so a step is bit-identical for any thread count.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::GanConfig;
use crate::data::{self, ScenePair, Split};
use crate::error::{Error, Result};
use crate::nn::{stream_rng, Binder, Bound, Group, ParamId};
use crate::par;
use crate::tensor::{Tape, Var};

use super::losses::{self, GWeights, MatchInput};
use super::model::{Generation, Mode, Model, SampleInput};
use super::optim::{self, Adam};

const BATCH_STREAM: u64 = 0xba7c;
const NOISE_STREAM: u64 = 0x2015e;

/// Rendered training scenes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<ScenePair>,
}

impl Dataset {
    /// Renders `size` scenes of `split` at every stage resolution.
    pub fn build(cfg: &GanConfig, size: usize, split: Split) -> Result<Self> {
        let max = cfg.max_objects();
        let pairs = par::try_map_range(size, |i| {
            let spec = data::sample_scene_upto(data::scene_seed(cfg.seed, split, i), max);
            data::render(&spec, cfg.stages, cfg.base_resolution, cfg.words)
        })?;
        Ok(Dataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Noise for sample `k` of step `step`.
pub fn sample_rng(seed: u64, step: u64, k: usize) -> ChaCha8Rng {
    stream_rng(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15), NOISE_STREAM + k as u64)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Per-caption inputs: text encoded with the current parameters plus fresh
/// noise. `real` is left empty when `pair` carries no images to use.
pub fn sample_input(model: &Model, pair: &ScenePair, rng: &mut ChaCha8Rng, with_real: bool) -> Result<SampleInput> {
    let mut input = caption_input(model, &pair.tokens, rng)?;
    if with_real {
        input.real = pair.images.clone();
    }
    Ok(input)
}

/// Test-mode inputs for a bare caption.
pub fn caption_input(model: &Model, tokens: &[usize], rng: &mut ChaCha8Rng) -> Result<SampleInput> {
    let cfg = &model.cfg;
    Ok(SampleInput {
        tokens: tokens.to_vec(),
        text: model.text_consts(tokens)?,
        real: Vec::new(),
        noise: normals(rng, cfg.noise_dim),
        eps: normals(rng, cfg.sentence_dim),
    })
}

/// Batch-mean loss components of one step; stage terms are summed over
/// stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossRecord {
    /// Zero-based index of the step.
    pub step: u64,
    pub g_total: f64,
    pub d_total: f64,
    pub g_adv: f64,
    pub layout: f64,
    pub rec: f64,
    pub pr: f64,
    pub sr: f64,
    pub lvr: f64,
    pub kl: f64,
    pub matching: f64,
    pub encoder_matching: f64,
    pub d_grad_norm: f64,
}

impl LossRecord {
    pub fn all_finite(&self) -> bool {
        [
            self.g_total,
            self.d_total,
            self.g_adv,
            self.layout,
            self.rec,
            self.pr,
            self.sr,
            self.lvr,
            self.kl,
            self.matching,
            self.encoder_matching,
            self.d_grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn weights(cfg: &GanConfig) -> GWeights {
    GWeights {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        kl: cfg.kl_weight,
    }
}

/// Generator-side pieces of one caption's objective.
struct SampleObjective {
    adv: Vec<Var>,
    /// Everything but the matching term.
    total: Var,
}

/// Adds the adversarial terms (against the current discriminators) and
/// assembles the per-caption generator objective.
fn sample_objective(model: &Model, tape: &mut Tape, p: &mut Binder, gen: &Generation) -> Result<SampleObjective> {
    let cfg = &model.cfg;
    let mut adv = Vec::with_capacity(cfg.stages);
    for (i, d) in model.discriminators.iter().enumerate() {
        let (u, c) = d.forward(tape, p, gen.images[i], gen.text.sentence)?;
        adv.push(losses::g_adv_loss(tape, u, c)?);
    }
    let kl = cfg.kl.then_some(gen.kl);
    let total = losses::total_g_loss(tape, weights(cfg), &adv, &gen.terms, None, kl)?;
    Ok(SampleObjective { adv, total })
}

/// Matching-loss input for an image, through the shared image encoder.
fn match_input(model: &Model, tape: &mut Tape, p: &mut Binder, img: Var, text: &super::model::TextVars, valid: &[bool]) -> Result<MatchInput> {
    let h = model.encoder.forward(tape, p, img)?;
    let s = tape.shape(h).to_vec();
    let regions = tape.reshape(h, &[s[0], s[1] * s[2]])?;
    Ok(MatchInput {
        regions,
        words: text.words,
        word_mean: text.word_mean,
        valid: valid.to_vec(),
    })
}

/// Full generator objective `mean_b L_b + λ₂·matching` on a single tape.
/// This is the reference the parallel step is checked against, and the
/// function the end-to-end gradient check differentiates.
pub fn generator_objective(model: &Model, tape: &mut Tape, p: &mut Binder, inputs: &[SampleInput]) -> Result<Var> {
    let cfg = &model.cfg;
    let frozen_store = p.store();
    let mut frozen = Binder::frozen(frozen_store);
    let mut per_sample = Vec::new();
    let mut matches = Vec::new();
    for inp in inputs {
        let gen = model.generate(tape, p, inp, Mode::Train)?;
        let obj = sample_objective(model, tape, &mut frozen, &gen)?;
        per_sample.push(obj.total);
        let img = gen.images[cfg.stages - 1];
        matches.push(match_input(model, tape, &mut frozen, img, &gen.text, &inp.text.valid)?);
    }
    let stacked = tape.stack(&per_sample)?;
    let mean = tape.mean(stacked);
    let m = losses::matching_loss(tape, &matches, cfg.matching_temperature)?;
    let m = tape.scale(m, cfg.lambda2);
    tape.add(mean, m)
}

struct GenTape {
    tape: Tape,
    gen: Generation,
    bound: Bound,
}

/// Owns the model, optimisers and training data.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub step: u64,
    pub data: Dataset,
    optims: [Adam; 3],
}

impl Trainer {
    pub fn new(model: Model, data: Dataset) -> Result<Self> {
        let cfg = &model.cfg;
        if data.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "dataset has {} scenes, fewer than batch_size {}",
                data.len(),
                cfg.batch_size
            )));
        }
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let optims = [
            Adam::new(&model.store, Group::Generator, cfg.lr_generator, b1, b2),
            Adam::new(&model.store, Group::Discriminator, cfg.lr_discriminator, b1, b2),
            Adam::new(&model.store, Group::Encoder, cfg.lr_encoder, b1, b2),
        ];
        Ok(Trainer { model, step: 0, data, optims })
    }

    pub fn cfg(&self) -> &GanConfig {
        &self.model.cfg
    }

    /// Dataset indices used at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let cfg = self.cfg();
        let mut rng = stream_rng(cfg.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15), BATCH_STREAM);
        index::sample(&mut rng, self.data.len(), cfg.batch_size).into_vec()
    }

    /// Inputs for `step`, with text encoded by the current parameters.
    pub fn batch_inputs(&self, step: u64) -> Result<Vec<SampleInput>> {
        let idx = self.batch_indices(step);
        let seed = self.cfg().seed;
        par::try_map_range(idx.len(), |k| {
            let mut rng = sample_rng(seed, step, k);
            sample_input(&self.model, &self.data.pairs[idx[k]], &mut rng, true)
        })
    }

    /// One discriminator update followed by one generator and encoder
    /// update.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let (rec, acc) = self.step_gradients()?;
        let store = &self.model.store;
        let g_grads = optim::collect(store, &acc, Group::Generator);
        let e_grads = optim::collect(store, &acc, Group::Encoder);
        check_grads(&g_grads, "generator", &rec)?;
        check_grads(&e_grads, "encoder", &rec)?;
        self.optims[0].update(&mut self.model.store, &g_grads)?;
        self.optims[2].update(&mut self.model.store, &e_grads)?;
        self.step += 1;
        Ok(rec)
    }

    /// Runs the discriminator update and returns the loss record with the
    /// accumulated generator and encoder gradients, indexed by parameter.
    pub fn step_gradients(&mut self) -> Result<(LossRecord, Vec<Option<Vec<f64>>>)> {
        let inputs = self.batch_inputs(self.step)?;
        let cfg = self.model.cfg.clone();
        let b = inputs.len();
        let inv = 1.0 / b as f64;
        let last = cfg.stages - 1;
        let mut rec = LossRecord { step: self.step, ..Default::default() };

        // Generator forward passes.
        let model = &self.model;
        let gens = par::try_map(&inputs, |inp| {
            let mut tape = Tape::new();
            let mut p = Binder::new(&model.store, generator_groups(&cfg));
            let gen = model.generate(&mut tape, &mut p, inp, Mode::Train)?;
            Ok(GenTape { tape, gen, bound: p.finish() })
        })?;

        // Discriminator step on detached fakes.
        let d_parts = par::try_map_range(b, |k| {
            let mut tape = Tape::new();
            let mut p = Binder::new(&model.store, &[Group::Discriminator]);
            let s_raw = tape.constant(inputs[k].text.sentence.clone());
            let mut stage_losses = Vec::with_capacity(cfg.stages);
            for (i, d) in model.discriminators.iter().enumerate() {
                let real = tape.constant(inputs[k].real[i].clone());
                let fake = tape.constant(gens[k].tape.value(gens[k].gen.images[i]).clone());
                let (ru, rc) = d.forward(&mut tape, &mut p, real, s_raw)?;
                let (fu, fc) = d.forward(&mut tape, &mut p, fake, s_raw)?;
                stage_losses.push(losses::d_adv_loss(&mut tape, ru, fu, rc, fc)?);
            }
            let total = losses::total_d_loss(&mut tape, &stage_losses)?;
            tape.backward(total)?;
            Ok((tape.item(total), p.grads(&tape)))
        })?;
        let mut acc = vec![None; model.store.len()];
        for (loss, g) in &d_parts {
            rec.d_total += inv * loss;
            optim::accumulate(&mut acc, g, inv);
        }
        let mut d_grads = optim::collect(&model.store, &acc, Group::Discriminator);
        rec.d_grad_norm = optim::clip_global_norm(&mut d_grads, cfg.d_grad_clip);
        check_grads(&d_grads, "discriminator", &rec)?;
        self.optims[1].update(&mut self.model.store, &d_grads)?;

        // Generator objective against the updated discriminators.
        let model = &self.model;
        let store = &model.store;
        let conts = par::try_map_owned(gens, |mut g| {
            let mut p = Binder::frozen(store);
            let obj = sample_objective(model, &mut g.tape, &mut p, &g.gen)?;
            Ok((g, obj))
        })?;
        for (g, obj) in &conts {
            let t = &g.tape;
            rec.g_adv += inv * obj.adv.iter().map(|&v| t.item(v)).sum::<f64>();
            for s in &g.gen.terms {
                let val = |v: Option<Var>| v.map_or(0.0, |v| t.item(v));
                rec.layout += inv * val(s.layout);
                rec.rec += inv * val(s.rec);
                rec.pr += inv * val(s.pr);
                rec.sr += inv * val(s.sr);
                rec.lvr += inv * val(s.lvr);
            }
            if cfg.kl {
                rec.kl += inv * t.item(g.gen.kl);
            }
            rec.g_total += inv * t.item(obj.total);
        }

        // Matching loss on the final images, through a frozen encoder.
        let mut mtape = Tape::new();
        let mut frozen = Binder::frozen(store);
        let mut leaves = Vec::with_capacity(b);
        let mut batch = Vec::with_capacity(b);
        for ((g, _), inp) in conts.iter().zip(&inputs) {
            let img = mtape.param(g.tape.value(g.gen.images[last]).clone());
            let text = inp.text.bind(&mut mtape);
            batch.push(match_input(model, &mut mtape, &mut frozen, img, &text, &inp.text.valid)?);
            leaves.push(img);
        }
        let m = losses::matching_loss(&mut mtape, &batch, cfg.matching_temperature)?;
        mtape.backward(m)?;
        rec.matching = mtape.item(m);
        rec.g_total += cfg.lambda2 * rec.matching;
        let img_grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&v| mtape.grad(v).map_or_else(|| vec![0.0; mtape.value(v).numel()], |g| g.to_vec()))
            .collect();

        // Seeded backward through each caption's tape.
        let seeded: Vec<_> = conts.into_iter().zip(img_grads).collect();
        let sample_grads = par::try_map_owned(seeded, |((mut g, obj), dimg)| {
            let dimg: Vec<f64> = dimg.iter().map(|v| cfg.lambda2 * v).collect();
            g.tape
                .backward_seeded(&[(obj.total, vec![inv]), (g.gen.images[last], dimg)])?;
            Ok(g.bound.grads(&g.tape))
        })?;

        // Encoder matching on real pairs at every stage, with a trainable
        // text encoder. These are the only encoder gradients.
        let mut etape = Tape::new();
        let mut p = Binder::new(store, &[Group::Encoder]);
        let texts = inputs
            .iter()
            .map(|inp| model.text.forward(&mut etape, &mut p, &inp.tokens))
            .collect::<Result<Vec<_>>>()?;
        let mut stage_losses = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let mut batch = Vec::with_capacity(b);
            for (inp, text) in inputs.iter().zip(&texts) {
                let img = etape.constant(inp.real[i].clone());
                batch.push(match_input(model, &mut etape, &mut p, img, text, &inp.text.valid)?);
            }
            stage_losses.push(losses::matching_loss(&mut etape, &batch, cfg.matching_temperature)?);
        }
        let stacked = etape.stack(&stage_losses)?;
        let em = etape.mean(stacked);
        etape.backward(em)?;
        rec.encoder_matching = etape.item(em);
        let enc_grads = p.grads(&etape);

        let mut acc = vec![None; store.len()];
        for g in &sample_grads {
            optim::accumulate(&mut acc, g, 1.0);
        }
        optim::accumulate(&mut acc, &enc_grads, cfg.lambda2);
        if !rec.all_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}: {rec:?}", rec.step)));
        }
        Ok((rec, acc))
    }
}

fn check_grads(grads: &[(ParamId, Vec<f64>)], what: &str, rec: &LossRecord) -> Result<()> {
    if grads.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())) {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "non-finite {what} gradient at step {}: {rec:?}",
        rec.step
    )))
}

/// Groups the generator objective trains.
fn generator_groups(cfg: &GanConfig) -> &'static [Group] {
    if cfg.encoder_layout_grad {
        &[Group::Generator, Group::Encoder]
    } else {
        &[Group::Generator]
    }
}

/// Generator gradients of [`generator_objective`] on one tape, for checking
/// the parallel step against.
pub fn reference_generator_grads(model: &Model, inputs: &[SampleInput]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut tape = Tape::new();
    let mut p = Binder::new(&model.store, generator_groups(&model.cfg));
    let total = generator_objective(model, &mut tape, &mut p, inputs)?;
    tape.backward(total)?;
    let mut acc = vec![None; model.store.len()];
    optim::accumulate(&mut acc, &p.grads(&tape), 1.0);
    Ok(acc)
}
