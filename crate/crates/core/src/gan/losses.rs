//! Adversarial, reconstruction and image-text matching objectives and their
//! assembly into the generator and discriminator totals.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::model::StageTerms;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

fn log_prob(tape: &mut Tape, p: Var) -> Var {
    let l = tape.clamp_log(p, PROB_EPS, 1.0 - PROB_EPS);
    tape.mean(l)
}

fn log_one_minus(tape: &mut Tape, p: Var) -> Var {
    let neg = tape.neg(p);
    let q = tape.add_scalar(neg, 1.0);
    log_prob(tape, q)
}

/// `−½ log D(Î) − ½ log D(Î, s)`.
pub fn g_adv_loss(tape: &mut Tape, uncond: Var, cond: Var) -> Result<Var> {
    let a = log_prob(tape, uncond);
    let b = log_prob(tape, cond);
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -0.5))
}

/// `−½[log D(I*) + log(1 − D(Î))] − ½[log D(I*, s) + log(1 − D(Î, s))]`.
pub fn d_adv_loss(tape: &mut Tape, real_u: Var, fake_u: Var, real_c: Var, fake_c: Var) -> Result<Var> {
    let terms = [
        log_prob(tape, real_u),
        log_one_minus(tape, fake_u),
        log_prob(tape, real_c),
        log_one_minus(tape, fake_c),
    ];
    let s = sum(tape, &terms)?;
    Ok(tape.scale(s, -0.5))
}

/// Mean absolute error between a real image and its reconstruction.
pub fn rec_loss(tape: &mut Tape, real: Var, rebuilt: Var) -> Result<Var> {
    if tape.shape(real) != tape.shape(rebuilt) {
        return Err(Error::dim("rec_loss", tape.shape(real), tape.shape(rebuilt)));
    }
    let d = tape.sub(real, rebuilt)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn sum(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let Some(mut acc) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Coefficients of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kl: f64,
}

/// `Σ adv + Σ (layout + λ₁·rec + lvr) + λ₂·matching + w_kl·kl`; absent
/// terms contribute nothing.
pub fn total_g_loss(
    tape: &mut Tape,
    w: GWeights,
    adv: &[Var],
    stages: &[StageTerms],
    matching: Option<Var>,
    kl: Option<Var>,
) -> Result<Var> {
    let mut parts: Vec<Var> = adv.to_vec();
    for t in stages {
        parts.extend(t.layout);
        if let Some(r) = t.rec {
            parts.push(tape.scale(r, w.lambda1));
        }
        parts.extend(t.lvr);
    }
    if let Some(m) = matching {
        parts.push(tape.scale(m, w.lambda2));
    }
    if let Some(k) = kl {
        parts.push(tape.scale(k, w.kl));
    }
    let total = sum(tape, &parts)?;
    tape.reshape(total, &[])
}

/// Sum of per-stage discriminator losses.
pub fn total_d_loss(tape: &mut Tape, stages: &[Var]) -> Result<Var> {
    let total = sum(tape, stages)?;
    tape.reshape(total, &[])
}

/// One side of the matching loss: image regions and a caption.
#[derive(Clone, Debug)]
pub struct MatchInput {
    /// `[D, N]` region features.
    pub regions: Var,
    /// `[D, T]` word vectors.
    pub words: Var,
    /// `[D]` mean word vector.
    pub word_mean: Var,
    pub valid: Vec<bool>,
}

const COS_EPS: f64 = 1e-8;

/// Cosine similarity of the rows of two `[R, D]` matrices, shape `[R]`.
fn row_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_axis(ab, 1)?;
    let aa = tape.mul(a, a)?;
    let na = tape.sum_axis(aa, 1)?;
    let bb = tape.mul(b, b)?;
    let nb = tape.sum_axis(bb, 1)?;
    let n = tape.mul(na, nb)?;
    let n = tape.add_scalar(n, COS_EPS);
    let n = tape.sqrt(n);
    tape.div(dot, n)
}

/// Attention of each query row over the region columns: returns the
/// `[Q, D]` attended contexts for `[D, Q]` queries.
fn attend(tape: &mut Tape, queries: Var, regions: Var) -> Result<Var> {
    let qt = tape.transpose(queries)?;
    let logits = tape.matmul(qt, regions)?;
    let attn = tape.softmax_axis(logits, 1)?;
    let rt = tape.transpose(regions)?;
    tape.matmul(attn, rt)
}

/// Image-caption score: mean of the word-level score (each valid word
/// against its attended region context) and the sentence-level score (mean
/// word against the attention-pooled image).
pub fn pair_score(tape: &mut Tape, regions: Var, caption: &MatchInput) -> Result<Var> {
    let t = caption.valid.len();
    let count = caption.valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Data("caption has no words".into()));
    }
    let ctx = attend(tape, caption.words, regions)?;
    let wt = tape.transpose(caption.words)?;
    let cos = row_cosine(tape, ctx, wt)?;
    let pick = Tensor::from_fn(&[t], |j| if caption.valid[j] { 1.0 / count as f64 } else { 0.0 });
    let pick = tape.constant(pick);
    let word_level = tape.mul(cos, pick)?;
    let word_level = tape.sum(word_level);

    let d = tape.shape(caption.word_mean)[0];
    let q = tape.reshape(caption.word_mean, &[d, 1])?;
    let pooled = attend(tape, q, regions)?;
    let qt = tape.transpose(q)?;
    let sent = row_cosine(tape, pooled, qt)?;
    let sent = tape.sum(sent);
    let s = tape.add(word_level, sent)?;
    Ok(tape.scale(s, 0.5))
}

/// Symmetric contrastive loss over the batch score matrix
/// `S[b, b'] = score(image b, caption b')` divided by `temperature`; matched
/// pairs lie on the diagonal.
pub fn matching_loss(tape: &mut Tape, batch: &[MatchInput], temperature: f64) -> Result<Var> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config(format!("matching loss needs a batch of at least 2, got {b}")));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("matching temperature must be positive, got {temperature}")));
    }
    let mut scores = Vec::with_capacity(b * b);
    for img in batch {
        for cap in batch {
            scores.push(pair_score(tape, img.regions, cap)?);
        }
    }
    let s = tape.stack(&scores)?;
    let s = tape.reshape(s, &[b, b])?;
    score_matrix_loss(tape, s, temperature)
}

/// Mean of the row-wise and column-wise cross-entropies of `S / τ` against
/// the diagonal.
pub fn score_matrix_loss(tape: &mut Tape, scores: Var, temperature: f64) -> Result<Var> {
    let b = tape.shape(scores)[0];
    let logits = tape.scale(scores, 1.0 / temperature);
    let diag = tape.constant(Tensor::from_fn(&[b, b], |k| if k / b == k % b { 1.0 } else { 0.0 }));
    let rows = tape.log_softmax_axis(logits, 1)?;
    let cols = tape.log_softmax_axis(logits, 0)?;
    let both = tape.add(rows, cols)?;
    let picked = tape.mul(both, diag)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -0.5 / b as f64))
}
