//! Layout visual refinement: mask-weighted feature matching (perception
//! term) and Gram-matrix matching (style term).

use crate::error::{Error, Result};
use crate::ssm::LayoutMask;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LvrWeights {
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for LvrWeights {
    fn default() -> Self {
        LvrWeights { eta1: 1.0, eta2: 1.0 }
    }
}

impl LvrWeights {
    pub fn new(eta1: f64, eta2: f64) -> Result<Self> {
        if !(eta1 >= 0.0 && eta2 >= 0.0) {
            return Err(Error::Config(format!("eta1/eta2 must be non-negative, got {eta1}/{eta2}")));
        }
        Ok(LvrWeights { eta1, eta2 })
    }
}

/// `mask ⊙ H` with the mask broadcast over the `D` channels.
fn masked(tape: &mut Tape, mask: Var, h: Var) -> Result<Var> {
    tape.channel_mul(h, mask)
}

fn check_pair(tape: &Tape, op: &'static str, h: Var, h_star: Var) -> Result<(usize, usize)> {
    let (a, b) = (tape.shape(h), tape.shape(h_star));
    if a.len() != 2 || a != b {
        return Err(Error::dim(op, a, b));
    }
    Ok((a[0], a[1]))
}

/// `‖mask⊙H − mask*⊙H*‖_F / (N·D)`.
pub fn pr_loss(tape: &mut Tape, mask: &LayoutMask, h: Var, mask_star: &LayoutMask, h_star: Var) -> Result<Var> {
    let (d, n) = check_pair(tape, "pr_loss", h, h_star)?;
    let a = masked(tape, mask.mask, h)?;
    let b = masked(tape, mask_star.mask, h_star)?;
    let diff = tape.sub(a, b)?;
    let norm = tape.frobenius_norm(diff);
    Ok(tape.scale(norm, 1.0 / (n * d) as f64))
}

/// `F·Fᵀ` for `F` of shape `[D, N]`.
pub fn gram_matrix(tape: &mut Tape, f: Var) -> Result<Var> {
    let ft = tape.transpose(f)?;
    tape.matmul(f, ft)
}

/// `‖G(mask⊙H) − G(mask*⊙H*)‖_F / (N·D)`.
pub fn sr_loss(tape: &mut Tape, mask: &LayoutMask, h: Var, mask_star: &LayoutMask, h_star: Var) -> Result<Var> {
    let (d, n) = check_pair(tape, "sr_loss", h, h_star)?;
    let a = masked(tape, mask.mask, h)?;
    let b = masked(tape, mask_star.mask, h_star)?;
    let ga = gram_matrix(tape, a)?;
    let gb = gram_matrix(tape, b)?;
    let diff = tape.sub(ga, gb)?;
    let norm = tape.frobenius_norm(diff);
    Ok(tape.scale(norm, 1.0 / (n * d) as f64))
}

/// `η₁·pr + η₂·sr`.
pub fn lvr_loss(tape: &mut Tape, weights: LvrWeights, pr: Var, sr: Var) -> Result<Var> {
    let a = tape.scale(pr, weights.eta1);
    let b = tape.scale(sr, weights.eta2);
    tape.add(a, b)
}
