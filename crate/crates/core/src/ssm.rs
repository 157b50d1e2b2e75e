//! Semantics similarity matrix (word × subregion affinities), the
//! text-vision matrix built from it, and the per-subregion layout mask.
//!
//! Layout conventions used across the crate:
//! * word embeddings `W` are `[D, T]` (one column per word);
//! * image features `H` are `[D, N]` with `N = rows · cols` flattened
//!   row-major, which is the same memory as a `[D, rows, cols]` map;
//! * the similarity matrix `Θ` is `[T, N]` and every column is a
//!   distribution over words.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive logit for masked words; `exp` of it underflows to exactly 0.
const MASKED_LOGIT: f64 = -1.0e30;

/// Column-stochastic `[T, N]` similarity matrix on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SemMatrix {
    pub theta: Var,
    pub words: usize,
    /// Feature grid (rows, cols); `rows · cols == N`.
    pub grid: (usize, usize),
}

impl SemMatrix {
    pub fn subregions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Wraps an existing `[T, N]` variable.
    pub fn from_var(tape: &Tape, theta: Var, grid: (usize, usize)) -> Result<Self> {
        let s = tape.shape(theta);
        if s.len() != 2 || s[1] != grid.0 * grid.1 {
            return Err(Error::dim("SemMatrix", s, &[grid.0 * grid.1]));
        }
        Ok(SemMatrix {
            theta,
            words: s[0],
            grid,
        })
    }
}

/// Per-subregion maxima of a [`SemMatrix`], shaped `[rows, cols]`.
#[derive(Clone, Copy, Debug)]
pub struct LayoutMask {
    pub mask: Var,
}

/// Θ = softmax over words of `WᵀH`.
pub fn compute_ssm(tape: &mut Tape, w: Var, h: Var, grid: (usize, usize)) -> Result<SemMatrix> {
    compute_ssm_masked(tape, w, h, grid, None)
}

/// [`compute_ssm`] with optional word validity flags: masked words get
/// probability exactly 0 in every column.
pub fn compute_ssm_masked(
    tape: &mut Tape,
    w: Var,
    h: Var,
    grid: (usize, usize),
    word_mask: Option<&[bool]>,
) -> Result<SemMatrix> {
    let (sw, sh) = (tape.shape(w).to_vec(), tape.shape(h).to_vec());
    if sw.len() != 2 || sh.len() != 2 || sw[0] != sh[0] {
        return Err(Error::dim("compute_ssm", &sw, &sh));
    }
    if sh[1] != grid.0 * grid.1 {
        return Err(Error::dim("compute_ssm grid", &sh, &[grid.0, grid.1]));
    }
    let t = sw[1];
    let n = sh[1];
    let wt = tape.transpose(w)?;
    let mut scores = tape.matmul(wt, h)?;
    if let Some(mask) = word_mask {
        if mask.len() != t {
            return Err(Error::dim("compute_ssm mask", &[t], &[mask.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("word mask hides every word".into()));
        }
        let bias = Tensor::from_fn(&[t, n], |i| if mask[i / n] { 0.0 } else { MASKED_LOGIT });
        let bias = tape.constant(bias);
        scores = tape.add(scores, bias)?;
    }
    let theta = tape.softmax_axis(scores, 0)?;
    Ok(SemMatrix {
        theta,
        words: t,
        grid,
    })
}

/// Text-vision matrix `Q = W·Θ`: column k is the Θ-weighted word mixture
/// seen from subregion k.
pub fn compute_tvm(tape: &mut Tape, theta: &SemMatrix, w: Var) -> Result<Var> {
    let sw = tape.shape(w).to_vec();
    if sw.len() != 2 || sw[1] != theta.words {
        return Err(Error::dim("compute_tvm", &sw, tape.shape(theta.theta)));
    }
    tape.matmul(w, theta.theta)
}

/// Column maxima of Θ reshaped to the feature grid. Differentiable through
/// the selected entry (lowest word index on ties).
pub fn layout_mask(tape: &mut Tape, theta: &SemMatrix) -> Result<LayoutMask> {
    let m = tape.max_axis(theta.theta, 0)?;
    let mask = tape.reshape(m, &[theta.grid.0, theta.grid.1])?;
    Ok(LayoutMask { mask })
}

/// Index of the largest entry of every column of a `[T, N]` matrix
/// (lowest index on ties).
pub fn column_argmax(theta: &Tensor) -> Vec<usize> {
    let (t, n) = (theta.shape()[0], theta.shape()[1]);
    let d = theta.data();
    (0..n)
        .map(|k| {
            let mut best = 0;
            for j in 1..t {
                if d[j * n + k] > d[best * n + k] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
