//! Evaluation metrics: toy-FID over a fixed random feature map, inception
//! score over a fixed colour classifier, R-precision and layout agreement.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{stream_rng, uniform_init};
use crate::ssm::column_argmax;
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// Eigenvalues above this negative bound are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Sample mean and unbiased covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Data("samples have mixed dimensions".into()));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        Ok(GaussianStats { mean, cov, count: n })
    }

    /// Statistics of the union of two sample sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let d = self.dim();
        if other.dim() != d {
            return Err(Error::dim("GaussianStats::merge", &[d], &[other.dim()]));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mean: Vec<f64> = (0..d).map(|i| (na * self.mean[i] + nb * other.mean[i]) / n).collect();
        let cov = (0..d * d)
            .map(|k| {
                let (i, j) = (k / d, k % d);
                let shift = (self.mean[i] - other.mean[i]) * (self.mean[j] - other.mean[j]) * na * nb / n;
                ((na - 1.0) * self.cov[k] + (nb - 1.0) * other.cov[k] + shift) / (n - 1.0)
            })
            .collect();
        Ok(GaussianStats { mean, cov, count: self.count + other.count })
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Symmetric PSD square root; errors if an eigenvalue is below
/// `-PSD_TOLERANCE`.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE) {
        return Err(Error::Data(format!("{what} is not PSD (eigenvalue {bad:e})")));
    }
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Trace of `(Σ_a Σ_b)^½`, computed as the trace of the PSD root of the
/// symmetrised product `Σ_a^½ Σ_b Σ_a^½`.
pub fn trace_sqrt_product(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let ra = psd_sqrt(&a.matrix(), "first covariance")?;
    psd_sqrt(&b.matrix(), "second covariance")?;
    let inner = &ra * b.matrix() * &ra;
    Ok(psd_sqrt(&inner, "covariance product")?.trace())
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_aΣ_b)^½)`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::dim("fid", &[d], &[b.dim()]));
    }
    for s in [a, b] {
        if s.count < d + 1 {
            return Err(Error::Data(format!("fid needs at least d + 1 = {} samples, got {}", d + 1, s.count)));
        }
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr = |s: &GaussianStats| (0..d).map(|i| s.cov[i * d + i]).sum::<f64>();
    let value = mean_term + tr(a) + tr(b) - 2.0 * trace_sqrt_product(a, b)?;
    Ok(value.max(0.0))
}

/// `exp(mean_n KL(p(y|x_n) ‖ p̄(y)))` for rows of a `[n, C]` matrix.
pub fn inception_score(probs: &Tensor) -> Result<f64> {
    let s = probs.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Data(format!("inception_score needs a non-empty [n, C] matrix, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let p = probs.data();
    for row in p.chunks(c) {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("row {row:?} is not a distribution")));
        }
    }
    let marginal: Vec<f64> = (0..c).map(|k| p.chunks(c).map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let mean_kl = p
        .chunks(c)
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(&v, _)| v > 0.0)
                .map(|(&v, &m)| v * (v / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(mean_kl.exp())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One retrieval: a query against `pool` candidate indices, of which
/// `pool[truth]` is the matching one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub query: usize,
    pub pool: Vec<usize>,
    pub truth: usize,
}

/// Builds one trial per query: its true candidate plus `r − 1` distinct
/// others, shuffled.
pub fn sample_trials(truth_of: &[usize], candidates: usize, r: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Trial>> {
    if r == 0 || r > candidates {
        return Err(Error::Config(format!("R = {r} exceeds the candidate pool of {candidates}")));
    }
    truth_of
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= candidates {
                return Err(Error::Index { what: "true candidate", index: t, len: candidates });
            }
            let mut pool: Vec<usize> = sample(rng, candidates - 1, r - 1)
                .into_iter()
                .map(|i| if i >= t { i + 1 } else { i })
                .collect();
            let truth = rng.random_range(0..r);
            pool.insert(truth, t);
            Ok(Trial { query: q, pool, truth })
        })
        .collect()
}

/// Percentage of trials whose true candidate has the highest cosine
/// similarity to the query (ties go to the lowest pool position).
pub fn r_precision(queries: &[Vec<f64>], candidates: &[Vec<f64>], trials: &[Trial]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::Config("r_precision needs at least one trial".into()));
    }
    let mut hits = 0usize;
    for t in trials {
        let q = queries
            .get(t.query)
            .ok_or(Error::Index { what: "query", index: t.query, len: queries.len() })?;
        if t.pool.len() > candidates.len() {
            return Err(Error::Config(format!("R = {} exceeds the candidate pool of {}", t.pool.len(), candidates.len())));
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (pos, &c) in t.pool.iter().enumerate() {
            let cand = candidates
                .get(c)
                .ok_or(Error::Index { what: "candidate", index: c, len: candidates.len() })?;
            let score = cosine(q, cand);
            if score > best_score {
                best = pos;
                best_score = score;
            }
        }
        hits += (best == t.truth) as usize;
    }
    Ok(100.0 * hits as f64 / trials.len() as f64)
}

/// Fraction of columns whose argmax row agrees between two `[T, N]`
/// matrices.
pub fn layout_agreement(theta: &Tensor, oracle: &Tensor) -> Result<f64> {
    if theta.shape() != oracle.shape() || theta.rank() != 2 {
        return Err(Error::dim("layout_agreement", theta.shape(), oracle.shape()));
    }
    let a = column_argmax(theta);
    let b = column_argmax(oracle);
    Ok(a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Averages rows of a `[T, N]` matrix that belong to the same group; rows
/// with `None` are dropped. Output is `[groups, N]`. Averaging (not summing)
/// keeps groups with more rows from winning every argmax by default.
pub fn pool_rows(theta: &Tensor, groups: &[Option<usize>], count: usize) -> Result<Tensor> {
    let (t, n) = (theta.shape()[0], theta.shape()[1]);
    if groups.len() != t {
        return Err(Error::dim("pool_rows", theta.shape(), &[groups.len()]));
    }
    let mut out = vec![0.0; count * n];
    let mut sizes = vec![0usize; count];
    for (j, g) in groups.iter().enumerate() {
        if let Some(g) = *g {
            if g >= count {
                return Err(Error::Index { what: "row group", index: g, len: count });
            }
            sizes[g] += 1;
            for k in 0..n {
                out[g * n + k] += theta.at2(j, k);
            }
        }
    }
    for (g, &size) in sizes.iter().enumerate() {
        if size == 0 {
            return Err(Error::Data(format!("row group {g} has no rows")));
        }
        out[g * n..(g + 1) * n].iter_mut().for_each(|v| *v /= size as f64);
    }
    Tensor::new(vec![count, n], out)
}

/// Side images are reduced to before feature extraction, so toy-FID is
/// comparable across output resolutions.
pub const FEATURE_SIDE: usize = 8;
const FEATURE_CHANNELS: usize = 12;
/// Dimension of toy-FID features.
pub const FEATURE_DIM: usize = 16;

/// Fixed random-weight conv feature map behind toy-FID.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    conv: Tensor,
    projection: Tensor,
}

impl FeatureMap {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xf1d);
        let conv = uniform_init(&mut rng, &[FEATURE_CHANNELS, 3, 3, 3], 27);
        let flat = FEATURE_CHANNELS * (FEATURE_SIDE / 2) * (FEATURE_SIDE / 2);
        let projection = uniform_init(&mut rng, &[FEATURE_DIM, flat], flat);
        FeatureMap { conv, projection }
    }

    /// `[3, s, s]` image with `s` a multiple of [`FEATURE_SIDE`] → features.
    pub fn features(&self, img: &Tensor) -> Result<Vec<f64>> {
        let small = pool_to(img, FEATURE_SIDE)?;
        let mut act = vec![0.0; FEATURE_CHANNELS * FEATURE_SIDE * FEATURE_SIDE];
        kernels::conv3_forward(
            small.data(),
            self.conv.data(),
            None,
            &mut act,
            3,
            FEATURE_CHANNELS,
            FEATURE_SIDE,
            FEATURE_SIDE,
        );
        act.iter_mut().for_each(|v| *v = v.tanh());
        let pooled = pool_to(&Tensor::new(vec![FEATURE_CHANNELS, FEATURE_SIDE, FEATURE_SIDE], act)?, FEATURE_SIDE / 2)?;
        let flat = pooled.data();
        Ok(self
            .projection
            .data()
            .chunks(flat.len())
            .map(|row| row.iter().zip(flat).map(|(w, x)| w * x).sum())
            .collect())
    }
}

/// Block mean-pool `[C, s, s]` down to `[C, side, side]`.
fn pool_to(img: &Tensor, side: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] != s[2] || !s[1].is_multiple_of(side) {
        return Err(Error::dim("pool_to", s, &[s.first().copied().unwrap_or(0), side, side]));
    }
    let (c, big) = (s[0], s[1]);
    let b = big / side;
    let d = img.data();
    let mut out = vec![0.0; c * side * side];
    for ch in 0..c {
        for y in 0..big {
            for x in 0..big {
                out[ch * side * side + (y / b) * side + x / b] += d[ch * big * big + y * big + x];
            }
        }
    }
    let area = (b * b) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Tensor::new(vec![c, side, side], out)
}

/// Number of classes of [`color_probs`].
pub const COLOR_CLASSES: usize = 4;
const SATURATION: f64 = 0.3;
const SHARPNESS: f64 = 5.0;

/// Fixed classifier over the four object colours: saturated pixels vote for
/// their nearest palette colour; the vote shares go through a softmax.
/// Images with no saturated pixel get the uniform distribution.
pub fn color_probs(img: &Tensor) -> Vec<f64> {
    const PALETTE: [[f64; 3]; 4] = [[220.0, 40.0, 40.0], [40.0, 200.0, 60.0], [40.0, 60.0, 220.0], [230.0, 210.0, 40.0]];
    let n = img.shape()[1] * img.shape()[2];
    let d = img.data();
    let mut votes = [0usize; COLOR_CLASSES];
    for p in 0..n {
        let px = [d[p], d[n + p], d[2 * n + p]].map(|v| (v + 1.0) * 127.5);
        let hi = px.iter().cloned().fold(f64::MIN, f64::max);
        let lo = px.iter().cloned().fold(f64::MAX, f64::min);
        if (hi - lo) / 255.0 <= SATURATION {
            continue;
        }
        let dist = |c: &[f64; 3]| (0..3).map(|i| (px[i] - c[i]).powi(2)).sum::<f64>();
        let mut best = 0;
        for (k, c) in PALETTE.iter().enumerate().skip(1) {
            if dist(c) < dist(&PALETTE[best]) {
                best = k;
            }
        }
        votes[best] += 1;
    }
    let total: usize = votes.iter().sum();
    if total == 0 {
        return vec![1.0 / COLOR_CLASSES as f64; COLOR_CLASSES];
    }
    let logits = votes.map(|v| SHARPNESS * v as f64 / total as f64);
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: vec![mean], cov: vec![var], count: 100 }
    }

    #[test]
    fn fid_closed_forms() {
        let a = stats_1d(0.0, 1.0);
        assert!(fid(&a, &a).unwrap().abs() < 1e-9);
        assert!((fid(&a, &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((fid(&a, &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fid_rejects_bad_inputs() {
        let a = stats_1d(0.0, 1.0);
        let b = GaussianStats { mean: vec![0.0; 2], cov: vec![1.0, 0.0, 0.0, 1.0], count: 10 };
        assert!(fid(&a, &b).is_err());
        let neg = stats_1d(0.0, -1.0);
        assert!(matches!(fid(&a, &neg), Err(Error::Data(_))));
        let few = GaussianStats { count: 2, ..b.clone() };
        assert!(matches!(fid(&few, &b), Err(Error::Data(_))));
    }

    /// Coupled Newton–Schulz iteration for the principal square root.
    fn newton_schulz_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = m.nrows();
        let norm = m.norm();
        let eye = DMatrix::<f64>::identity(d, d);
        let mut y = m / norm;
        let mut z = eye.clone();
        for _ in 0..200 {
            let t = (&eye * 3.0 - &z * &y) * 0.5;
            y = &y * &t;
            z = &t * &z;
        }
        y * norm.sqrt()
    }

    fn random_stats(rng: &mut ChaCha8Rng, d: usize) -> GaussianStats {
        let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
        GaussianStats {
            mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cov: cov.transpose().as_slice().to_vec(),
            count: 50,
        }
    }

    #[test]
    fn eigen_root_matches_newton_schulz() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..20 {
            let (a, b) = (random_stats(&mut rng, 3), random_stats(&mut rng, 3));
            let oracle = newton_schulz_sqrt(&(a.matrix() * b.matrix())).trace();
            assert!((trace_sqrt_product(&a, &b).unwrap() - oracle).abs() < 1e-6);
            assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
            assert!(fid(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn merge_matches_single_pass() {
        let mut rng = stream_rng(9, 0);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let whole = GaussianStats::from_samples(&xs).unwrap();
        let merged = GaussianStats::from_samples(&xs[..13])
            .unwrap()
            .merge(&GaussianStats::from_samples(&xs[13..]).unwrap())
            .unwrap();
        assert_eq!(merged.count, 40);
        for (a, b) in whole.mean.iter().chain(&whole.cov).zip(merged.mean.iter().chain(&merged.cov)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inception_score_examples() {
        let uniform = Tensor::full(&[5, 4], 0.25);
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-9);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert!((inception_score(&eye).unwrap() - 4.0).abs() < 1e-6);
        let two = Tensor::from_rows(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let kl1 = (1.0f64 / 0.75).ln();
        let kl2 = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let expect = (0.5 * (kl1 + kl2)).exp();
        assert!((inception_score(&two).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.2408).abs() < 1e-4);
        assert!(inception_score(&Tensor::from_rows(&[&[0.7, 0.7]])).is_err());
    }

    #[test]
    fn r_precision_examples() {
        let queries = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let cands = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let trials = vec![
            Trial { query: 0, pool: vec![2, 0, 1], truth: 1 },
            Trial { query: 1, pool: vec![1, 2], truth: 0 },
        ];
        assert_eq!(r_precision(&queries, &cands, &trials).unwrap(), 100.0);

        let same = vec![vec![0.3, 0.3, 0.3]; 3];
        let trials = vec![
            Trial { query: 0, pool: vec![0, 1, 2], truth: 0 },
            Trial { query: 1, pool: vec![0, 1, 2], truth: 2 },
        ];
        assert_eq!(r_precision(&queries, &same, &trials).unwrap(), 50.0);

        let mut rng = stream_rng(1, 1);
        assert!(matches!(sample_trials(&[0], 3, 4, &mut rng), Err(Error::Config(_))));
        let t = sample_trials(&[2, 0], 5, 3, &mut rng).unwrap();
        for trial in &t {
            assert_eq!(trial.pool.len(), 3);
            let mut p = trial.pool.clone();
            p.sort();
            p.dedup();
            assert_eq!(p.len(), 3);
        }
        assert_eq!(t[0].pool[t[0].truth], 2);
        assert_eq!(t[1].pool[t[1].truth], 0);
    }

    #[test]
    fn layout_agreement_examples() {
        let a = Tensor::from_rows(&[&[0.9, 0.1, 0.6, 0.2], &[0.1, 0.9, 0.4, 0.8]]);
        assert_eq!(layout_agreement(&a, &a).unwrap(), 1.0);
        let flipped = Tensor::from_rows(&[&[0.1, 0.9, 0.4, 0.8], &[0.9, 0.1, 0.6, 0.2]]);
        assert_eq!(layout_agreement(&a, &flipped).unwrap(), 0.0);
        let half = Tensor::from_rows(&[&[0.9, 0.9, 0.4, 0.2], &[0.1, 0.1, 0.6, 0.8]]);
        assert_eq!(layout_agreement(&a, &half).unwrap(), 0.5);
        assert!(layout_agreement(&a, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn pooling_rows_averages_groups() {
        let theta = Tensor::from_rows(&[&[0.2, 0.5], &[0.3, 0.1], &[0.4, 0.3], &[0.1, 0.1]]);
        let pooled = pool_rows(&theta, &[Some(0), Some(0), Some(1), None], 2).unwrap();
        assert_eq!(pooled.shape(), &[2, 2]);
        assert!((pooled.at2(0, 0) - 0.25).abs() < 1e-15);
        assert!((pooled.at2(0, 1) - 0.3).abs() < 1e-15);
        assert!((pooled.at2(1, 1) - 0.3).abs() < 1e-15);
        assert!(pool_rows(&theta, &[Some(0), Some(0), Some(0), None], 2).is_err());
    }

    #[test]
    fn feature_map_is_fixed_and_resolution_agnostic() {
        let fm = FeatureMap::new(3);
        let small = Tensor::from_fn(&[3, 8, 8], |i| ((i * 13 % 7) as f64 / 3.5) - 1.0);
        let mut big = vec![0.0; 3 * 32 * 32];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    big[c * 1024 + y * 32 + x] = small.data()[c * 64 + (y / 4) * 8 + x / 4];
                }
            }
        }
        let big = Tensor::new(vec![3, 32, 32], big).unwrap();
        let a = fm.features(&small).unwrap();
        assert_eq!(a.len(), FEATURE_DIM);
        assert_eq!(a, FeatureMap::new(3).features(&small).unwrap());
        for (x, y) in a.iter().zip(fm.features(&big).unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn color_classifier_reads_object_colour() {
        use crate::data::{render, Background, Color, SceneObject, SceneSpec, Shape};
        let spec = SceneSpec {
            objects: vec![SceneObject { shape: Shape::Square, color: Color::Blue, cell: 4 }],
            background: Background::Gradient,
        };
        let pair = render(&spec, 1, 32, 10).unwrap();
        let p = color_probs(&pair.images[0]);
        assert!(p[2] > 0.9, "{p:?}");
        let gray = Tensor::zeros(&[3, 8, 8]);
        assert_eq!(color_probs(&gray), vec![0.25; 4]);
    }

    proptest! {
        #[test]
        fn inception_score_is_bounded(raw in prop::collection::vec(0.01f64..1.0, 12)) {
            let mut data = raw;
            for row in data.chunks_mut(4) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let is = inception_score(&Tensor::new(vec![3, 4], data).unwrap()).unwrap();
            prop_assert!((1.0 - 1e-12..=4.0 + 1e-12).contains(&is));
        }

        #[test]
        fn agreement_ignores_positive_rescaling(
            scores in prop::collection::vec(-3.0f64..3.0, 12),
            oracle in prop::collection::vec(0.0f64..1.0, 12),
            scale in 0.1f64..10.0,
        ) {
            let softmax_cols = |s: &[f64]| {
                crate::tensor::ops::softmax_slices(s, &[3, 4], 0, false)
            };
            let o = Tensor::new(vec![3, 4], oracle).unwrap();
            let a = Tensor::new(vec![3, 4], softmax_cols(&scores)).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|v| v * scale).collect();
            let b = Tensor::new(vec![3, 4], softmax_cols(&scaled)).unwrap();
            prop_assume!(column_argmax(&a) == column_argmax(&Tensor::new(vec![3, 4], scores.clone()).unwrap()));
            prop_assert_eq!(layout_agreement(&a, &o).unwrap(), layout_agreement(&b, &o).unwrap());
        }
    }
}
