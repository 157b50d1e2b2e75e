//! Adaptive layout refinement: the γ-split of the SSM residual, the learned
//! easy/hard weights, and the weighted loss with its ordering regulariser.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Affine, Binder, Group, Init, ParamStore, LEAK};
use crate::ssm::SemMatrix;
use crate::tensor::{Tape, Tensor, Var};

/// Default easy/hard threshold.
pub const DEFAULT_GAMMA: f64 = 0.2;

/// `|Θ* − Θ|` laid out `[N, T]` and partitioned at `gamma`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualSplit {
    pub r: Var,
    pub easy: Var,
    pub hard: Var,
    pub gamma: f64,
}

/// Builds the split. Residuals equal to `gamma` count as hard. The masks are
/// constants, so gradients flow through whichever part holds each entry.
pub fn split_residual(
    tape: &mut Tape,
    theta: &SemMatrix,
    theta_star: &SemMatrix,
    gamma: f64,
) -> Result<ResidualSplit> {
    split_residual_vars(tape, theta.theta, theta_star.theta, gamma)
}

/// [`split_residual`] on raw `[T, N]` matrices.
pub fn split_residual_vars(tape: &mut Tape, theta: Var, theta_star: Var, gamma: f64) -> Result<ResidualSplit> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if tape.shape(theta) != tape.shape(theta_star) {
        return Err(Error::dim("split_residual", tape.shape(theta), tape.shape(theta_star)));
    }
    let diff = tape.sub(theta_star, theta)?;
    let abs = tape.abs(diff);
    let r = tape.transpose(abs)?;
    let shape = tape.shape(r).to_vec();
    let (easy_mask, hard_mask): (Vec<f64>, Vec<f64>) = tape
        .data(r)
        .iter()
        .map(|&v| if v < gamma { (1.0, 0.0) } else { (0.0, 1.0) })
        .unzip();
    let easy_mask = tape.constant(Tensor::new(shape.clone(), easy_mask)?);
    let hard_mask = tape.constant(Tensor::new(shape, hard_mask)?);
    let easy = tape.mul(r, easy_mask)?;
    let hard = tape.mul(r, hard_mask)?;
    Ok(ResidualSplit { r, easy, hard, gamma })
}

/// Zero-pads the trailing axis of `[N, T]` to `[N, d]`.
pub fn pad_to_feature_space(tape: &mut Tape, x: Var, d: usize) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || d < shape[1] {
        return Err(Error::dim("pad_to_feature_space", shape, &[d]));
    }
    tape.pad_cols(x, d)
}

/// Per-cell weight network `D → ⌈D/2⌉ → T` with a leaky rectifier between
/// the layers and a softplus output, shared across all cells.
#[derive(Clone, Copy, Debug)]
pub struct WeightNet {
    pub hidden: Affine,
    pub out: Affine,
    pub feature_dim: usize,
    pub words: usize,
}

impl WeightNet {
    /// The output layer starts at zero so every weight begins at ln 2.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        feature_dim: usize,
        words: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mid = feature_dim.div_ceil(2);
        WeightNet {
            hidden: Affine::new(store, &format!("{name}.hidden"), group, feature_dim, mid, Init::Uniform, rng),
            out: Affine::new(store, &format!("{name}.out"), group, mid, words, Init::Zero, rng),
            feature_dim,
            words,
        }
    }

    /// `softplus(out(leaky(hidden(pad(part) ⊙ H*ᵀ))))`, shape `[N, T]`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, part: Var, h_star: Var) -> Result<Var> {
        let ps = tape.shape(part).to_vec();
        let hs = tape.shape(h_star).to_vec();
        if ps.len() != 2 || ps[1] != self.words || hs.len() != 2 || hs != [self.feature_dim, ps[0]] {
            return Err(Error::dim("weight_forward", &ps, &hs));
        }
        let padded = pad_to_feature_space(tape, part, self.feature_dim)?;
        let ht = tape.transpose(h_star)?;
        let x = tape.mul(padded, ht)?;
        let a = self.hidden.forward(tape, p, x)?;
        let a = tape.leaky_relu(a, LEAK);
        let y = self.out.forward(tape, p, a)?;
        Ok(tape.softplus(y))
    }
}

/// Free-function form of [`WeightNet::forward`].
pub fn weight_forward(
    tape: &mut Tape,
    p: &mut Binder,
    net: &WeightNet,
    part: Var,
    h_star: Var,
) -> Result<Var> {
    net.forward(tape, p, part, h_star)
}

/// The three summands of the loss, each already divided by `N·D`.
#[derive(Clone, Copy, Debug)]
pub struct AlrTerms {
    pub easy: Var,
    pub hard: Var,
    pub ordering: Var,
    pub total: Var,
}

/// `(‖α⊙R_easy‖_F + ‖β⊙R_hard‖_F + softplus(max α − min β)) / (N·D)`.
pub fn alr_loss(tape: &mut Tape, split: &ResidualSplit, alpha: Var, beta: Var, d: usize) -> Result<Var> {
    Ok(alr_terms(tape, split, alpha, beta, d)?.total)
}

pub fn alr_terms(tape: &mut Tape, split: &ResidualSplit, alpha: Var, beta: Var, d: usize) -> Result<AlrTerms> {
    let shape = tape.shape(split.r).to_vec();
    for w in [alpha, beta] {
        if tape.shape(w) != shape.as_slice() {
            return Err(Error::dim("alr_loss", &shape, tape.shape(w)));
        }
    }
    if d == 0 {
        return Err(Error::Contract("alr_loss needs d > 0".into()));
    }
    let scale = 1.0 / (shape[0] * d) as f64;
    let ae = tape.mul(alpha, split.easy)?;
    let easy = tape.frobenius_norm(ae);
    let easy = tape.scale(easy, scale);
    let bh = tape.mul(beta, split.hard)?;
    let hard = tape.frobenius_norm(bh);
    let hard = tape.scale(hard, scale);
    let amax = tape.max(alpha);
    let bmin = tape.min(beta);
    let gap = tape.sub(amax, bmin)?;
    let ordering = tape.softplus(gap);
    let ordering = tape.scale(ordering, scale);
    let total = tape.sum_all(&[easy, hard, ordering])?;
    Ok(AlrTerms { easy, hard, ordering, total })
}

/// Fixed-weight variant: plain `‖Θ − Θ*‖_F`.
pub fn fixed_alr_loss(tape: &mut Tape, theta: Var, theta_star: Var) -> Result<Var> {
    let diff = tape.sub(theta, theta_star)?;
    Ok(tape.frobenius_norm(diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stream_rng;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn split_of(tape: &mut Tape, theta: &[&[f64]], star: &[&[f64]], gamma: f64) -> ResidualSplit {
        let a = tape.constant(Tensor::from_rows(theta));
        let b = tape.constant(Tensor::from_rows(star));
        split_residual_vars(tape, a, b, gamma).unwrap()
    }

    #[test]
    fn split_thresholds_with_hard_boundary() {
        let mut tape = Tape::new();
        // r = |θ* − θ| = [[0.1,0.2],[0.5,0.05]] in [T,N], i.e. [[0.1,0.5],[0.2,0.05]] as [N,T].
        let s = split_of(
            &mut tape,
            &[&[0.0, 0.0], &[0.0, 0.0]],
            &[&[0.1, 0.2], &[0.5, 0.05]],
            0.2,
        );
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(tape.data(s.r), &[0.1, 0.5, 0.2, 0.05]));
        assert!(close(tape.data(s.easy), &[0.1, 0.0, 0.0, 0.05]));
        assert!(close(tape.data(s.hard), &[0.0, 0.5, 0.2, 0.0]));
    }

    #[test]
    fn equal_matrices_split_to_zero() {
        let mut tape = Tape::new();
        let s = split_of(&mut tape, &[&[0.3, 0.6], &[0.7, 0.4]], &[&[0.3, 0.6], &[0.7, 0.4]], 0.2);
        for v in [s.r, s.easy, s.hard] {
            assert!(tape.data(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_gamma_makes_everything_hard() {
        let mut tape = Tape::new();
        let s = split_of(&mut tape, &[&[0.3, 0.6], &[0.7, 0.4]], &[&[0.5, 0.5], &[0.5, 0.5]], 0.0);
        assert!(tape.data(s.easy).iter().all(|&x| x == 0.0));
        assert_eq!(tape.data(s.hard), tape.data(s.r));
    }

    #[test]
    fn split_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(split_residual_vars(&mut tape, a, b, 0.2), Err(Error::Dimension { .. })));
        assert!(matches!(split_residual_vars(&mut tape, a, a, 1.5), Err(Error::Config(_))));
        assert!(matches!(split_residual_vars(&mut tape, a, a, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn padding_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let p = pad_to_feature_space(&mut tape, x, 4).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 0.0, 0.0]);
        let same = pad_to_feature_space(&mut tape, x, 2).unwrap();
        assert_eq!(tape.data(same), &[1.0, 2.0]);
        assert!(pad_to_feature_space(&mut tape, x, 1).is_err());
    }

    fn net(d: usize, t: usize) -> (ParamStore, WeightNet) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(7, 0);
        let net = WeightNet::new(&mut store, "phi", Group::Generator, d, t, &mut rng);
        (store, net)
    }

    #[test]
    fn zero_part_gives_ln2_and_ignores_features() {
        let (store, net) = net(6, 3);
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&store);
        let part = tape.constant(Tensor::zeros(&[4, 3]));
        let h = tape.constant(Tensor::from_fn(&[6, 4], |i| (i as f64).sin()));
        let h2 = tape.scale(h, 2.0);
        let a = net.forward(&mut tape, &mut p, part, h).unwrap();
        let b = net.forward(&mut tape, &mut p, part, h2).unwrap();
        assert_eq!(tape.shape(a), &[4, 3]);
        assert!(tape.data(a).iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        assert_eq!(tape.data(a), tape.data(b));
    }

    #[test]
    fn trained_net_outputs_stay_positive() {
        let (mut store, net) = net(6, 3);
        let mut rng = stream_rng(3, 1);
        let w = crate::nn::uniform_init(&mut rng, &[3, 3], 1);
        store.set(net.out.w, w.scale_by(40.0)).unwrap();
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&store);
        let part = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).cos()));
        let h = tape.constant(Tensor::from_fn(&[6, 4], |i| (i as f64 * 1.3).sin() * 5.0));
        let a = net.forward(&mut tape, &mut p, part, h).unwrap();
        assert!(tape.data(a).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn loss_matches_hand_computation() {
        let mut tape = Tape::new();
        let s = split_of(
            &mut tape,
            &[&[0.0, 0.0], &[0.0, 0.0]],
            &[&[0.1, 0.2], &[0.5, 0.05]],
            0.2,
        );
        let ones = tape.constant(Tensor::full(&[2, 2], 1.0));
        let l = alr_loss(&mut tape, &s, ones, ones, 2).unwrap();
        let expect = (0.0125f64.sqrt() + 0.29f64.sqrt() + std::f64::consts::LN_2) / 4.0;
        assert!((tape.item(l) - expect).abs() < 1e-12);
        assert!((tape.item(l) - 0.3359).abs() < 1e-3);
    }

    #[test]
    fn zero_residual_leaves_only_ordering_term() {
        let mut tape = Tape::new();
        let s = split_of(&mut tape, &[&[0.2, 0.9], &[0.8, 0.1]], &[&[0.2, 0.9], &[0.8, 0.1]], 0.2);
        let alpha = tape.constant(Tensor::from_rows(&[&[0.5, 1.5], &[0.2, 0.3]]));
        let beta = tape.constant(Tensor::from_rows(&[&[2.0, 0.7], &[1.0, 3.0]]));
        let t = alr_terms(&mut tape, &s, alpha, beta, 3).unwrap();
        assert_eq!(tape.item(t.easy), 0.0);
        assert_eq!(tape.item(t.hard), 0.0);
        let expect = (1.0 + (1.5f64 - 0.7).exp()).ln() / 6.0;
        assert!((tape.item(t.total) - expect).abs() < 1e-15);
    }

    #[test]
    fn ordering_term_vanishes_for_large_gap() {
        let mut tape = Tape::new();
        let s = split_of(&mut tape, &[&[0.0]], &[&[0.0]], 0.2);
        let alpha = tape.constant(Tensor::full(&[1, 1], 1.0));
        let beta = tape.constant(Tensor::full(&[1, 1], 51.0));
        let l = alr_loss(&mut tape, &s, alpha, beta, 1).unwrap();
        assert!(tape.item(l) < 1e-20);
    }

    #[test]
    fn fixed_variant_is_frobenius_distance() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[0.0, 0.0]]));
        let l = fixed_alr_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.item(l), 1.0);
    }

    fn column_softmax(tape: &mut Tape, logits: Var) -> Var {
        tape.softmax_axis(logits, 0).unwrap()
    }

    #[test]
    fn gradient_through_split_and_weights() {
        let (t, n, d) = (3, 4, 6);
        let (store, net) = net(d, t);
        let mut rng = stream_rng(11, 2);
        let alpha_net = net;
        let logits = crate::nn::uniform_init(&mut rng, &[t, n], 1).scale_by(2.0);
        let star_logits = crate::nn::uniform_init(&mut rng, &[t, n], 1).scale_by(2.0);
        let h_star = crate::nn::uniform_init(&mut rng, &[d, n], 1);
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let mut p = Binder::frozen(&store);
            let theta = column_softmax(tape, x);
            let sl = tape.constant(star_logits.clone());
            let star = column_softmax(tape, sl);
            let hs = tape.constant(h_star.clone());
            let split = split_residual_vars(tape, theta, star, 0.2)?;
            let alpha = alpha_net.forward(tape, &mut p, split.easy, hs)?;
            let beta = alpha_net.forward(tape, &mut p, split.hard, hs)?;
            alr_loss(tape, &split, alpha, beta, d)
        };
        let err = grad_check(f, &logits, 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    proptest! {
        #[test]
        fn split_partitions_residual(
            a in prop::collection::vec(0.0f64..1.0, 12),
            b in prop::collection::vec(0.0f64..1.0, 12),
            gamma in 0.0f64..=1.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], a).unwrap());
            let y = tape.constant(Tensor::new(vec![3, 4], b).unwrap());
            let s = split_residual_vars(&mut tape, x, y, gamma).unwrap();
            let (r, e, h) = (tape.data(s.r), tape.data(s.easy), tape.data(s.hard));
            for i in 0..r.len() {
                prop_assert_eq!(e[i] + h[i], r[i]);
                prop_assert_eq!(e[i] * h[i], 0.0);
                if e[i] > 0.0 { prop_assert!(e[i] < gamma); }
                if h[i] > 0.0 { prop_assert!(h[i] >= gamma); }
            }
        }

        #[test]
        fn loss_is_monotone_in_hard_entries(
            r in prop::collection::vec(0.0f64..1.0, 6),
            w in prop::collection::vec(0.01f64..3.0, 12),
            idx in 0usize..6,
            bump in 0.0f64..1.0,
        ) {
            let eval = |r: Vec<f64>| {
                let mut tape = Tape::new();
                let zero = tape.constant(Tensor::zeros(&[3, 2]));
                let rv = tape.constant(Tensor::new(vec![3, 2], r).unwrap());
                let s = split_residual_vars(&mut tape, zero, rv, 0.2).unwrap();
                let alpha = tape.constant(Tensor::new(vec![2, 3], w[..6].to_vec()).unwrap());
                let beta = tape.constant(Tensor::new(vec![2, 3], w[6..].to_vec()).unwrap());
                let l = alr_loss(&mut tape, &s, alpha, beta, 4).unwrap();
                (tape.item(l), tape.data(s.hard).to_vec())
            };
            let (base, hard) = eval(r.clone());
            // idx addresses the [N,T] = [2,3] layout; map it back to [T,N] = [3,2].
            let (row, col) = (idx / 3, idx % 3);
            prop_assume!(hard[idx] > 0.0);
            let mut bumped = r.clone();
            let k = col * 2 + row;
            bumped[k] = (bumped[k] + bump).min(1.0);
            prop_assert!(eval(bumped).0 >= base);
        }

        #[test]
        fn loss_non_negative(
            a in prop::collection::vec(0.0f64..1.0, 6),
            b in prop::collection::vec(0.0f64..1.0, 6),
            w in prop::collection::vec(0.01f64..3.0, 12),
        ) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 2], a).unwrap());
            let y = tape.constant(Tensor::new(vec![3, 2], b).unwrap());
            let s = split_residual_vars(&mut tape, x, y, 0.2).unwrap();
            let alpha = tape.constant(Tensor::new(vec![2, 3], w[..6].to_vec()).unwrap());
            let beta = tape.constant(Tensor::new(vec![2, 3], w[6..].to_vec()).unwrap());
            let l = alr_loss(&mut tape, &s, alpha, beta, 4).unwrap();
            prop_assert!(tape.item(l) >= 0.0);
        }
    }
}
