//! Adaptive-moment optimiser and gradient-norm clipping.

use crate::error::{Error, Result};
use crate::nn::{Group, ParamId, ParamStore};

/// Adam over the parameters of one [`Group`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub group: Group,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, group: Group, lr: f64, beta1: f64, beta2: f64) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        Adam {
            group,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `(id, gradient)` pairs. Parameters outside the
    /// optimiser's group are rejected.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if store.group(*id) != self.group {
                return Err(Error::Contract(format!(
                    "parameter {} is not in group {:?}",
                    store.name(*id),
                    self.group
                )));
            }
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let p = store.get_mut(*id).data_mut();
            if g.len() != p.len() {
                return Err(Error::dim("adam", &[p.len()], &[g.len()]));
            }
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= c);
    }
    norm
}

/// Adds `(id, gradient)` lists in order, scaling each by `weight`.
pub fn accumulate(acc: &mut [Option<Vec<f64>>], grads: &[(ParamId, Vec<f64>)], weight: f64) {
    for (id, g) in grads {
        let slot = &mut acc[id.index()];
        match slot {
            Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += weight * g),
            None => *slot = Some(g.iter().map(|g| weight * g).collect()),
        }
    }
}

/// Collects the entries of an accumulator that belong to `group`.
pub fn collect(store: &ParamStore, acc: &[Option<Vec<f64>>], group: Group) -> Vec<(ParamId, Vec<f64>)> {
    store
        .ids_in(group)
        .filter_map(|id| acc[id.index()].clone().map(|g| (id, g)))
        .collect()
}
