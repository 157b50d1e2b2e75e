//! End-to-end gradient check of the generator objective with respect to a
//! sampled subset of parameter entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binder, Group, ParamId};
use crate::tensor::{grad_check_on, Tape, Tensor, Var};

use super::model::{Model, SampleInput};
use super::train::generator_objective;

/// One scalar entry of a stored parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Entry {
    pub param: usize,
    pub offset: usize,
}

/// `count` distinct entries of `group`: a parameter tensor is drawn
/// uniformly, then an entry inside it, so small tensors are covered too.
/// Sorted by parameter.
pub fn pick_entries(model: &Model, group: Group, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Entry>> {
    let store = &model.store;
    let ids: Vec<ParamId> = store.ids_in(group).collect();
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    if count > total {
        return Err(Error::Config(format!("cannot pick {count} of {total} entries")));
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        let id = ids[rng.random_range(0..ids.len())];
        let offset = rng.random_range(0..store.get(id).numel());
        picked.insert(Entry { param: id.index(), offset });
    }
    Ok(picked.into_iter().collect())
}

/// Binds every parameter touched by `entries` as
/// `stored-with-entries-zeroed + scatter(x)`.
fn bind_entries(model: &Model, tape: &mut Tape, p: &mut Binder, entries: &[Entry], x: Var) -> Result<()> {
    let store = &model.store;
    let mut start = 0;
    while start < entries.len() {
        let param = entries[start].param;
        let end = start + entries[start..].iter().take_while(|e| e.param == param).count();
        let id = store.ids().nth(param).expect("entry of an existing parameter");
        let value = store.get(id);
        let n = value.numel();
        let k = end - start;
        let mut base = value.clone();
        let mut scatter = vec![0.0; n * k];
        for (col, e) in entries[start..end].iter().enumerate() {
            base.data_mut()[e.offset] = 0.0;
            scatter[e.offset * k + col] = 1.0;
        }
        let base = tape.constant(base);
        let scatter = tape.constant(Tensor::new(vec![n, k], scatter)?);
        let xs = tape.slice(x, start, &[k, 1])?;
        let delta = tape.matmul(scatter, xs)?;
        let delta = tape.reshape(delta, value.shape())?;
        let v = tape.add(base, delta)?;
        p.bind_as(id, v);
        start = end;
    }
    Ok(())
}

/// Max relative error between the tape gradient of the generator objective
/// and central differences, over `entries`.
pub fn objective_grad_check(model: &Model, inputs: &[SampleInput], entries: &[Entry], eps: f64) -> Result<f64> {
    objective_grad_check_on(&Tape::new, model, inputs, entries, eps)
}

/// [`objective_grad_check`] with every tape built by `new_tape`.
pub(crate) fn objective_grad_check_on(
    new_tape: &(dyn Fn() -> Tape + Sync),
    model: &Model,
    inputs: &[SampleInput],
    entries: &[Entry],
    eps: f64,
) -> Result<f64> {
    let store = &model.store;
    let ids: Vec<ParamId> = store.ids().collect();
    let x = Tensor::new(
        vec![entries.len()],
        entries.iter().map(|e| store.get(ids[e.param]).data()[e.offset]).collect(),
    )?;
    grad_check_on(
        new_tape,
        |tape, xv| {
            let mut p = Binder::frozen(store);
            bind_entries(model, tape, &mut p, entries, xv)?;
            generator_objective(model, tape, &mut p, inputs)
        },
        &x,
        eps,
    )
}
