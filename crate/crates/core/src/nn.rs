//! Named parameter storage and the small layer set the networks are built
//! from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which optimiser owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Generator,
    Discriminator,
    /// Text encoder and real-image encoders.
    Encoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Generator, Group::Discriminator, Group::Encoder];

    fn slot(self) -> usize {
        match self {
            Group::Generator => 0,
            Group::Discriminator => 1,
            Group::Encoder => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: Group,
    value: Tensor,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.group(id) == group)
    }

    /// Total scalar count in a group.
    pub fn count(&self, group: Group) -> usize {
        self.ids_in(group).map(|id| self.get(id).numel()).sum()
    }

    /// Replaces a tensor, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", cur.shape(), value.shape()));
        }
        *cur = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Per-tape view of a [`ParamStore`]: parameters become leaves the first
/// time they are used. Leaves require gradients only for trainable groups.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: [bool; 3],
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: &[Group]) -> Self {
        let mut flags = [false; 3];
        for g in trainable {
            flags[g.slot()] = true;
        }
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable: flags,
        }
    }

    /// Binder whose leaves never take gradients.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable[self.store.group(id).slot()] {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Uses `var` for `id` instead of a copy of the stored tensor.
    pub fn bind_as(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Vec<(ParamId, Vec<f64>)> {
        bound_grads(&self.vars, tape)
    }

    /// Whether a parameter has been bound on this tape.
    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }

    /// Releases the store borrow, keeping the bindings for [`Bound::grads`].
    pub fn finish(self) -> Bound {
        Bound { vars: self.vars }
    }
}

/// Bindings of a finished [`Binder`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn grads(&self, tape: &Tape) -> Vec<(ParamId, Vec<f64>)> {
        bound_grads(&self.vars, tape)
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }
}

fn bound_grads(vars: &[Option<Var>], tape: &Tape) -> Vec<(ParamId, Vec<f64>)> {
    vars.iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let v = (*v)?;
            if !tape.requires_grad(v) {
                return None;
            }
            tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
        })
        .collect()
}

/// Uniform(±1/√fan_in) initialisation.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zero,
}

/// Fully connected layer `y = W x + b` applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w, b) = match init {
            Init::Uniform => (
                uniform_init(rng, &[fan_out, fan_in], fan_in),
                uniform_init(rng, &[fan_out], fan_in),
            ),
            Init::Zero => (Tensor::zeros(&[fan_out, fan_in]), Tensor::zeros(&[fan_out])),
        };
        Affine {
            w: store.add(format!("{name}.w"), group, w),
            b: store.add(format!("{name}.b"), group, b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.var(tape, self.w);
        let b = p.var(tape, self.b);
        tape.affine(x, w, Some(b))
    }
}

/// 3×3 same-padded convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * 9;
        let (w, b) = match init {
            Init::Uniform => (
                uniform_init(rng, &[cout, cin, 3, 3], fan_in),
                Tensor::zeros(&[cout]),
            ),
            Init::Zero => (Tensor::zeros(&[cout, cin, 3, 3]), Tensor::zeros(&[cout])),
        };
        Conv {
            w: store.add(format!("{name}.w"), group, w),
            b: store.add(format!("{name}.b"), group, b),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.var(tape, self.w);
        let b = p.var(tape, self.b);
        tape.conv3x3(x, w, Some(b))
    }
}

/// Leaky-rectifier slope used by every network in the crate.
pub const LEAK: f64 = 0.2;

/// Seeded generator for a named stream; distinct `(seed, stream)` pairs give
/// independent sequences.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
