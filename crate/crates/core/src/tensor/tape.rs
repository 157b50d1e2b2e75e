use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward corruption, used to prove the gradient checker
/// actually detects broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate the incoming gradient of every node of the named op.
    FlipSign(&'static str),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ChannelMul(Var, Var),
    ChannelBias(Var, Var),
    Abs(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    ClampLog { x: Var, lo: f64, hi: f64 },
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    FrobeniusNorm(Var),
    L1Norm(Var),
    /// Global max/min; the stored index is the selected flat position.
    Extremum(Var, usize),
    MaxAxis { x: Var, argmax: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { x: Var, offset: usize },
    Concat(Vec<Var>),
    PadCols { x: Var, from: usize, to: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Conv3 { x: Var, w: Var, b: Option<Var> },
    Upsample2(Var),
    Pool2(Var),
    AffineRows { x: Var, w: Var, b: Option<Var> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::ChannelMul(..) => "channel_mul",
            Op::ChannelBias(..) => "channel_bias",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampLog { .. } => "clamp_log",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::FrobeniusNorm(..) => "frobenius_norm",
            Op::L1Norm(..) => "l1_norm",
            Op::Extremum(..) => "extremum",
            Op::MaxAxis { .. } => "max_axis",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::PadCols { .. } => "pad_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv3 { .. } => "conv3x3",
            Op::Upsample2(..) => "upsample2",
            Op::Pool2(..) => "mean_pool2",
            Op::AffineRows { .. } => "affine",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every input index is smaller
/// than its consumer's and a reverse index sweep is a reverse topological
/// order. A tape accepts exactly one backward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push_node(t, Op::Leaf, rg)
    }

    /// Records a leaf that takes part in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Value with its gradient attached, as a standalone tensor.
    pub fn snapshot(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.requires_grad = self.nodes[v.0].requires_grad;
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    pub(crate) fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            !matches!(op, Op::Leaf) || value.data.iter().all(|x| !x.is_nan()),
            "NaN in leaf"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep starting from arbitrary upstream gradients.
    ///
    /// Used to chain vector-Jacobian products across tapes: the seeds are
    /// d(outer objective)/d(node) computed elsewhere.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.numel() {
                return Err(Error::dim("backward seed", self.shape(*v), &[g.len()]));
            }
            accumulate(&mut self.grads[v.0], g);
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if let Some(Fault::FlipSign(name)) = self.fault {
                if self.nodes[i].op.name() == name {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = node.value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        // Lazily-allocated gradient buffer for an input that needs one.
        macro_rules! gbuf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = gbuf!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = gbuf!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = gbuf!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = gbuf!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = gbuf!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if let Some(gb) = gbuf!(*b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if let Some(ga) = gbuf!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                }
                if let Some(gb) = gbuf!(*b) {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * out[k] / bv[k];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = gbuf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, gv)| *o += c * gv);
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(gx) = gbuf!(*x) {
                    add_into(gx, g);
                }
            }
            Op::ChannelMul(x, m) => {
                let (xv, mv) = (val(*x), val(*m));
                let inner = mv.len();
                let c = xv.len() / inner;
                if let Some(gx) = gbuf!(*x) {
                    for ch in 0..c {
                        for k in 0..inner {
                            gx[ch * inner + k] += g[ch * inner + k] * mv[k];
                        }
                    }
                }
                if let Some(gm) = gbuf!(*m) {
                    for ch in 0..c {
                        for k in 0..inner {
                            gm[k] += g[ch * inner + k] * xv[ch * inner + k];
                        }
                    }
                }
            }
            Op::ChannelBias(x, b) => {
                let c = val(*b).len();
                let inner = g.len() / c;
                if let Some(gx) = gbuf!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = gbuf!(*b) {
                    for ch in 0..c {
                        gb[ch] += g[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * sign(xv[k]);
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        if out[k] > 0.0 {
                            gx[k] += g[k] * 0.5 / out[k];
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * out[k];
                    }
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                }
            }
            Op::ClampLog { x, lo, hi } => {
                let xv = val(*x);
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            gx[k] += g[k] / xv[k];
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * sigmoid(xv[k]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..g.len() {
                        gx[k] += if xv[k] > 0.0 { g[k] } else { slope * g[k] };
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = gbuf!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = gbuf!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::FrobeniusNorm(x) => {
                let xv = val(*x);
                let n = out[0];
                if let Some(gx) = gbuf!(*x) {
                    if n > 0.0 {
                        for k in 0..xv.len() {
                            gx[k] += g[0] * xv[k] / n;
                        }
                    }
                }
            }
            Op::L1Norm(x) => {
                let xv = val(*x);
                if let Some(gx) = gbuf!(*x) {
                    for k in 0..xv.len() {
                        gx[k] += g[0] * sign(xv[k]);
                    }
                }
            }
            Op::Extremum(x, idx) => {
                if let Some(gx) = gbuf!(*x) {
                    gx[*idx] += g[0];
                }
            }
            Op::MaxAxis { x, argmax } => {
                if let Some(gx) = gbuf!(*x) {
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src] += g[k];
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                if let Some(gx) = gbuf!(*x) {
                    for o in 0..outer {
                        for l in 0..len {
                            for n in 0..inner {
                                gx[(o * len + l) * inner + n] += g[o * inner + n];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                if let Some(gx) = gbuf!(*x) {
                    for o in 0..outer {
                        for n in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + n;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                if let Some(gx) = gbuf!(*x) {
                    for o in 0..outer {
                        for n in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + n;
                            let gs: f64 = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += g[idx(l)] - out[idx(l)].exp() * gs;
                            }
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = gbuf!(*a) {
                    kernels::matmul_bt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = gbuf!(*b) {
                    kernels::matmul_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let s = shp(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = gbuf!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Slice { x, offset } => {
                if let Some(gx) = gbuf!(*x) {
                    add_into(&mut gx[*offset..*offset + g.len()], g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = gbuf!(*p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::PadCols { x, from, to } => {
                if let Some(gx) = gbuf!(*x) {
                    let rows = gx.len() / from;
                    for r in 0..rows {
                        add_into(&mut gx[r * from..(r + 1) * from], &g[r * to..r * to + from]);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = shp(*table)[1];
                if let Some(gt) = gbuf!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Conv3 { x, w, b } => {
                let sx = shp(*x);
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = shp(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                // Each buffer is taken out of `grads` in turn to satisfy the borrow checker.
                let mut gx = gbuf!(*x).map(std::mem::take);
                let mut gw = gbuf!(*w).map(std::mem::take);
                let mut gb = b.and_then(|bv| gbuf!(bv).map(std::mem::take));
                kernels::conv3_backward(
                    xv,
                    wv,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    cin,
                    cout,
                    h,
                    wd,
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let (Some(v), Some(bv)) = (gb, b) {
                    grads[bv.0] = Some(v);
                }
            }
            Op::Upsample2(x) => {
                let s = shp(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(gx) = gbuf!(*x) {
                    kernels::upsample2_backward(g, gx, c, h, w);
                }
            }
            Op::Pool2(x) => {
                let s = shp(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                if let Some(gx) = gbuf!(*x) {
                    kernels::pool2_backward(g, gx, c, h, w);
                }
            }
            Op::AffineRows { x, w, b } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let rows = sx.iter().product::<usize>() / sw[1];
                let (fin, fout) = (sw[1], sw[0]);
                let (xv, wv) = (val(*x), val(*w));
                if let Some(gx) = gbuf!(*x) {
                    kernels::matmul_acc(g, wv, gx, rows, fout, fin);
                }
                if let Some(gw) = gbuf!(*w) {
                    kernels::matmul_at_acc(g, xv, gw, rows, fout, fin);
                }
                if let Some(bv) = b {
                    if let Some(gb) = gbuf!(*bv) {
                        for r in 0..rows {
                            add_into(gb, &g[r * fout..(r + 1) * fout]);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => add_into(buf, g),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// sign with sign(0) = 0.
#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
