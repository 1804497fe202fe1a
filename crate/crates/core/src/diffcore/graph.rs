use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Expand(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ScaleRows(Var, Var),
    MaskFill { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    KlDiv { logp: Var, logq: Var, mask: Vec<bool>, count: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b)
            | ScaleRows(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | Shift(a) | Exp(a) | Log(a) | Softplus(a) | Gelu(a)
            | Relu(a) | LogSoftmax(a) | Sum(a) | Mean(a) | SumRows(a) | Expand(a) => vec![*a],
            Softmax { x, .. }
            | GatherRows { x, .. }
            | ScatterRows { x, .. }
            | SliceCols { x, .. }
            | MaskFill { x, .. } => vec![*x],
            ConcatRows(vs) | ConcatCols(vs) => vs.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
            KlDiv { logp, logq, .. } => vec![*logp, *logq],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so every node's parents precede it and
/// a single reverse sweep visits each node once. Leaves created from tensors
/// with `requires_grad` receive accumulated gradients on [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a copy of `t`, tracking gradient when `trainable` is set.
    pub fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        let mut copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        copy.set_requires_grad(trainable);
        self.leaf(copy)
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into trainable leaves.
    ///
    /// Calling it twice without resetting doubles every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                self.accum(grads, *a, |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] += dot(grow, brow);
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = ad[r * k + p];
                            if s != 0.0 {
                                axpy(&mut gb[p * n..(p + 1) * n], s, grow);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.accum(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| add_into(ga, g));
                self.accum(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, |ga| add_into(ga, g));
                let n = self.value(*b).len();
                self.accum(grads, *b, |gb| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| add_into(ga, g));
                self.accum(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / bd[j];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] -= g[j] * ad[j] / (bd[j] * bd[j]);
                    }
                });
            }
            Op::Scale(a, c) => self.accum(grads, *a, |ga| axpy(ga, *c, g)),
            Op::Shift(a) => self.accum(grads, *a, |ga| add_into(ga, g)),
            Op::Exp(a) => {
                let y = out.data();
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * y[j];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] / x[j];
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * sigmoid(x[j]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * gelu_grad(x[j]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        if x[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                self.accum(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dotp = 0.0;
                            for l in 0..len {
                                let at = base + l * inner;
                                dotp += g[at] * y[at];
                            }
                            for l in 0..len {
                                let at = base + l * inner;
                                gx[at] += y[at] * (g[at] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = out.data();
                let c = out.cols();
                self.accum(grads, *x, |gx| {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            let at = r * c + j;
                            gx[at] += grow[j] - y[at].exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => self.accum(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accum(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumRows(a) => {
                let c = out.len();
                self.accum(grads, *a, |ga| {
                    for chunk in ga.chunks_mut(c) {
                        add_into(chunk, g);
                    }
                });
            }
            Op::Expand(a) => {
                let total: f64 = g.iter().sum();
                self.accum(grads, *a, |ga| ga[0] += total);
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                self.accum(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let c = out.cols();
                self.accum(grads, *x, |gx| {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[dst * c..(dst + 1) * c]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let c = self.value(*x).cols();
                self.accum(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        add_into(
                            &mut gx[r * c + start..r * c + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accum(grads, *p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accum(grads, *p, |gp| {
                        for r in 0..out.rows() {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ScaleRows(x, s) => {
                let c = out.cols();
                let (xd, sd) = (self.data(*x), self.data(*s));
                self.accum(grads, *x, |gx| {
                    for (r, &sv) in sd.iter().enumerate() {
                        axpy(&mut gx[r * c..(r + 1) * c], sv, &g[r * c..(r + 1) * c]);
                    }
                });
                self.accum(grads, *s, |gs| {
                    for r in 0..gs.len() {
                        gs[r] += dot(&g[r * c..(r + 1) * c], &xd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::MaskFill { x, keep } => {
                self.accum(grads, *x, |gx| {
                    for j in 0..gx.len() {
                        if keep[j] {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gd = self.data(*gain);
                self.accum(grads, *gain, |gg| {
                    for (r, grow) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += grow[j] * xhat[r * c + j];
                        }
                    }
                });
                self.accum(grads, *bias, |gb| {
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                });
                self.accum(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (r, grow) in g.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, xh) / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g[0] / *count as f64;
                self.accum(grads, *logits, |gl| {
                    let mut probs = vec![0.0; c];
                    for (r, &t) in targets.iter().enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        softmax_into(lv.row(r), &mut probs);
                        let grow = &mut gl[r * c..(r + 1) * c];
                        for j in 0..c {
                            grow[j] += scale * probs[j];
                        }
                        grow[t] -= scale;
                    }
                });
            }
            Op::KlDiv {
                logp,
                logq,
                mask,
                count,
            } => {
                let (lp, lq) = (self.value(*logp), self.value(*logq));
                let c = lp.cols();
                let scale = g[0] / *count as f64;
                self.accum(grads, *logp, |gp| {
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        for j in r * c..(r + 1) * c {
                            let a = lp.data()[j];
                            if a != f64::NEG_INFINITY {
                                let p = a.exp();
                                gp[j] += scale * p * (a - lq.data()[j] + 1.0);
                            }
                        }
                    }
                });
                self.accum(grads, *logq, |gq| {
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        for j in r * c..(r + 1) * c {
                            let a = lp.data()[j];
                            if a != f64::NEG_INFINITY {
                                gq[j] -= scale * a.exp();
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn add_into(y: &mut [f64], x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += xi);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-subtracted softmax of one slice; `-inf` entries map to exactly 0.
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Splits `shape` into (outer, axis length, inner) extents around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
