//! Forward constructors for every differentiable operation.
//!
//! Matrices are rank-2 row-major tensors. The only broadcasting supported is
//! over the leading axis (a trailing-shape bias added to every row).

use super::graph::{axis_split, axpy, gelu, softmax_into, softplus, Graph, Op, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

impl Graph {
    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        tensor(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        tensor(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for p in 0..k {
                let s = ad[r * k + p];
                if s != 0.0 {
                    axpy(orow, s, &bd[p * n..(p + 1) * n]);
                }
            }
        }
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("transpose", a)?;
        let d = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(tensor(vec![c, r], out), Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds `row` (shape = trailing extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let rd = self.data(row);
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rd).for_each(|(x, y)| *x += y);
        }
        let t = tensor(self.shape(a).to_vec(), data);
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let t = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(t, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::ln);
        self.push(t, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated as `x + ln(1 + e^-x)` for positive inputs.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map(a, softplus);
        self.push(t, Op::Softplus(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Softmax along `axis`. `-inf` entries map to exactly zero; a slice made
    /// only of `-inf` is rejected.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} on {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        let mut slice = vec![0.0; len];
        let mut probs = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for l in 0..len {
                    slice[l] = d[base + l * inner];
                }
                if slice.iter().all(|&x| x == f64::NEG_INFINITY) {
                    return Err(Error::DegenerateSlice { op: "softmax" });
                }
                softmax_into(&slice, &mut probs);
                for l in 0..len {
                    out[base + l * inner] = probs[l];
                }
            }
        }
        Ok(self.push(tensor(shape, out), Op::Softmax { x: a, axis }))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).cols();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice { op: "log_softmax" });
            }
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = tensor(self.shape(a).to_vec(), out);
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Column sums of a matrix, shape `[cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.require_matrix("sum_rows", a)?;
        let mut out = vec![0.0; c];
        for row in self.data(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        Ok(self.push(tensor(vec![c], out), Op::SumRows(a)))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::shape("expand", format!("{:?}", self.shape(a))));
        }
        let v = self.data(a)[0];
        Ok(self.push(Tensor::full(shape, v), Op::Expand(a)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.require_matrix("gather_rows", a)?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let t = tensor(vec![idx.len(), c], out);
        Ok(self.push(
            t,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Embedding lookup: one table row per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero matrix with `rows` rows.
    /// Duplicate destinations accumulate.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("scatter_rows", a)?;
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape(
                "scatter_rows",
                format!("{r} rows into {rows} with {} indices", idx.len()),
            ));
        }
        let d = self.data(a);
        let mut out = vec![0.0; rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            out[dst * c..(dst + 1) * c]
                .iter_mut()
                .zip(&d[src * c..(src + 1) * c])
                .for_each(|(o, x)| *o += x);
        }
        let t = tensor(vec![rows, c], out);
        Ok(self.push(
            t,
            Op::ScatterRows {
                x: a,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("slice_cols", a)?;
        if width == 0 || start + width > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c}", start + width),
            ));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(r * width);
        for row in d.chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        Ok(self.push(tensor(vec![r, width], out), Op::SliceCols { x: a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.require_matrix("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.require_matrix("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} vs {c} columns")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(tensor(vec![rows, c], out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.require_matrix("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.require_matrix("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} vs {r} rows")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[row * w..(row + 1) * w]);
            }
        }
        Ok(self.push(tensor(vec![r, total], out), Op::ConcatCols(parts.to_vec())))
    }

    /// Multiplies row `r` of `a` by `s[r]`; `s` has one entry per row.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("scale_rows", a)?;
        if self.value(s).len() != r {
            return Err(Error::shape(
                "scale_rows",
                format!("{r} rows vs {:?} scales", self.shape(s)),
            ));
        }
        let sd = self.data(s);
        let mut out = self.data(a).to_vec();
        for (row, &k) in out.chunks_mut(c).zip(sd) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.push(tensor(vec![r, c], out), Op::ScaleRows(a, s)))
    }

    /// Keeps entries where `keep` is set and writes `-inf` elsewhere.
    pub fn mask_fill(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::shape(
                "mask_fill",
                format!("{} flags for {:?}", keep.len(), self.shape(a)),
            ));
        }
        let out = self
            .data(a)
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { f64::NEG_INFINITY })
            .collect();
        let t = tensor(self.shape(a).to_vec(), out);
        Ok(self.push(
            t,
            Op::MaskFill {
                x: a,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", format!("{c} features")));
        }
        let (gd, bd) = (self.data(gain), self.data(bias));
        let d = self.data(a);
        let rows = d.len() / c;
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let t = tensor(self.shape(a).to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, c) = self.require_matrix("cross_entropy", logits)?;
        if targets.len() != r || mask.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} targets, {} mask flags", targets.len(), mask.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {t} of {c}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy with an empty mask"));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (row, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let x = lv.row(row);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - x[t];
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Mean over masked rows of `sum_v p (log p - log q)` given log-probabilities.
    /// Terms with `p = 0` contribute zero.
    pub fn kl_div(&mut self, logp: Var, logq: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("kl_div", logp, logq)?;
        let (r, c) = self.require_matrix("kl_div", logp)?;
        if mask.len() != r {
            return Err(Error::shape("kl_div", format!("{r} rows vs {} flags", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("kl_div with an empty mask"));
        }
        let (lp, lq) = (self.data(logp), self.data(logq));
        let mut total = 0.0;
        for row in (0..r).filter(|&row| mask[row]) {
            total += kl_row(&lp[row * c..(row + 1) * c], &lq[row * c..(row + 1) * c]);
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::KlDiv {
                logp,
                logq,
                mask: mask.to_vec(),
                count,
            },
        ))
    }
}

/// `sum_v p (log p - log q)` for one row of log-probabilities.
pub(crate) fn kl_row(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .filter(|(&a, _)| a != f64::NEG_INFINITY)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum()
}
