//! Reverse-mode differentiation over a dynamic tape.
//!
//! Every op appends a node holding its output value. [`Graph::backward`] walks
//! the tape once in reverse, so fan-out gradients accumulate additively.
//! Nodes that do not depend on a `requires_grad` leaf are skipped.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannel(Var, Var),
    Silu(Var, Option<Rc<Vec<F>>>),
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Conv2d(Var, Var, ConvGeom, Option<Rc<Vec<F>>>),
    AvgPool2(Var),
    Upsample2(Var),
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread.
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected rank 2, got {:?}", s))),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err(op, format!("expected [C, H, W], got {:?}", s))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::lit(c);
        let t = self.value(a).map(|x| x * cf);
        let rg = self.needs(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x[m×n] + b[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for {n} columns", self.shape(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(t, Op::AddRowBias(x, b), rg))
    }

    /// `x[C, ...] + b[C]`, broadcast over everything after the channel axis.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(b).len() != c {
            return Err(shape_err(
                "add_channel",
                format!("bias {:?} for {c} channels", self.shape(b)),
            ));
        }
        let plane = self.value(x).len() / c;
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (chunk, &bv) in t.data_mut().chunks_mut(plane).zip(&bias) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(t, Op::AddChannel(x, b), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig: Vec<F> = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor::new(
            x.shape(),
            x.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect(),
        )
        .expect("silu keeps its input shape");
        let rg = self.needs(&[a]);
        let keep = rg.then(|| Rc::new(sig));
        self.push(t, Op::Silu(a, keep), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "softmax_rows")?;
        let mut t = self.value(a).clone();
        kernels::softmax_rows(t.data_mut(), n);
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a).rows(start, end)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", format!("{c} vs {n} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(&[rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Zero-padded square convolution. `x: [C, H, W]`, `w: [O, C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (c, h, wd) = self.dims3(x, "conv2d")?;
        let (o, k) = match self.shape(w) {
            &[o, ci, k, k2] if ci == c && k == k2 && k % 2 == 1 => (o, k),
            s => {
                return Err(shape_err(
                    "conv2d",
                    format!("weight {:?} for input channels {c}", s),
                ))
            }
        };
        let g = ConvGeom {
            in_ch: c,
            h,
            w: wd,
            k,
            stride,
        };
        let cols = kernels::im2col(self.value(x).data(), g);
        let out = kernels::conv_cols(&cols, self.value(w).data(), o, g);
        let rg = self.needs(&[x, w]);
        let keep = self.requires_grad(w).then(|| Rc::new(cols));
        Ok(self.push(
            Tensor::new(&[o, g.out_h(), g.out_w()], out)?,
            Op::Conv2d(x, w, g, keep),
            rg,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("odd extent {h}x{w}")));
        }
        let out = kernels::avg_pool2(self.value(x).data(), c, h, w);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c, h / 2, w / 2], out)?, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "upsample2")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let (ch, rem) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = (rem / ow, rem % ow);
            src[(ch * h + y / 2) * w + xx / 2]
        });
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_wide();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(F::lit(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum_wide() / t.len() as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(F::lit(s)), Op::Mean(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb, "mse")?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| {
                let d = x.wide() - y.wide();
                d * d
            })
            .sum();
        let v = s / ta.len() as f64;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(F::lit(v)), Op::MseLoss(a, b), rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of the scalar `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop(i, op, g)?;
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: Op<F>, g: Tensor<F>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a, "matmul")?;
                let (_, n) = self.dims2(b, "matmul")?;
                if self.requires_grad(a) {
                    let da = kernels::matmul_nt(g.data(), self.value(b).data(), m, n, k);
                    self.accumulate(a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(b) {
                    let db = kernels::matmul_tn(self.value(a).data(), g.data(), m, k, n);
                    self.accumulate(b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose2()?;
                self.accumulate(a, t);
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(a, g.reshape(&shape)?);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(b, g.map(|x| -x));
                self.accumulate(a, g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let t = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                    self.accumulate(a, t);
                }
                if self.requires_grad(b) {
                    let t = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                    self.accumulate(b, t);
                }
            }
            Op::Scale(a, c) => {
                let cf = F::lit(c);
                self.accumulate(a, g.map(|x| x * cf));
            }
            Op::AddRowBias(x, b) => {
                if self.requires_grad(b) {
                    let n = self.value(b).len();
                    let mut acc = vec![0.0f64; n];
                    for row in g.data().chunks(n) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v.wide();
                        }
                    }
                    let shape = self.shape(b).to_vec();
                    self.accumulate(
                        b,
                        Tensor::new(&shape, acc.into_iter().map(F::lit).collect())?,
                    );
                }
                self.accumulate(x, g);
            }
            Op::AddChannel(x, b) => {
                if self.requires_grad(b) {
                    let c = self.value(b).len();
                    let plane = g.len() / c;
                    let sums = g
                        .data()
                        .chunks(plane)
                        .map(|ch| F::lit(ch.iter().map(|v| v.wide()).sum()))
                        .collect();
                    let shape = self.shape(b).to_vec();
                    self.accumulate(b, Tensor::new(&shape, sums)?);
                }
                self.accumulate(x, g);
            }
            Op::Silu(a, sig) => {
                let sig = sig.expect("silu on the tape keeps its sigmoid");
                let x = self.value(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(sig.iter())
                    .map(|((&gv, &xv), &s)| gv * s * (F::one() + xv * (F::one() - s)))
                    .collect();
                let t = Tensor::new(x.shape(), data)?;
                self.accumulate(a, t);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let n = y.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p.wide() * q.wide()).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(p, q)| F::lit(p.wide() * (q.wide() - dot))),
                    );
                }
                let shape = y.shape().to_vec();
                self.accumulate(a, Tensor::new(&shape, dx)?);
            }
            Op::SliceRows(a, start) => {
                let (_, c) = self.dims2(a, "slice_rows")?;
                let mut full = Tensor::zeros(self.shape(a));
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(a, full);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(p).to_vec();
                    let n = self.value(p).len();
                    let part = Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(p, part);
                }
            }
            Op::Conv2d(x, w, geom, cols) => {
                let o = self.shape(w)[0];
                let n = geom.out_h() * geom.out_w();
                let kk = geom.patch();
                if let Some(cols) = cols.filter(|_| self.requires_grad(w)) {
                    let dw = kernels::matmul_nt(g.data(), &cols, o, n, kk);
                    let shape = self.shape(w).to_vec();
                    self.accumulate(w, Tensor::new(&shape, dw)?);
                }
                if self.requires_grad(x) {
                    let dcols = kernels::matmul_tn(self.value(w).data(), g.data(), o, kk, n);
                    let mut dx = Tensor::zeros(self.shape(x));
                    kernels::col2im(&dcols, geom, dx.data_mut());
                    self.accumulate(x, dx);
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.dims3(x, "avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = F::lit(0.25);
                let gd = g.data();
                let dx = Tensor::from_fn(&[c, h, w], |idx| {
                    let (ch, rem) = (idx / (h * w), idx % (h * w));
                    let (y, xx) = (rem / w, rem % w);
                    gd[(ch * oh + y / 2) * ow + xx / 2] * quarter
                });
                self.accumulate(x, dx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.dims3(x, "upsample2")?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(&[c, h, w]);
                let d = dx.data_mut();
                for (idx, &gv) in g.data().iter().enumerate() {
                    let (ch, rem) = (idx / (oh * ow), idx % (oh * ow));
                    let (y, xx) = (rem / ow, rem % ow);
                    d[(ch * h + y / 2) * w + xx / 2] += gv;
                }
                self.accumulate(x, dx);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                let t = Tensor::full(self.shape(a), gv);
                self.accumulate(a, t);
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let gv = F::lit(g.data()[0].wide() / n);
                let t = Tensor::full(self.shape(a), gv);
                self.accumulate(a, t);
            }
            Op::MseLoss(a, b) => {
                let n = self.value(a).len() as f64;
                let c = 2.0 * g.data()[0].wide() / n;
                let diff = self.value(a).zip_map(self.value(b), "mse", |x, y| {
                    F::lit(c * (x.wide() - y.wide()))
                })?;
                if self.requires_grad(b) {
                    self.accumulate(b, diff.map(|x| -x));
                }
                self.accumulate(a, diff);
            }
        }
        Ok(())
    }
}
