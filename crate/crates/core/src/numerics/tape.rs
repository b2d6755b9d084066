//! Reverse-mode differentiation over 2D tensors.
//!
//! A [`Tape`] records each operation with its output value. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! gradients for every parameter leaf, keyed by parameter name.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::{attention, fastmath};
use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Query rows `[q_start, q_start + q_len)` attend to key rows
/// `[k_start, k_start + k_len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention segments over consecutive equal-size blocks.
    pub fn blocks(count: usize, size: usize) -> Vec<Segment> {
        (0..count)
            .map(|b| Segment {
                q_start: b * size,
                q_len: size,
                k_start: b * size,
                k_len: size,
            })
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    /// Keeps the elementwise derivative for the backward pass.
    Gelu(Var, Vec<f64>),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Rc<Vec<Segment>>,
        probs: Vec<f64>,
    },
    ConcatCols(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    BlockMean(Var, usize),
    /// Scalar whose derivative with respect to the input is supplied by the caller.
    External(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mismatch(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient slots during a backward pass; nodes that do not lead to a
/// parameter get no slot.
struct Grads<'t, 'g> {
    tape: &'t Tape,
    grads: &'g mut [Option<Vec<f64>>],
}

impl Grads<'_, '_> {
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.tape.needs(v) {
            return None;
        }
        let len = self.tape.value(v).len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(dst) = self.slot(v) {
            dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn add_owned(&mut self, v: Var, g: Vec<f64>) {
        if !self.tape.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ConcatCols(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Gelu(a, _)
            | Op::Sigmoid(a)
            | Op::GatherRows(a, _)
            | Op::BlockMean(a, _)
            | Op::External(a, _) => self.needs(*a),
            Op::LayerNorm { x, gain, bias, .. } => self.needs(*x) || self.needs(*gain) || self.needs(*bias),
            Op::Attention { q, k, v, .. } => self.needs(*q) || self.needs(*k) || self.needs(*v),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a named parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(av);
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(mismatch("matmul", av, bv));
        }
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.len() != c {
            return Err(mismatch("add_row", av, bv));
        }
        let b = bv.data();
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * factor).collect()).unwrap();
        self.push(t, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Rc<Vec<f64>>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::ShapeMismatch(format!("mask of {} for {:?}", mask.len(), av.shape())));
        }
        let data = av.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, mask)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len();
        let (mut out, mut deriv) = (vec![0.0; n], vec![0.0; n]);
        fastmath::gelu_slice(av.data(), &mut out, &mut deriv);
        let t = Tensor::new(av.shape().to_vec(), out).unwrap();
        self.push(t, Op::Gelu(a, deriv))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| sigmoid(x)).collect()).unwrap();
        self.push(t, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = as_matrix(xv);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(mismatch("layer_norm", xv, self.value(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention restricted to `segments`.
    /// Each head uses `cols / heads` columns and scale `1/sqrt(cols / heads)`.
    /// Query rows not covered by any segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Rc<Vec<Segment>>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(mismatch("attention", qv, kv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::BadHeadCount { dim: d, heads });
        }
        for s in segments.iter() {
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() || s.k_len == 0 {
                return Err(Error::ShapeMismatch(format!("segment {s:?} out of range")));
            }
        }
        let heads_view = attention::Heads {
            q: qv.data(),
            k: kv.data(),
            v: vv.data(),
            d,
            heads,
        };
        let (out, probs) = attention::forward(&heads_view, qv.rows(), &segments);
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = as_matrix(av);
        let (rb, cb) = as_matrix(bv);
        if ra != rb {
            return Err(mismatch("concat_cols", av, bv));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let t = Tensor::matrix(ra, ca + cb, out)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = as_matrix(av);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= rows {
                return Err(Error::ShapeMismatch(format!("row {i} of {rows}")));
            }
            out.extend_from_slice(av.row(i));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows(a, index)))
    }

    /// Averages consecutive blocks of `block` rows.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = as_matrix(av);
        if block == 0 || rows % block != 0 {
            return Err(Error::ShapeMismatch(format!("{rows} rows in blocks of {block}")));
        }
        let mut out = vec![0.0; rows / block * c];
        for r in 0..rows {
            let dst = &mut out[(r / block) * c..][..c];
            dst.iter_mut().zip(av.row(r)).for_each(|(o, x)| *o += x / block as f64);
        }
        let t = Tensor::matrix(rows / block, c, out)?;
        Ok(self.push(t, Op::BlockMean(a, block)))
    }

    /// Scalar node with value `value` and caller-supplied `d value / d a`.
    pub fn external(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch("external gradient length".into()));
        }
        Ok(self.push(Tensor::vector(vec![value]), Op::External(a, grad)))
    }

    /// Sum of scalar nodes, scaled.
    pub fn weighted_sum(&mut self, terms: &[Var], factor: f64) -> Result<Var> {
        let mut acc = *terms.first().ok_or(Error::EmptyDataset)?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(self.scale(acc, factor))
    }

    /// Back-propagates from scalar `root`; returns summed gradients per parameter name.
    pub fn backward(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut g = Grads { tape: self, grads: &mut grads };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = as_matrix(av);
                    let n = bv.shape()[1];
                    if let Some(ga) = g.slot(*a) {
                        gemm(m, n, k, &gout, false, bv.data(), true, ga, true);
                    }
                    if let Some(gb) = g.slot(*b) {
                        gemm(k, m, n, av.data(), true, &gout, false, gb, true);
                    }
                }
                Op::Add(a, b) => {
                    g.add(*a, &gout);
                    g.add_owned(*b, gout);
                }
                Op::AddRow(a, bias) => {
                    if let Some(gb) = g.slot(*bias) {
                        let c = gb.len();
                        for row in gout.chunks_exact(c) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                    g.add_owned(*a, gout);
                }
                Op::Scale(a, f) => {
                    g.add_owned(*a, gout.iter().map(|x| x * f).collect());
                }
                Op::MulConst(a, mask) => {
                    g.add_owned(*a, gout.iter().zip(mask.iter()).map(|(x, m)| x * m).collect());
                }
                Op::Gelu(a, deriv) => {
                    g.add_owned(*a, gout.iter().zip(deriv).map(|(x, d)| x * d).collect());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    g.add_owned(*a, gout.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect());
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = self.value(*gain).len();
                    let gv = self.value(*gain).data();
                    if let Some(gg) = g.slot(*gain) {
                        for (dy, xh) in gout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            gg.iter_mut().zip(dy.iter().zip(xh)).for_each(|(a, (d, h))| *a += d * h);
                        }
                    }
                    if let Some(gb) = g.slot(*bias) {
                        for dy in gout.chunks_exact(c) {
                            gb.iter_mut().zip(dy).for_each(|(a, d)| *a += d);
                        }
                    }
                    if let Some(gx) = g.slot(*x) {
                        let mut dxhat = vec![0.0; c];
                        let rows = gout.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(gx.chunks_exact_mut(c));
                        for (((dy, xh), gxr), &rs) in rows.zip(rstd) {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                dxhat[j] = dy[j] * gv[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xh[j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                gxr[j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let heads_view = attention::Heads {
                        q: qv.data(),
                        k: kv.data(),
                        v: vv.data(),
                        d: qv.cols(),
                        heads: *heads,
                    };
                    let [gq, gk, gv] = attention::backward(&heads_view, segments, probs, &gout);
                    g.add_owned(*q, gq);
                    g.add_owned(*k, gk);
                    g.add_owned(*v, gv);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if let Some(ga) = g.slot(*a) {
                        for (dst, row) in ga.chunks_exact_mut(ca).zip(gout.chunks_exact(ca + cb)) {
                            dst.iter_mut().zip(&row[..ca]).for_each(|(x, y)| *x += y);
                        }
                    }
                    if let Some(gb) = g.slot(*b) {
                        for (dst, row) in gb.chunks_exact_mut(cb).zip(gout.chunks_exact(ca + cb)) {
                            dst.iter_mut().zip(&row[ca..]).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::GatherRows(a, index) => {
                    let c = self.value(*a).cols();
                    if let Some(ga) = g.slot(*a) {
                        for (row, &i) in gout.chunks_exact(c).zip(index.iter()) {
                            ga[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::BlockMean(a, block) => {
                    let c = self.value(*a).cols();
                    let inv = 1.0 / *block as f64;
                    if let Some(ga) = g.slot(*a) {
                        for (r, dst) in ga.chunks_exact_mut(c).enumerate() {
                            let src = &gout[(r / block) * c..][..c];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                        }
                    }
                }
                Op::External(a, grad) => {
                    g.add_owned(*a, grad.iter().map(|x| x * gout[0]).collect());
                }
            }
        }

        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, v) in &self.params {
            if v.0 > root.0 {
                continue;
            }
            let shape = self.value(*v).shape().to_vec();
            let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            match out.get_mut(name) {
                Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), Tensor::new(shape, g)?);
                }
            }
        }
        Ok(out)
    }
}

