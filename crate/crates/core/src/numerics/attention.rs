//! Segmented multi-head attention kernels on row-major `[rows, d]` buffers.
//!
//! Large segments go through strided GEMM. Small ones use direct loops, with
//! the head width dispatched to a few fixed sizes so trip counts are constant.

use super::fastmath::softmax_rows;
use super::tape::Segment;

pub(super) struct Heads<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub d: usize,
    pub heads: usize,
}

/// Segments with at least this many query-key pairs use GEMM.
const GEMM_PAIRS: usize = 256;

/// Row-major strided operand: element `(i, j)` lives at `offset + i * row + j * col`.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    row: usize,
    col: usize,
}

impl View {
    fn rows(offset: usize, row: usize) -> Self {
        View { offset, row, col: 1 }
    }

    fn t(self) -> Self {
        View {
            offset: self.offset,
            row: self.col,
            col: self.row,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row + (cols - 1) * self.col
    }
}

/// `c = alpha * a b + beta * c` for an `m x k` by `k x n` product over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: (&[f64], View), b: (&[f64], View), beta: f64, c: (&mut [f64], View)) {
    let ((a, va), (b, vb), (c, vc)) = (a, b, c);
    assert!(m > 0 && k > 0 && n > 0);
    assert!(va.last(m, k) < a.len() && vb.last(k, n) < b.len() && vc.last(m, n) < c.len());
    // SAFETY: the asserts above bound every index the views can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.offset),
            va.row as isize,
            va.col as isize,
            b.as_ptr().add(vb.offset),
            vb.row as isize,
            vb.col as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.row as isize,
            vc.col as isize,
        );
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64], n: usize) -> f64 {
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = 0.0;
    for i in 0..n {
        s += a[i] * b[i];
    }
    s
}

#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64], n: usize) {
    let (x, y) = (&x[..n], &mut y[..n]);
    for i in 0..n {
        y[i] += alpha * x[i];
    }
}

/// Returns the attended values and the attention probabilities, laid out
/// per segment, then head, then query row.
pub(super) fn forward(x: &Heads, rows: usize, segments: &[Segment]) -> (Vec<f64>, Vec<f64>) {
    match x.d / x.heads {
        4 => forward_with(x, rows, segments, 4),
        8 => forward_with(x, rows, segments, 8),
        16 => forward_with(x, rows, segments, 16),
        dh => forward_with(x, rows, segments, dh),
    }
}

#[inline(always)]
fn forward_with(x: &Heads, rows: usize, segments: &[Segment], dh: usize) -> (Vec<f64>, Vec<f64>) {
    let d = x.d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; segments.iter().map(|s| s.q_len * s.k_len * x.heads).sum()];
    let mut pos = 0;
    for s in segments {
        for h in 0..x.heads {
            let off = h * dh;
            if s.q_len * s.k_len >= GEMM_PAIRS {
                let (qs, ks) = (View::rows(s.q_start * d + off, d), View::rows(s.k_start * d + off, d));
                let block = &mut probs[pos..pos + s.q_len * s.k_len];
                pos += s.q_len * s.k_len;
                let pv = View::rows(0, s.k_len);
                gemm(s.q_len, dh, s.k_len, scale, (x.q, qs), (x.k, ks.t()), 0.0, (&mut *block, pv));
                softmax_rows(block, s.k_len);
                gemm(s.q_len, s.k_len, dh, 1.0, (&*block, pv), (x.v, ks), 1.0, (&mut out, qs));
                continue;
            }
            for i in 0..s.q_len {
                let qrow = (s.q_start + i) * d + off;
                let qi = &x.q[qrow..qrow + dh];
                let p = &mut probs[pos..pos + s.k_len];
                pos += s.k_len;
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qi, &x.k[(s.k_start + j) * d + off..], dh) * scale;
                }
                softmax_rows(p, s.k_len);
                let o = &mut out[qrow..qrow + dh];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &x.v[(s.k_start + j) * d + off..], o, dh);
                }
            }
        }
    }
    (out, probs)
}

/// Gradients with respect to queries, keys and values.
pub(super) fn backward(x: &Heads, segments: &[Segment], probs: &[f64], gout: &[f64]) -> [Vec<f64>; 3] {
    match x.d / x.heads {
        4 => backward_with(x, segments, probs, gout, 4),
        8 => backward_with(x, segments, probs, gout, 8),
        16 => backward_with(x, segments, probs, gout, 16),
        dh => backward_with(x, segments, probs, gout, dh),
    }
}

#[inline(always)]
fn backward_with(x: &Heads, segments: &[Segment], probs: &[f64], gout: &[f64], dh: usize) -> [Vec<f64>; 3] {
    let d = x.d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; x.q.len()];
    let mut gk = vec![0.0; x.k.len()];
    let mut gv = vec![0.0; x.v.len()];
    let mut ds = Vec::new();
    let mut pos = 0;
    for s in segments {
        for h in 0..x.heads {
            let off = h * dh;
            if s.q_len * s.k_len >= GEMM_PAIRS {
                let n = s.q_len * s.k_len;
                let (qs, ks) = (View::rows(s.q_start * d + off, d), View::rows(s.k_start * d + off, d));
                let p = &probs[pos..pos + n];
                pos += n;
                let pv = View::rows(0, s.k_len);
                ds.clear();
                ds.resize(n, 0.0);
                gemm(s.q_len, dh, s.k_len, 1.0, (gout, qs), (x.v, ks.t()), 0.0, (&mut ds, pv));
                gemm(s.k_len, s.q_len, dh, 1.0, (p, pv.t()), (gout, qs), 1.0, (&mut gv, ks));
                for (dsr, pr) in ds.chunks_exact_mut(s.k_len).zip(p.chunks_exact(s.k_len)) {
                    let weighted: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    dsr.iter_mut().zip(pr).for_each(|(a, b)| *a = b * (*a - weighted) * scale);
                }
                gemm(s.q_len, s.k_len, dh, 1.0, (&ds, pv), (x.k, ks), 1.0, (&mut gq, qs));
                gemm(s.k_len, s.q_len, dh, 1.0, (&ds, pv.t()), (x.q, qs), 1.0, (&mut gk, ks));
                continue;
            }
            for i in 0..s.q_len {
                let p = &probs[pos..pos + s.k_len];
                pos += s.k_len;
                let qrow = (s.q_start + i) * d + off;
                let go = &gout[qrow..qrow + dh];
                let qi = &x.q[qrow..qrow + dh];
                ds.clear();
                let mut weighted = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = (s.k_start + j) * d + off;
                    let dp = dot(go, &x.v[vrow..], dh);
                    axpy(pj, go, &mut gv[vrow..], dh);
                    weighted += pj * dp;
                    ds.push(dp);
                }
                let gqi = &mut gq[qrow..qrow + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let dsj = pj * (ds[j] - weighted) * scale;
                    let krow = (s.k_start + j) * d + off;
                    axpy(dsj, &x.k[krow..], gqi, dh);
                    axpy(dsj, qi, &mut gk[krow..], dh);
                }
            }
        }
    }
    [gq, gk, gv]
}

