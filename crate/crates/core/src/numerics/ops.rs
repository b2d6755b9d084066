//! Value-level entry points for the core kernels. Each builds a short tape and
//! returns the forward value; the tape versions carry the gradients.

use std::rc::Rc;

use super::fastmath::softmax_rows;
use super::layers::Forward;
use super::params::ParamStore;
use super::tape::{Segment, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine map over the last axis: `x W + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let mut y = tape.matmul(xv, wv)?;
    if let Some(b) = b {
        let bv = tape.constant(b.clone());
        y = tape.add_row(y, bv)?;
    }
    Ok(tape.value(y).clone())
}

/// Softmax over the last axis.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.cols() == 0 || v.shape().is_empty() {
        return Err(Error::EmptyAxis);
    }
    let mut out = v.clone();
    let c = out.cols();
    softmax_rows(out.data_mut(), c);
    Ok(out)
}

/// Single-head `softmax(Q K^T / sqrt(d)) V`.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::ShapeMismatch("attention operands must be matrices".into()));
    }
    if k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols() {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let segs = Rc::new(vec![Segment {
        q_start: 0,
        q_len: q.rows(),
        k_start: 0,
        k_len: k.rows(),
    }]);
    let out = tape.attention(qv, kv, vv, 1, segs)?;
    Ok(tape.value(out).clone())
}

/// One pre-norm transformer layer (full self-attention) over `tokens[n, d]`
/// using parameters under `prefix`. `dropout_rng` enables training mode.
pub fn transformer_layer(
    tokens: &Tensor,
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    dropout: f64,
    dropout_rng: Option<Rng>,
) -> Result<Tensor> {
    let d = tokens.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::BadHeadCount { dim: d, heads });
    }
    let mut f = match dropout_rng {
        Some(rng) => Forward::train(params, rng),
        None => Forward::eval(params),
    };
    let x = f.tape.constant(tokens.clone());
    let segs = Rc::new(Segment::blocks(1, tokens.rows()));
    let y = f.transformer_layer(x, prefix, heads, segs, dropout)?;
    Ok(f.tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::init_transformer_layer;
    use crate::rng::rng_for;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[&[1.0, 2.0]]);
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(linear(&x, &eye, Some(&Tensor::vector(vec![0.0, 0.0]))).unwrap(), x);
        let zero = t(&[&[0.0, 0.0]]);
        let b = Tensor::vector(vec![3.0, -1.0]);
        assert_eq!(linear(&zero, &eye, Some(&b)).unwrap().data(), b.data());
        let w = t(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let y = linear(&x, &w, Some(&Tensor::vector(vec![0.0, 1.0]))).unwrap();
        assert_eq!(y.data(), &[1.0, 5.0]);
        assert!(matches!(linear(&x, &t(&[&[1.0, 0.0]]), None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&t(&[&[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = softmax(&t(&[&[0.0, 2f64.ln()]])).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(softmax(&Tensor::zeros(&[2, 0])), Err(Error::EmptyAxis)));
    }

    #[test]
    fn attention_examples() {
        // single key/value
        let q = t(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let kv = t(&[&[0.7, 0.1]]);
        let out = scaled_attention(&q, &kv, &kv).unwrap();
        assert_eq!(out.row(0), kv.row(0));
        assert_eq!(out.row(1), kv.row(0));

        // identical keys -> mean of values
        let k = t(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let v = t(&[&[1.0, 0.0], &[0.0, 3.0], &[2.0, 0.0]]);
        let out = scaled_attention(&q, &k, &v).unwrap();
        assert!((out.row(0)[0] - 1.0).abs() < 1e-15 && (out.row(0)[1] - 1.0).abs() < 1e-15);

        // Q = K = V = I, d = 2: weights softmax(1/sqrt2, 0)
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = scaled_attention(&eye, &eye, &eye).unwrap();
        let a = (1.0 / 2f64.sqrt()).exp();
        let hi = a / (a + 1.0);
        let lo = 1.0 / (a + 1.0);
        let expect = [hi, lo, lo, hi];
        for (x, e) in out.data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    fn layer_store(d: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_transformer_layer(&mut s, "l", d, d, &mut rng_for(seed, &[]));
        s
    }

    #[test]
    fn layer_is_deterministic_in_eval() {
        let s = layer_store(8, 1);
        let x = Tensor::matrix(5, 8, (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = transformer_layer(&x, &s, "l", 2, 0.1, None).unwrap();
        let b = transformer_layer(&x, &s, "l", 2, 0.1, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
        let trained = transformer_layer(&x, &s, "l", 2, 0.5, Some(rng_for(3, &[]))).unwrap();
        assert_ne!(trained, a);
        assert!(matches!(transformer_layer(&x, &s, "l", 3, 0.0, None), Err(Error::BadHeadCount { .. })));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in matrix(4, 7), c in -50.0f64..50.0) {
            let s = softmax(&v).unwrap();
            for r in 0..4 {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
            }
            let shifted = Tensor::matrix(4, 7, v.data().iter().map(|x| x + c).collect()).unwrap();
            prop_assert!(softmax(&shifted).unwrap().max_abs_diff(&s) < 1e-12);
        }

        #[test]
        fn attention_is_convex_and_permutation_equivariant(
            q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 4), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()
        ) {
            let out = scaled_attention(&q, &k, &v).unwrap();
            for c in 0..4 {
                let col: Vec<f64> = (0..5).map(|r| v.row(r)[c]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..3 {
                    let x = out.row(r)[c];
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
            let pk = Tensor::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let pv = Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            prop_assert!(scaled_attention(&q, &pk, &pv).unwrap().max_abs_diff(&out) < 1e-12);
        }
    }
}
