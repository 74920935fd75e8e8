//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records operations as they are evaluated. Each recorded node
//! keeps its output and whatever the backward rule needs, so a single
//! reverse sweep yields gradients for every leaf created with
//! `requires_grad = true`. Nodes that cannot reach a tracked leaf are
//! skipped during backpropagation, which keeps attribution passes (where
//! only a small hook vector is tracked) cheap.
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`](crate::Error::NonFinite) rather than propagating it.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, CoordSampling};
pub use tape::{Tape, Var, LN_EPS};
pub use tensor::Tensor;

/// Exact (erf-based) gelu.
pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::Error;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0; 3]), false);
        let p = tape.softmax(z).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut tape = Tape::new();
        let v = Tensor::matrix(3, 1, vec![1.5, -2.0, 7.25]).unwrap();
        let i = tape.leaf(Tensor::eye(3), false);
        let x = tape.leaf(v.clone(), false);
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), &v);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn two_class_softmax_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]), true);
        let p = tape.softmax(z).unwrap();
        let p0 = tape.gather(p, &[(0, 0)]).unwrap();
        tape.backward(p0).unwrap();
        let g = tape.grad(z).unwrap().data().to_vec();
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15, "{g:?}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Graph(_))));
        let c = tape.leaf(Tensor::scalar(1.0), false);
        assert!(matches!(tape.backward(c), Err(Error::Detached(_))));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.grad(c), Err(Error::Detached(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.0, 0.3, -1.2]).unwrap(), true);
        let h = tape.gelu(x).unwrap();
        let s = tape.softmax(h).unwrap();
        let out = tape.gather(s, &[(1, 2)]).unwrap();
        tape.backward(out).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(out).unwrap();
        assert_eq!(&first, tape.grad(x).unwrap());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![f64::MAX, f64::MAX]), false);
        assert!(matches!(tape.sum(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let r = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(tape.add_row(a, r), Err(Error::Shape(_))));
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 3, vec![1.0, 5.0, 9.0, 2.0, 1.0, 7.0, 0.0, 0.0, 0.0]).unwrap(), false);
        let p = tape.causal_softmax(x).unwrap();
        let v = tape.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1)[2], 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_rebinds_named_inputs() {
        let mut tape = Tape::new();
        let x = tape.input("x", Tensor::vector(vec![1.0, 2.0]), false);
        let y = tape.scale(x, 3.0).unwrap();
        tape.set_name(y, "y");
        let first = tape.value(y).clone();
        let out = tape.evaluate(&BTreeMap::from([("x".to_string(), Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert_eq!(out["y"], first);
        let out = tape.evaluate(&BTreeMap::from([("x".to_string(), Tensor::vector(vec![-1.0, 0.5]))])).unwrap();
        assert_eq!(out["y"].data(), &[-3.0, 1.5]);
        let bad = BTreeMap::from([("x".to_string(), Tensor::vector(vec![1.0]))]);
        assert!(matches!(tape.evaluate(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_map_finite_differences_are_exact() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap(), false);
        let x = tape.leaf(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap(), true);
        let y = tape.matmul_nt(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        for h in [1e-2, 1e-4, 1e-6] {
            let err = finite_diff_check(&mut tape, &[x], s, h, CoordSampling::default()).unwrap();
            assert!(err < 1e-10, "h={h}: {err}");
        }
    }

    #[test]
    fn degenerate_step_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.mul(x, x).unwrap();
        for h in [0.0, -1e-5, 0.1] {
            assert!(matches!(
                finite_diff_check(&mut tape, &[x], y, h, CoordSampling::default()),
                Err(Error::Precondition(_))
            ));
        }
    }
}
