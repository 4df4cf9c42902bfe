//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every primitive records its forward value and parents on a [`Tape`];
//! [`Tape::backward`] walks the tape once in reverse and accumulates exact
//! analytic gradients. [`grad_check`] compares those gradients against
//! central finite differences.
//!
//! ```
//! use csi_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
//! let y = tape.relu(x).unwrap();
//! let s = tape.sum(y).unwrap();
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
//! ```

mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{sigmoid, softplus, Gradients, NormalizedAdjacency, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("zero-norm input to {op}")]
    ZeroNorm { op: &'static str },
    #[error("backward requires a one-element output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// where `numeric` is the central difference
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// `f` receives a fresh tape and the leaf holding the evaluation point and
/// must return a one-element output.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::InvalidArgument(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(x, point);

    let eval = |values: Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let x = tape.param(values);
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: "grad_check" });
        }
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param(vec_t(&[-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_splits_upstream_by_segment() {
        let mut tape = Tape::new();
        let a = tape.param(vec_t(&[1.0, 2.0]));
        let b = tape.param(vec_t(&[3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let w = tape.constant(vec_t(&[10.0, 20.0, 30.0]));
        let d = tape.dot(c, w).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(g.get(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn aggregate_on_two_node_path() {
        let adj = Arc::new(NormalizedAdjacency::from_edges(2, &[(0, 1)]).unwrap());
        for (v, e) in adj.to_dense().iter().zip([0.5, 0.5, 0.5, 0.5]) {
            assert!((v - e).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let y = tape.neighbor_aggregate(x, &adj).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_on_regular_graph_has_unit_row_sums() {
        // 4-cycle: every node has degree 2 (3 with the self-loop)
        let adj = NormalizedAdjacency::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let dense = adj.to_dense();
        for row in dense.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let eye = tape.constant(
            Tensor::matrix(4, 4, (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap(),
        );
        let y = tape.neighbor_aggregate(eye, &Arc::new(adj)).unwrap();
        assert_eq!(tape.value(y).data(), dense.as_slice());
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let err = grad_check(
            |t, x| t.mul(x, x),
            &vec_t(&[3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_inside_function_is_reported() {
        let err = grad_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &vec_t(&[-1.0]),
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteValue { .. }));
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let r = grad_check(|t, x| t.sum(x), &vec_t(&[1.0]), 1e-2);
        assert!(matches!(r, Err(AutodiffError::InvalidArgument(_))));
    }

    #[test]
    fn shape_mismatch_surfaces() {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[1.0]));
        assert!(matches!(tape.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let m = tape.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(tape.matmul(m, m).is_err());
    }

    #[test]
    fn embedding_padding_row_gets_no_gradient() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::matrix(3, 2, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = tape.embedding(table, &[1, 0, 2, 1], Some(0)).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(e).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn siamese_reuse_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(vec_t(&[2.0]));
        let a = tape.constant(vec_t(&[3.0]));
        let b = tape.constant(vec_t(&[5.0]));
        let ya = tape.mul(w, a).unwrap();
        let yb = tape.mul(w, b).unwrap();
        let c = tape.concat(&[ya, yb]).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[8.0]);
    }

    #[test]
    fn conv_known_values() {
        // length 4, 1 channel, width 2, 1 filter with weights [1, -1]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 1, vec![1.0, 3.0, 6.0, 10.0]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        let y = tape.conv1d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[-2.0, -3.0, -4.0]);
        let y2 = tape.conv1d(x, w, 2, 2).unwrap();
        assert_eq!(tape.value(y2).data(), &[-2.0, -4.0]);
        let p = tape.max_pool1d(x, 2, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 10.0]);
    }
}
