//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive applications in evaluation order. Leaves
//! created with [`Tape::leaf`] receive gradients; [`Tape::constant`] values
//! never do. [`Tape::backward`] walks the tape once in reverse from a scalar
//! root.
//!
//! ```
//! use dispnet_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Selections (`gather`, `select_min_index`) differentiate with their index
//! frozen at the forward value, so gradient flows only into selected slices.

mod tape;
mod tensor;

pub use tape::{
    inject_backward_fault, select_min_index, Gradients, Primitive, Tape, Var, ALL_PRIMITIVES,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{primitive}: shape mismatch, {detail}")]
    Shape { primitive: Primitive, detail: String },
    #[error("{primitive}: non-finite output")]
    NumericFault { primitive: Primitive },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("variable was recorded on a different tape")]
    ForeignVar,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &Tape, v: Vec<f64>) -> Var<'_> {
        tape.leaf(Tensor::vector(v).unwrap())
    }

    #[test]
    fn tanh_of_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.tanh().unwrap();
        assert_eq!(y.value().item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 1.0);
    }

    #[test]
    fn norm_of_three_four() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![3.0, 4.0]);
        let n = tape.euclidean_norm(x).unwrap();
        assert_eq!(n.value().item(), 5.0);
        let g = tape.backward(n).unwrap();
        assert_eq!(g.get(x).data(), &[0.6, 0.8]);
    }

    #[test]
    fn norm_of_zero_has_zero_gradient() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![0.0, 0.0, 0.0]);
        let n = tape.euclidean_norm(x).unwrap();
        let g = tape.backward(n).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![1.0, 2.0, 3.0]);
        let y = x.mul(x).unwrap().sum().unwrap();
        assert_eq!(y.value().item(), 14.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![1.0, 2.0]);
        let unused = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let late = vec_leaf(&tape, vec![5.0]);
        let y = x.sum().unwrap();
        let _after = late.tanh().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 4]);
        assert_eq!(g.get(unused).shape(), &[2, 2]);
        assert_eq!(g.get(late).data(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![0.3, -1.2, 2.0]);
        let y = x.tanh().unwrap().mul(x).unwrap().sum().unwrap();
        let g1 = tape.backward(y).unwrap();
        let g2 = tape.backward(y).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let tape = Tape::new();
        let a = vec_leaf(&tape, vec![1.0, 2.0]);
        let b = vec_leaf(&tape, vec![1.0, 2.0, 3.0]);
        let err = a.add(b).unwrap_err();
        match &err {
            AutodiffError::Shape { primitive, detail } => {
                assert_eq!(*primitive, Primitive::Add);
                assert!(detail.contains("[2]") && detail.contains("[3]"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = tape.leaf(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        assert!(matches!(
            tape.matvec(m, a),
            Err(AutodiffError::Shape { primitive: Primitive::MatVec, .. })
        ));
    }

    #[test]
    fn reciprocal_of_zero_is_numeric_fault() {
        let tape = Tape::new();
        let x = vec_leaf(&tape, vec![1.0, 0.0]);
        assert_eq!(
            x.reciprocal().unwrap_err(),
            AutodiffError::NumericFault {
                primitive: Primitive::Reciprocal
            }
        );
    }

    #[test]
    fn select_min_routes_only_to_selected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[3.0, 1.0, 2.0], [0.5, 0.5, 4.0]]).unwrap());
        let (m, ids) = tape.select_min_index(x).unwrap();
        assert_eq!(ids, vec![1, 0]);
        assert_eq!(m.value().data(), &[1.0, 0.5]);
        let w = tape.constant(Tensor::vector(vec![2.0, 7.0]).unwrap());
        let y = m.mul(w).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 2.0, 0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_scatter_adds_repeats() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let y = tape.gather(x, &[1, 1, 0]).unwrap();
        assert_eq!(y.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(tape.gather(x, &[2]).is_err());
    }

    #[test]
    fn matvec_batches_rows() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::from_rows(&[[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]).unwrap());
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        let y = tape.matvec(m, x).unwrap();
        assert_eq!(y.shape(), vec![2, 2]);
        assert_eq!(y.value().data(), &[7.0, -1.0, 16.0, -1.0]);
        let v = vec_leaf(&tape, vec![1.0, 1.0, 1.0]);
        assert_eq!(tape.matvec(m, v).unwrap().value().data(), &[3.0, 0.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        let w = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let g = tape.backward(c.mul(w).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(a).data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn injected_fault_flips_tanh_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.tanh().unwrap();
        inject_backward_fault(Some(Primitive::Tanh));
        let g = tape.backward(y).unwrap();
        inject_backward_fault(None);
        assert_eq!(g.get(x).item(), -1.0);
    }

    #[test]
    fn constants_get_no_gradient_path() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let y = c.tanh().unwrap();
        assert!(!y.requires_grad());
        let g = tape.backward(y).unwrap();
        assert!(g.is_empty());
    }
}
