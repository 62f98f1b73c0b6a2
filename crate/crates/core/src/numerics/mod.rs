//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Everything is 64-bit and row-major. A [`Tensor`] on its own is a plain
//! immutable value; gradient tracking happens only once it is registered on a
//! [`Tape`], which records the forward operations and replays them backward.

mod adam;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{Gradients, Tape, VarId};

use crate::error::{Error, Result};

/// Norm guard for cosine similarity and row normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Dense multi-dimensional value, row-major, always f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    /// Handle into the tape that most recently watched this tensor.
    pub tape_id: Option<VarId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor::new(vec![n], values).expect("vector shape always consistent")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar shape always consistent")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Interpret as a matrix: 1-D tensors count as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("tensor with {} dims used as a matrix", shape.len()),
    }
}

/// Cosine similarity of two equal-length vectors, with a degenerate-norm guard.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::DegenerateVector {
            context: "cosine".to_string(),
            eps: NORM_EPS,
        });
    }
    Ok(dot(a, b) / (na * nb))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_product_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let v = [0.3, -1.2, 0.7];
        let c = cosine(&v, &v).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let c = cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cosine_matches_direct_scalar_route() {
        // Independent oracle: explicit dot / (norm * norm) written out by hand.
        let a = [0.42, -1.7, 2.3, 0.05];
        let b = [-0.9, 0.33, 1.1, -2.4];
        let mut dot_o = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..4 {
            dot_o += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let expect = dot_o / (na.sqrt() * nb.sqrt());
        let got = cosine(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_degenerate_vectors() {
        let z = [0.0, 0.0];
        let v = [1.0, 2.0];
        assert!(matches!(
            cosine(&z, &v),
            Err(crate::error::Error::DegenerateVector { .. })
        ));
        assert!(matches!(
            cosine(&v, &z),
            Err(crate::error::Error::DegenerateVector { .. })
        ));
    }
}
