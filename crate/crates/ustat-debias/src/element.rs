//! Carrier-space elements.
//!
//! Observations, pilots, and increments all live in one of two finite
//! dimensional carriers: the space of dense `d x d` matrices (gram data), or
//! the product space of a `d x d` matrix and a `d`-vector (regression data,
//! where an observation contributes the pair `(x xᵀ, x y)`).
//!
//! Kinds are closed: there is no implicit promotion between the two, and any
//! attempt to combine mismatched elements is an error. This catches wiring
//! bugs at module boundaries instead of deep inside an accumulation loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which carrier an element belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    DenseMatrix,
    MomentPair,
}

impl ElementKind {
    pub fn name(self) -> &'static str {
        match self {
            ElementKind::DenseMatrix => "DenseMatrix",
            ElementKind::MomentPair => "MomentPair",
        }
    }
}

/// Kind plus dimension; two elements combine only if their signatures match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSignature {
    pub kind: ElementKind,
    pub dim: usize,
}

impl ElementSignature {
    pub fn dense(dim: usize) -> Self {
        Self { kind: ElementKind::DenseMatrix, dim }
    }

    pub fn pair(dim: usize) -> Self {
        Self { kind: ElementKind::MomentPair, dim }
    }
}

/// A point of the carrier space.
#[derive(Clone, Debug, PartialEq)]
pub enum Element {
    /// A dense `d x d` real matrix.
    Matrix(DMatrix<f64>),
    /// A `d x d` matrix together with a `d`-vector.
    Pair { mat: DMatrix<f64>, vec: DVector<f64> },
}

impl Element {
    pub fn matrix(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "matrix elements must be square");
        Element::Matrix(m)
    }

    pub fn pair(mat: DMatrix<f64>, vec: DVector<f64>) -> Self {
        assert!(mat.is_square() && mat.nrows() == vec.len(), "pair dimensions must agree");
        Element::Pair { mat, vec }
    }

    /// Convenience constructor for 1x1 matrix elements in scalar examples.
    pub fn scalar(x: f64) -> Self {
        Element::Matrix(DMatrix::from_element(1, 1, x))
    }

    pub fn signature(&self) -> ElementSignature {
        match self {
            Element::Matrix(m) => ElementSignature::dense(m.nrows()),
            Element::Pair { mat, .. } => ElementSignature::pair(mat.nrows()),
        }
    }

    pub fn dim(&self) -> usize {
        self.signature().dim
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Element::Matrix(m) => Element::Matrix(DMatrix::zeros(m.nrows(), m.ncols())),
            Element::Pair { mat, vec } => Element::Pair {
                mat: DMatrix::zeros(mat.nrows(), mat.ncols()),
                vec: DVector::zeros(vec.len()),
            },
        }
    }

    /// Borrow the matrix payload; errors on pair elements.
    pub fn as_matrix(&self) -> Result<&DMatrix<f64>> {
        match self {
            Element::Matrix(m) => Ok(m),
            Element::Pair { .. } => Err(Error::KindMismatch {
                left: ElementKind::DenseMatrix.name(),
                right: ElementKind::MomentPair.name(),
            }),
        }
    }

    /// Borrow the pair payload; errors on matrix elements.
    pub fn as_pair(&self) -> Result<(&DMatrix<f64>, &DVector<f64>)> {
        match self {
            Element::Pair { mat, vec } => Ok((mat, vec)),
            Element::Matrix(_) => Err(Error::KindMismatch {
                left: ElementKind::MomentPair.name(),
                right: ElementKind::DenseMatrix.name(),
            }),
        }
    }

    /// The scalar payload of a 1x1 matrix element.
    pub fn as_scalar(&self) -> Result<f64> {
        let m = self.as_matrix()?;
        if m.nrows() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: m.nrows() });
        }
        Ok(m[(0, 0)])
    }

    fn check_compatible(&self, other: &Element) -> Result<()> {
        let (a, b) = (self.signature(), other.signature());
        if a.kind != b.kind {
            return Err(Error::KindMismatch { left: a.kind.name(), right: b.kind.name() });
        }
        if a.dim != b.dim {
            return Err(Error::DimensionMismatch { expected: a.dim, got: b.dim });
        }
        Ok(())
    }

    pub fn add(&self, other: &Element) -> Result<Element> {
        self.check_compatible(other)?;
        Ok(match (self, other) {
            (Element::Matrix(a), Element::Matrix(b)) => Element::Matrix(a + b),
            (Element::Pair { mat: am, vec: av }, Element::Pair { mat: bm, vec: bv }) => {
                Element::Pair { mat: am + bm, vec: av + bv }
            }
            _ => unreachable!("kinds checked above"),
        })
    }

    pub fn sub(&self, other: &Element) -> Result<Element> {
        self.check_compatible(other)?;
        Ok(match (self, other) {
            (Element::Matrix(a), Element::Matrix(b)) => Element::Matrix(a - b),
            (Element::Pair { mat: am, vec: av }, Element::Pair { mat: bm, vec: bv }) => {
                Element::Pair { mat: am - bm, vec: av - bv }
            }
            _ => unreachable!("kinds checked above"),
        })
    }

    pub fn scale(&self, alpha: f64) -> Element {
        match self {
            Element::Matrix(m) => Element::Matrix(m * alpha),
            Element::Pair { mat, vec } => Element::Pair { mat: mat * alpha, vec: vec * alpha },
        }
    }

    /// In-place `self += alpha * other`; the accumulation primitive under
    /// means and block sums.
    pub fn axpy(&mut self, alpha: f64, other: &Element) -> Result<()> {
        self.check_compatible(other)?;
        match (self, other) {
            (Element::Matrix(a), Element::Matrix(b)) => {
                a.zip_apply(b, |x, y| *x += alpha * y);
            }
            (Element::Pair { mat: am, vec: av }, Element::Pair { mat: bm, vec: bv }) => {
                am.zip_apply(bm, |x, y| *x += alpha * y);
                av.zip_apply(bv, |x, y| *x += alpha * y);
            }
            _ => unreachable!("kinds checked above"),
        }
        Ok(())
    }

    /// Flat row-major payload; the layout used when elements are persisted.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            Element::Matrix(m) => {
                let d = m.nrows();
                (0..d).flat_map(|i| (0..d).map(move |j| m[(i, j)])).collect()
            }
            Element::Pair { mat, vec } => {
                let d = mat.nrows();
                let mut out: Vec<f64> =
                    (0..d).flat_map(|i| (0..d).map(move |j| mat[(i, j)])).collect();
                out.extend(vec.iter());
                out
            }
        }
    }

    pub fn from_flat(signature: ElementSignature, data: &[f64]) -> Result<Element> {
        let d = signature.dim;
        match signature.kind {
            ElementKind::DenseMatrix => {
                if data.len() != d * d {
                    return Err(Error::DimensionMismatch { expected: d * d, got: data.len() });
                }
                Ok(Element::Matrix(DMatrix::from_row_slice(d, d, data)))
            }
            ElementKind::MomentPair => {
                if data.len() != d * d + d {
                    return Err(Error::DimensionMismatch { expected: d * d + d, got: data.len() });
                }
                Ok(Element::Pair {
                    mat: DMatrix::from_row_slice(d, d, &data[..d * d]),
                    vec: DVector::from_column_slice(&data[d * d..]),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_scale_stay_within_kind() {
        let a = Element::matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = Element::matrix(DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]));
        let s = a.add(&b).unwrap().scale(0.5);
        assert_eq!(s.as_matrix().unwrap()[(0, 0)], 2.0);
        assert_eq!(s.as_matrix().unwrap()[(1, 1)], 1.0);
    }

    #[test]
    fn kinds_do_not_mix() {
        let a = Element::scalar(1.0);
        let b = Element::pair(DMatrix::identity(1, 1), DVector::from_element(1, 2.0));
        assert!(matches!(a.add(&b), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn dims_do_not_mix() {
        let a = Element::scalar(1.0);
        let b = Element::matrix(DMatrix::identity(2, 2));
        assert!(matches!(a.add(&b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn flat_round_trip() {
        let e = Element::pair(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DVector::from_column_slice(&[5.0, 6.0]),
        );
        let back = Element::from_flat(e.signature(), &e.to_flat()).unwrap();
        assert_eq!(e, back);
    }
}
