//! Pilot estimators of the mean parameter.
//!
//! Raw data enters as row-major observations; the mean parameter is either
//! the gram matrix `E[X X']` or the pair `(E[X X'], E[X Y])`. Pilots are
//! method-of-moments averages, an outlier-robust coordinate-wise
//! median-of-means variant, and an eigenvalue floor that keeps pilots
//! feeding inverse-based functionals inside their domain.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::element::Element;
use crate::error::{Error, Result};

/// Default relative eigenvalue floor applied to pilots by the simulation
/// laboratory.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-6;

/// Raw observations.
#[derive(Clone, Debug)]
pub enum Dataset {
    /// `n x d` covariate rows; the moment is the gram matrix.
    Gram { x: DMatrix<f64> },
    /// Covariate rows plus scalar responses; the moment is `(gram, E[XY])`.
    Regression { x: DMatrix<f64>, y: DVector<f64> },
}

impl Dataset {
    pub fn n(&self) -> usize {
        match self {
            Dataset::Gram { x } => x.nrows(),
            Dataset::Regression { x, .. } => x.nrows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Gram { x } => x.ncols(),
            Dataset::Regression { x, .. } => x.ncols(),
        }
    }

    /// The per-observation element `W_i` (`x_i x_i'` or `(x_i x_i', x_i y_i)`).
    pub fn observation(&self, i: usize) -> Element {
        match self {
            Dataset::Gram { x } => {
                let row = x.row(i).transpose();
                Element::Matrix(&row * row.transpose())
            }
            Dataset::Regression { x, y } => {
                let row = x.row(i).transpose();
                Element::Pair { mat: &row * row.transpose(), vec: &row * y[i] }
            }
        }
    }

    /// Materialize every observation element.
    pub fn elements(&self) -> Vec<Element> {
        (0..self.n()).map(|i| self.observation(i)).collect()
    }

    /// Observations restricted to a row range.
    pub fn slice_rows(&self, start: usize, len: usize) -> Dataset {
        match self {
            Dataset::Gram { x } => Dataset::Gram { x: x.rows(start, len).into_owned() },
            Dataset::Regression { x, y } => Dataset::Regression {
                x: x.rows(start, len).into_owned(),
                y: y.rows(start, len).into_owned(),
            },
        }
    }

    /// Mean of the observation elements over a row range, computed by one
    /// gram product instead of `len` rank-one updates.
    pub fn moment_of_range(&self, start: usize, len: usize) -> Result<Element> {
        if len == 0 {
            return Err(Error::EmptySample);
        }
        let scale = 1.0 / len as f64;
        Ok(match self {
            Dataset::Gram { x } => {
                let block = x.rows(start, len);
                Element::Matrix(block.transpose() * block * scale)
            }
            Dataset::Regression { x, y } => {
                let block = x.rows(start, len);
                let yb = y.rows(start, len);
                Element::Pair {
                    mat: block.transpose() * block * scale,
                    vec: block.transpose() * yb * scale,
                }
            }
        })
    }
}

/// Method-of-moments pilot: `gram = n^-1 sum x_i x_i'` and, for regression
/// data, `n^-1 sum x_i y_i`.
pub fn fit_sample_moments(data: &Dataset) -> Result<Element> {
    data.moment_of_range(0, data.n())
}

fn block_sizes(n: usize, blocks: usize) -> Result<Vec<usize>> {
    if blocks == 0 || blocks > n {
        return Err(Error::TooManyBlocks { blocks, n });
    }
    let base = n / blocks;
    let rem = n % blocks;
    Ok((0..blocks).map(|b| base + usize::from(b < rem)).collect())
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite moments"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Coordinate-wise median across a list of same-signature elements.
fn coordinate_median(means: &[Element]) -> Element {
    match &means[0] {
        Element::Matrix(first) => {
            let (r, c) = first.shape();
            let mut out = DMatrix::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    out[(i, j)] = median_of(
                        means.iter().map(|m| m.as_matrix().expect("gram blocks")[(i, j)]).collect(),
                    );
                }
            }
            Element::Matrix(out)
        }
        Element::Pair { mat, vec } => {
            let (r, c) = mat.shape();
            let mut out_mat = DMatrix::zeros(r, c);
            let mut out_vec = DVector::zeros(vec.len());
            for i in 0..r {
                for j in 0..c {
                    out_mat[(i, j)] = median_of(
                        means.iter().map(|m| m.as_pair().expect("pair blocks").0[(i, j)]).collect(),
                    );
                }
            }
            for i in 0..vec.len() {
                out_vec[i] =
                    median_of(means.iter().map(|m| m.as_pair().expect("pair blocks").1[i]).collect());
            }
            Element::Pair { mat: out_mat, vec: out_vec }
        }
    }
}

/// Coordinate-wise median of block means over a contiguous equal partition
/// of the observation elements. Remainder observations go to the leading
/// blocks; a single block reduces to the plain mean.
pub fn fit_median_of_means_elements(observations: &[Element], blocks: usize) -> Result<Element> {
    let sizes = block_sizes(observations.len(), blocks)?;
    let mut means = Vec::with_capacity(blocks);
    let mut start = 0;
    for len in sizes {
        means.push(crate::ustat::mean_element(&observations[start..start + len])?);
        start += len;
    }
    if blocks == 1 {
        return Ok(means.pop().expect("one block"));
    }
    Ok(coordinate_median(&means))
}

/// [`fit_median_of_means_elements`] on the moment elements of raw data,
/// with block means computed by one gram product per block.
pub fn fit_median_of_means(data: &Dataset, blocks: usize) -> Result<Element> {
    let sizes = block_sizes(data.n(), blocks)?;
    let mut means = Vec::with_capacity(blocks);
    let mut start = 0;
    for len in sizes {
        means.push(data.moment_of_range(start, len)?);
        start += len;
    }
    if blocks == 1 {
        return Ok(means.pop().expect("one block"));
    }
    Ok(coordinate_median(&means))
}

/// Clip the eigenvalues of a symmetric matrix from below at
/// `epsilon * max(1, operator norm)`.
///
/// The common case (nothing to clip) is detected by a Cholesky probe of
/// `M - floor I` and returns the input unchanged; the eigendecomposition
/// only runs when clipping is actually needed.
pub fn eig_floor(m: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::NonSymmetric);
    }
    // cheap probe: row-sum bound on the operator norm, then exact decision
    let norm_upper = m.abs().column_sum().max();
    let floor_upper = epsilon * norm_upper.max(1.0);
    let probe = m - DMatrix::identity(m.nrows(), m.ncols()) * floor_upper;
    if Cholesky::new(probe).is_some() {
        return Ok(m.clone());
    }

    let eig = m.clone().symmetric_eigen();
    let opnorm = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let floor = epsilon * opnorm.max(1.0);
    let mut clipped = eig.eigenvalues.clone();
    for v in clipped.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    // re-symmetrize against rounding in the reconstruction
    Ok((&out + out.transpose()) * 0.5)
}

/// A pilot policy: plain moments, median-of-means, or either wrapped in an
/// eigenvalue floor.
#[derive(Clone, Debug)]
pub enum PilotEstimator {
    SampleMoments,
    MedianOfMeans { blocks: usize },
    EigFloor { inner: Box<PilotEstimator>, epsilon: f64 },
}

impl PilotEstimator {
    pub fn floored(inner: PilotEstimator, epsilon: f64) -> Self {
        PilotEstimator::EigFloor { inner: Box::new(inner), epsilon }
    }

    /// Moments with the default floor; the standard pilot for inverse-based
    /// functionals.
    pub fn default_floored_moments() -> Self {
        Self::floored(PilotEstimator::SampleMoments, DEFAULT_EIG_FLOOR)
    }

    pub fn fit(&self, data: &Dataset) -> Result<Element> {
        match self {
            PilotEstimator::SampleMoments => fit_sample_moments(data),
            PilotEstimator::MedianOfMeans { blocks } => fit_median_of_means(data, *blocks),
            PilotEstimator::EigFloor { inner, epsilon } => {
                Ok(floor_element(&inner.fit(data)?, *epsilon)?)
            }
        }
    }
}

/// Apply the eigenvalue floor to the matrix component of an element.
pub fn floor_element(e: &Element, epsilon: f64) -> Result<Element> {
    Ok(match e {
        Element::Matrix(m) => Element::Matrix(eig_floor(m, epsilon)?),
        Element::Pair { mat, vec } => {
            Element::Pair { mat: eig_floor(mat, epsilon)?, vec: vec.clone() }
        }
    })
}
