//! Dense linear algebra, softmax/cross-entropy and PCA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Floor added to probabilities before taking the log.
pub const LOG_EPSILON: f64 = 1e-12;

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix contains non-finite values"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self * v` for a vector of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ * v` for a vector of length `rows`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &w) in v.iter().enumerate() {
            axpy(w, self.row(i), &mut out);
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked softmax used on hot paths; input must be finite and non-empty.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `-ln(probs[true_class] + 1e-12)`.
pub fn cross_entropy(probs: &[f64], true_class: usize) -> Result<f64> {
    let p = probs.get(true_class).ok_or_else(|| {
        Error::invalid(format!(
            "class {true_class} out of range for {} probabilities",
            probs.len()
        ))
    })?;
    Ok(-(p + LOG_EPSILON).ln())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const PCA_TOLERANCE: f64 = 1e-8;
const PCA_MAX_ITERATIONS: usize = 1000;
const PCA_START_SEED: u64 = 0x5043_415f_5354_4152;

/// Output of [`pca_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `rows × components` coordinates.
    pub coordinates: Matrix,
    /// Covariance eigenvalue of each component, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit principal axes, one per component, each of length `cols`.
    pub axes: Vec<Vec<f64>>,
    /// Set when every row is identical (no variance to project).
    pub degenerate: bool,
}

/// Projects mean-centred rows onto the top principal axes of their sample
/// covariance.
///
/// Axes come from power iteration with deflation on the implicit covariance
/// `XᵀX / (rows - 1)`; the covariance is never materialised, so wide inputs
/// (thousands of columns) stay cheap. The converged axes are then rotated
/// within their span (Rayleigh-Ritz) so the returned components are exactly
/// uncorrelated even when two eigenvalues are close. Each axis is signed so
/// that its largest-magnitude loading is positive.
pub fn pca_project(data: &Matrix, components: usize) -> Result<PcaProjection> {
    let (rows, cols) = (data.rows(), data.cols());
    if rows < 2 {
        return Err(Error::invalid("PCA needs at least two rows"));
    }
    if components == 0 || components > rows.min(cols) {
        return Err(Error::invalid(format!(
            "cannot extract {components} components from a {rows}x{cols} matrix"
        )));
    }

    let mut centred = data.clone();
    for j in 0..cols {
        let mean = (0..rows).map(|i| data.get(i, j)).sum::<f64>() / rows as f64;
        for i in 0..rows {
            centred.set(i, j, data.get(i, j) - mean);
        }
    }

    let scale = 1.0 / (rows - 1) as f64;
    let total_variance: f64 = centred.data().iter().map(|v| v * v).sum::<f64>() * scale;
    if total_variance <= f64::EPSILON * f64::EPSILON {
        return Ok(PcaProjection {
            coordinates: Matrix::zeros(rows, components),
            eigenvalues: vec![0.0; components],
            axes: vec![vec![0.0; cols]; components],
            degenerate: true,
        });
    }

    let covariance_times = |v: &[f64]| -> Vec<f64> {
        let mut out = centred.tr_mul_vec(&centred.mul_vec(v));
        out.iter_mut().for_each(|x| *x *= scale);
        out
    };

    let mut start_rng = rng::rng_from_seed(PCA_START_SEED);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(components);
    let mut eigenvalues: Vec<f64> = Vec::with_capacity(components);
    // Below this magnitude the deflated operator is numerically zero.
    let null_threshold = total_variance * 1e-13;

    for _ in 0..components {
        let deflated = |v: &[f64]| -> Vec<f64> {
            let mut out = covariance_times(v);
            for (axis, &lambda) in axes.iter().zip(&eigenvalues) {
                axpy(-lambda * dot(axis, v), axis, &mut out);
            }
            out
        };

        let mut v: Vec<f64> = {
            use rand::Rng;
            (0..cols).map(|_| start_rng.gen_range(-1.0..1.0)).collect()
        };
        orthonormalise(&mut v, &axes);

        let mut null = false;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut next = deflated(&v);
            orthonormalise_against(&mut next, &axes);
            let n = norm(&next);
            if n <= null_threshold {
                null = true;
                break;
            }
            next.iter_mut().for_each(|x| *x /= n);
            let change = squared_distance(&next, &v).sqrt();
            v = next;
            if change < PCA_TOLERANCE {
                break;
            }
        }
        let lambda = if null { 0.0 } else { dot(&v, &deflated(&v)).max(0.0) };
        axes.push(v);
        eigenvalues.push(lambda);
    }

    rayleigh_ritz(&covariance_times, &mut axes, &mut eigenvalues);

    for axis in axes.iter_mut() {
        let lead = argmax(&axis.iter().map(|x| x.abs()).collect::<Vec<_>>());
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut coordinates = Matrix::zeros(rows, components);
    for i in 0..rows {
        for (k, axis) in axes.iter().enumerate() {
            coordinates.set(i, k, dot(centred.row(i), axis));
        }
    }

    Ok(PcaProjection {
        coordinates,
        eigenvalues,
        axes,
        degenerate: false,
    })
}

fn orthonormalise_against(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d = dot(b, v);
        axpy(-d, b, v);
    }
}

fn orthonormalise(v: &mut [f64], basis: &[Vec<f64>]) {
    orthonormalise_against(v, basis);
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Diagonalises the covariance restricted to span(axes) and rotates the axes
/// onto its eigenvectors, ordered by descending eigenvalue.
fn rayleigh_ritz(
    covariance_times: &dyn Fn(&[f64]) -> Vec<f64>,
    axes: &mut Vec<Vec<f64>>,
    eigenvalues: &mut Vec<f64>,
) {
    let k = axes.len();
    // Re-orthonormalise; axes found in a null space may carry round-off.
    for i in 0..k {
        let (done, rest) = axes.split_at_mut(i);
        orthonormalise(&mut rest[0], done);
    }
    let images: Vec<Vec<f64>> = axes.iter().map(|a| covariance_times(a)).collect();
    let mut small = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            small[i][j] = 0.5 * (dot(&axes[i], &images[j]) + dot(&axes[j], &images[i]));
        }
    }
    let (values, vectors) = jacobi_eigen(small);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let cols = axes[0].len();
    let rotated: Vec<Vec<f64>> = order
        .iter()
        .map(|&m| {
            let mut out = vec![0.0; cols];
            for (i, axis) in axes.iter().enumerate() {
                axpy(vectors[i][m], axis, &mut out);
            }
            out
        })
        .collect();
    *eigenvalues = order.iter().map(|&m| values[m].max(0.0)).collect();
    *axes = rotated;
}

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix.
/// Returns eigenvalues and the eigenvector matrix (eigenvectors in columns).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}
