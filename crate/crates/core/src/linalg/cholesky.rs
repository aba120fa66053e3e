//! Cholesky factorization of symmetric positive-definite matrices, with a
//! rank-one downdate and the paired triangular solves.

use super::{DenseMatrix, LinalgError};

/// Relative asymmetry tolerated on entry to [`CholeskyFactor::factorize`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Lower-triangular `L` with strictly positive diagonal such that
/// `A = L·Lᵀ`. The strict upper triangle of `lower` is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
}

impl CholeskyFactor {
    /// Factors `a`, which is symmetrized as `(A + Aᵀ)/2` first.
    pub fn factorize(a: &DenseMatrix) -> Result<Self, LinalgError> {
        let (n, cols) = a.shape();
        if n != cols {
            return Err(LinalgError::NotSquare { rows: n, cols });
        }
        if !a.is_finite() {
            return Err(LinalgError::NonFiniteInput);
        }
        let asym = a.relative_asymmetry();
        if asym > SYMMETRY_TOLERANCE {
            return Err(LinalgError::NotSymmetric { asymmetry: asym });
        }
        let mut l = a.clone();
        l.symmetrize_in_place();

        // Column-oriented Cholesky–Banachiewicz on the lower triangle.
        for j in 0..n {
            let mut pivot = l[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot.is_finite() && pivot > 0.0) {
                return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let (ri, rj) = (i * n, j * n);
                let data = l.as_slice();
                let mut s = data[ri + j];
                for k in 0..j {
                    s -= data[ri + k] * data[rj + k];
                }
                l[(i, j)] = s / ljj;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                l[(i, j)] = 0.0;
            }
        }
        Ok(Self { lower: l })
    }

    /// Wraps an existing lower-triangular factor after validating it.
    pub fn from_lower(lower: DenseMatrix) -> Result<Self, LinalgError> {
        let (n, cols) = lower.shape();
        if n != cols {
            return Err(LinalgError::NotSquare { rows: n, cols });
        }
        for i in 0..n {
            let d = lower[(i, i)];
            if d.is_nan() || d <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite { index: i, pivot: d });
            }
            for j in (i + 1)..n {
                if lower[(i, j)] != 0.0 {
                    return Err(LinalgError::NotLowerTriangular { row: i, col: j });
                }
            }
        }
        Ok(Self { lower })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// `L·Lᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        self.lower
            .matmul_transposed(&self.lower)
            .expect("square factor")
    }

    /// Returns the factor of `L·Lᵀ − v·vᵀ`, leaving `self` untouched.
    pub fn downdate(&self, v: &[f64]) -> Result<Self, LinalgError> {
        let mut out = self.clone();
        out.downdate_in_place(v)?;
        Ok(out)
    }

    /// Hyperbolic-rotation downdate in O(n²). On error the factor contents
    /// are unspecified and must be rebuilt by the caller.
    pub fn downdate_in_place(&mut self, v: &[f64]) -> Result<(), LinalgError> {
        let n = self.dim();
        if v.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                found: v.len(),
            });
        }
        let mut w = v.to_vec();
        let l = &mut self.lower;
        for j in 0..n {
            let ljj = l[(j, j)];
            let wj = w[j];
            let arg = (ljj - wj) * (ljj + wj);
            if !(arg.is_finite() && arg > 0.0) {
                return Err(LinalgError::DowndateBreaksPD { index: j });
            }
            let r = arg.sqrt();
            let c = r / ljj;
            let s = wj / ljj;
            l[(j, j)] = r;
            for i in (j + 1)..n {
                let lij = (l[(i, j)] - s * w[i]) / c;
                l[(i, j)] = lij;
                w[i] = c * w[i] - s * lij;
            }
        }
        Ok(())
    }

    /// Solves `L·y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.check_rhs(b)?;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = l.row(i);
            let mut s = y[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        Ok(y)
    }

    /// Solves `Lᵀ·x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.check_rhs(y)?;
        let l = &self.lower;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            x[i] /= l[(i, i)];
            let xi = x[i];
            let row = l.row(i);
            for k in 0..i {
                x[k] -= row[k] * xi;
            }
        }
        Ok(x)
    }

    /// Solves `(L·Lᵀ)·x = b` with two triangular solves.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let y = self.solve_lower(b)?;
        self.solve_upper(&y)
    }

    fn check_rhs(&self, b: &[f64]) -> Result<usize, LinalgError> {
        let n = self.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                found: b.len(),
            });
        }
        Ok(n)
    }
}
