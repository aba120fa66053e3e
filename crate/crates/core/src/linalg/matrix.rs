use std::fmt;
use std::ops::{Index, IndexMut};

use ndarray::{ArrayView2, ShapeBuilder};

use super::LinalgError;

/// Dense real matrix stored in row-major order: entry `(i, j)` lives at
/// `data[i * cols + j]`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Wraps a row-major buffer. Rejects shape mismatches and non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub(crate) fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data).expect("shape checked")
    }

    /// View of the transpose without copying.
    pub(crate) fn view_t(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.cols, self.rows).f(), &self.data).expect("shape checked")
    }

    fn from_array(a: ndarray::Array2<f64>) -> Self {
        let (rows, cols) = a.dim();
        let data = if a.is_standard_layout() {
            a.into_raw_vec_and_offset().0
        } else {
            a.iter().copied().collect()
        };
        Self { rows, cols, data }
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        check_dim(self.cols, other.rows)?;
        Ok(Self::from_array(self.view().dot(&other.view())))
    }

    /// `self · otherᵀ`
    pub fn matmul_transposed(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        check_dim(self.cols, other.cols)?;
        Ok(Self::from_array(self.view().dot(&other.view_t())))
    }

    /// `selfᵀ · self`, symmetrized so the result is exactly symmetric.
    pub fn gram(&self) -> DenseMatrix {
        let mut g = Self::from_array(self.view_t().dot(&self.view()));
        g.symmetrize_in_place();
        g
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_dim(self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_dim(self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn add_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += value;
        }
    }

    pub fn symmetrize_in_place(&mut self) {
        debug_assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    /// Largest `|a_ij - a_ji|` relative to the largest absolute entry.
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copies the listed rows in order.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies the listed columns in order.
    pub fn select_columns(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.rows);
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(indices.iter().map(|&j| row[j]));
        }
        Self {
            rows: self.rows,
            cols: indices.len(),
            data,
        }
    }

    pub fn remove_row(&mut self, i: usize) {
        assert!(
            i < self.rows,
            "row {i} out of bounds for {} rows",
            self.rows
        );
        self.data.drain(i * self.cols..(i + 1) * self.cols);
        self.rows -= 1;
    }

    /// Removes row `i` by moving the last row into its place; O(cols).
    pub fn swap_remove_row(&mut self, i: usize) {
        assert!(
            i < self.rows,
            "row {i} out of bounds for {} rows",
            self.rows
        );
        let last = self.rows - 1;
        if i != last {
            self.data
                .copy_within(last * self.cols..(last + 1) * self.cols, i * self.cols);
        }
        self.data.truncate(last * self.cols);
        self.rows -= 1;
    }

    /// Removes column `j` in place, compacting the buffer in one pass.
    pub fn remove_column(&mut self, j: usize) {
        assert!(
            j < self.cols,
            "column {j} out of bounds for {} cols",
            self.cols
        );
        let cols = self.cols;
        let mut pos = 0;
        self.data.retain(|_| {
            let keep = pos % cols != j;
            pos += 1;
            keep
        });
        self.cols -= 1;
    }

    /// Appends a column filled with `value`.
    pub fn with_constant_column(&self, value: f64) -> DenseMatrix {
        let cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.push(value);
        }
        Self {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn products_match_naive_loops() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[1.0, 0.5], &[-1.0, 2.0], &[0.0, 3.0]]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[-1.0, 13.5, -1.0, 30.0]);

        let abt = a.matmul_transposed(&a).unwrap();
        assert_eq!(abt.as_slice(), &[14.0, 32.0, 32.0, 77.0]);

        let g = a.gram();
        assert_eq!(g, a.transpose().matmul(&a).unwrap());
        assert_eq!(a.matvec(&[1.0, 1.0, 1.0]).unwrap(), vec![6.0, 15.0]);
        assert_eq!(a.tr_matvec(&[1.0, -1.0]).unwrap(), vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(DenseMatrix::from_row_major(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::from_row_major(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { row: 0, col: 1 })
        ));
        let a = DenseMatrix::zeros(2, 3);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn row_and_column_removal() {
        let mut a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        a.remove_column(1);
        assert_eq!(a.as_slice(), &[1.0, 3.0, 4.0, 6.0, 7.0, 9.0]);
        a.remove_row(0);
        assert_eq!(a.shape(), (2, 2));
        assert_eq!(a.as_slice(), &[4.0, 6.0, 7.0, 9.0]);
        let b = a.select_columns(&[1]);
        assert_eq!(b.as_slice(), &[6.0, 9.0]);
        let c = a.with_constant_column(1.0);
        assert_eq!(c.row(1), &[7.0, 9.0, 1.0]);

        let mut d = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        d.swap_remove_row(0);
        assert_eq!(d.as_slice(), &[5.0, 6.0, 3.0, 4.0]);
        d.swap_remove_row(1);
        assert_eq!(d.as_slice(), &[5.0, 6.0]);
    }
}
