//! Dense row-major matrices and the few vector kernels the engine needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative change between successive singular-value estimates at which
/// power iteration stops.
pub const POWER_TOL: f64 = 1e-9;
/// Iteration cap for power iteration.
pub const POWER_MAX_ITERS: usize = 10_000;
const POWER_SEED: u64 = 0x5e_ed0f_90e4;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!("matrix data has {} entries, expected {rows}x{cols}", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from rows; every row must have the same length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dimension(format!("row {r} has {} entries, row 0 has {m}", row.len())));
            }
            data.extend(row);
        }
        Ok(Matrix { rows: n, cols: m, data })
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                axpy(&mut out, xr, self.row(r));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a != 0.0 {
                    let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                    axpy(dst, a, other.row(k));
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    /// Largest singular value by power iteration on `A^T A`.
    ///
    /// The start vector comes from a fixed-seed generator, so the result is
    /// deterministic. Stops when successive estimates agree to [`POWER_TOL`]
    /// relative; fails after [`POWER_MAX_ITERS`] iterations.
    pub fn spectral_norm(&self) -> Result<f64> {
        if self.rows == 0 || self.cols == 0 || self.is_zero() {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
        let mut v: Vec<f64> = (0..self.cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(&mut v);
        let mut sigma = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            let av = self.matvec(&v);
            let next_sigma = norm(&av);
            if next_sigma == 0.0 {
                // Start vector landed in the null space; the matrix is nonzero so
                // perturb deterministically.
                v.iter_mut().enumerate().for_each(|(i, x)| *x += 1.0 / (i + 1) as f64);
                normalize(&mut v);
                continue;
            }
            let mut w = self.matvec_t(&av);
            normalize(&mut w);
            v = w;
            if (next_sigma - sigma).abs() <= POWER_TOL * next_sigma {
                return Ok(next_sigma);
            }
            sigma = next_sigma;
        }
        Err(Error::PowerIteration { iters: POWER_MAX_ITERS })
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b))
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn oracle_norm(m: &Matrix) -> f64 {
        let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
        dm.singular_values().max()
    }

    #[test]
    fn identity_and_zero_norms() {
        assert_eq!(Matrix::identity(4).spectral_norm().unwrap(), 1.0);
        assert_eq!(Matrix::zeros(3, 5).spectral_norm().unwrap(), 0.0);
    }

    #[test]
    fn diagonal_norm_is_largest_entry() {
        let m = Matrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, -7.5]]).unwrap();
        assert_relative_eq!(m.spectral_norm().unwrap(), 7.5, max_relative = 1e-12);
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn json_round_trip() {
        let m = Matrix::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.0,3.0],[4.0,5.0,6.0]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn random_matrices_match_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = rng.random_range(1..7);
            let c = rng.random_range(1..7);
            let data = (0..r * c).map(|_| StandardNormal.sample(&mut rng)).collect();
            let m = Matrix::from_vec(r, c, data).unwrap();
            assert_relative_eq!(m.spectral_norm().unwrap(), oracle_norm(&m), max_relative = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn matvec_t_agrees_with_transpose(vals in proptest::collection::vec(-5.0f64..5.0, 12), x in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let a = m.matvec_t(&x);
            let b = m.transpose().matvec(&x);
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn norm_bounds_every_image(vals in proptest::collection::vec(-5.0f64..5.0, 9), x in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let m = Matrix::from_vec(3, 3, vals).unwrap();
            let s = m.spectral_norm().unwrap();
            prop_assert!(norm(&m.matvec(&x)) <= s * norm(&x) * (1.0 + 1e-6) + 1e-12);
        }
    }
}
