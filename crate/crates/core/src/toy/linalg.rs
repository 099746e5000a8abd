//! Minimal dense row-major matrix helpers in double precision.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Matrix { rows, cols, data }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Matrix { rows, cols, data: (0..rows * cols).map(|_| normal.sample(rng)).collect() }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn hadamard_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Sum of each column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

/// `X W^T` for `X: n x in`, `W: out x in`.
pub fn xwt(x: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(x.cols, w.cols, "xwt inner dimension");
    let mut out = Matrix::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xr = x.row(i);
        for j in 0..w.rows {
            let wr = w.row(j);
            let mut acc = 0.0;
            for k in 0..x.cols {
                acc += xr[k] * wr[k];
            }
            out.data[i * w.rows + j] = acc;
        }
    }
    out
}

/// `A B` for `A: n x m`, `B: m x p`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let av = a.at(i, k);
            if av == 0.0 {
                continue;
            }
            let br = b.row(k);
            let orow = out.row_mut(i);
            for j in 0..b.cols {
                orow[j] += av * br[j];
            }
        }
    }
    out
}

/// `A^T B` for `A: n x m`, `B: n x p`.
pub fn atb(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "atb outer dimension");
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for i in 0..a.cols {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for j in 0..b.cols {
                orow[j] += av * br[j];
            }
        }
    }
    out
}

/// In-place log-softmax of a slice using log-sum-exp.
pub fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}
