//! Small dense helpers: row-major matrices, vector norms and a fixed-order
//! pairwise reduction used for all ensemble means.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `out += self * v`
    pub fn mul_vec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o += dot(row, v);
        }
    }

    /// `out += scale * self^T * v`
    pub fn mul_t_vec_acc(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &vr) in v.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let s = scale * vr;
            for (o, &a) in out.iter_mut().zip(row) {
                *o += s * a;
            }
        }
    }

    /// Quadratic form `v^T self v`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            acc += v[r] * dot(row, v);
        }
        acc
    }

    /// `out += scale * (self + self^T) v`, the gradient of `scale * v^T self v`.
    pub fn quad_grad_acc(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        self.mul_t_vec_acc(v, scale, out);
        let mut tmp = vec![0.0; self.rows];
        self.mul_vec_acc(v, &mut tmp);
        for (o, t) in out.iter_mut().zip(tmp) {
            *o += scale * t;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Sum in a fixed pairwise-tree order.
///
/// The result depends only on the order of `values`, never on how the work
/// was scheduled, and has `O(log n)` error growth.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Column means of `rows` vectors of length `dim` stored contiguously,
/// restricted to rows where `active[i]` holds.
///
/// Returns NaN coordinates when no row is active.
pub fn masked_mean(data: &[f64], dim: usize, active: &[bool], out: &mut [f64]) {
    let count = active.iter().filter(|&&a| a).count();
    let mut column = Vec::with_capacity(count);
    for c in 0..dim {
        column.clear();
        column.extend(
            active
                .iter()
                .enumerate()
                .filter(|(_, &a)| a)
                .map(|(i, _)| data[i * dim + c]),
        );
        out[c] = if count == 0 {
            f64::NAN
        } else {
            pairwise_sum(&column) / count as f64
        };
    }
}

/// Max-norm relative difference, scaled by the larger of the two max-norms.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = norm_inf(a).max(norm_inf(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
    }

    #[test]
    fn quadratic_gradient() {
        let m = Mat::from_row_major(2, 2, vec![2.0, 1.0, 0.0, 3.0]);
        let v = [1.0, -2.0];
        assert_eq!(m.quad(&v), 2.0 - 2.0 + 12.0);
        let mut g = vec![0.0; 2];
        m.quad_grad_acc(&v, 1.0, &mut g);
        // (M + M^T) v = [[4,1],[1,6]] v
        assert_eq!(g, vec![2.0, -11.0]);
    }

    #[test]
    fn masked_mean_skips_inactive_rows() {
        let data = [1.0, 10.0, 3.0, 30.0, 100.0, 1000.0];
        let mut out = [0.0; 2];
        masked_mean(&data, 2, &[true, true, false], &mut out);
        assert_eq!(out, [2.0, 20.0]);
        masked_mean(&data, 2, &[false, false, false], &mut out);
        assert!(out[0].is_nan());
    }
}
