//! Dense `f32` kernels shared by the model, attention and engine.
//!
//! Everything here is a pure function over its inputs. Accumulation order is
//! fixed (row-major, ascending inner index) so that two code paths which
//! perform the same logical reduction produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{ChaiError, Result};

/// Base of the rotary position frequencies.
pub const ROPE_BASE: f32 = 10_000.0;

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ChaiError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(ChaiError::Shape(format!(
                    "row {i} has {} values, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies columns `start..start + width` into a new `rows x width` matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        debug_assert!(start + width <= self.cols);
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Overwrites columns `start..start + block.cols()` with `block`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        debug_assert!(start + block.cols <= self.cols);
        let w = block.cols;
        for r in 0..self.rows {
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    /// Elementwise in-place addition.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ChaiError::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// `a · b`, accumulating each output element over the inner index in
/// ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_cols(a, b, 0, b.cols)
}

/// `a · b[:, start..start + width]`.
///
/// Each produced element is computed with exactly the same operations, in the
/// same order, as the corresponding element of [`matmul`], so a projection
/// restricted to some head blocks is bitwise equal to slicing the full one.
pub fn matmul_cols(a: &Matrix, b: &Matrix, start: usize, width: usize) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(ChaiError::Shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if start + width > b.cols {
        return Err(ChaiError::Shape(format!(
            "column block {start}..{} out of range for {}x{}",
            start + width,
            b.rows,
            b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, width);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let o = &mut out.data[i * width..(i + 1) * width];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols + start..k * b.cols + start + width];
            for (oj, &bkj) in o.iter_mut().zip(b_row) {
                *oj += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Dot product with ascending accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise softmax.
///
/// With `causal_offset = Some(p)`, row `i` is treated as the query at absolute
/// position `p + i` and columns as key positions `0..cols`; entries with key
/// position greater than the query position are set to exactly zero.
pub fn softmax_rows(m: &Matrix, causal_offset: Option<usize>) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let visible = match causal_offset {
            Some(p) => (p + i + 1).min(m.cols),
            None => m.cols,
        };
        if visible == 0 {
            return Err(ChaiError::Contract(format!(
                "softmax row {i} has no unmasked entries"
            )));
        }
        softmax_in_place(&mut out.row_mut(i)[..visible])?;
        for v in &mut out.row_mut(i)[visible..] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Numerically stabilised softmax of a single row.
pub fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    if row.is_empty() {
        return Err(ChaiError::Contract("softmax of an empty row".into()));
    }
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if !v.is_finite() {
            return Err(ChaiError::Contract(format!(
                "non-finite attention score {v}"
            )));
        }
        max = max.max(v);
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// `x_i * gain_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(ChaiError::Shape(format!(
            "rms_norm input has {} values but gain has {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let denom = (ss / x.len() as f32 + eps).sqrt();
    if denom == 0.0 {
        // all-zero input with eps = 0
        return Ok(vec![0.0; x.len()]);
    }
    let inv = 1.0 / denom;
    Ok(x.iter().zip(gain).map(|(v, g)| v * inv * g).collect())
}

/// Applies [`rms_norm`] to every row.
pub fn rms_norm_rows(x: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let normed = rms_norm(x.row(r), gain, eps)?;
        out.row_mut(r).copy_from_slice(&normed);
    }
    Ok(out)
}

/// Rotary position embedding over interleaved pairs `(2i, 2i+1)`, with row `t`
/// at absolute position `start_position + t` and frequency
/// `ROPE_BASE^(-2i/d_h)`.
pub fn apply_rope(m: &Matrix, start_position: usize) -> Result<Matrix> {
    let mut out = m.clone();
    apply_rope_in_place(&mut out, start_position)?;
    Ok(out)
}

pub fn apply_rope_in_place(m: &mut Matrix, start_position: usize) -> Result<()> {
    let dh = m.cols;
    if dh % 2 != 0 {
        return Err(ChaiError::Config(format!(
            "rotary embedding needs an even head dimension, got {dh}"
        )));
    }
    let freqs: Vec<f32> = (0..dh / 2)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f32) / dh as f32))
        .collect();
    for t in 0..m.rows {
        let pos = (start_position + t) as f32;
        let row = m.row_mut(t);
        for (i, f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos * f).sin_cos();
            let x0 = row[2 * i];
            let x1 = row[2 * i + 1];
            row[2 * i] = x0 * cos - x1 * sin;
            row[2 * i + 1] = x0 * sin + x1 * cos;
        }
    }
    Ok(())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), b);
    }

    #[test]
    fn matmul_dot() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg_matrix(7, 5, 1);
        let b = lcg_matrix(5, 6, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..6 {
                let mut acc = 0.0f64;
                for k in 0..5 {
                    acc += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                assert!((c.get(i, j) as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 by 2x3"), "{msg}");
    }

    #[test]
    fn column_block_projection_is_bitwise_slice() {
        let a = lcg_matrix(3, 8, 3);
        let b = lcg_matrix(8, 8, 4);
        let full = matmul(&a, &b).unwrap();
        let part = matmul_cols(&a, &b, 4, 2).unwrap();
        assert_eq!(part, full.col_block(4, 2));
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let single = Matrix::from_rows(&[vec![123.5]]).unwrap();
        assert_eq!(softmax_rows(&single, None).unwrap().data(), &[1.0]);

        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        let denom: f64 = (1..=3).map(|x| (x as f64).exp()).sum();
        for (j, v) in s.data().iter().enumerate() {
            let expected = ((j + 1) as f64).exp() / denom;
            assert!((*v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_empty_after_mask_is_error() {
        let m = Matrix::zeros(1, 0);
        assert!(matches!(
            softmax_rows(&m, Some(0)),
            Err(ChaiError::Contract(_))
        ));
    }

    #[test]
    fn rms_norm_examples() {
        assert_eq!(rms_norm(&[1.0; 4], &[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 1e-5).unwrap(), vec![0.0; 4]);
        let out = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((out[0] as f64 - 3.0 / r).abs() < 1e-6);
        assert!((out[1] as f64 - 4.0 / r).abs() < 1e-6);
        assert!(matches!(
            rms_norm(&[1.0], &[1.0, 1.0], 0.0),
            Err(ChaiError::Shape(_))
        ));
    }

    #[test]
    fn rope_examples() {
        let m = lcg_matrix(1, 8, 9);
        assert_eq!(apply_rope(&m, 0).unwrap(), m);

        let unit = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = apply_rope(&unit, 1).unwrap();
        assert!((r.get(0, 0) as f64 - 1f64.cos()).abs() < 1e-6);
        assert!((r.get(0, 1) as f64 - 1f64.sin()).abs() < 1e-6);

        assert!(matches!(
            apply_rope(&Matrix::zeros(1, 3), 0),
            Err(ChaiError::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn identity_is_neutral(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let a = lcg_matrix(rows, cols, seed);
            let left = matmul(&Matrix::identity(rows), &a).unwrap();
            let right = matmul(&a, &Matrix::identity(cols)).unwrap();
            for ((x, y), z) in left.data().iter().zip(right.data()).zip(a.data()) {
                prop_assert!((x - z).abs() < 1e-6);
                prop_assert!((y - z).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_rows_normalised_and_causal(
            rows in 1usize..6, extra in 0usize..5, offset in 0usize..4,
            scale in 0.1f32..20.0, seed in any::<u64>(),
        ) {
            let cols = rows + extra + offset;
            let mut m = lcg_matrix(rows, cols, seed);
            for v in m.data_mut() { *v *= scale; }
            let s = softmax_rows(&m, Some(offset)).unwrap();
            for i in 0..rows {
                let sum: f32 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                for (j, &p) in s.row(i).iter().enumerate() {
                    prop_assert!((0.0..=1.0).contains(&p));
                    if j > offset + i {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }

        #[test]
        fn rms_norm_gain_covariant(seed in any::<u64>(), n in 1usize..16) {
            let x = lcg_matrix(1, n, seed).into_data();
            let g = lcg_matrix(1, n, seed ^ 0xabcd).into_data();
            let g2: Vec<f32> = g.iter().map(|v| v * 2.0).collect();
            let a = rms_norm(&x, &g, 1e-5).unwrap();
            let b = rms_norm(&x, &g2, 1e-5).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert_eq!(u * 2.0, *v);
            }
        }

        #[test]
        fn rope_preserves_pair_norms(seed in any::<u64>(), pos in 0usize..4096, half in 1usize..8) {
            let m = lcg_matrix(2, half * 2, seed);
            let r = apply_rope(&m, pos).unwrap();
            for t in 0..2 {
                for i in 0..half {
                    let a = m.get(t, 2 * i).hypot(m.get(t, 2 * i + 1));
                    let b = r.get(t, 2 * i).hypot(r.get(t, 2 * i + 1));
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
