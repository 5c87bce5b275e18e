//! Dense matrices and order-D tensors with a single fixed linearization.
//!
//! Layout convention, used everywhere in this crate:
//!
//! * storage is column-major / Fortran order: the FIRST index runs fastest.
//!   A `Matrix` entry `(r, c)` lives at `r + rows*c`; a tensor entry
//!   `(i_0, ..., i_{D-1})` lives at `i_0 + N_0*(i_1 + N_1*(i_2 + ...))`.
//! * `vectorize` is plain column-major flattening. Under this layout,
//!   `vec(U x_0 A_0 ... x_{D-1} A_{D-1}) = (A_{D-1} (x) ... (x) A_0) vec(U)`,
//!   i.e. the Kronecker chain in *descending* mode order. All
//!   Kronecker-ordering conventions elsewhere are built against this one fact.
//! * mode-m unfolding follows Kolda & Bader (SIAM Rev. 2009, §2.4): row index
//!   `i_m`, column index `sum_{k != m} i_k * prod_{l < k, l != m} N_l`.
//!
//! Modes are 0-based throughout the crate.

use crate::error::{CitrusError, Result};
use crate::scalar::Scalar;

/// Dense column-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    /// Build from a column-major flat slice.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CitrusError::InvalidArgument(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from rows given in reading order (each inner slice is one row).
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(CitrusError::InvalidArgument("no rows".into()));
        }
        let c = rows[0].len();
        if c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(CitrusError::InvalidArgument("ragged or empty rows".into()));
        }
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m.set(r, c, f(r, c));
            }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r + self.rows * c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r + self.rows * c] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Contiguous storage of column `c`.
    pub fn col(&self, c: usize) -> &[T] {
        &self.data[self.rows * c..self.rows * (c + 1)]
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul: inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for c in 0..rhs.cols {
            for k in 0..self.cols {
                let b = rhs.get(k, c);
                if b == T::zero() {
                    continue;
                }
                let a_col = &self.data[self.rows * k..self.rows * (k + 1)];
                let o_col = &mut out.data[self.rows * c..self.rows * (c + 1)];
                for (o, &a) in o_col.iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, rhs.rows, "matmul_tn: row counts differ");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for c in 0..rhs.cols {
            let b_col = rhs.col(c);
            for r in 0..self.cols {
                let a_col = self.col(r);
                let mut acc = T::zero();
                for (&a, &b) in a_col.iter().zip(b_col) {
                    acc += a * b;
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_nt: column counts differ");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for k in 0..self.cols {
            let a_col = self.col(k);
            for c in 0..rhs.rows {
                let b = rhs.get(c, k);
                if b == T::zero() {
                    continue;
                }
                let o_col = &mut out.data[self.rows * c..self.rows * (c + 1)];
                for (o, &a) in o_col.iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&rhs.data) {
            *o += b;
        }
        out
    }

    pub fn sub(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&rhs.data) {
            *o -= b;
        }
        out
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        let mut out = self.clone();
        for o in out.data.iter_mut() {
            *o *= s;
        }
        out
    }

    /// `self += s * rhs` in place.
    pub fn add_assign_scaled(&mut self, rhs: &Matrix<T>, s: T) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (o, &b) in self.data.iter_mut().zip(&rhs.data) {
            *o += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &Matrix<T>) -> T {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Largest absolute asymmetry `|M - M^T|`, zero for non-square input.
    pub fn asymmetry(&self) -> T {
        if self.rows != self.cols {
            return T::zero();
        }
        let mut worst = T::zero();
        for c in 0..self.cols {
            for r in 0..c {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Kronecker product `self (x) rhs`.
    pub fn kron(&self, rhs: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows * rhs.rows, self.cols * rhs.cols);
        for ja in 0..self.cols {
            for ia in 0..self.rows {
                let a = self.get(ia, ja);
                if a == T::zero() {
                    continue;
                }
                for jb in 0..rhs.cols {
                    for ib in 0..rhs.rows {
                        out.set(ia * rhs.rows + ib, ja * rhs.cols + jb, a * rhs.get(ib, jb));
                    }
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense order-D tensor, column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&n| n > 0), "invalid tensor shape");
        let len = shape.iter().product();
        DenseTensor { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn from_data(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&n| n == 0) {
            return Err(CitrusError::InvalidArgument(format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(CitrusError::InvalidArgument(format!(
                "tensor data length {} != prod{shape:?}",
                data.len()
            )));
        }
        Ok(DenseTensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for lin in 0..t.data.len() {
            t.data[lin] = f(&idx);
            Self::advance(&mut idx, shape);
        }
        t
    }

    #[inline]
    fn advance(idx: &mut [usize], shape: &[usize]) {
        for d in 0..idx.len() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                return;
            }
            idx[d] = 0;
        }
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0;
        let mut stride = 1;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            lin += i * stride;
            stride *= self.shape[d];
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let lin = self.linear_index(idx);
        self.data[lin] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, rhs: &DenseTensor<T>) -> DenseTensor<T> {
        assert_eq!(self.shape, rhs.shape);
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        DenseTensor { shape: self.shape.clone(), data }
    }

    pub fn sub(&self, rhs: &DenseTensor<T>) -> DenseTensor<T> {
        assert_eq!(self.shape, rhs.shape);
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        DenseTensor { shape: self.shape.clone(), data }
    }

    pub fn scale(&self, s: T) -> DenseTensor<T> {
        self.map(|v| v * s)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &DenseTensor<T>) -> T {
        assert_eq!(self.shape, rhs.shape);
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret an order-(P+1) tensor as the `prod(leading) x last` matrix
    /// whose row index linearizes the leading modes. Because both containers
    /// are column-major this is a pure copy, no permutation.
    pub fn to_channel_matrix(&self) -> Matrix<T> {
        let last = *self.shape.last().expect("tensor has at least one mode");
        let lead: usize = self.numel() / last;
        Matrix { rows: lead, cols: last, data: self.data.clone() }
    }

    /// Inverse of [`to_channel_matrix`]: `leading` are the leading mode sizes.
    pub fn from_channel_matrix(leading: &[usize], m: &Matrix<T>) -> Result<Self> {
        let lead: usize = leading.iter().product();
        if lead != m.rows() {
            return Err(CitrusError::InvalidArgument(format!(
                "leading shape {leading:?} does not linearize to {} rows",
                m.rows()
            )));
        }
        let mut shape = leading.to_vec();
        shape.push(m.cols());
        DenseTensor::from_data(&shape, m.as_slice().to_vec())
    }

    /// Contiguous slice holding channel `f` of an order-(P+1) tensor.
    pub fn channel(&self, f: usize) -> Result<DenseTensor<T>> {
        let last = *self.shape.last().unwrap();
        if f >= last {
            return Err(CitrusError::InvalidArgument(format!("channel {f} out of {last}")));
        }
        let lead_shape = &self.shape[..self.shape.len() - 1];
        let lead: usize = lead_shape.iter().product();
        DenseTensor::from_data(lead_shape, self.data[f * lead..(f + 1) * lead].to_vec())
    }

    /// Concatenate along the last (channel) mode.
    pub fn concat_channels(&self, rhs: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let d = self.order();
        if rhs.order() != d || self.shape[..d - 1] != rhs.shape[..d - 1] {
            return Err(CitrusError::InvalidArgument(format!(
                "channel concat needs equal leading shapes, got {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut shape = self.shape.clone();
        shape[d - 1] += rhs.shape[d - 1];
        let mut data = Vec::with_capacity(self.numel() + rhs.numel());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&rhs.data);
        DenseTensor::from_data(&shape, data)
    }
}

/// Mode-`mode` unfolding (Kolda & Bader ordering). Modes are 0-based.
pub fn matricize<T: Scalar>(u: &DenseTensor<T>, mode: usize) -> Result<Matrix<T>> {
    let d = u.order();
    if mode >= d {
        return Err(CitrusError::InvalidArgument(format!(
            "mode {mode} out of range for order-{d} tensor"
        )));
    }
    let shape = u.shape();
    let rows = shape[mode];
    let cols = u.numel() / rows;
    let mut out = Matrix::zeros(rows, cols);
    // Column index of the remaining modes: j = sum_{k != mode} i_k * J_k with
    // J_k the product of the sizes of all earlier non-`mode` dimensions.
    let mut idx = vec![0usize; d];
    for lin in 0..u.numel() {
        let mut j = 0;
        let mut jstride = 1;
        for k in 0..d {
            if k == mode {
                continue;
            }
            j += idx[k] * jstride;
            jstride *= shape[k];
        }
        out.set(idx[mode], j, u.as_slice()[lin]);
        DenseTensor::<T>::advance(&mut idx, shape);
    }
    Ok(out)
}

/// Inverse of [`matricize`]: refold `m` into `shape` along `mode`.
pub fn dematricize<T: Scalar>(m: &Matrix<T>, mode: usize, shape: &[usize]) -> Result<DenseTensor<T>> {
    let d = shape.len();
    if mode >= d {
        return Err(CitrusError::InvalidArgument(format!(
            "mode {mode} out of range for order-{d} shape"
        )));
    }
    let numel: usize = shape.iter().product();
    if m.rows() != shape[mode] || m.rows() * m.cols() != numel {
        return Err(CitrusError::InvalidArgument(format!(
            "matrix {}x{} inconsistent with shape {shape:?} at mode {mode}",
            m.rows(),
            m.cols()
        )));
    }
    let mut out = DenseTensor::zeros(shape);
    let mut idx = vec![0usize; d];
    for lin in 0..numel {
        let mut j = 0;
        let mut jstride = 1;
        for k in 0..d {
            if k == mode {
                continue;
            }
            j += idx[k] * jstride;
            jstride *= shape[k];
        }
        out.as_mut_slice()[lin] = m.get(idx[mode], j);
        DenseTensor::<T>::advance(&mut idx, shape);
    }
    Ok(out)
}

/// Mode product `U x_mode X`: contracts `X.cols` against mode `mode`.
pub fn mode_product<T: Scalar>(u: &DenseTensor<T>, x: &Matrix<T>, mode: usize) -> Result<DenseTensor<T>> {
    let d = u.order();
    if mode >= d {
        return Err(CitrusError::InvalidArgument(format!(
            "mode {mode} out of range for order-{d} tensor"
        )));
    }
    let shape = u.shape();
    if x.cols() != shape[mode] {
        return Err(CitrusError::InvalidArgument(format!(
            "mode_product: matrix cols {} != mode-{mode} size {}",
            x.cols(),
            shape[mode]
        )));
    }
    let inner: usize = shape[..mode].iter().product();
    let outer: usize = shape[mode + 1..].iter().product();
    let n = shape[mode];
    let r = x.rows();
    let mut new_shape = shape.to_vec();
    new_shape[mode] = r;
    let mut out = DenseTensor::zeros(&new_shape);
    let u_data = u.as_slice();
    let o_data = out.as_mut_slice();
    for post in 0..outer {
        let u_base = post * inner * n;
        let o_base = post * inner * r;
        for a in 0..n {
            let u_seg = &u_data[u_base + a * inner..u_base + (a + 1) * inner];
            for row in 0..r {
                let w = x.get(row, a);
                if w == T::zero() {
                    continue;
                }
                let o_seg = &mut o_data[o_base + row * inner..o_base + (row + 1) * inner];
                for (o, &uv) in o_seg.iter_mut().zip(u_seg) {
                    *o += w * uv;
                }
            }
        }
    }
    Ok(out)
}

/// Column-major flattening; see the module docs for the Kronecker identity
/// this ordering guarantees.
pub fn vectorize<T: Scalar>(u: &DenseTensor<T>) -> Vec<T> {
    u.as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(shape: &[usize]) -> DenseTensor<f64> {
        let n: usize = shape.iter().product();
        DenseTensor::from_data(shape, (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    /// Brute-force unfolding straight from the index formula, kept independent
    /// of the production code path.
    fn oracle_matricize(u: &DenseTensor<f64>, mode: usize) -> Matrix<f64> {
        let shape = u.shape();
        let d = shape.len();
        let rows = shape[mode];
        let cols: usize = u.numel() / rows;
        let mut m = Matrix::zeros(rows, cols);
        let mut idx = vec![0usize; d];
        loop {
            let mut j = 0;
            let mut stride = 1;
            for k in 0..d {
                if k != mode {
                    j += idx[k] * stride;
                    stride *= shape[k];
                }
            }
            m.set(idx[mode], j, u.get(&idx));
            // odometer
            let mut done = true;
            for dd in 0..d {
                idx[dd] += 1;
                if idx[dd] < shape[dd] {
                    done = false;
                    break;
                }
                idx[dd] = 0;
            }
            if done {
                break;
            }
        }
        m
    }

    #[test]
    fn matricize_mode0_of_matrix_is_identity_map() {
        let u = seq_tensor(&[3, 4]);
        let m = matricize(&u, 0).unwrap();
        assert_eq!(m.rows(), 3);
        assert_eq!(m.cols(), 4);
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), u.get(&[r, c]));
            }
        }
    }

    #[test]
    fn matricize_2x2x2_mode1_matches_bruteforce_oracle() {
        let u = seq_tensor(&[2, 2, 2]);
        let m = matricize(&u, 1).unwrap();
        let expect = oracle_matricize(&u, 1);
        assert_eq!(m, expect);
        // Frozen values from the oracle: rows index the middle mode, columns
        // run (i0, i2) with i0 fastest.
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 4);
        let frozen = Matrix::from_rows(&[vec![1.0, 2.0, 5.0, 6.0], vec![3.0, 4.0, 7.0, 8.0]]).unwrap();
        assert_eq!(m, frozen);
    }

    #[test]
    fn matricize_all_modes_match_oracle() {
        let u = DenseTensor::from_fn(&[3, 4, 2, 2], |idx| {
            (1 + idx[0] + 7 * idx[1] + 31 * idx[2] + 101 * idx[3]) as f64
        });
        for mode in 0..4 {
            assert_eq!(matricize(&u, mode).unwrap(), oracle_matricize(&u, mode));
        }
    }

    #[test]
    fn matricize_zeros_gives_zeros() {
        let u = DenseTensor::<f64>::zeros(&[2, 5, 3]);
        let m = matricize(&u, 2).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!((m.rows(), m.cols()), (3, 10));
    }

    #[test]
    fn matricize_mode_out_of_range_errors() {
        let u = seq_tensor(&[2, 2]);
        assert!(matches!(matricize(&u, 2), Err(CitrusError::InvalidArgument(_))));
    }

    #[test]
    fn dematricize_round_trips_every_mode_bitwise() {
        let u = DenseTensor::from_fn(&[3, 4, 2], |idx| {
            0.37 * idx[0] as f64 - 1.91 * idx[1] as f64 + 0.013 * idx[2] as f64
        });
        for mode in 0..3 {
            let m = matricize(&u, mode).unwrap();
            let back = dematricize(&m, mode, u.shape()).unwrap();
            assert_eq!(back, u);
        }
    }

    #[test]
    fn dematricize_frozen_example_recovers_sequence_tensor() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 5.0, 6.0], vec![3.0, 4.0, 7.0, 8.0]]).unwrap();
        let u = dematricize(&m, 1, &[2, 2, 2]).unwrap();
        assert_eq!(u, seq_tensor(&[2, 2, 2]));
    }

    #[test]
    fn dematricize_dimension_mismatch_errors() {
        let m = Matrix::<f64>::zeros(2, 4);
        assert!(dematricize(&m, 0, &[3, 3]).is_err());
        assert!(dematricize(&m, 1, &[2, 2, 3]).is_err());
    }

    #[test]
    fn mode_product_identity_leaves_tensor_unchanged() {
        let u = seq_tensor(&[3, 4, 2]);
        for mode in 0..3 {
            let i = Matrix::identity(u.shape()[mode]);
            assert_eq!(mode_product(&u, &i, mode).unwrap(), u);
        }
    }

    #[test]
    fn mode_product_matches_triple_loop_oracle() {
        let u = DenseTensor::from_fn(&[3, 3, 2], |idx| {
            ((idx[0] * 5 + idx[1] * 3 + idx[2] * 11) as f64).sin()
        });
        let x = Matrix::from_fn(2, 3, |r, c| ((r * 17 + c * 7) as f64).cos());
        let y = mode_product(&u, &x, 0).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        acc += x.get(i, a) * u.get(&[a, j, k]);
                    }
                    assert!((y.get(&[i, j, k]) - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mode_product_agrees_with_matricized_form() {
        let u = DenseTensor::from_fn(&[4, 3, 2], |idx| (idx[0] + 2 * idx[1] + 5 * idx[2]) as f64 * 0.21);
        let x = Matrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.3 + 0.1);
        let direct = mode_product(&u, &x, 1).unwrap();
        let via = dematricize(&x.matmul(&matricize(&u, 1).unwrap()), 1, &[4, 5, 2]).unwrap();
        assert!(direct.max_abs_diff(&via) < 1e-14);
    }

    #[test]
    fn distinct_mode_products_commute() {
        let u = DenseTensor::from_fn(&[3, 4, 2], |idx| ((idx[0] + 3 * idx[1] + idx[2]) as f64).sqrt());
        let x = Matrix::from_fn(2, 3, |r, c| (r + c) as f64 * 0.4 - 0.5);
        let y = Matrix::from_fn(3, 4, |r, c| (r as i64 - c as i64) as f64 * 0.25);
        let a = mode_product(&mode_product(&u, &x, 0).unwrap(), &y, 1).unwrap();
        let b = mode_product(&mode_product(&u, &y, 1).unwrap(), &x, 0).unwrap();
        let denom = a.frobenius_norm().max(1.0);
        assert!(a.sub(&b).frobenius_norm() / denom < 1e-12);
    }

    #[test]
    fn mode_product_dimension_mismatch_errors() {
        let u = seq_tensor(&[3, 4]);
        let x = Matrix::<f64>::zeros(2, 5);
        assert!(mode_product(&u, &x, 0).is_err());
    }

    #[test]
    fn vectorize_order1_is_identity() {
        let u = seq_tensor(&[5]);
        assert_eq!(vectorize(&u), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn vectorize_satisfies_descending_kronecker_identity_order2() {
        // U = [[1,2],[3,4]] in row notation; vec must run the first index fastest
        // so that vec(U x_0 A x_1 B) = (B (x) A) vec(U).
        let u = DenseTensor::from_data(&[2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let a = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.7, 0.05]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.1, 0.4], vec![-0.6, 2.0]]).unwrap();
        let lhs_t = mode_product(&mode_product(&u, &a, 0).unwrap(), &b, 1).unwrap();
        let lhs = vectorize(&lhs_t);
        let k = b.kron(&a);
        let v = vectorize(&u);
        for r in 0..4 {
            let mut acc = 0.0_f64;
            for c in 0..4 {
                acc += k.get(r, c) * v[c];
            }
            assert!((acc - lhs[r]).abs() < 1e-12, "row {r}: {acc} vs {}", lhs[r]);
        }
    }

    #[test]
    fn vectorize_kronecker_identity_order3() {
        let u = DenseTensor::from_fn(&[2, 3, 2], |idx| (1 + idx[0] + 2 * idx[1] + 6 * idx[2]) as f64 * 0.17);
        let mats = [
            Matrix::from_fn(2, 2, |r, c| 0.2 + 0.3 * (r * 2 + c) as f64),
            Matrix::from_fn(3, 3, |r, c| ((r + 2 * c) as f64).sin()),
            Matrix::from_fn(2, 2, |r, c| if r == c { 1.5 } else { -0.25 }),
        ];
        let mut w = u.clone();
        for (m, x) in mats.iter().enumerate() {
            w = mode_product(&w, x, m).unwrap();
        }
        let lhs = vectorize(&w);
        let k = mats[2].kron(&mats[1]).kron(&mats[0]);
        let v = vectorize(&u);
        let mut worst: f64 = 0.0;
        for r in 0..lhs.len() {
            let mut acc = 0.0;
            for c in 0..v.len() {
                acc += k.get(r, c) * v[c];
            }
            worst = worst.max((acc - lhs[r]).abs());
        }
        assert!(worst < 1e-12, "worst {worst}");
    }

    #[test]
    fn channel_matrix_round_trip_is_bitwise() {
        let u = DenseTensor::from_fn(&[4, 3, 5], |idx| (idx[0] * 100 + idx[1] * 10 + idx[2]) as f64);
        let m = u.to_channel_matrix();
        assert_eq!((m.rows(), m.cols()), (12, 5));
        let back = DenseTensor::from_channel_matrix(&[4, 3], &m).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn channel_matrix_matches_last_mode_unfolding_transpose() {
        let u = DenseTensor::from_fn(&[3, 2, 4], |idx| (idx[0] + 5 * idx[1] + 11 * idx[2]) as f64 * 0.09);
        let unf = matricize(&u, 2).unwrap();
        let cm = u.to_channel_matrix();
        for r in 0..cm.rows() {
            for c in 0..cm.cols() {
                assert_eq!(cm.get(r, c), unf.get(c, r));
            }
        }
    }

    #[test]
    fn concat_channels_stacks_along_last_mode() {
        let a = DenseTensor::from_fn(&[2, 2, 1], |idx| (idx[0] + idx[1]) as f64);
        let b = DenseTensor::from_fn(&[2, 2, 2], |idx| 10.0 + idx[2] as f64);
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.channel(0).unwrap(), a.channel(0).unwrap());
        assert_eq!(c.channel(1).unwrap(), b.channel(0).unwrap());
        assert_eq!(c.channel(2).unwrap(), b.channel(1).unwrap());
    }

    #[test]
    fn matrix_matmul_variants_agree() {
        let a = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.31 - 1.0);
        let b = Matrix::from_fn(4, 5, |r, c| ((r + 7 * c) as f64).cos());
        let tn = a.matmul_tn(&b);
        let explicit = a.transpose().matmul(&b);
        assert!(tn.max_abs_diff(&explicit) < 1e-14);

        let c = Matrix::from_fn(5, 3, |r, c| (r as f64 + 0.5) * (c as f64 - 1.5));
        let nt = a.matmul_nt(&c);
        let explicit2 = a.matmul(&c.transpose());
        assert!(nt.max_abs_diff(&explicit2) < 1e-14);
    }

    #[test]
    fn kron_small_example() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let k = x.kron(&s);
        let expect = Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(k, expect);
        let i6 = Matrix::<f64>::identity(2).kron(&Matrix::identity(3));
        assert_eq!(i6, Matrix::identity(6));
    }

    #[test]
    fn f32_instantiation_works() {
        let u = DenseTensor::<f32>::from_fn(&[2, 2], |idx| (idx[0] + idx[1]) as f32);
        let x = Matrix::<f32>::identity(2);
        assert_eq!(mode_product(&u, &x, 0).unwrap(), u);
    }
}
