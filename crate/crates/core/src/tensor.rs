//! Dense row-major `f64` matrices and the handful of GEMM shapes the graph needs.

use std::cell::RefCell;
use std::fmt;

/// Buffers at least this long are recycled instead of returned to the
/// allocator. Large allocations are fresh `mmap`s whose page faults cost more
/// than the arithmetic done on them.
const POOL_MIN_LEN: usize = 1 << 16;
const POOL_MAX_BYTES: usize = 1 << 30;

#[derive(Default)]
struct BufferPool {
    free: Vec<Vec<f64>>,
    bytes: usize,
}

thread_local! {
    static POOL: RefCell<BufferPool> = RefCell::new(BufferPool::default());
}

/// A zero-filled buffer of `len` elements, reusing a pooled one if it fits.
fn zeroed(len: usize) -> Vec<f64> {
    if len >= POOL_MIN_LEN {
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            // Smallest pooled buffer that fits, as long as it is not wastefully large.
            let pick = p
                .free
                .iter()
                .enumerate()
                .filter(|(_, b)| b.capacity() >= len && b.capacity() <= 2 * len)
                .min_by_key(|(_, b)| b.capacity())
                .map(|(i, _)| i)?;
            let buf = p.free.swap_remove(pick);
            p.bytes -= buf.capacity() * 8;
            Some(buf)
        });
        if let Some(mut buf) = reused {
            buf.clear();
            buf.resize(len, 0.0);
            return buf;
        }
    }
    vec![0.0; len]
}

fn recycle(buf: Vec<f64>) {
    if buf.capacity() < POOL_MIN_LEN {
        return;
    }
    // `try_with`: the pool may already be gone during thread teardown.
    let _ = POOL.try_with(|p| {
        let mut p = p.borrow_mut();
        let bytes = buf.capacity() * 8;
        if p.bytes + bytes <= POOL_MAX_BYTES {
            p.bytes += bytes;
            p.free.push(buf);
        }
    });
}

/// Row-major dense matrix.
#[derive(PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut data = zeroed(rows * cols);
        if value != 0.0 {
            data.fill(value);
        }
        Self { rows, cols, data }
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for (o, &v) in out.data.iter_mut().zip(&self.data) {
            *o = f(v);
        }
        out
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in zip_map");
        let mut out = Self::zeros(self.rows, self.cols);
        for ((o, &a), &b) in out.data.iter_mut().zip(&self.data).zip(&other.data) {
            *o = f(a, b);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "row slice out of range");
        let mut out = Self::zeros(len, self.cols);
        out.data
            .copy_from_slice(&self.data[start * self.cols..(start + len) * self.cols]);
        out
    }

    /// Same data, new shape.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape changes element count");
        self.rows = rows;
        self.cols = cols;
        self
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out, 0.0);
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_tn(self, other, &mut out, 0.0);
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.rows);
        gemm_nt(self, other, &mut out, 0.0);
        out
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        out.data.copy_from_slice(&self.data);
        out
    }
}

impl Drop for Matrix {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.data));
    }
}

/// Raw GEMM: `c = a·b + beta·c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index matrixmultiply touches;
    // `c` is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = a·b + beta·out`
pub fn gemm_nn(a: &Matrix, b: &Matrix, out: &mut Matrix, beta: f64) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    assert_eq!(out.shape(), (a.rows, b.cols));
    dgemm(
        a.rows, a.cols, b.cols, &a.data, a.cols, 1, &b.data, b.cols, 1, beta, &mut out.data,
    );
}

/// `out = aᵀ·b + beta·out`
pub fn gemm_tn(a: &Matrix, b: &Matrix, out: &mut Matrix, beta: f64) {
    assert_eq!(a.rows, b.rows, "matmul inner dimension mismatch");
    assert_eq!(out.shape(), (a.cols, b.cols));
    dgemm(
        a.cols, a.rows, b.cols, &a.data, 1, a.cols, &b.data, b.cols, 1, beta, &mut out.data,
    );
}

/// `out = a·bᵀ + beta·out`
pub fn gemm_nt(a: &Matrix, b: &Matrix, out: &mut Matrix, beta: f64) {
    assert_eq!(a.cols, b.cols, "matmul inner dimension mismatch");
    assert_eq!(out.shape(), (a.rows, b.rows));
    dgemm(
        a.rows, a.cols, b.rows, &a.data, a.cols, 1, &b.data, 1, b.cols, beta, &mut out.data,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let a = Matrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.3 + j as f64);
        let b = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.5);
        let expect = naive(&a, &b);
        let got = a.matmul(&b);
        for (x, y) in got.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-13);
        }
        let got_tn = a.transpose().t_matmul(&b);
        let got_nt = a.matmul_t(&b.transpose());
        for ((x, y), z) in got_tn.data().iter().zip(got_nt.data()).zip(expect.data()) {
            assert!((x - z).abs() < 1e-13 && (y - z).abs() < 1e-13);
        }
    }

    #[test]
    fn reshape_keeps_row_major_order() {
        let m = Matrix::from_vec(6, 1, (0..6).map(f64::from).collect());
        let r = m.reshaped(2, 3);
        assert_eq!(r.row(1), &[3.0, 4.0, 5.0]);
    }
}
