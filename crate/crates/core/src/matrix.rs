//! Dense row-major `f64` matrices.

use std::fmt;

use crate::error::{shape_err, Result, SpurError};

/// A dense `rows x cols` matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Builds a matrix from row-major data, checking the element count.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SpurError::Input(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(SpurError::Input(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn apply(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// In-place `self[i] = f(self[i], other[i])`.
    pub fn zip_apply(&mut self, other: &Self, f: impl Fn(f64, f64) -> f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all entries in row-major order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column vector (`rows x 1`) of row sums.
    pub fn row_sums(&self) -> Self {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Self {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Row vector (`1 x cols`) of column sums, accumulated top to bottom.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Self {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Self) -> Self {
        let (n, k, m) = (self.rows, self.cols, other.cols);
        Self {
            rows: n,
            cols: m,
            data: gemm(Operand::new(&self.data, k, 1), &other.data, n, k, m),
        }
    }

    /// `self * other^T`.
    pub(crate) fn matmul_nt(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        self.matmul_unchecked(&other.transpose())
    }

    /// `self^T * other`, reading `self` in place.
    pub(crate) fn matmul_tn(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let (n, k, m) = (self.cols, self.rows, other.cols);
        Self {
            rows: n,
            cols: m,
            data: gemm(Operand::new(&self.data, 1, n), &other.data, n, k, m),
        }
    }
}

/// `a * b + c`, fused when the target has hardware FMA.
#[inline(always)]
fn madd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// Left operand of a product; element `(i, p)` lives at `i * row_stride + p * col_stride`.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

impl<'a> Operand<'a> {
    fn new(data: &'a [f64], row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            row_stride,
            col_stride,
        }
    }

    #[inline(always)]
    fn at(&self, i: usize, p: usize) -> f64 {
        self.data[i * self.row_stride + p * self.col_stride]
    }
}

const ROW_BLOCK: usize = 4;
const COL_BLOCK: usize = 16;

/// Row-major `a * b` for `a` (n x k) and `b` (k x m).
///
/// Each output entry accumulates its k products in index order, so results
/// do not depend on the blocking or on the layout of `a`.
fn gemm(a: Operand<'_>, b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    let mut panel = vec![0.0; ROW_BLOCK * m];
    let mut packed = vec![0.0; ROW_BLOCK * k];
    let full_cols = m - m % COL_BLOCK;
    let mut i = 0;
    while i < n {
        let rows = ROW_BLOCK.min(n - i);
        if rows == ROW_BLOCK {
            for (p, dst) in packed.chunks_exact_mut(ROW_BLOCK).enumerate() {
                for (r, d) in dst.iter_mut().enumerate() {
                    *d = a.at(i + r, p);
                }
            }
            let mut j = 0;
            while j < full_cols {
                let mut acc = [[0.0f64; COL_BLOCK]; ROW_BLOCK];
                for (a_col, b_row) in packed.chunks_exact(ROW_BLOCK).zip(b.chunks_exact(m)) {
                    let b_chunk: &[f64; COL_BLOCK] = b_row[j..j + COL_BLOCK].try_into().unwrap();
                    for (acc_row, &av) in acc.iter_mut().zip(a_col) {
                        for c in 0..COL_BLOCK {
                            acc_row[c] = madd(av, b_chunk[c], acc_row[c]);
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    panel[r * m + j..r * m + j + COL_BLOCK].copy_from_slice(acc_row);
                }
                j += COL_BLOCK;
            }
            gemm_rows(a, b, &mut panel, i, rows, full_cols, k, m);
        } else {
            gemm_rows(a, b, &mut panel, i, rows, 0, k, m);
        }
        out.extend_from_slice(&panel[..rows * m]);
        i += rows;
    }
    out
}

/// Plain kernel for `rows` rows starting at `i0` and columns `c0..m`, written
/// into `panel`.
#[allow(clippy::too_many_arguments)]
fn gemm_rows(
    a: Operand<'_>,
    b: &[f64],
    panel: &mut [f64],
    i0: usize,
    rows: usize,
    c0: usize,
    k: usize,
    m: usize,
) {
    if c0 == m {
        return;
    }
    for r in 0..rows {
        let o_row = &mut panel[r * m + c0..(r + 1) * m];
        o_row.fill(0.0);
        for p in 0..k {
            let av = a.at(i0 + r, p);
            for (o, &bv) in o_row.iter_mut().zip(&b[p * m + c0..(p + 1) * m]) {
                *o = madd(av, bv, *o);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = a * b^T` for row-major `a` (n x k) and `b` (m x k).
///
/// Every entry is summed in the same order as [`dot`], but the work is laid
/// out along rows of `b^T` so it vectorizes.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], k: usize, out: &mut [f64]) {
    let m = b.len() / k;
    let mut bt = vec![0.0; k * m];
    for (j, row) in b.chunks_exact(k).enumerate() {
        for (p, &v) in row.iter().enumerate() {
            bt[p * m + j] = v;
        }
    }
    for (a_row, o) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        o.fill(0.0);
        for (&av, bt_row) in a_row.iter().zip(bt.chunks_exact(m)) {
            for (x, &bv) in o.iter_mut().zip(bt_row) {
                *x += av * bv;
            }
        }
    }
}
