//! Plain numeric kernels shared by eager evaluation, tape forward passes and
//! first-order adjoints.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::array::NdArray;

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn matmul(a: &NdArray, ta: bool, b: &NdArray, tb: bool) -> NdArray {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
    let (rsa, csa) = if ta { (1, a.cols()) } else { (a.cols(), 1) };
    let (rsb, csb) = if tb { (1, b.cols()) } else { (b.cols(), 1) };
    let mut out = vec![0.0; m * n];
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `out`,
    // whose lengths are m*k, k*n and m*n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa as isize,
            csa as isize,
            b.data().as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    NdArray::from_parts(m, n, out)
}

/// `[1, c]` -> `[rows, c]`
pub fn broadcast_rows(a: &NdArray, rows: usize) -> NdArray {
    assert_eq!(a.rows(), 1);
    let mut data = Vec::with_capacity(rows * a.cols());
    for _ in 0..rows {
        data.extend_from_slice(a.data());
    }
    NdArray::from_parts(rows, a.cols(), data)
}

/// `[r, 1]` -> `[r, cols]`
pub fn broadcast_cols(a: &NdArray, cols: usize) -> NdArray {
    assert_eq!(a.cols(), 1);
    let mut data = Vec::with_capacity(a.rows() * cols);
    for &v in a.data() {
        data.extend(std::iter::repeat_n(v, cols));
    }
    NdArray::from_parts(a.rows(), cols, data)
}

/// Column sums: `[r, c]` -> `[1, c]`.
pub fn sum_rows(a: &NdArray) -> NdArray {
    let mut out = vec![0.0; a.cols()];
    for row in a.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    NdArray::from_parts(1, a.cols(), out)
}

/// Row sums: `[r, c]` -> `[r, 1]`.
pub fn sum_cols(a: &NdArray) -> NdArray {
    NdArray::from_parts(a.rows(), 1, a.iter_rows().map(|r| r.iter().sum()).collect())
}

pub fn concat_cols(a: &NdArray, b: &NdArray) -> NdArray {
    assert_eq!(a.rows(), b.rows());
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    NdArray::from_parts(a.rows(), cols, data)
}

pub fn slice_cols(a: &NdArray, start: usize, len: usize) -> NdArray {
    assert!(start + len <= a.cols() && len > 0);
    let mut data = Vec::with_capacity(a.rows() * len);
    for r in a.iter_rows() {
        data.extend_from_slice(&r[start..start + len]);
    }
    NdArray::from_parts(a.rows(), len, data)
}

/// Places `a` at columns `start..` of a zero array with `total` columns.
pub fn pad_cols(a: &NdArray, start: usize, total: usize) -> NdArray {
    assert!(start + a.cols() <= total);
    let mut out = NdArray::zeros(a.rows(), total);
    for (r, src) in a.iter_rows().enumerate() {
        out.row_mut(r)[start..start + src.len()].copy_from_slice(src);
    }
    out
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_d1(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * std_normal_pdf(x)
}

pub fn gelu_d2(x: f64) -> f64 {
    std_normal_pdf(x) * (2.0 - x * x)
}

pub fn gelu_d3(x: f64) -> f64 {
    std_normal_pdf(x) * (x * x * x - 4.0 * x)
}

/// Log density of `N(mean, var)` for one scalar.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (d * d / var + (2.0 * PI * var).ln())
}
