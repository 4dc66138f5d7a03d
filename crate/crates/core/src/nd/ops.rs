//! A small backend trait so model code is written once and runs either
//! eagerly on arrays or recorded on a tape.

use std::borrow::Cow;

use super::adam::ParamSet;
use super::array::NdArray;
use super::autodiff::{Tape, Var};
use super::kernels as k;

pub trait Ops {
    type V: Clone;

    fn constant(&self, a: NdArray) -> Self::V;
    fn shape(&self, a: &Self::V) -> [usize; 2];
    fn to_array(&self, a: &Self::V) -> NdArray;
    /// Parameter blocks as backend values (borrowed when no recording is needed).
    fn lift<'a>(&self, params: &'a ParamSet) -> Cow<'a, [Self::V]>;

    fn add(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&self, a: &Self::V, s: f64) -> Self::V;
    fn offset(&self, a: &Self::V, s: f64) -> Self::V;
    fn matmul(&self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Self::V;
    fn broadcast_rows(&self, a: &Self::V, rows: usize) -> Self::V;
    fn broadcast_cols(&self, a: &Self::V, cols: usize) -> Self::V;
    fn sum_rows(&self, a: &Self::V) -> Self::V;
    fn sum_cols(&self, a: &Self::V) -> Self::V;
    fn sum(&self, a: &Self::V) -> Self::V;
    fn reshape(&self, a: &Self::V, rows: usize, cols: usize) -> Self::V;
    fn gelu(&self, a: &Self::V) -> Self::V;
    fn powf(&self, a: &Self::V, p: f64) -> Self::V;
    fn exp(&self, a: &Self::V) -> Self::V;
    fn sqrt(&self, a: &Self::V) -> Self::V;
    fn clamp_min(&self, a: &Self::V, lo: f64) -> Self::V;
    fn concat_cols(&self, a: &Self::V, b: &Self::V) -> Self::V;
    fn slice_cols(&self, a: &Self::V, start: usize, len: usize) -> Self::V;

    fn square(&self, a: &Self::V) -> Self::V {
        self.mul(a, a)
    }

    /// `x W + b` with `b` a `[1, out]` row.
    fn linear(&self, x: &Self::V, w: &Self::V, b: &Self::V) -> Self::V {
        let rows = self.shape(x)[0];
        self.add(&self.matmul(x, w, false, false), &self.broadcast_rows(b, rows))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    fn mul_rows_by(&self, a: &Self::V, col: &Self::V) -> Self::V {
        let cols = self.shape(a)[1];
        self.mul(a, &self.broadcast_cols(col, cols))
    }
}

/// Direct evaluation on arrays.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = NdArray;

    fn constant(&self, a: NdArray) -> NdArray {
        a
    }
    fn shape(&self, a: &NdArray) -> [usize; 2] {
        a.shape()
    }
    fn to_array(&self, a: &NdArray) -> NdArray {
        a.clone()
    }
    fn lift<'a>(&self, params: &'a ParamSet) -> Cow<'a, [NdArray]> {
        Cow::Borrowed(params.blocks())
    }
    fn add(&self, a: &NdArray, b: &NdArray) -> NdArray {
        assert_eq!(a.shape(), b.shape(), "add");
        a.zip_map(b, |x, y| x + y)
    }
    fn sub(&self, a: &NdArray, b: &NdArray) -> NdArray {
        assert_eq!(a.shape(), b.shape(), "sub");
        a.zip_map(b, |x, y| x - y)
    }
    fn mul(&self, a: &NdArray, b: &NdArray) -> NdArray {
        assert_eq!(a.shape(), b.shape(), "mul");
        a.zip_map(b, |x, y| x * y)
    }
    fn scale(&self, a: &NdArray, s: f64) -> NdArray {
        a.map(|x| x * s)
    }
    fn offset(&self, a: &NdArray, s: f64) -> NdArray {
        a.map(|x| x + s)
    }
    fn matmul(&self, a: &NdArray, b: &NdArray, ta: bool, tb: bool) -> NdArray {
        k::matmul(a, ta, b, tb)
    }
    fn broadcast_rows(&self, a: &NdArray, rows: usize) -> NdArray {
        k::broadcast_rows(a, rows)
    }
    fn broadcast_cols(&self, a: &NdArray, cols: usize) -> NdArray {
        k::broadcast_cols(a, cols)
    }
    fn sum_rows(&self, a: &NdArray) -> NdArray {
        k::sum_rows(a)
    }
    fn sum_cols(&self, a: &NdArray) -> NdArray {
        k::sum_cols(a)
    }
    fn sum(&self, a: &NdArray) -> NdArray {
        NdArray::scalar(a.sum())
    }
    fn reshape(&self, a: &NdArray, rows: usize, cols: usize) -> NdArray {
        assert_eq!(rows * cols, a.len(), "reshape");
        NdArray::from_parts(rows, cols, a.data().to_vec())
    }
    fn gelu(&self, a: &NdArray) -> NdArray {
        a.map(k::gelu)
    }
    fn powf(&self, a: &NdArray, p: f64) -> NdArray {
        a.map(|x| x.powf(p))
    }
    fn exp(&self, a: &NdArray) -> NdArray {
        a.map(f64::exp)
    }
    fn sqrt(&self, a: &NdArray) -> NdArray {
        a.map(f64::sqrt)
    }
    fn clamp_min(&self, a: &NdArray, lo: f64) -> NdArray {
        a.map(|x| x.max(lo))
    }
    fn concat_cols(&self, a: &NdArray, b: &NdArray) -> NdArray {
        k::concat_cols(a, b)
    }
    fn slice_cols(&self, a: &NdArray, start: usize, len: usize) -> NdArray {
        k::slice_cols(a, start, len)
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&self, a: NdArray) -> Var {
        Tape::constant(self, a)
    }
    fn shape(&self, a: &Var) -> [usize; 2] {
        a.shape()
    }
    fn to_array(&self, a: &Var) -> NdArray {
        (*a.value()).clone()
    }
    fn lift<'a>(&self, params: &'a ParamSet) -> Cow<'a, [Var]> {
        Cow::Owned(params.blocks().iter().map(|p| self.constant(p.clone())).collect())
    }
    fn add(&self, a: &Var, b: &Var) -> Var {
        a.add(b)
    }
    fn sub(&self, a: &Var, b: &Var) -> Var {
        a.sub(b)
    }
    fn mul(&self, a: &Var, b: &Var) -> Var {
        a.mul(b)
    }
    fn scale(&self, a: &Var, s: f64) -> Var {
        a.scale(s)
    }
    fn offset(&self, a: &Var, s: f64) -> Var {
        a.offset(s)
    }
    fn matmul(&self, a: &Var, b: &Var, ta: bool, tb: bool) -> Var {
        a.matmul(b, ta, tb)
    }
    fn broadcast_rows(&self, a: &Var, rows: usize) -> Var {
        a.broadcast_rows(rows)
    }
    fn broadcast_cols(&self, a: &Var, cols: usize) -> Var {
        a.broadcast_cols(cols)
    }
    fn sum_rows(&self, a: &Var) -> Var {
        a.sum_rows()
    }
    fn sum_cols(&self, a: &Var) -> Var {
        a.sum_cols()
    }
    fn sum(&self, a: &Var) -> Var {
        a.sum()
    }
    fn reshape(&self, a: &Var, rows: usize, cols: usize) -> Var {
        a.reshape(rows, cols)
    }
    fn gelu(&self, a: &Var) -> Var {
        a.gelu()
    }
    fn powf(&self, a: &Var, p: f64) -> Var {
        a.powf(p)
    }
    fn exp(&self, a: &Var) -> Var {
        a.exp()
    }
    fn sqrt(&self, a: &Var) -> Var {
        a.sqrt()
    }
    fn clamp_min(&self, a: &Var, lo: f64) -> Var {
        a.clamp_min(lo)
    }
    fn concat_cols(&self, a: &Var, b: &Var) -> Var {
        a.concat_cols(b)
    }
    fn slice_cols(&self, a: &Var, start: usize, len: usize) -> Var {
        a.slice_cols(start, len)
    }
}
