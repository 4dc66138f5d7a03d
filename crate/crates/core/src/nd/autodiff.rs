//! Reverse-mode differentiation over matrix-valued primitives.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Two backward
//! passes exist:
//!
//! * [`Tape::backward`] replays adjoints numerically and returns plain arrays;
//! * [`Tape::backward_graph`] records the adjoint computation itself on the
//!   tape, so the returned gradients are again differentiable.
//!
//! Nodes carry an *order*: forward nodes are order 0, nodes produced by a
//! graph backward are order 1. A graph backward may only traverse order-0
//! nodes, which caps nesting at two levels (a gradient of a function that
//! internally takes one vector-Jacobian product).

use std::cell::RefCell;
use std::rc::Rc;

use super::array::NdArray;
use super::kernels as k;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BroadcastRows(usize),
    BroadcastCols(usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    Reshape(usize),
    Gelu(usize),
    GeluD1(usize),
    GeluD2(usize),
    Powf(usize, f64),
    Exp(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Step(usize),
    ConcatCols(usize, usize),
    SliceCols { a: usize, start: usize },
    PadCols { a: usize, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul { .. } => "matmul",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Gelu(_) => "gelu",
            Op::GeluD1(_) => "gelu_d1",
            Op::GeluD2(_) => "gelu_d2",
            Op::Powf(..) => "powf",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Step(_) => "step",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => [Some(a), Some(b)],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Gelu(a)
            | Op::GeluD1(a)
            | Op::GeluD2(a)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::Step(a)
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. } => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<NdArray>,
    order: u8,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    floor: u8,
    nonfinite: Option<(usize, &'static str)>,
}

/// Single-owner recording of a computation. Cloning shares the recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

const SQRT_FLOOR: f64 = 1e-24;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input. Whether it is differentiated is decided by the
    /// `wrt` list of a backward pass, so leaves and constants are the same.
    pub fn leaf(&self, value: NdArray) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&self, value: NdArray) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First primitive that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.inner.borrow().nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&self, op: Op, value: NdArray) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let mut order = inner.floor;
        for i in op.inputs().into_iter().flatten() {
            order = order.max(inner.nodes[i].order);
        }
        if inner.nonfinite.is_none() && !value.is_finite() {
            inner.nonfinite = Some((id, op.name()));
        }
        inner.nodes.push(Node {
            op,
            value: Rc::new(value),
            order,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn value(&self, id: usize) -> Rc<NdArray> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn var(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Nodes `<= out` lying on a path from some `wrt` node to `out`.
    fn needs(&self, out: usize, wrt: &[&Var]) -> Vec<bool> {
        let inner = self.inner.borrow();
        let mut needs = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                needs[w.id] = true;
            }
        }
        for i in 0..=out {
            if !needs[i] {
                needs[i] = inner.nodes[i].op.inputs().into_iter().flatten().any(|j| needs[j]);
            }
        }
        needs
    }

    fn check_same(&self, v: &Var) {
        assert!(Rc::ptr_eq(&self.inner, &v.tape.inner), "variable belongs to a different tape");
    }

    /// Numeric reverse pass. `seed` defaults to 1 for a `[1, 1]` output.
    pub fn backward(&self, out: &Var, seed: Option<&NdArray>, wrt: &[&Var]) -> Result<Vec<NdArray>> {
        self.check_same(out);
        wrt.iter().for_each(|w| self.check_same(w));
        self.check_finite()?;
        let out_shape = out.shape();
        let seed = match seed {
            Some(s) if s.shape() == out_shape => s.clone(),
            Some(s) => return Err(Error::shape("backward", format!("seed {:?} vs output {:?}", s.shape(), out_shape))),
            None if out_shape == [1, 1] => NdArray::scalar(1.0),
            None => return Err(Error::shape("backward", format!("non-scalar output {out_shape:?} needs a seed"))),
        };
        let needs = self.needs(out.id, wrt);
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut adj: Vec<Option<NdArray>> = vec![None; out.id + 1];
        adj[out.id] = Some(seed);
        let mut results: Vec<Option<NdArray>> = vec![None; wrt.len()];

        for i in (0..=out.id).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            for (slot, w) in wrt.iter().enumerate() {
                if w.id == i {
                    results[slot] = Some(g.clone());
                }
            }
            let node = &nodes[i];
            let val = |j: usize| -> &NdArray { &nodes[j].value };
            let mut emit = |j: usize, contrib: NdArray| -> Result<()> {
                if !needs[j] {
                    return Ok(());
                }
                if !contrib.is_finite() {
                    return Err(Error::NonFinite { op: node.op.name(), node: i });
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
                Ok(())
            };
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if needs[a] {
                        emit(a, g.clone())?;
                    }
                    emit(b, g)?;
                }
                Op::Sub(a, b) => {
                    if needs[b] {
                        emit(b, g.map(|v| -v))?;
                    }
                    emit(a, g)?;
                }
                Op::Mul(a, b) => {
                    if needs[a] {
                        emit(a, g.zip_map(val(b), |x, y| x * y))?;
                    }
                    if needs[b] {
                        emit(b, g.zip_map(val(a), |x, y| x * y))?;
                    }
                }
                Op::Scale(a, s) => emit(a, g.map(|v| v * s))?,
                Op::Offset(a) => emit(a, g)?,
                Op::MatMul { a, b, ta, tb } => {
                    if needs[a] {
                        let ga = if ta {
                            k::matmul(val(b), tb, &g, true)
                        } else {
                            k::matmul(&g, false, val(b), !tb)
                        };
                        emit(a, ga)?;
                    }
                    if needs[b] {
                        let gb = if tb {
                            k::matmul(&g, true, val(a), ta)
                        } else {
                            k::matmul(val(a), !ta, &g, false)
                        };
                        emit(b, gb)?;
                    }
                }
                Op::BroadcastRows(a) => emit(a, k::sum_rows(&g))?,
                Op::BroadcastCols(a) => emit(a, k::sum_cols(&g))?,
                Op::SumRows(a) => emit(a, k::broadcast_rows(&g, val(a).rows()))?,
                Op::SumCols(a) => emit(a, k::broadcast_cols(&g, val(a).cols()))?,
                Op::SumAll(a) => {
                    let [r, c] = val(a).shape();
                    emit(a, NdArray::filled(r, c, g.item()))?;
                }
                Op::Reshape(a) => {
                    let [r, c] = val(a).shape();
                    emit(a, NdArray::from_parts(r, c, g.into_data()))?;
                }
                Op::Gelu(a) => emit(a, g.zip_map(val(a), |gv, x| gv * k::gelu_d1(x)))?,
                Op::GeluD1(a) => emit(a, g.zip_map(val(a), |gv, x| gv * k::gelu_d2(x)))?,
                Op::GeluD2(a) => emit(a, g.zip_map(val(a), |gv, x| gv * k::gelu_d3(x)))?,
                Op::Powf(a, p) => emit(a, g.zip_map(val(a), |gv, x| gv * p * x.powf(p - 1.0)))?,
                Op::Exp(a) => emit(a, g.zip_map(&node.value, |gv, y| gv * y))?,
                Op::Sqrt(a) => emit(a, g.zip_map(val(a), |gv, x| gv * 0.5 * x.max(SQRT_FLOOR).powf(-0.5)))?,
                Op::ClampMin(a, lo) => emit(a, g.zip_map(val(a), |gv, x| if x > lo { gv } else { 0.0 }))?,
                Op::Step(_) => {}
                Op::ConcatCols(a, b) => {
                    let ca = val(a).cols();
                    if needs[a] {
                        emit(a, k::slice_cols(&g, 0, ca))?;
                    }
                    if needs[b] {
                        emit(b, k::slice_cols(&g, ca, val(b).cols()))?;
                    }
                }
                Op::SliceCols { a, start } => emit(a, k::pad_cols(&g, start, val(a).cols()))?,
                Op::PadCols { a, start } => emit(a, k::slice_cols(&g, start, val(a).cols()))?,
            }
        }
        Ok(results
            .into_iter()
            .zip(wrt)
            .map(|(r, w)| {
                r.unwrap_or_else(|| {
                    let [rr, cc] = w.shape();
                    NdArray::zeros(rr, cc)
                })
            })
            .collect())
    }

    /// Reverse pass recorded on the tape; the gradients are differentiable.
    pub fn backward_graph(&self, out: &Var, seed: Option<&Var>, wrt: &[&Var]) -> Result<Vec<Var>> {
        self.check_same(out);
        wrt.iter().for_each(|w| self.check_same(w));
        self.check_finite()?;
        let out_shape = out.shape();
        let seed = match seed {
            Some(s) if s.shape() == out_shape => s.clone(),
            Some(s) => return Err(Error::shape("backward_graph", format!("seed {:?} vs output {:?}", s.shape(), out_shape))),
            None if out_shape == [1, 1] => self.constant(NdArray::scalar(1.0)),
            None => return Err(Error::shape("backward_graph", format!("non-scalar output {out_shape:?} needs a seed"))),
        };
        let needs = self.needs(out.id, wrt);
        {
            let inner = self.inner.borrow();
            if (0..=out.id).any(|i| needs[i] && inner.nodes[i].order > 0) {
                return Err(Error::NestingTooDeep);
            }
        }
        let saved_floor = std::mem::replace(&mut self.inner.borrow_mut().floor, 1);
        let result = self.backward_graph_inner(out.id, seed, wrt, &needs);
        self.inner.borrow_mut().floor = saved_floor;
        let grads = result?;
        self.check_finite()?;
        Ok(grads)
    }

    fn backward_graph_inner(&self, out: usize, seed: Var, wrt: &[&Var], needs: &[bool]) -> Result<Vec<Var>> {
        let mut adj: Vec<Option<Var>> = vec![None; out + 1];
        adj[out] = Some(seed);
        let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
        for i in (0..=out).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            for (slot, w) in wrt.iter().enumerate() {
                if w.id == i {
                    results[slot] = Some(g.clone());
                }
            }
            let op = self.inner.borrow().nodes[i].op;
            let v = |j: usize| self.var(j);
            let mut emit = |j: usize, contrib: Var| {
                if !needs[j] {
                    return;
                }
                adj[j] = Some(match adj[j].take() {
                    Some(acc) => acc.add(&contrib),
                    None => contrib,
                });
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if needs[a] {
                        emit(a, g.clone());
                    }
                    emit(b, g);
                }
                Op::Sub(a, b) => {
                    if needs[b] {
                        emit(b, g.scale(-1.0));
                    }
                    emit(a, g);
                }
                Op::Mul(a, b) => {
                    if needs[a] {
                        emit(a, g.mul(&v(b)));
                    }
                    if needs[b] {
                        emit(b, g.mul(&v(a)));
                    }
                }
                Op::Scale(a, s) => emit(a, g.scale(s)),
                Op::Offset(a) => emit(a, g),
                Op::MatMul { a, b, ta, tb } => {
                    if needs[a] {
                        let ga = if ta { v(b).matmul(&g, tb, true) } else { g.matmul(&v(b), false, !tb) };
                        emit(a, ga);
                    }
                    if needs[b] {
                        let gb = if tb { g.matmul(&v(a), true, ta) } else { v(a).matmul(&g, !ta, false) };
                        emit(b, gb);
                    }
                }
                Op::BroadcastRows(a) => emit(a, g.sum_rows()),
                Op::BroadcastCols(a) => emit(a, g.sum_cols()),
                Op::SumRows(a) => {
                    let r = v(a).shape()[0];
                    emit(a, g.broadcast_rows(r));
                }
                Op::SumCols(a) => {
                    let c = v(a).shape()[1];
                    emit(a, g.broadcast_cols(c));
                }
                Op::SumAll(a) => {
                    let [r, c] = v(a).shape();
                    emit(a, g.broadcast_cols(c).broadcast_rows(r));
                }
                Op::Reshape(a) => {
                    let [r, c] = v(a).shape();
                    emit(a, g.reshape(r, c));
                }
                Op::Gelu(a) => emit(a, g.mul(&v(a).push_unary(Op::GeluD1(a), k::gelu_d1))),
                Op::GeluD1(a) => emit(a, g.mul(&v(a).push_unary(Op::GeluD2(a), k::gelu_d2))),
                Op::GeluD2(_) => return Err(Error::NoAdjoint("gelu_d2")),
                Op::Powf(a, p) => emit(a, g.mul(&v(a).powf(p - 1.0).scale(p))),
                Op::Exp(a) => emit(a, g.mul(&v(i))),
                Op::Sqrt(a) => emit(a, g.mul(&v(a).clamp_min(SQRT_FLOOR).powf(-0.5).scale(0.5))),
                Op::ClampMin(a, lo) => emit(a, g.mul(&v(a).step(lo))),
                Op::Step(_) => {}
                Op::ConcatCols(a, b) => {
                    let ca = v(a).shape()[1];
                    if needs[a] {
                        emit(a, g.slice_cols(0, ca));
                    }
                    if needs[b] {
                        let cb = v(b).shape()[1];
                        emit(b, g.slice_cols(ca, cb));
                    }
                }
                Op::SliceCols { a, start } => {
                    let total = v(a).shape()[1];
                    emit(a, g.pad_cols(start, total));
                }
                Op::PadCols { a, start } => {
                    let len = v(a).shape()[1];
                    emit(a, g.slice_cols(start, len));
                }
            }
        }
        Ok(results
            .into_iter()
            .zip(wrt)
            .map(|(r, w)| {
                r.unwrap_or_else(|| {
                    let [rr, cc] = w.shape();
                    self.constant(NdArray::zeros(rr, cc))
                })
            })
            .collect())
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<NdArray> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    /// Nesting order of the node (0 for forward values).
    pub fn order(&self) -> u8 {
        self.tape.inner.borrow().nodes[self.id].order
    }

    fn binary(&self, other: &Var, op: Op, f: impl FnOnce(&NdArray, &NdArray) -> NdArray) -> Var {
        self.tape.check_same(other);
        let (a, b) = (self.value(), other.value());
        self.tape.push(op, f(&a, &b))
    }

    fn push_unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let a = self.value();
        self.tape.push(op, a.map(f))
    }

    fn expect_same_shape(&self, other: &Var, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shapes {a:?} and {b:?} differ");
    }

    pub fn add(&self, other: &Var) -> Var {
        self.expect_same_shape(other, "add");
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.zip_map(b, |x, y| x + y))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.expect_same_shape(other, "sub");
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.zip_map(b, |x, y| x - y))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.expect_same_shape(other, "mul");
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.zip_map(b, |x, y| x * y))
    }

    pub fn scale(&self, s: f64) -> Var {
        self.push_unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn offset(&self, s: f64) -> Var {
        self.push_unary(Op::Offset(self.id), |x| x + s)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// `op(self) · op(other)`.
    pub fn matmul(&self, other: &Var, ta: bool, tb: bool) -> Var {
        self.binary(
            other,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            |a, b| k::matmul(a, ta, b, tb),
        )
    }

    pub fn broadcast_rows(&self, rows: usize) -> Var {
        let a = self.value();
        assert_eq!(a.rows(), 1, "broadcast_rows needs a row vector");
        self.tape.push(Op::BroadcastRows(self.id), k::broadcast_rows(&a, rows))
    }

    pub fn broadcast_cols(&self, cols: usize) -> Var {
        let a = self.value();
        assert_eq!(a.cols(), 1, "broadcast_cols needs a column vector");
        self.tape.push(Op::BroadcastCols(self.id), k::broadcast_cols(&a, cols))
    }

    /// Column sums, `[r, c] -> [1, c]`.
    pub fn sum_rows(&self) -> Var {
        let a = self.value();
        self.tape.push(Op::SumRows(self.id), k::sum_rows(&a))
    }

    /// Row sums, `[r, c] -> [r, 1]`.
    pub fn sum_cols(&self) -> Var {
        let a = self.value();
        self.tape.push(Op::SumCols(self.id), k::sum_cols(&a))
    }

    pub fn sum(&self) -> Var {
        let a = self.value();
        self.tape.push(Op::SumAll(self.id), NdArray::scalar(a.sum()))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var {
        let a = self.value();
        assert_eq!(rows * cols, a.len(), "reshape changes the element count");
        self.tape
            .push(Op::Reshape(self.id), NdArray::from_parts(rows, cols, a.data().to_vec()))
    }

    pub fn gelu(&self) -> Var {
        self.push_unary(Op::Gelu(self.id), k::gelu)
    }

    pub fn powf(&self, p: f64) -> Var {
        self.push_unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn exp(&self) -> Var {
        self.push_unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sqrt(&self) -> Var {
        self.push_unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn clamp_min(&self, lo: f64) -> Var {
        self.push_unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    /// Indicator `x > lo`; carries no gradient.
    pub fn step(&self, lo: f64) -> Var {
        self.push_unary(Op::Step(self.id), |x| if x > lo { 1.0 } else { 0.0 })
    }

    pub fn concat_cols(&self, other: &Var) -> Var {
        self.binary(other, Op::ConcatCols(self.id, other.id), k::concat_cols)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let a = self.value();
        self.tape
            .push(Op::SliceCols { a: self.id, start }, k::slice_cols(&a, start, len))
    }

    pub fn pad_cols(&self, start: usize, total: usize) -> Var {
        let a = self.value();
        self.tape
            .push(Op::PadCols { a: self.id, start }, k::pad_cols(&a, start, total))
    }

    /// Differentiable gradient of this scalar with respect to `wrt`.
    pub fn grad_graph(&self, wrt: &Var) -> Result<Var> {
        Ok(self.tape.backward_graph(self, None, &[wrt])?.remove(0))
    }

    /// Differentiable vector-Jacobian product `cotangentᵀ · ∂self/∂wrt`.
    pub fn vjp_graph(&self, wrt: &Var, cotangent: &NdArray) -> Result<Var> {
        if cotangent.shape() != self.shape() {
            return Err(Error::shape(
                "vjp",
                format!("cotangent {:?} vs output {:?}", cotangent.shape(), self.shape()),
            ));
        }
        let seed = self.tape.constant(cotangent.clone());
        Ok(self.tape.backward_graph(self, Some(&seed), &[wrt])?.remove(0))
    }
}

/// Gradient of a scalar-valued function at `x`.
pub fn grad<F>(f: F, x: &NdArray) -> Result<NdArray>
where
    F: FnOnce(&Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&xv)?;
    if y.shape() != [1, 1] {
        return Err(Error::shape("grad", format!("function returned {:?}, expected a scalar", y.shape())));
    }
    Ok(tape.backward(&y, None, &[&xv])?.remove(0))
}

/// `cotangentᵀ · J_f(x)`.
pub fn vjp<F>(f: F, x: &NdArray, cotangent: &NdArray) -> Result<NdArray>
where
    F: FnOnce(&Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&xv)?;
    if y.shape() != cotangent.shape() {
        return Err(Error::shape(
            "vjp",
            format!("cotangent {:?} vs output {:?}", cotangent.shape(), y.shape()),
        ));
    }
    Ok(tape.backward(&y, Some(cotangent), &[&xv])?.remove(0))
}
