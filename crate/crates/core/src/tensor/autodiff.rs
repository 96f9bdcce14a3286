//! Tape-based reverse-mode autodiff with support for higher-order gradients.
//!
//! Every primitive applied to a [`Var`] appends a node to its [`Tape`]. The
//! backward rules are written in terms of the same `Var` primitives, so when
//! [`grad`] runs with `create_graph = true` the gradient computation lands on
//! the tape too and can be differentiated again.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    PowScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Matmul,
    SumTo,
    BroadcastTo,
    Reshape,
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, end: usize },
    Pad { axis: usize, before: usize },
    Concat { axis: usize, sizes: Vec<usize> },
    Clamp { lo: f64, hi: f64 },
    Im2col(ConvGeom),
    Col2im(ConvGeom),
    Softmax,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Cloning a `Tape` clones the handle, not the recording.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Rc::new(value), Op::Leaf, Vec::new(), true)
    }

    /// An input that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Rc::new(value), Op::Leaf, Vec::new(), false)
    }

    fn constant_rc(&self, value: Rc<Tensor>) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    fn push(&self, value: Rc<Tensor>, op: Op, inputs: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.clone(),
            op,
            inputs,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn record(&self, name: &'static str, op: Op, inputs: &[&Var], value: Tensor) -> Result<Var> {
        if inputs.iter().any(|v| !v.tape.same(self)) {
            return Err(TensorError::TapeMismatch(name));
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        if requires_grad {
            Ok(self.push(Rc::new(value), op, inputs.iter().map(|v| v.id).collect(), true))
        } else {
            Ok(self.push(Rc::new(value), Op::Leaf, Vec::new(), false))
        }
    }
}

/// A tensor participating in a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Rc<Tensor>,
    requires_grad: bool,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &self.requires_grad)
            .field("value", &self.value)
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        self.tape.constant_rc(self.value.clone())
    }

    fn constant(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    fn unary(&self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        self.tape.record(name, op, &[self], value)
    }

    fn binary(&self, name: &'static str, op: Op, other: &Var, value: Tensor) -> Result<Var> {
        self.tape.record(name, op, &[self, other], value)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = kernels::binary("add", &self.value, &other.value, |a, b| a + b)?;
        self.binary("add", Op::Add, other, v)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = kernels::binary("sub", &self.value, &other.value, |a, b| a - b)?;
        self.binary("sub", Op::Sub, other, v)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = kernels::binary("mul", &self.value, &other.value, |a, b| a * b)?;
        self.binary("mul", Op::Mul, other, v)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let v = kernels::binary("div", &self.value, &other.value, |a, b| a / b)?;
        self.binary("div", Op::Div, other, v)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary("neg", Op::Neg, self.value.map(|x| -x))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary("add_scalar", Op::AddScalar, self.value.map(|x| x + c))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var> {
        self.unary("mul_scalar", Op::MulScalar(c), self.value.map(|x| x * c))
    }

    pub fn pow_scalar(&self, p: f64) -> Result<Var> {
        let v = if p == 2.0 {
            self.value.map(|x| x * x)
        } else {
            self.value.map(|x| x.powf(p))
        };
        self.unary("pow", Op::PowScalar(p), v)
    }

    pub fn square(&self) -> Result<Var> {
        self.pow_scalar(2.0)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", Op::Exp, self.value.map(f64::exp))
    }

    pub fn log(&self) -> Result<Var> {
        self.unary("log", Op::Log, self.value.map(f64::ln))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary("sigmoid", Op::Sigmoid, self.value.map(kernels::sigmoid))
    }

    /// Tanh-form GELU, `x · σ(2·√(2/π)·(x + 0.044715x³))`, built from primitives
    /// so it differentiates to any order.
    pub fn gelu(&self) -> Result<Var> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let cube = self.pow_scalar(3.0)?.mul_scalar(0.044715)?;
        let u = self.add(&cube)?.mul_scalar(2.0 * C)?;
        self.mul(&u.sigmoid()?)
    }

    /// `a @ b` for 2-D operands, or batched over a shared leading axis for 3-D.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = kernels::matmul(&self.value, &other.value)?;
        self.binary("matmul", Op::Matmul, other, v)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var> {
        let nd = self.value.ndim();
        if nd < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs at least 2 axes, got {:?}", self.shape()),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let v = kernels::permute(&self.value, axes)?;
        self.unary("permute", Op::Permute(axes.to_vec()), v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let v = self.value.reshape(shape)?;
        self.unary("reshape", Op::Reshape, v)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let v = kernels::broadcast_to(&self.value, shape)?;
        self.unary("broadcast_to", Op::BroadcastTo, v)
    }

    /// Sums over broadcast axes until the shape is `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let v = kernels::sum_to(&self.value, shape)?;
        self.unary("sum", Op::SumTo, v)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let v = Tensor::scalar(self.value.sum());
        self.unary("sum", Op::SumTo, v)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        if axis >= self.value.ndim() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {} out of range for {:?}", axis, self.shape()),
            });
        }
        let shape = kernels::keepdim_shape(self.shape(), axis);
        let v = kernels::sum_to(&self.value, &shape)?;
        self.unary("sum", Op::SumTo, v)
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value.numel() as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis)?.mul_scalar(1.0 / n)
    }

    /// Population variance over all entries.
    pub fn variance(&self) -> Result<Var> {
        let centered = self.sub(&self.mean()?)?;
        centered.square()?.mean()
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = kernels::slice(&self.value, axis, start, end)?;
        self.unary("slice", Op::Slice { axis, start, end }, v)
    }

    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Var> {
        let v = kernels::pad(&self.value, axis, before, after)?;
        self.unary("pad", Op::Pad { axis, before }, v)
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let vals: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let v = kernels::concat(&vals, axis)?;
        let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
        let refs: Vec<&Var> = parts.iter().collect();
        first.tape.record("concat", Op::Concat { axis, sizes }, &refs, v)
    }

    /// Clamps into `[lo, hi]`. The gradient is passed through inside the range
    /// (boundaries included) and zeroed outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                msg: format!("lo {} > hi {}", lo, hi),
            });
        }
        let v = self.value.map(|x| x.clamp(lo, hi));
        self.unary("clamp", Op::Clamp { lo, hi }, v)
    }

    fn im2col(&self, geom: ConvGeom) -> Result<Var> {
        let v = kernels::im2col(&self.value, &geom)?;
        self.unary("im2col", Op::Im2col(geom), v)
    }

    fn col2im(&self, geom: ConvGeom) -> Result<Var> {
        let v = kernels::col2im(&self.value, &geom)?;
        self.unary("col2im", Op::Col2im(geom), v)
    }

    /// 2-D cross-correlation of an `N×C×H×W` input with an `O×C×k×k` kernel.
    pub fn conv2d(&self, weight: &Var, stride: usize, padding: usize) -> Result<Var> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || self.shape().len() != 4 || ws[1] != self.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (o, k) = (ws[0], ws[2]);
        let geom = ConvGeom::from_input(self.shape(), k, stride, padding)?;
        let (ho, wo) = geom.out_hw();
        let cols = self.im2col(geom)?;
        let wm = weight.reshape(&[o, geom.c * k * k])?.transpose()?;
        cols.matmul(&wm)?
            .reshape(&[geom.n, ho, wo, o])?
            .permute(&[0, 3, 1, 2])
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self) -> Result<Var> {
        let v = kernels::softmax_last(&self.value)?;
        self.unary("softmax", Op::Softmax, v)
    }

    /// `log(softmax(x))` over the last axis via a detached row max.
    pub fn log_softmax(&self) -> Result<Var> {
        let last = self.value.ndim().checked_sub(1).ok_or(TensorError::InvalidArgument {
            op: "log_softmax",
            msg: "scalar input".into(),
        })?;
        let m = self.constant(kernels::max_last_keepdim(&self.value)?);
        let z = self.sub(&m)?;
        let lse = z.exp()?.sum_axis(last)?.log()?;
        z.sub(&lse)
    }
}

struct Ctx<'a> {
    tape: &'a Tape,
    inputs: &'a [usize],
    input_rg: Vec<bool>,
    input_vals: Vec<Rc<Tensor>>,
    out_id: usize,
    out_val: Rc<Tensor>,
    create_graph: bool,
}

impl Ctx<'_> {
    fn input(&self, k: usize) -> Var {
        if self.create_graph {
            Var {
                tape: self.tape.clone(),
                id: self.inputs[k],
                value: self.input_vals[k].clone(),
                requires_grad: self.input_rg[k],
            }
        } else {
            self.tape.constant_rc(self.input_vals[k].clone())
        }
    }

    fn output(&self) -> Var {
        if self.create_graph {
            Var {
                tape: self.tape.clone(),
                id: self.out_id,
                value: self.out_val.clone(),
                requires_grad: true,
            }
        } else {
            self.tape.constant_rc(self.out_val.clone())
        }
    }

    fn shape(&self, k: usize) -> &[usize] {
        self.input_vals[k].shape()
    }
}

fn backward(ctx: &Ctx<'_>, op: &Op, g: &Var) -> Result<Vec<Var>> {
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![g.sum_to(ctx.shape(0))?, g.sum_to(ctx.shape(1))?],
        Op::Sub => vec![g.sum_to(ctx.shape(0))?, g.neg()?.sum_to(ctx.shape(1))?],
        Op::Mul => vec![
            g.mul(&ctx.input(1))?.sum_to(ctx.shape(0))?,
            g.mul(&ctx.input(0))?.sum_to(ctx.shape(1))?,
        ],
        Op::Div => {
            let b = ctx.input(1);
            vec![
                g.div(&b)?.sum_to(ctx.shape(0))?,
                g.mul(&ctx.output())?.div(&b)?.neg()?.sum_to(ctx.shape(1))?,
            ]
        }
        Op::Neg => vec![g.neg()?],
        Op::AddScalar => vec![g.clone()],
        Op::MulScalar(c) => vec![g.mul_scalar(*c)?],
        Op::PowScalar(p) => {
            let d = if *p == 2.0 {
                ctx.input(0).mul_scalar(2.0)?
            } else {
                ctx.input(0).pow_scalar(p - 1.0)?.mul_scalar(*p)?
            };
            vec![g.mul(&d)?]
        }
        Op::Exp => vec![g.mul(&ctx.output())?],
        Op::Log => vec![g.div(&ctx.input(0))?],
        Op::Sigmoid => {
            let s = ctx.output();
            let ds = s.mul(&s.neg()?.add_scalar(1.0)?)?;
            vec![g.mul(&ds)?]
        }
        Op::Matmul => {
            let (a, b) = (ctx.input(0), ctx.input(1));
            vec![g.matmul(&b.transpose()?)?, a.transpose()?.matmul(g)?]
        }
        Op::SumTo => vec![g.broadcast_to(ctx.shape(0))?],
        Op::BroadcastTo => vec![g.sum_to(ctx.shape(0))?],
        Op::Reshape => vec![g.reshape(ctx.shape(0))?],
        Op::Permute(axes) => vec![g.permute(&kernels::inverse_permutation(axes))?],
        Op::Slice { axis, start, end } => {
            let dim = ctx.shape(0)[*axis];
            vec![g.pad(*axis, *start, dim - end)?]
        }
        Op::Pad { axis, before } => {
            let dim = ctx.shape(0)[*axis];
            vec![g.slice(*axis, *before, before + dim)?]
        }
        Op::Concat { axis, sizes } => {
            let mut off = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for &s in sizes {
                out.push(g.slice(*axis, off, off + s)?);
                off += s;
            }
            out
        }
        Op::Clamp { lo, hi } => {
            let mask = ctx.input_vals[0].map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
            vec![g.mul(&ctx.tape.constant(mask))?]
        }
        Op::Im2col(geom) => vec![g.col2im(*geom)?],
        Op::Col2im(geom) => vec![g.im2col(*geom)?],
        Op::Softmax => {
            let s = ctx.output();
            let last = s.value().ndim() - 1;
            let dot = g.mul(&s)?.sum_axis(last)?;
            vec![s.mul(&g.sub(&dot)?)?]
        }
    })
}

/// Gradients of a one-element `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned vars are recorded on the tape and can be
/// fed into further computation and differentiated again; otherwise they are
/// constants.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    if output.value.numel() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    for w in wrt {
        if !w.tape.same(&output.tape) {
            return Err(TensorError::TapeMismatch("grad"));
        }
        if !w.requires_grad {
            return Err(TensorError::NotDifferentiable(w.id));
        }
    }
    let tape = output.tape.clone();
    let n = output.id + 1;
    let (inputs_of, rg): (Vec<Vec<usize>>, Vec<bool>) = {
        let nodes = tape.nodes.borrow();
        nodes[..n]
            .iter()
            .map(|nd| (nd.inputs.clone(), nd.requires_grad))
            .unzip()
    };

    let mut from_wrt = vec![false; n];
    for w in wrt {
        if w.id < n {
            from_wrt[w.id] = true;
        }
    }
    for i in 0..n {
        if !from_wrt[i] && rg[i] && inputs_of[i].iter().any(|&j| from_wrt[j]) {
            from_wrt[i] = true;
        }
    }
    let mut to_out = vec![false; n];
    to_out[output.id] = true;
    for i in (0..n).rev() {
        if to_out[i] {
            for &j in &inputs_of[i] {
                to_out[j] = true;
            }
        }
    }
    let needed: Vec<bool> = from_wrt.iter().zip(&to_out).map(|(a, b)| *a && *b).collect();
    for w in wrt {
        if w.id >= n || !needed[w.id] {
            return Err(TensorError::Unreachable(w.id));
        }
    }

    let mut adj: Vec<Option<Var>> = vec![None; n];
    adj[output.id] = Some(tape.constant(Tensor::ones(output.shape())));
    for i in (0..n).rev() {
        if !needed[i] || inputs_of[i].is_empty() {
            continue;
        }
        let Some(g) = adj[i].clone() else { continue };
        let (op, input_vals, input_rg, out_val) = {
            let nodes = tape.nodes.borrow();
            let nd = &nodes[i];
            (
                nd.op.clone(),
                nd.inputs.iter().map(|&j| nodes[j].value.clone()).collect(),
                nd.inputs.iter().map(|&j| nodes[j].requires_grad).collect(),
                nd.value.clone(),
            )
        };
        let ctx = Ctx {
            tape: &tape,
            inputs: &inputs_of[i],
            input_rg,
            input_vals,
            out_id: i,
            out_val,
            create_graph,
        };
        let grads = backward(&ctx, &op, &g)?;
        for (&j, gj) in inputs_of[i].iter().zip(grads) {
            if !needed[j] {
                continue;
            }
            adj[j] = Some(match adj[j].take() {
                None => gj,
                Some(prev) => prev.add(&gj)?,
            });
        }
    }
    Ok(wrt
        .iter()
        .map(|w| {
            let g = adj[w.id].clone().expect("reachable input has an adjoint");
            if create_graph {
                g
            } else {
                g.detach()
            }
        })
        .collect())
}
