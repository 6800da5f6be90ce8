//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable operation as it executes. Values
//! are computed eagerly; [`Tape::backward`] then walks the record in exact
//! reverse order, accumulating gradients into every node that depends on a
//! parameter. A tape supports one backward pass.
//!
//! ```
//! use pcsr_core::autodiff::Tape;
//! use pcsr_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let loss = x.square().unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A fixed linear map `R^input_len -> R^output_len` usable inside a tape.
///
/// Applied to the trailing axis of its argument; leading axes are batch axes.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    /// `y = A x`, overwriting `y`.
    fn apply_into(&self, x: &[f64], y: &mut [f64]);
    /// `x = Aᵀ y`, overwriting `x`.
    fn apply_adjoint_into(&self, y: &[f64], x: &mut [f64]);
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    BinarizeSt(usize),
    Sum(usize),
    SumAxis { a: usize, axis: usize },
    Expand(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(usize),
    Concat { a: usize, b: usize, axis: usize },
    Tile { a: usize },
    Linear {
        a: usize,
        op: Rc<dyn LinearOperator>,
        adjoint: bool,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Concat { a, b, .. } => vec![a, b],
            AddScalar(a) | MulScalar(a, _) | Relu(a) | Sigmoid(a) | Square(a) | BinarizeSt(a)
            | Sum(a) | Expand(a) | Reshape(a) | Upsample2x(a) => vec![a],
            SumAxis { a, .. } | Tile { a } | Linear { a, .. } => vec![a],
            Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut p = vec![input, kernel];
                p.extend(bias);
                p
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarOutput(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of a backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if it is a parameter leaf the loss depends on.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

/// Evaluates scalar `f` at `inputs` and returns its value and the gradient
/// with respect to every input.
pub fn value_and_grad<F>(f: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out
        .value()
        .item()
        .ok_or_else(|| Error::NonScalarOutput(out.shape()))?;
    let grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let needs = |p: usize| nodes[p].requires_grad;
    let val = |p: usize| nodes[p].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
            if needs(a) {
                accumulate(grads, a, g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi)
                });
            }
            if needs(b) {
                let n = nodes[b].value.numel();
                accumulate(grads, b, n, |gb| {
                    if n == 1 {
                        gb[0] += sign * g.iter().sum::<f64>();
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, &gi)| *x += sign * gi);
                    }
                });
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let scalar_b = bv.len() == 1;
            if needs(a) {
                accumulate(grads, a, g.len(), |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * if scalar_b { bv[0] } else { bv[i] };
                    }
                });
            }
            if needs(b) {
                accumulate(grads, b, bv.len(), |gb| {
                    if scalar_b {
                        gb[0] += g.iter().zip(av).map(|(gi, ai)| gi * ai).sum::<f64>();
                    } else {
                        for (i, x) in gb.iter_mut().enumerate() {
                            *x += g[i] * av[i];
                        }
                    }
                });
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            let scalar_b = bv.len() == 1;
            let bi = |i: usize| if scalar_b { bv[0] } else { bv[i] };
            if needs(a) {
                accumulate(grads, a, g.len(), |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / bi(i);
                    }
                });
            }
            if needs(b) {
                accumulate(grads, b, bv.len(), |gb| {
                    for i in 0..g.len() {
                        let d = -g[i] * av[i] / (bi(i) * bi(i));
                        if scalar_b {
                            gb[0] += d;
                        } else {
                            gb[i] += d;
                        }
                    }
                });
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            accumulate(grads, a, g.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi)
            });
        }
        &Op::MulScalar(a, s) => {
            accumulate(grads, a, g.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += s * gi)
            });
        }
        &Op::Relu(a) => {
            let av = val(a);
            accumulate(grads, a, g.len(), |ga| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        &Op::Sigmoid(a) => {
            let out = node.value.data();
            accumulate(grads, a, g.len(), |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            });
        }
        &Op::Square(a) => {
            let av = val(a);
            accumulate(grads, a, g.len(), |ga| {
                for i in 0..g.len() {
                    ga[i] += 2.0 * av[i] * g[i];
                }
            });
        }
        &Op::BinarizeSt(a) => {
            let av = val(a);
            accumulate(grads, a, g.len(), |ga| {
                for i in 0..g.len() {
                    let s = sigmoid(av[i]);
                    ga[i] += g[i] * s * (1.0 - s);
                }
            });
        }
        &Op::Sum(a) => {
            let n = nodes[a].value.numel();
            accumulate(grads, a, n, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        &Op::SumAxis { a, axis } => {
            let shape = nodes[a].value.shape();
            let (outer, len, inner) = split_axis(shape, axis);
            accumulate(grads, a, outer * len * inner, |ga| {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..][..inner];
                        let src = &g[o * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(x, &gi)| *x += gi);
                    }
                }
            });
        }
        &Op::Expand(a) => {
            let in_shape = nodes[a].value.shape();
            let out_shape = node.value.shape();
            accumulate(grads, a, nodes[a].value.numel(), |ga| {
                for (o, &gi) in g.iter().enumerate() {
                    ga[broadcast_source(o, out_shape, in_shape)] += gi;
                }
            });
        }
        &Op::MatMul(a, b) => {
            let (ash, bsh) = (nodes[a].value.shape(), nodes[b].value.shape());
            let (m, k, n) = (ash[0], ash[1], bsh[1]);
            if needs(a) {
                // da = g · bᵀ
                accumulate(grads, a, m * k, |ga| {
                    gemm(m, n, k, g, false, val(b), true, ga, 1.0)
                });
            }
            if needs(b) {
                // db = aᵀ · g
                accumulate(grads, b, k * n, |gb| {
                    gemm(k, m, n, val(a), true, g, false, gb, 1.0)
                });
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        } => conv2d_backward(nodes, *input, *kernel, *bias, geom, cols, g, grads),
        &Op::Upsample2x(a) => {
            let shape = nodes[a].value.shape();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let planes = nodes[a].value.numel() / (h * w);
            accumulate(grads, a, planes * h * w, |ga| {
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[p * h * w + (y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
            });
        }
        &Op::Concat { a, b, axis } => {
            let out_shape = node.value.shape();
            let (outer, _, inner) = split_axis(out_shape, axis);
            let la = nodes[a].value.shape()[axis] * inner;
            let lb = nodes[b].value.shape()[axis] * inner;
            if needs(a) {
                accumulate(grads, a, outer * la, |ga| {
                    for o in 0..outer {
                        let src = &g[o * (la + lb)..][..la];
                        ga[o * la..][..la]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &gi)| *x += gi);
                    }
                });
            }
            if needs(b) {
                accumulate(grads, b, outer * lb, |gb| {
                    for o in 0..outer {
                        let src = &g[o * (la + lb) + la..][..lb];
                        gb[o * lb..][..lb]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &gi)| *x += gi);
                    }
                });
            }
        }
        &Op::Tile { a } => {
            let ish = nodes[a].value.shape();
            let osh = node.value.shape();
            let r = ish.len();
            let (fy, fx) = (ish[r - 2], ish[r - 1]);
            let (ph, pw) = (osh[r - 2], osh[r - 1]);
            let planes = nodes[a].value.numel() / (fy * fx);
            accumulate(grads, a, planes * fy * fx, |ga| {
                for p in 0..planes {
                    let src = &g[p * ph * pw..][..ph * pw];
                    let dst = &mut ga[p * fy * fx..][..fy * fx];
                    for y in 0..ph {
                        for x in 0..pw {
                            dst[(y % fy) * fx + x % fx] += src[y * pw + x];
                        }
                    }
                }
            });
        }
        Op::Linear { a, op, adjoint } => {
            let (n_in, n_out) = if *adjoint {
                (op.output_len(), op.input_len())
            } else {
                (op.input_len(), op.output_len())
            };
            let batches = g.len() / n_out;
            let mut tmp = vec![0.0; n_in];
            accumulate(grads, *a, batches * n_in, |ga| {
                for bi in 0..batches {
                    let gs = &g[bi * n_out..][..n_out];
                    if *adjoint {
                        op.apply_into(gs, &mut tmp);
                    } else {
                        op.apply_adjoint_into(gs, &mut tmp);
                    }
                    ga[bi * n_in..][..n_in]
                        .iter_mut()
                        .zip(&tmp)
                        .for_each(|(x, &t)| *x += t);
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    input: usize,
    kernel: usize,
    bias: Option<usize>,
    geom: &ConvGeom,
    cols: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let plen = geom.patch_len();
    let ncols = geom.cols();
    let hw = geom.h_out * geom.w_out;
    // g is [B, Co, HoWo]; gemm wants [Co, B·HoWo]
    let gmat: Vec<f64> = if geom.batch == 1 {
        g.to_vec()
    } else {
        let mut m = vec![0.0; g.len()];
        for b in 0..geom.batch {
            for c in 0..geom.c_out {
                m[c * ncols + b * hw..][..hw].copy_from_slice(&g[(b * geom.c_out + c) * hw..][..hw]);
            }
        }
        m
    };
    if let Some(bias) = bias.filter(|&b| nodes[b].requires_grad) {
        accumulate(grads, bias, geom.c_out, |gb| {
            for c in 0..geom.c_out {
                gb[c] += gmat[c * ncols..][..ncols].iter().sum::<f64>();
            }
        });
    }
    if nodes[kernel].requires_grad {
        accumulate(grads, kernel, geom.c_out * plen, |gk| {
            gemm(geom.c_out, ncols, plen, &gmat, false, cols, true, gk, 1.0)
        });
    }
    if nodes[input].requires_grad {
        let mut dcols = vec![0.0; plen * ncols];
        gemm(
            plen,
            geom.c_out,
            ncols,
            nodes[kernel].value.data(),
            true,
            &gmat,
            false,
            &mut dcols,
            0.0,
        );
        accumulate(grads, input, geom.batch * geom.c_in * geom.h * geom.w, |gi| {
            col2im(&dcols, geom, gi)
        });
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, either stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        c_in,
        h,
        w,
        k,
        stride,
        padding,
        h_out,
        w_out,
        ..
    } = *geom;
    let ncols = geom.cols();
    let mut cols = vec![0.0; geom.patch_len() * ncols];
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ncols..][..ncols];
                for b in 0..batch {
                    let plane = &x[(b * c_in + ci) * h * w..][..h * w];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[(b * h_out + oy) * w_out..][..w_out];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geom: &ConvGeom, out: &mut [f64]) {
    let ConvGeom {
        batch,
        c_in,
        h,
        w,
        k,
        stride,
        padding,
        h_out,
        w_out,
        ..
    } = *geom;
    let ncols = geom.cols();
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ncols..][..ncols];
                for b in 0..batch {
                    let plane = &mut out[(b * c_in + ci) * h * w..][..h * w];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[(b * h_out + oy) * w_out..][..w_out];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// (product of axes before, extent of axis, product of axes after)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Flat index into `in_shape` that feeds flat output index `o` of a broadcast.
fn broadcast_source(mut o: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    let mut src = 0;
    let mut stride = 1;
    for d in (0..out_shape.len()).rev() {
        let coord = o % out_shape[d];
        o /= out_shape[d];
        if in_shape[d] != 1 {
            src += coord * stride;
        }
        stride *= in_shape[d];
    }
    src
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("variables belong to different tapes"))
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let bd = b.data();
            if a.shape() != b.shape() && b.numel() != 1 {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = if bd.len() == 1 && a.numel() != 1 {
                a.data().iter().map(|&x| f(x, bd[0])).collect()
            } else {
                a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            };
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(name, value, op)
    }

    /// Elementwise sum; `other` may be a one-element tensor.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::DivisionByZero);
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map("add_scalar", |x| x + s)?;
        self.tape.push("add_scalar", v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map("mul_scalar", |x| x * s)?;
        self.tape.push("mul_scalar", v, Op::MulScalar(self.id, s))
    }

    pub fn div_scalar(self, s: f64) -> Result<Var<'t>> {
        if s == 0.0 {
            return Err(Error::DivisionByZero);
        }
        self.mul_scalar(1.0 / s)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.value().map("relu", |x| x.max(0.0))?;
        self.tape.push("relu", v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = self.value().map("sigmoid", sigmoid)?;
        self.tape.push("sigmoid", v, Op::Sigmoid(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        let v = self.value().map("square", |x| x * x)?;
        self.tape.push("square", v, Op::Square(self.id))
    }

    /// Hard threshold at `sigmoid(x) >= 0.5` forward, `sigmoid'` backward.
    pub fn binarize_st(self) -> Result<Var<'t>> {
        let v = self
            .value()
            .map("binarize_st", |x| if x >= 0.0 { 1.0 } else { 0.0 })?;
        self.tape.push("binarize_st", v, Op::BinarizeSt(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push("sum", v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    /// Reduces `axis` away; a rank-1 input yields shape `[1]`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if axis >= a.ndim() {
                return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", a.shape())));
            }
            let (outer, len, inner) = split_axis(a.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &a.data()[(o * len + l) * inner..][..inner];
                    out[o * inner..][..inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, &s)| *x += s);
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, out)
        };
        self.tape.push("sum_axis", value, Op::SumAxis { a: self.id, axis })
    }

    /// Broadcasts singleton axes to `shape` (equal rank required).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let ok = a.ndim() == shape.len()
                && a
                    .shape()
                    .iter()
                    .zip(shape)
                    .all(|(&s, &t)| s == t || s == 1);
            if !ok {
                return Err(Error::shape("expand", format!("{:?} -> {shape:?}", a.shape())));
            }
            let numel = shape.iter().product();
            let data = (0..numel)
                .map(|o| a.data()[broadcast_source(o, shape, a.shape())])
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        self.tape.push("expand", value, Op::Expand(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape(self.id))
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let (ash, bsh) = (a.shape(), b.shape());
            if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
                return Err(Error::shape("matmul", format!("{ash:?} · {bsh:?}")));
            }
            let (m, k, n) = (ash[0], ash[1], bsh[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            Tensor::from_parts(vec![m, n], c)
        };
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id))
    }

    /// 2-D cross-correlation of `[C,H,W]` or `[B,C,H,W]` input with
    /// `[Co,C,k,k]` kernels; output extent `(h + 2·padding − k)/stride + 1`
    /// rounded down.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        let (value, geom, cols) = {
            let x = self.value();
            let kt = kernel.value();
            let (xs, ks) = (x.shape(), kt.shape());
            let batched = match xs.len() {
                3 => false,
                4 => true,
                _ => return Err(Error::shape("conv2d", format!("input rank {}", xs.len()))),
            };
            let (batch, rest) = if batched { (xs[0], &xs[1..]) } else { (1, xs) };
            let (c_in, h, w) = (rest[0], rest[1], rest[2]);
            if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] || ks[2] % 2 == 0 {
                return Err(Error::shape("conv2d", format!("kernel {ks:?} for input {xs:?}")));
            }
            if stride == 0 {
                return Err(Error::invalid("conv2d stride must be positive"));
            }
            let (c_out, k) = (ks[0], ks[2]);
            if h + 2 * padding < k || w + 2 * padding < k {
                return Err(Error::shape("conv2d", format!("kernel {k} exceeds padded input {xs:?}")));
            }
            if let Some(b) = &bias {
                if b.value().shape() != [c_out] {
                    return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
                }
            }
            let geom = ConvGeom {
                batch,
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                padding,
                h_out: (h + 2 * padding - k) / stride + 1,
                w_out: (w + 2 * padding - k) / stride + 1,
            };
            let cols = im2col(x.data(), &geom);
            let ncols = geom.cols();
            let mut out = vec![0.0; c_out * ncols];
            gemm(c_out, geom.patch_len(), ncols, kt.data(), false, &cols, false, &mut out, 0.0);
            if let Some(b) = &bias {
                let bv = b.value();
                for c in 0..c_out {
                    let bc = bv.data()[c];
                    out[c * ncols..][..ncols].iter_mut().for_each(|v| *v += bc);
                }
            }
            let hw = geom.h_out * geom.w_out;
            let data = if batch == 1 {
                out
            } else {
                let mut d = vec![0.0; out.len()];
                for b in 0..batch {
                    for c in 0..c_out {
                        d[(b * c_out + c) * hw..][..hw].copy_from_slice(&out[c * ncols + b * hw..][..hw]);
                    }
                }
                d
            };
            let shape = if batched {
                vec![batch, c_out, geom.h_out, geom.w_out]
            } else {
                vec![c_out, geom.h_out, geom.w_out]
            };
            (Tensor::from_parts(shape, data), geom, cols)
        };
        self.tape.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                cols,
            },
        )
    }

    /// Nearest-neighbour 2× upsampling of the two trailing axes.
    pub fn upsample_nearest2x(self) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if s.len() < 2 {
                return Err(Error::shape("upsample", format!("{s:?}")));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = a.numel() / (h * w);
            let mut out = vec![0.0; planes * 4 * h * w];
            for p in 0..planes {
                let src = &a.data()[p * h * w..][..h * w];
                let dst = &mut out[p * 4 * h * w..][..4 * h * w];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 2] *= 2;
            shape[r - 1] *= 2;
            Tensor::from_parts(shape, out)
        };
        self.tape.push("upsample", value, Op::Upsample2x(self.id))
    }

    /// Joins along `axis`; all other extents must agree.
    pub fn concat(self, other: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            let compatible = sa.len() == sb.len()
                && axis < sa.len()
                && (0..sa.len()).all(|d| d == axis || sa[d] == sb[d]);
            if !compatible {
                return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?} on axis {axis}")));
            }
            let (outer, _, inner) = split_axis(sa, axis);
            let (la, lb) = (sa[axis] * inner, sb[axis] * inner);
            let mut out = Vec::with_capacity(outer * (la + lb));
            for o in 0..outer {
                out.extend_from_slice(&a.data()[o * la..][..la]);
                out.extend_from_slice(&b.data()[o * lb..][..lb]);
            }
            let mut shape = sa.to_vec();
            shape[axis] += sb[axis];
            Tensor::from_parts(shape, out)
        };
        self.tape.push(
            "concat",
            value,
            Op::Concat {
                a: self.id,
                b: other.id,
                axis,
            },
        )
    }

    /// Concatenation along the channel axis of `[C,H,W]` / `[B,C,H,W]`.
    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        let rank = self.value().ndim();
        if rank < 3 {
            return Err(Error::shape("concat_channels", format!("rank {rank}")));
        }
        self.concat(other, rank - 3)
    }

    /// Periodically repeats the two trailing axes up to `(rows, cols)`.
    pub fn tile(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if s.len() < 2 || rows == 0 || cols == 0 {
                return Err(Error::shape("tile", format!("{s:?} -> ({rows}, {cols})")));
            }
            let r = s.len();
            let (fy, fx) = (s[r - 2], s[r - 1]);
            let planes = a.numel() / (fy * fx);
            let mut out = Vec::with_capacity(planes * rows * cols);
            for p in 0..planes {
                let src = &a.data()[p * fy * fx..][..fy * fx];
                for y in 0..rows {
                    let srow = &src[(y % fy) * fx..][..fx];
                    out.extend((0..cols).map(|x| srow[x % fx]));
                }
            }
            let mut shape = s.to_vec();
            shape[r - 2] = rows;
            shape[r - 1] = cols;
            Tensor::from_parts(shape, out)
        };
        self.tape.push("tile", value, Op::Tile { a: self.id })
    }

    /// Applies `op` (or its adjoint) to the trailing axis.
    pub fn linear(self, op: Rc<dyn LinearOperator>, adjoint: bool) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let (n_in, n_out) = if adjoint {
                (op.output_len(), op.input_len())
            } else {
                (op.input_len(), op.output_len())
            };
            let s = a.shape();
            if s[s.len() - 1] != n_in {
                return Err(Error::shape("linear", format!("trailing axis of {s:?} is not {n_in}")));
            }
            let batches = a.numel() / n_in;
            let mut out = vec![0.0; batches * n_out];
            for b in 0..batches {
                let x = &a.data()[b * n_in..][..n_in];
                let y = &mut out[b * n_out..][..n_out];
                if adjoint {
                    op.apply_adjoint_into(x, y);
                } else {
                    op.apply_into(x, y);
                }
            }
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = n_out;
            Tensor::from_parts(shape, out)
        };
        self.tape.push(
            "linear",
            value,
            Op::Linear {
                a: self.id,
                op,
                adjoint,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference gradient of a scalar function of several tensors.
    fn numeric_grad(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
        step: f64,
    ) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = plus[which].data().to_vec();
            d[i] += step;
            plus[which] = t(inputs[which].shape(), &d);
            let mut d = minus[which].data().to_vec();
            d[i] -= step;
            minus[which] = t(inputs[which].shape(), &d);
            out.push((f(&plus) - f(&minus)) / (2.0 * step));
        }
        out
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        let scale = numeric.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(
                (a - n).abs() <= rel * scale,
                "entry {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        assert_eq!(a.mul(b).unwrap().value().data(), &[4.0, 10.0, 18.0]);
        let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(a.add(c).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(z), Err(Error::DivisionByZero)));
        assert!(matches!(a.div_scalar(0.0), Err(Error::DivisionByZero)));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (v, g) = value_and_grad(|_, x| x[0].square()?.sum(), &[t(&[2], &[1.0, 2.0])]).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn value_and_grad_examples() {
        let (_, g) = value_and_grad(|_, x| x[0].sum(), &[Tensor::zeros(&[2, 3])]).unwrap();
        assert_eq!(g[0], Tensor::full(&[2, 3], 1.0));
        let (v, g) = value_and_grad(|_, x| x[0].square()?.mean(), &[t(&[1], &[3.0])]).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let r = value_and_grad(|_, x| x[0].relu(), &[Tensor::zeros(&[3])]);
        assert!(matches!(r, Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn second_backward_fails() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.square().unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert!(matches!(x.square(), Err(Error::TapeConsumed)));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(r.matmul(r).is_err());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let w = random(&[5, 3], &mut rng);
        let f = |x: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let p = tape.constant(x[0].clone()).matmul(tape.constant(x[1].clone())).unwrap();
            let v = p.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
            let r = v.value().item().unwrap();
            r
        };
        let (_, g) = value_and_grad(
            |tape, x| x[0].matmul(x[1])?.mul(tape.constant(w.clone()))?.sum(),
            &[a.clone(), b.clone()],
        )
        .unwrap();
        let inputs = [a, b];
        assert_close(g[0].data(), &numeric_grad(&f, &inputs, 0, 1e-5), 1e-6);
        assert_close(g[1].data(), &numeric_grad(&f, &inputs, 1, 1e-5), 1e-6);
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (m, k, n) in [(1, 1, 1), (3, 7, 2), (9, 5, 11)] {
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let tape = Tape::new();
            let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
            for (x, y) in c.value().data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, ks) = (k.shape()[0], k.shape()[2]);
        let ho = (h + 2 * pad - ks) / stride + 1;
        let wo = (w + 2 * pad - ks) / stride + 1;
        Tensor::from_fn(&[co, ho, wo], |idx| {
            let (o, oy, ox) = (idx / (ho * wo), (idx / wo) % ho, idx % wo);
            let mut s = bias[o];
            for c in 0..ci {
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += x.data()[(c * h + iy as usize) * w + ix as usize]
                                * k.data()[((o * ci + c) * ks + ky) * ks + kx];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv2d_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let zero = tape.constant(t(&[1], &[0.0]));
        let y = x.conv2d(one, Some(zero), 1, 0).unwrap();
        assert_eq!(*y.value(), *x.value());

        let ones = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = ones.conv2d(k, None, 1, 0).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
        let even = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        assert!(ones.conv2d(even, None, 1, 0).is_err());
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random(&[3, 6, 7], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(k.clone()), Some(tape.constant(b.clone())), stride, pad)
                .unwrap();
            let expect = naive_conv(&x, &k, b.data(), stride, pad);
            assert_eq!(y.value().shape(), expect.shape());
            for (a, e) in y.value().data().iter().zip(expect.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn batched_conv_equals_per_image_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 2, 8, 8], &mut rng);
        let k = random(&[5, 2, 3, 3], &mut rng);
        let b = random(&[5], &mut rng);
        let tape = Tape::new();
        let kv = tape.constant(k.clone());
        let bv = tape.constant(b.clone());
        let batched = tape.constant(x.clone()).conv2d(kv, Some(bv), 2, 1).unwrap();
        for i in 0..3 {
            let single = tape
                .constant(x.index_first(i).unwrap())
                .conv2d(kv, Some(bv), 2, 1)
                .unwrap();
            assert_eq!(
                batched.value().index_first(i).unwrap().data(),
                single.value().data()
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 8, 8], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let w = random(&[4, 8 / stride, 8 / stride], &mut rng);
            let f = |v: &[Tensor]| -> f64 {
                let tape = Tape::new();
                let y = tape
                    .constant(v[0].clone())
                    .conv2d(tape.constant(v[1].clone()), Some(tape.constant(v[2].clone())), stride, pad)
                    .unwrap();
                let r = y.mul(tape.constant(w.clone())).unwrap().sum().unwrap().value().item().unwrap();
                r
            };
            let inputs = [x.clone(), k.clone(), b.clone()];
            let (_, g) = value_and_grad(
                |tape, v| v[0].conv2d(v[1], Some(v[2]), stride, pad)?.mul(tape.constant(w.clone()))?.sum(),
                &inputs,
            )
            .unwrap();
            for which in 0..3 {
                assert_close(g[which].data(), &numeric_grad(&f, &inputs, which, 1e-5), 1e-5);
            }
        }
    }

    #[test]
    fn upsample_concat_reshape() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = x.upsample_nearest2x().unwrap();
        assert_eq!(
            u.value().data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let a = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[3, 4, 4]));
        assert_eq!(a.concat_channels(b).unwrap().shape(), vec![5, 4, 4]);
        let c = tape.constant(Tensor::zeros(&[3, 2, 4]));
        assert!(a.concat_channels(c).is_err());
        assert!(a.reshape(&[3, 3]).is_err());
    }

    #[test]
    fn shape_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&[2, 3, 3], &mut rng);
        let b = random(&[1, 3, 3], &mut rng);
        let w = random(&[3, 6, 6], &mut rng);
        let graph = |tape: &Tape, v: &[Tensor]| -> f64 {
            let x = tape.constant(v[0].clone());
            let y = tape.constant(v[1].clone());
            let r = x
                .concat_channels(y)
                .unwrap()
                .upsample_nearest2x()
                .unwrap()
                .mul(tape.constant(w.clone()))
                .unwrap()
                .sigmoid()
                .unwrap()
                .sum()
                .unwrap()
                .value()
                .item()
                .unwrap();
            r
        };
        let f = |v: &[Tensor]| graph(&Tape::new(), v);
        let inputs = [a, b];
        let (_, g) = value_and_grad(
            |tape, v| {
                v[0].concat_channels(v[1])?
                    .upsample_nearest2x()?
                    .mul(tape.constant(w.clone()))?
                    .sigmoid()?
                    .sum()
            },
            &inputs,
        )
        .unwrap();
        assert_close(g[0].data(), &numeric_grad(&f, &inputs, 0, 1e-5), 1e-6);
        assert_close(g[1].data(), &numeric_grad(&f, &inputs, 1, 1e-5), 1e-6);
    }

    #[test]
    fn upsample_backward_is_block_sum() {
        let x = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        let w = Tensor::from_fn(&[1, 4, 6], |i| (i as f64).sin());
        let (_, g) = value_and_grad(
            |tape, v| v[0].upsample_nearest2x()?.mul(tape.constant(w.clone()))?.sum(),
            &[x],
        )
        .unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let expect: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| w.data()[(2 * y + dy) * 6 + 2 * x + dx])
                    .sum();
                assert!((g[0].data()[y * 3 + x] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn expand_sum_axis_div_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 1, 4], &mut rng);
        let b = Tensor::from_fn(&[3, 2, 4], |_| rng.gen_range(0.5..2.0));
        let f = |v: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let r = tape
                .constant(v[0].clone())
                .expand(&[3, 2, 4])
                .unwrap()
                .div(tape.constant(v[1].clone()))
                .unwrap()
                .sum_axis(1)
                .unwrap()
                .square()
                .unwrap()
                .sum()
                .unwrap()
                .value()
                .item()
                .unwrap();
            r
        };
        let inputs = [a, b];
        let (_, g) = value_and_grad(
            |_, v| v[0].expand(&[3, 2, 4])?.div(v[1])?.sum_axis(1)?.square()?.sum(),
            &inputs,
        )
        .unwrap();
        assert_close(g[0].data(), &numeric_grad(&f, &inputs, 0, 1e-5), 1e-6);
        assert_close(g[1].data(), &numeric_grad(&f, &inputs, 1, 1e-5), 1e-6);
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let a = t(&[3], &[1.0, -2.0, 0.5]);
        let s = t(&[1], &[1.5]);
        let (_, g) = value_and_grad(|_, v| v[0].mul(v[1])?.sub(v[1])?.square()?.sum(), &[a.clone(), s.clone()]).unwrap();
        let f = |v: &[Tensor]| -> f64 {
            v[0].data().iter().map(|&x| (x * v[1].data()[0] - v[1].data()[0]).powi(2)).sum()
        };
        let inputs = [a, s];
        assert_close(g[1].data(), &numeric_grad(&f, &inputs, 1, 1e-6), 1e-6);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let loss = x.mul(c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn repeated_evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let run = || {
            value_and_grad(|_, v| v[0].conv2d(v[1], None, 2, 1)?.relu()?.square()?.sum(), &[x.clone(), k.clone()]).unwrap()
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }
}
