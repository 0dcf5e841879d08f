//! Reverse-mode tape.
//!
//! A [`Tape`] is a Wengert list: every op appends one node holding its
//! output value and, when any input requires grad, the information needed to
//! push gradients back to its inputs. Node ids are assigned in execution
//! order, so walking ids downwards from the loss is a valid reverse
//! topological order. A tape lives for one forward pass and is dropped or
//! [`Tape::clear`]ed before the next.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{check_shape, numel, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Output of an op none of whose inputs require grad.
    Detached,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Affine { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    AvgPool2d { x: usize, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Arc<Vec<f64>>, rstd: Vec<f64> },
    Softmax { x: usize, axis: usize },
    Gelu { x: usize },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Sqrt { x: usize },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Permute { x: usize, axes: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    SumAll { x: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get(var.id)?.as_ref().map(|g| {
            Tensor::from_parts(self.shapes[var.id].clone(), g.clone())
        })
    }

    pub fn slice(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward information, for evaluation.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Record a tensor as a leaf. It participates in differentiation iff the
    /// tensor has `requires_grad` and the tape records gradients.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let rg = t.requires_grad() && self.grad_enabled;
        let value = Tensor::from_shared(t.shape().to_vec(), Arc::clone(t.shared_data()));
        self.push_node(value, rg, Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let value = Tensor::from_shared(t.shape().to_vec(), Arc::clone(t.shared_data()));
        self.push_node(value, false, Op::Leaf)
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Detached },
        });
        Var { tape: self, id }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, parents: &[usize], op: Op) -> Var<'_> {
        let rg = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Tensor::from_parts(shape, data), rg, op)
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Run reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Contract("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradient buffer for `id`, created on first use; `None` when the node does
/// not require grad.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn broadcast_accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    out_shape: &[usize],
    g: &[f64],
    scale: impl Fn(usize, usize) -> f64,
) {
    let tshape = nodes[target].value.shape().to_vec();
    let Some(buf) = slot(nodes, grads, target) else { return };
    if tshape == out_shape {
        for (i, (b, gv)) in buf.iter_mut().zip(g).enumerate() {
            *b += gv * scale(i, i);
        }
        return;
    }
    let st = kernels::broadcast_strides(&tshape, out_shape);
    let zeros = vec![0; out_shape.len()];
    kernels::for_each_broadcast(out_shape, &st, &zeros, |o, t, _| {
        buf[t] += g[o] * scale(o, t);
    });
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf | Op::Detached => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::gemm_nt(m, n, k, g, bv, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::gemm_tn(m, k, n, av, g, gb);
            }
        }
        Op::Bmm { a, b } => {
            let sa = nodes[*a].value.shape();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = nodes[*b].value.shape()[2];
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..batch {
                    kernels::gemm_nt(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..batch {
                    kernels::gemm_tn(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Affine { x, w, b } => {
            let ws = nodes[*w].value.shape();
            let (fan_in, fan_out) = (ws[0], ws[1]);
            let rows = nodes[*x].value.numel() / fan_in;
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::gemm_nt(rows, fan_out, fan_in, g, wv, gx);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                kernels::gemm_tn(rows, fan_in, fan_out, xv, g, gw);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for r in 0..rows {
                        for (acc, gv) in gb.iter_mut().zip(&g[r * fan_out..(r + 1) * fan_out]) {
                            *acc += gv;
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let xv = nodes[*x].value.data();
            let wv = nodes[*w].value.data();
            // Take the buffers out so three disjoint slots can be borrowed.
            let mut gx = slot(nodes, grads, *x).map(std::mem::take);
            let mut gw = slot(nodes, grads, *w).map(std::mem::take);
            let mut gb = b.and_then(|b| slot(nodes, grads, b).map(std::mem::take));
            kernels::conv2d_backward(
                geom,
                xv,
                wv,
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(v) = gx {
                grads[*x] = Some(v);
            }
            if let Some(v) = gw {
                grads[*w] = Some(v);
            }
            if let (Some(v), Some(b)) = (gb, b) {
                grads[*b] = Some(v);
            }
        }
        Op::AvgPool2d { x, planes, h, w, oh, ow } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::avgpool2d_backward(*planes, *h, *w, *oh, *ow, g, gx);
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *out_shape.last().unwrap();
            let rows = g.len() / d;
            let gam = nodes[*gamma].value.data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gam[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_axis(out_shape, *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for k in 0..len {
                            s += g[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            gx[p] += y[p] * (g[p] - s);
                        }
                    }
                }
            }
        }
        Op::Gelu { x } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            }
        }
        Op::Relu { x } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            broadcast_accumulate(nodes, grads, *a, out_shape, g, |_, _| 1.0);
            broadcast_accumulate(nodes, grads, *b, out_shape, g, |_, _| 1.0);
        }
        Op::Sub { a, b } => {
            broadcast_accumulate(nodes, grads, *a, out_shape, g, |_, _| 1.0);
            broadcast_accumulate(nodes, grads, *b, out_shape, g, |_, _| -1.0);
        }
        Op::Mul { a, b } | Op::Div { a, b } => {
            let is_div = matches!(node.op, Op::Div { .. });
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let sa = kernels::broadcast_strides(nodes[*a].value.shape(), out_shape);
            let sb = kernels::broadcast_strides(nodes[*b].value.shape(), out_shape);
            // offsets of each output element into a and b
            let mut offs = Vec::with_capacity(g.len());
            kernels::for_each_broadcast(out_shape, &sa, &sb, |_, ia, ib| offs.push((ia, ib)));
            if let Some(ga) = slot(nodes, grads, *a) {
                for (o, &(ia, ib)) in offs.iter().enumerate() {
                    ga[ia] += if is_div { g[o] / bv[ib] } else { g[o] * bv[ib] };
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (o, &(ia, ib)) in offs.iter().enumerate() {
                    gb[ib] += if is_div {
                        -g[o] * av[ia] / (bv[ib] * bv[ib])
                    } else {
                        g[o] * av[ia]
                    };
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Sqrt { x } => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] / (2.0 * y[i]);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x].value.shape()[*axis];
                if let Some(gx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..len * inner];
                        let dst = &mut gx[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        Op::Permute { x, axes } => {
            let src = permute_sources(nodes[*x].value.shape(), axes);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (o, &s) in src.iter().enumerate() {
                    gx[s] += g[o];
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, len, inner) = split_axis(out_shape, *axis);
            let full = nodes[*x].value.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                    let src = &g[o * len * inner..][..len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let xshape = nodes[*x].value.shape();
            let (outer, len, inner) = split_axis(xshape, *axis);
            let c = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] += c * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
    }
}

/// `(outer, extent, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each flat output index of `permute(shape, axes)`, the flat source
/// index in the input.
fn permute_sources(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = kernels::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(shape);
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands recorded on different tapes".into()))
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), b.data(), &mut out);
        Ok(self.tape.push(vec![m, n], out, &[self.id, other.id], Op::MatMul { a: self.id, b: other.id }))
    }

    /// Batched matrix product `(B,m,k) x (B,k,n) -> (B,m,n)`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.tape.push(vec![batch, m, n], out, &[self.id, other.id], Op::Bmm { a: self.id, b: other.id }))
    }

    /// `x · W + b` applied over the last axis; `W` is `(in, out)`.
    pub fn affine(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        if w.rank() != 2 || xs.last() != Some(&w.shape()[0]) {
            return Err(mismatch("affine", xs, w.shape()));
        }
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(b)?;
            let bv = b.value();
            if bv.shape() != [fan_out] {
                return Err(mismatch("affine bias", &[fan_out], bv.shape()));
            }
            for r in 0..rows {
                out[r * fan_out..(r + 1) * fan_out].copy_from_slice(bv.data());
            }
            parents.push(b.id);
        }
        kernels::gemm(rows, fan_in, fan_out, x.data(), w.data(), &mut out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = fan_out;
        Ok(self.tape.push(
            shape,
            out,
            &parents,
            Op::Affine { x: self.id, w: weight.id, b: bias.map(|b| b.id) },
        ))
    }

    /// Direct 2-D convolution of `(B,C,H,W)` with `(O,C,kh,kw)` weights.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(mismatch("conv2d", xs, ws));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(mismatch("conv2d (kernel larger than padded input)", xs, ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            stride,
            padding,
            out_h: (xs[2] + 2 * padding - ws[2]) / stride + 1,
            out_w: (xs[3] + 2 * padding - ws[3]) / stride + 1,
        };
        let mut parents = vec![self.id, weight.id];
        let bias_val = match bias {
            Some(b) => {
                self.same_tape(b)?;
                let bv = b.value();
                if bv.shape() != [geom.out_ch] {
                    return Err(mismatch("conv2d bias", &[geom.out_ch], bv.shape()));
                }
                parents.push(b.id);
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; geom.batch * geom.out_ch * geom.out_h * geom.out_w];
        kernels::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()), &mut out);
        Ok(self.tape.push(
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
            out,
            &parents,
            Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom },
        ))
    }

    /// Adaptive average pooling over the last two axes. An output larger
    /// than the input replicates cells (nearest-neighbour upsampling).
    pub fn avgpool2d(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(mismatch("avgpool2d", xs, &[out_h, out_w]));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = x.numel() / (h * w);
        let mut out = vec![0.0; planes * out_h * out_w];
        kernels::avgpool2d_forward(planes, h, w, out_h, out_w, x.data(), &mut out);
        let mut shape = xs.to_vec();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.tape.push(
            shape,
            out,
            &[self.id],
            Op::AvgPool2d { x: self.id, planes, h, w, oh: out_h, ow: out_w },
        ))
    }

    /// Layer normalization over the last axis followed by the elementwise
    /// affine `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.tape.push(
            x.shape().to_vec(),
            out,
            &[self.id, gamma.id, beta.id],
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat: Arc::new(xhat), rstd },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if axis >= xs.len() {
            return Err(TensorError::Axis { op: "softmax", axis, rank: xs.len() });
        }
        let (outer, len, inner) = split_axis(xs, axis);
        let xv = x.data();
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(xv[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xv[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= s;
                }
            }
        }
        Ok(self.tape.push(xs.to_vec(), out, &[self.id], Op::Softmax { x: self.id, axis }))
    }

    pub fn gelu(&self) -> Var<'t> {
        let x = self.value();
        let out = x.data().iter().map(|&v| kernels::gelu(v)).collect();
        self.tape.push(x.shape().to_vec(), out, &[self.id], Op::Gelu { x: self.id })
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.tape.push(x.shape().to_vec(), out, &[self.id], Op::Relu { x: self.id })
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        let shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| mismatch(name, a.shape(), b.shape()))?;
        let out = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = kernels::broadcast_strides(a.shape(), &shape);
            let sb = kernels::broadcast_strides(b.shape(), &shape);
            let mut out = vec![0.0; numel(&shape)];
            let (av, bv) = (a.data(), b.data());
            kernels::for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        Ok(self.tape.push(shape, out, &[self.id, other.id], op))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    /// Elementwise product with broadcasting, e.g. a per-channel vector
    /// against a `(b, l, D)` token tensor.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div { a: self.id, b: other.id })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let x = self.value();
        let out = x.data().iter().map(|v| v * c).collect();
        self.tape.push(x.shape().to_vec(), out, &[self.id], Op::Scale { x: self.id, c })
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let x = self.value();
        let out = x.data().iter().map(|v| v + c).collect();
        self.tape.push(x.shape().to_vec(), out, &[self.id], Op::AddScalar { x: self.id })
    }

    pub fn sqrt(&self) -> Var<'t> {
        let x = self.value();
        let out = x.data().iter().map(|v| v.sqrt()).collect();
        self.tape.push(x.shape().to_vec(), out, &[self.id], Op::Sqrt { x: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        check_shape(shape)?;
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(mismatch("reshape", x.shape(), shape));
        }
        let rg = self.tape.grad_enabled && self.requires_grad();
        let value = Tensor::from_shared(shape.to_vec(), Arc::clone(x.shared_data()));
        Ok(self.tape.push_node(value, rg, Op::Reshape { x: self.id }))
    }

    /// Collapse axes `start..` into one.
    pub fn flatten(&self, start: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if start >= s.len() {
            return Err(TensorError::Axis { op: "flatten", axis: start, rank: s.len() });
        }
        let mut shape = s[..start].to_vec();
        shape.push(s[start..].iter().product());
        self.reshape(&shape)
    }

    /// General axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", xs, axes));
        }
        let src = permute_sources(xs, axes);
        let xv = x.data();
        let out = src.iter().map(|&s| xv[s]).collect();
        let shape = axes.iter().map(|&a| xs[a]).collect();
        Ok(self.tape.push(shape, out, &[self.id], Op::Permute { x: self.id, axes: axes.to_vec() }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::Axis { op: "transpose", axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if axis >= xs.len() {
            return Err(TensorError::Axis { op: "narrow", axis, rank: xs.len() });
        }
        if len == 0 || start + len > xs[axis] {
            return Err(mismatch("narrow", xs, &[start, len]));
        }
        let (outer, full, inner) = split_axis(xs, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[axis] = len;
        Ok(self.tape.push(shape, out, &[self.id], Op::Narrow { x: self.id, axis, start }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Tensor> = parts
            .iter()
            .map(|p| first.same_tape(p).map(|_| p.value()))
            .collect::<Result<_>>()?;
        let s0 = values[0].shape().to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Axis { op: "concat", axis, rank: s0.len() });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(shape, out, &ids, Op::Concat { xs: ids.clone(), axis }))
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if axis >= xs.len() {
            return Err(TensorError::Axis { op: "sum/mean", axis, rank: xs.len() });
        }
        let (outer, len, inner) = split_axis(xs, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x.data()[(o * len + k) * inner..][..inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape: Vec<usize> = xs.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let op = if mean { Op::Mean { x: self.id, axis } } else { Op::Sum { x: self.id, axis } };
        Ok(self.tape.push(shape, out, &[self.id], op))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum();
        self.tape.push(vec![1], vec![s], &[self.id], Op::SumAll { x: self.id })
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad(true));
        let loss = x.sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.slice(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let loss = x.mul(&x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.slice(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let loss = x.mul(&w).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert!(g.slice(w).is_none());
        assert_eq!(g.slice(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(!x.requires_grad());
        let y = x.scale(2.0).sum_all();
        assert_eq!(y.value().item().unwrap(), 6.0);
        let g = tape.backward(y).unwrap();
        assert!(g.slice(x).is_none());
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 5.0).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.value().data(), &[5.0; 16]);
    }

    #[test]
    fn avgpool_of_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 8, 8], 3.0).unwrap());
        let y = x.avgpool2d(4, 4).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
        assert_eq!(y.value().data(), &[3.0; 16]);
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]).unwrap());
        let y = x.softmax(0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        // y[k,i,j] = x[i,j,k]
        assert_eq!(y.value().data()[1], 4.0);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), &data[..]);
    }

    #[test]
    fn broadcast_mul_gradient_reduces() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[2, 3, 4]).unwrap());
        let s = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let loss = x.mul(&s).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.slice(s).unwrap(), &[6.0; 4]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().value().data(), b.value().data());
    }
}
