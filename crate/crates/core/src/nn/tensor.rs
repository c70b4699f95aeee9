//! Dense float64 tensors with tape-free reverse-mode differentiation.
//!
//! Every op records its parents and a closure mapping the output gradient
//! to parent gradients. Node ids grow monotonically, so sorting reachable
//! nodes by id in descending order is a valid reverse topological order.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::macs;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "data",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// A constant tensor; gradients never flow into it.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.into(), data, false)
    }

    /// A leaf that accumulates gradients on [`Tensor::backward`].
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.into(), data, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![], vec![v], false).expect("scalar shape")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::leaf(shape, vec![0.0; n], false).expect("zeros shape")
    }

    /// Output of an op. Parents and the backward closure are only kept when
    /// some parent needs a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detached copy that shares no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.to_vec()).expect("same shape")
    }

    /// Back-propagates from a scalar, accumulating into the `grad` of every
    /// reachable leaf created with [`Tensor::param`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in nodes {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn map_unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let yc = out.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g| {
        vec![Some(
            g.iter()
                .zip(xc.data())
                .zip(&yc)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect(),
        )]
    })
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g| {
        let ga = ac
            .requires_grad()
            .then(|| g.iter().zip(bc.data()).map(|(g, y)| g * y).collect());
        let gb = bc
            .requires_grad()
            .then(|| g.iter().zip(ac.data()).map(|(g, x)| g * x).collect());
        vec![ga, gb]
    }))
}

/// Elementwise quotient `a / b`.
pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("div", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(a.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g| {
        let ga = g.iter().zip(bc.data()).map(|(g, y)| g / y).collect();
        let gb = g
            .iter()
            .zip(ac.data())
            .zip(bc.data())
            .map(|((g, x), y)| -g * x / (y * y))
            .collect();
        vec![Some(ga), Some(gb)]
    }))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    map_unary(x, |v| v * c, move |_, _| c)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    map_unary(x, |v| v + c, |_, _| 1.0)
}

pub fn square(x: &Tensor) -> Tensor {
    map_unary(x, |v| v * v, |x, _| 2.0 * x)
}

/// Square root; the derivative at 0 is taken as 0.
pub fn sqrt(x: &Tensor) -> Tensor {
    map_unary(x, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
}

pub fn abs(x: &Tensor) -> Tensor {
    map_unary(x, f64::abs, |x, _| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// `max(x, floor)`; the gradient is zero where the floor is active.
pub fn clamp_min(x: &Tensor, floor: f64) -> Tensor {
    map_unary(x, move |v| v.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map_unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
}

pub fn tanh(x: &Tensor) -> Tensor {
    map_unary(x, f64::tanh, |_, y| 1.0 - y * y)
}

/// Exponential linear unit with unit scale.
pub fn elu(x: &Tensor) -> Tensor {
    map_unary(
        x,
        |v| if v > 0.0 { v } else { v.exp_m1() },
        |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
    )
}

/// `ln(1 + e^x)`, evaluated stably for large |x|.
pub fn softplus(x: &Tensor) -> Tensor {
    map_unary(
        x,
        |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
        |x, _| 1.0 / (1.0 + (-x).exp()),
    )
}

// ---------------------------------------------------------------------------
// Reductions

pub fn sum(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(vec![], vec![s], vec![x.clone()], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    scale(&sum(x), 1.0 / n)
}

/// Sums everything except the leading axis: `[B, ...] -> [B]`.
pub fn sum_per_item(x: &Tensor) -> Result<Tensor> {
    let b = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("axis 0", "sum_per_item needs rank >= 1"))?;
    let per = if b == 0 { 0 } else { x.numel() / b };
    let out = x.data().chunks(per.max(1)).take(b).map(|c| c.iter().sum()).collect();
    Ok(Tensor::from_op(vec![b], out, vec![x.clone()], move |g| {
        vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect())]
    }))
}

// ---------------------------------------------------------------------------
// Shape manipulation

pub fn reshape(x: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
    let shape = shape.into();
    if numel(&shape) != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(shape, x.to_vec(), vec![x.clone()], |g| vec![Some(g.to_vec())]))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_raw(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.shape().len();
    let mut check = axes.to_vec();
    check.sort_unstable();
    if check != (0..rank).collect::<Vec<_>>() {
        return Err(Error::shape("permute", format!("{axes:?} is not a permutation of 0..{rank}")));
    }
    let (shape, out) = permute_raw(x.data(), x.shape(), axes);
    let mut inverse = vec![0; rank];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let out_shape = shape.clone();
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |g| {
        vec![Some(permute_raw(g, &out_shape, &inverse).1)]
    }))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", "no tensors to concatenate"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape(format!("axis {axis}"), format!("rank is {rank}")));
    }
    for x in xs {
        let ok = x.shape().len() == rank
            && (0..rank).all(|d| d == axis || x.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(Error::shape(
                format!("concat axis {axis}"),
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for (x, &s) in xs.iter().zip(&sizes) {
            out.extend_from_slice(&x.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    Ok(Tensor::from_op(shape, out, xs.to_vec(), move |g| {
        let mut grads: Vec<Vec<f64>> = sizes
            .iter()
            .map(|s| Vec::with_capacity(outer * s * inner))
            .collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gv, &s) in grads.iter_mut().zip(&sizes) {
                gv.extend_from_slice(&g[off..off + s * inner]);
                off += s * inner;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// `x[.., start..end, ..]` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let rank = x.shape().len();
    if axis >= rank || start > end || end > x.shape()[axis] {
        return Err(Error::shape(
            format!("axis {axis}"),
            format!("slice {start}..{end} out of range for {:?}", x.shape()),
        ));
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let len = x.shape()[axis];
    let width = end - start;
    let mut out = Vec::with_capacity(outer * width * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = width;
    let n_in = x.numel();
    Ok(Tensor::from_op(shape, out, vec![x.clone()], move |g| {
        let mut gx = vec![0.0; n_in];
        for o in 0..outer {
            let base = o * len * inner;
            gx[base + start * inner..base + end * inner]
                .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
        }
        vec![Some(gx)]
    }))
}

/// Removes `axis` by taking index `i`.
pub fn select(x: &Tensor, axis: usize, i: usize) -> Result<Tensor> {
    let s = slice(x, axis, i, i + 1)?;
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    reshape(&s, shape)
}

/// Stacks equal-shape tensors along a new `axis`.
pub fn stack(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let expanded = xs
        .iter()
        .map(|x| {
            let mut shape = x.shape().to_vec();
            if axis > shape.len() {
                return Err(Error::shape(format!("axis {axis}"), "stack axis out of range"));
            }
            shape.insert(axis, 1);
            reshape(x, shape)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&expanded, axis)
}

/// Adds a bias vector along the last axis.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    if b.shape() != [d] {
        return Err(Error::shape(
            "bias",
            format!("bias {:?} does not match last axis {d}", b.shape()),
        ));
    }
    let out = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(b.data()).map(|(x, b)| x + b))
        .collect();
    Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone(), b.clone()], move |g| {
        let mut gb = vec![0.0; d];
        for row in g.chunks(d) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        vec![Some(g.to_vec()), Some(gb)]
    }))
}

// ---------------------------------------------------------------------------
// Matrix product

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += av * b);
        }
    }
    c
}

/// `a^T b` for row-major `a: [k, m]`, `b: [k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            c[i * n..(i + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(c, b)| *c += av * b);
        }
    }
    c
}

/// `a b^T` for row-major `a: [m, k]`, `b: [n, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    };
    if k != k2 {
        return Err(Error::shape(
            "matmul inner axis",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    macs::record((m * k * n) as u64);
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |g| {
        let ga = ac.requires_grad().then(|| matmul_nt(g, bc.data(), m, n, k));
        let gb = bc.requires_grad().then(|| matmul_tn(ac.data(), g, m, k, n));
        vec![ga, gb]
    }))
}
