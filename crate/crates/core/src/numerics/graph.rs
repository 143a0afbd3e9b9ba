use std::rc::Rc;

use crate::error::{Error, Result};

use super::conv::{self, ConvGeometry, ConvSpec};
use super::norm::{self, BatchStats, NormSaved};
use super::tensor::{contiguous_strides, strided_gather, strided_scatter_add};
use super::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Sigmoid,
    Softmax(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Broadcast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Pad(Var, usize),
    Crop(Var, usize),
    Reduce(Var, ReduceKind, Vec<usize>, usize),
    MatMul(Var, Var, bool, bool),
    Swish(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
    },
    GatherRows(Var, Rc<[usize]>),
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of tensor operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a reverse index sweep is a topological order.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Explicit right-aligned broadcast; the only way shapes get expanded.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).broadcast_to(shape)?;
        Ok(self.push(out, Op::Broadcast(a), &[a]))
    }

    /// `a + broadcast(b)`, the usual bias/shift addition.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    /// `a * broadcast(b)`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Zero padding; `pads[i] = (before, after)` for every axis.
    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if pads.len() != in_shape.len() {
            return Err(Error::shape("pad", &in_shape, &[pads.len()]));
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .zip(pads)
            .map(|(&e, &(lo, hi))| e + lo + hi)
            .collect();
        let strides = contiguous_strides(&out_shape);
        let offset: usize = pads.iter().zip(&strides).map(|(&(lo, _), s)| lo * s).sum();
        let mut out = Tensor::zeros(&out_shape);
        strided_scatter_add(
            self.value(a).data(),
            &in_shape,
            &strides,
            &mut out.data_mut()[offset..],
        );
        Ok(self.push(out, Op::Pad(a, offset), &[a]))
    }

    /// Sub-block selection; `ranges[i] = (start, len)` for every axis.
    pub fn crop(&mut self, a: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        if ranges.len() != in_shape.len()
            || ranges
                .iter()
                .zip(&in_shape)
                .any(|(&(s, l), &e)| l == 0 || s + l > e)
        {
            return Err(Error::shape("crop", &in_shape, &[ranges.len()]));
        }
        let strides = contiguous_strides(&in_shape);
        let offset: usize = ranges.iter().zip(&strides).map(|(&(s, _), st)| s * st).sum();
        let out_shape: Vec<usize> = ranges.iter().map(|&(_, l)| l).collect();
        let data = strided_gather(&self.value(a).data()[offset..], &out_shape, &strides);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Crop(a, offset), &[a]))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("narrow", &shape, &[axis]));
        }
        let ranges: Vec<(usize, usize)> = shape
            .iter()
            .enumerate()
            .map(|(i, &e)| if i == axis { (start, len) } else { (0, e) })
            .collect();
        self.crop(a, &ranges)
    }

    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Var> {
        if axes.is_empty() {
            return Err(Error::config("reduction needs at least one axis"));
        }
        let in_shape = self.shape(a).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::config(format!("duplicate reduction axes {axes:?}")));
        }
        let summed = self.value(a).sum_axes_keepdim(axes)?;
        let n: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let summed = match kind {
            ReduceKind::Sum => summed,
            ReduceKind::Mean => {
                let n_t = T::from_usize(n).expect("count fits element type");
                summed.map(|v| v / n_t)
            }
        };
        let out_shape: Vec<usize> = if keepdim {
            summed.shape().to_vec()
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect()
        };
        let out = summed.into_reshape(&out_shape)?;
        Ok(self.push(out, Op::Reduce(a, kind, axes.to_vec(), n), &[a]))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(a, ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(a, ReduceKind::Mean, axes, keepdim)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.sum(a, &axes, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposes of the trailing two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b), trans_a, trans_b)?;
        Ok(self.push(out, Op::MatMul(a, b, trans_a, trans_b), &[a, b]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Swish => Ok(self.swish(a)),
            Activation::Sigmoid => Ok(self.sigmoid(a)),
            Activation::Softmax(axis) => self.softmax(a, axis),
        }
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::config(format!(
                "softmax axis {axis} invalid for shape {:?}",
                x.shape()
            )));
        }
        let out = softmax_forward(x, axis);
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// 2-D (`[B,C,H,W]`) or 3-D (`[B,C,D,H,W]`) cross-correlation.
    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(x),
            self.shape(w),
            bias.map(|b| self.shape(b)),
            spec,
        )?;
        let out = conv::forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), &geom);
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(out, Op::Conv { x, w, bias, geom }, &parents))
    }

    /// Batch normalization over every axis but 1. In train mode the batch
    /// statistics are returned so the caller can update running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (out, saved, stats) = norm::batch_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            mode,
        )?;
        let v = self.push(out, Op::Norm { x, gamma, beta, saved }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, saved) =
            norm::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::Norm { x, gamma, beta, saved }, &[x, gamma, beta]))
    }

    /// `out[i, :] = table[index[i], :]` for a 2-D table.
    pub fn gather_rows(&mut self, table: Var, index: Rc<[usize]>) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[index.len()]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index.iter() {
            if r >= rows {
                return Err(Error::Index(format!("row {r} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(table, index), &[table]))
    }

    /// Mean cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", z.shape(), &[targets.len()]));
        }
        let k = z.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} out of range for {k} classes")));
        }
        let probs = softmax_forward(z, 1);
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            let zr = &z.data()[row * k..(row + 1) * k];
            let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + zr.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - zr[t];
        }
        let n = T::from_usize(targets.len().max(1)).expect("batch size fits");
        let out = Tensor::scalar(total / n);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar root; consumes the graph.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.run_backward(root)?;
        self.consumed = true;
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = Tensor::zeros(&[0]);
                node.op = Op::Leaf;
            }
        }
        Ok(())
    }

    /// Reverse sweep that leaves the graph usable for another sweep.
    /// Leaf gradients keep accumulating across calls.
    pub fn backward_retain(&mut self, root: Var) -> Result<()> {
        self.run_backward(root)
    }

    fn run_backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("graph already consumed by backward".into()));
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::ones(root_value.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut pending[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*b, g.clone()));
                out.push((*a, g));
            }
            Op::Sub(a, b) => {
                out.push((*b, g.map(|v| -v)));
                out.push((*a, g));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.zip_map(val(*b), "mul", |x, y| x * y)?));
                }
                if self.needs(*b) {
                    out.push((*b, g.zip_map(val(*a), "mul", |x, y| x * y)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::AddScalar(a) => out.push((*a, g)),
            Op::Broadcast(a) => out.push((*a, g.sum_to(val(*a).shape())?)),
            Op::Reshape(a) => out.push((*a, g.into_reshape(val(*a).shape())?)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*a, g.permute(&inv)?));
            }
            Op::Pad(a, offset) => {
                let in_shape = val(*a).shape();
                let strides = contiguous_strides(g.shape());
                let data = strided_gather(&g.data()[*offset..], in_shape, &strides);
                out.push((*a, Tensor::new(in_shape.to_vec(), data)?));
            }
            Op::Crop(a, offset) => {
                let in_shape = val(*a).shape();
                let strides = contiguous_strides(in_shape);
                let mut full = Tensor::zeros(in_shape);
                strided_scatter_add(g.data(), g.shape(), &strides, &mut full.data_mut()[*offset..]);
                out.push((*a, full));
            }
            Op::Reduce(a, kind, axes, n) => {
                let in_shape = val(*a).shape();
                let mut keep = in_shape.to_vec();
                for &ax in axes {
                    keep[ax] = 1;
                }
                let mut ga = g.into_reshape(&keep)?.broadcast_to(in_shape)?;
                if *kind == ReduceKind::Mean {
                    let n_t = T::from_usize(*n).expect("count fits element type");
                    ga = ga.map(|v| v / n_t);
                }
                out.push((*a, ga));
            }
            Op::MatMul(a, b, ta, tb) => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    // dA = g·Bᵀ (or B·gᵀ when A was transposed)
                    let ga = if *ta {
                        bv.matmul_t(&g, *tb, true)?
                    } else {
                        g.matmul_t(bv, false, !*tb)?
                    };
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let gb = if bv.rank() == 2 && av.rank() > 2 {
                        // Shared right operand: fold the batch into rows.
                        let a2 = if *ta {
                            av.permute(&swap_last_two(av.rank()))?
                        } else {
                            av.clone()
                        };
                        let cols = a2.shape()[a2.rank() - 1];
                        let rows = a2.numel() / cols.max(1);
                        let a2 = a2.into_reshape(&[rows, cols])?;
                        let g2 = g.reshape(&[rows, g.shape()[g.rank() - 1]])?;
                        if *tb {
                            g2.matmul_t(&a2, true, false)?
                        } else {
                            a2.matmul_t(&g2, true, false)?
                        }
                    } else if *tb {
                        g.matmul_t(av, true, *ta)?
                    } else {
                        av.matmul_t(&g, !*ta, false)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::Swish(a) => {
                let gx = g.zip_map(val(*a), "swish", |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                })?;
                out.push((*a, gx));
            }
            Op::Sigmoid(a) => {
                let gx = g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (T::one() - s))?;
                out.push((*a, gx));
            }
            Op::Softmax(a, axis) => out.push((*a, softmax_backward(&node.value, &g, *axis))),
            Op::Conv { x, w, bias, geom } => {
                let grads = conv::backward(
                    val(*x),
                    val(*w),
                    &g,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(gx) = grads.x {
                    out.push((*x, gx));
                }
                if let Some(gw) = grads.w {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    out.push((*b, gb));
                }
            }
            Op::Norm { x, gamma, beta, saved } => {
                let grads = norm::backward(saved, val(*gamma), &g)?;
                out.push((*x, grads.x));
                out.push((*gamma, grads.gamma));
                out.push((*beta, grads.beta));
            }
            Op::GatherRows(table, index) => {
                let t = val(*table);
                let cols = t.shape()[1];
                let mut gt = Tensor::zeros(t.shape());
                let dst = gt.data_mut();
                for (row, &r) in index.iter().enumerate() {
                    for c in 0..cols {
                        dst[r * cols + c] += g.data()[row * cols + c];
                    }
                }
                out.push((*table, gt));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let k = probs.shape()[1];
                let scale = g.item()? / T::from_usize(targets.len().max(1)).expect("fits");
                let mut gz = probs.clone();
                for (row, &t) in targets.iter().enumerate() {
                    gz.data_mut()[row * k + t] -= T::one();
                }
                out.push((*logits, gz.map(|v| v * scale)));
            }
        }
        Ok(out)
    }
}

fn swap_last_two(rank: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..rank).collect();
    p.swap(rank - 2, rank - 1);
    p
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let m = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (d[at(j)] - m).exp();
                d[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                d[at(j)] /= total;
            }
        }
    }
    out
}

fn softmax_backward<T: Real>(p: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(p.shape(), axis);
    let mut out = Tensor::zeros(p.shape());
    let (pd, gd) = (p.data(), g.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot: T = (0..n).map(|j| pd[at(j)] * gd[at(j)]).sum();
            for j in 0..n {
                od[at(j)] = pd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    out
}
