//! Dynamic-tape reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are stored in
//! creation order, which is a topological order, so [`Graph::backward`] simply
//! walks the tape in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, Error, Result};
use crate::linalg::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    RepeatRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Chamfer {
        pred: Var,
        gt: Var,
        pred_nn: Vec<usize>,
        gt_nn: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::GroupMax { .. } => "group_max",
            Op::Chamfer { .. } => "chamfer",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    param: Option<ParamId>,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + libm::tanh(inner))
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = libm::tanh(inner);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a copy of a stored parameter as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.variable(store.tensor(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients of every registered parameter leaf, in registration order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| n.param.map(|p| (p, n.grad.as_deref())))
    }

    /// Parameter bound to node `index`, if it is a parameter leaf.
    pub fn param_at(&self, index: usize) -> Option<ParamId> {
        self.nodes.get(index).and_then(|n| n.param)
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a @ b^T` for `a: [m, d]`, `b: [n, d]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims2(a, "matmul_t")?;
        let (n, d2) = self.dims2(b, "matmul_t")?;
        if d != d2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            d,
            n,
            self.value(a).data(),
            (d, 1),
            self.value(b).data(),
            (1, d),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.value(row).len() != c || self.shape(x).is_empty() {
            return Err(Error::dim(name, self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| f(*a, *b)))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Adds a length-`c` vector to every row (last-axis slice) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// Multiplies every row of `x` element-wise by a length-`c` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t =
            Tensor::new(v.shape(), v.data().iter().map(|a| a * s).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(contract_err!(
                "softmax axis {axis} out of range for {shape:?}"
            ));
        }
        let v = self.value(x);
        if !v.is_finite() {
            return Err(Error::Numeric(alloc::string::String::from(
                "softmax input contains non-finite values",
            )));
        }
        let out = softmax_along(v.data(), &shape, axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| contract_err!("layer_norm of a scalar"))?;
        let src = self.value(x).data();
        let rows = src.len() / c.max(1);
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, chunk) in src.chunks(c).enumerate() {
            let mean = chunk.iter().sum::<f64>() / c as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(chunk) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, inv_std }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| gelu(*a)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let (r0, c0) = self.dims2(first, "concat")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            match axis {
                0 if c == c0 => total += r,
                1 if r == r0 => total += c,
                0 | 1 => return Err(Error::dim("concat", self.shape(first), self.shape(p))),
                _ => return Err(contract_err!("concat axis {axis} on 2-D tensors")),
            }
        }
        let (shape, data) = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            ([total, c0], data)
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            ([r0, total], data)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[r, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Rows of a 2-D tensor selected by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(contract_err!(
                "gather index {bad} out of range for {r} rows"
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[index.len(), c], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Replicates a `[1, c]` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "repeat_rows")?;
        if r != 1 {
            return Err(Error::dim("repeat_rows", self.shape(x), &[1, c]));
        }
        let row = self.value(x).data();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::RepeatRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(contract_err!("mean of an empty tensor"));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Column means of a 2-D tensor, as `[1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if r == 0 {
            return Err(contract_err!("mean_rows of zero rows"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(x), rg))
    }

    /// Max over consecutive blocks of `group` rows: `[g * group, c] -> [g, c]`.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "group_max")?;
        if group == 0 || r % group != 0 {
            return Err(Error::dim("group_max", self.shape(x), &[group, c]));
        }
        let g = r / group;
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..group {
                let row = gi * group + j;
                for ch in 0..c {
                    let v = src[row * c + ch];
                    if v > out[gi * c + ch] {
                        out[gi * c + ch] = v;
                        argmax[gi * c + ch] = row;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[g, c], out)?, Op::GroupMax { x, argmax }, rg))
    }

    /// Symmetric squared-distance Chamfer over consecutive groups of `group`
    /// points, summed over groups and divided by the total point count.
    pub fn chamfer(&mut self, pred: Var, gt: Var, group: usize) -> Result<Var> {
        let (rp, cp) = self.dims2(pred, "chamfer")?;
        let (rg_rows, cg) = self.dims2(gt, "chamfer")?;
        if rp != rg_rows || cp != cg || group == 0 || rp % group != 0 || rp == 0 {
            return Err(Error::dim("chamfer", self.shape(pred), self.shape(gt)));
        }
        let p = self.value(pred).data();
        let t = self.value(gt).data();
        let mut pred_nn = vec![0usize; rp];
        let mut gt_nn = vec![0usize; rp];
        let mut total = 0.0;
        for g0 in (0..rp).step_by(group) {
            for i in g0..g0 + group {
                let (mut best, mut bj) = (f64::INFINITY, g0);
                for j in g0..g0 + group {
                    let d = sq_dist(&p[i * cp..(i + 1) * cp], &t[j * cp..(j + 1) * cp]);
                    if d < best {
                        best = d;
                        bj = j;
                    }
                }
                pred_nn[i] = bj;
                total += best;
            }
            for j in g0..g0 + group {
                let (mut best, mut bi) = (f64::INFINITY, g0);
                for i in g0..g0 + group {
                    let d = sq_dist(&p[i * cp..(i + 1) * cp], &t[j * cp..(j + 1) * cp]);
                    if d < best {
                        best = d;
                        bi = i;
                    }
                }
                gt_nn[j] = bi;
                total += best;
            }
        }
        let value = total / rp as f64;
        let rg = self.rg(pred) || self.rg(gt);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Chamfer {
                pred,
                gt,
                pred_nn,
                gt_nn,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, adding into the stored gradient of
    /// every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                if self.rg(a) {
                    // dA = dC (m x n) @ B^T (n x k)
                    let da = accumulate(grads, a, m * k);
                    gemm(m, n, k, g, (n, 1), self.value(b).data(), (1, n), 1.0, da);
                }
                if self.rg(b) {
                    // dB = A^T (k x m) @ dC (m x n)
                    let db = accumulate(grads, b, k * n);
                    gemm(k, m, n, self.value(a).data(), (1, k), g, (n, 1), 1.0, db);
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, d) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[0];
                if self.rg(a) {
                    // dA = dC (m x n) @ B (n x d)
                    let da = accumulate(grads, a, m * d);
                    gemm(m, n, d, g, (n, 1), self.value(b).data(), (d, 1), 1.0, da);
                }
                if self.rg(b) {
                    // dB = dC^T (n x m) @ A (m x d)
                    let db = accumulate(grads, b, n * d);
                    gemm(n, m, d, g, (1, n), self.value(a).data(), (d, 1), 1.0, db);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        let d = accumulate(grads, v, g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    let d = accumulate(grads, a, g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.rg(b) {
                    let d = accumulate(grads, b, g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.value(b).data();
                    let d = accumulate(grads, a, g.len());
                    for ((x, gy), bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if self.rg(b) {
                    let av = self.value(a).data();
                    let d = accumulate(grads, b, g.len());
                    for ((x, gy), aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            &Op::AddRow(x, row) => {
                let c = self.value(row).len();
                if self.rg(x) {
                    let d = accumulate(grads, x, g.len());
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if self.rg(row) {
                    let d = accumulate(grads, row, c);
                    for chunk in g.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::MulRow(x, row) => {
                let c = self.value(row).len();
                let r = self.value(row).data();
                if self.rg(x) {
                    let d = accumulate(grads, x, g.len());
                    for (dc, gc) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for ((a, b), w) in dc.iter_mut().zip(gc).zip(r) {
                            *a += b * w;
                        }
                    }
                }
                if self.rg(row) {
                    let xv = self.value(x).data();
                    let d = accumulate(grads, row, c);
                    for (gc, xc) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((a, b), xx) in d.iter_mut().zip(gc).zip(xc) {
                            *a += b * xx;
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                let d = accumulate(grads, x, g.len());
                d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2().unwrap();
                let d = accumulate(grads, x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), axis);
                let y = out.data();
                let d = accumulate(grads, x, y.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] += y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = *out.shape().last().unwrap();
                let y = out.data();
                let d = accumulate(grads, *x, y.len());
                let n = c as f64;
                for (r, inv) in inv_std.iter().enumerate() {
                    let gs = &g[r * c..(r + 1) * c];
                    let ys = &y[r * c..(r + 1) * c];
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] += inv / n * (n * gs[j] - sum_g - ys[j] * sum_gy);
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                let d = accumulate(grads, x, g.len());
                for ((a, b), xx) in d.iter_mut().zip(g).zip(xv) {
                    *a += b * gelu_grad(*xx);
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                let d = accumulate(grads, x, g.len());
                for ((a, b), xx) in d.iter_mut().zip(g).zip(xv) {
                    if *xx > 0.0 {
                        *a += b;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2().unwrap();
                    if self.rg(p) {
                        let d = accumulate(grads, p, r * c);
                        if *axis == 0 {
                            let src = &g[offset * c..(offset + r) * c];
                            d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        } else {
                            for i in 0..r {
                                let src = &g[i * total_cols + offset..i * total_cols + offset + c];
                                d[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2().unwrap();
                let len = out.shape()[1];
                let d = accumulate(grads, x, r * c);
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .iter_mut()
                        .zip(&g[i * len..(i + 1) * len])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::GatherRows { x, index } => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let d = accumulate(grads, *x, r * c);
                for (k, &src) in index.iter().enumerate() {
                    d[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
            }
            &Op::RepeatRows(x) => {
                let c = self.value(x).len();
                let d = accumulate(grads, x, c);
                for chunk in g.chunks(c) {
                    d.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Reshape(x) => {
                let d = accumulate(grads, x, g.len());
                d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                let d = accumulate(grads, x, n);
                d.iter_mut().for_each(|a| *a += g[0]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let d = accumulate(grads, x, n);
                let s = g[0] / n as f64;
                d.iter_mut().for_each(|a| *a += s);
            }
            &Op::MeanRows(x) => {
                let (r, c) = self.value(x).dims2().unwrap();
                let d = accumulate(grads, x, r * c);
                for chunk in d.chunks_mut(c) {
                    chunk
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b / r as f64);
                }
            }
            Op::GroupMax { x, argmax } => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let d = accumulate(grads, *x, r * c);
                for (k, &row) in argmax.iter().enumerate() {
                    d[row * c + k % c] += g[k];
                }
            }
            Op::Chamfer {
                pred,
                gt,
                pred_nn,
                gt_nn,
            } => {
                let (rows, c) = self.value(*pred).dims2().unwrap();
                let p = self.value(*pred).data();
                let t = self.value(*gt).data();
                let s = 2.0 * g[0] / rows as f64;
                if self.rg(*pred) {
                    let d = accumulate(grads, *pred, rows * c);
                    for (i, &j) in pred_nn.iter().enumerate() {
                        for ch in 0..c {
                            d[i * c + ch] += s * (p[i * c + ch] - t[j * c + ch]);
                        }
                    }
                    for (j, &i) in gt_nn.iter().enumerate() {
                        for ch in 0..c {
                            d[i * c + ch] += s * (p[i * c + ch] - t[j * c + ch]);
                        }
                    }
                }
                if self.rg(*gt) {
                    let d = accumulate(grads, *gt, rows * c);
                    for (i, &j) in pred_nn.iter().enumerate() {
                        for ch in 0..c {
                            d[j * c + ch] += s * (t[j * c + ch] - p[i * c + ch]);
                        }
                    }
                    for (j, &i) in gt_nn.iter().enumerate() {
                        for ch in 0..c {
                            d[j * c + ch] += s * (t[j * c + ch] - p[i * c + ch]);
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stabilized softmax of `data` (with `shape`) along `axis`.
pub fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + j;
            let max = (0..len)
                .map(|i| data[at(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = libm::exp(data[at(i)] - max);
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] /= total;
            }
        }
    }
    out
}
