use std::borrow::Cow;

use super::{matmul, Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Margins and down-weighting of the per-class hinge loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda: 0.5 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Option<Vec<T>> },
    Dense { input: Var, weight: Var, bias: Var },
    Activation { input: Var, kind: Activation },
    Reshape { input: Var },
    Permute { input: Var, axes: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    Squash { input: Var },
    Norm { input: Var },
    Softmax { input: Var },
    Predict { u: Var, w: Var },
    WeightedSum { c: Var, pred: Var },
    Agreement { pred: Var, v: Var },
    AppendZeroParent { input: Var },
    Narrow { input: Var },
    MaskRow { input: Var, row: usize },
    MarginLoss { lengths: Var, targets: Vec<bool>, params: MarginParams },
    SquaredError { a: Var, b: Var },
}

struct Node<'p, T: Real> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    /// `None` when the leaf is a constant or does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so the node list is always a topological order.
///
/// Parameters may be borrowed for the lifetime `'p` instead of copied.
pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<(), TensorError> {
    if shape.len() != rank {
        return Err(TensorError::RankMismatch { op, expected: rank, actual: shape.len() });
    }
    Ok(())
}

fn check_axis(op: &'static str, axis: usize, expected: usize, actual: usize) -> Result<(), TensorError> {
    if expected != actual {
        return Err(TensorError::AxisMismatch { op, axis, expected, actual });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    check_rank(op, b, a.len())?;
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        check_axis(op, axis, x, y)?;
    }
    Ok(())
}

/// For each output position of a permutation, the flat offset it reads from.
fn permute_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += out_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    offsets
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let dim = shape.last().copied().unwrap_or(1);
    let rows = if dim == 0 { 0 } else { shape.iter().product::<usize>() / dim };
    (rows, dim)
}

/// `|s|^2 / ((1 + |s|^2) * sqrt(|s|^2 + eps))`, the factor that squash
/// multiplies its input by.
fn squash_factor<T: Real>(n2: T, eps: T) -> T {
    n2 / ((T::one() + n2) * (n2 + eps).sqrt())
}

pub(crate) fn squash_eps<T: Real>() -> T {
    T::from_f64(1e-8)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value: Cow::Owned(value), shape, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'p, [T]>, shape: Vec<usize>, tracked: bool) -> Var {
        self.nodes.push(Node { value, shape, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), shape, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), false)
    }

    /// A borrowed leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t.data()), t.shape().to_vec(), true)
    }

    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(Cow::Owned(t.into_data()), shape, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("graph nodes keep shape and data in sync")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Valid cross-correlation of `input[C,H,W]` with `kernel[K,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        check_rank(OP, &ishape, 3)?;
        check_rank(OP, &kshape, 4)?;
        check_rank(OP, self.shape(bias), 1)?;
        check_axis(OP, 0, kshape[1], ishape[0])?;
        check_axis(OP, 0, kshape[0], self.shape(bias)[0])?;
        if stride == 0 {
            return Err(TensorError::Invalid { op: OP, msg: "stride must be positive".into() });
        }
        for (axis, (&size, &k)) in ishape[1..].iter().zip(&kshape[2..]).enumerate() {
            if size < k {
                return Err(TensorError::Invalid {
                    op: OP,
                    msg: format!("input axis {} has size {size}, smaller than kernel {k}", axis + 1),
                });
            }
        }
        let geom = ConvGeom {
            channels: ishape[0],
            height: ishape[1],
            width: ishape[2],
            kernels: kshape[0],
            kh: kshape[2],
            kw: kshape[3],
            stride,
            out_h: (ishape[1] - kshape[2]) / stride + 1,
            out_w: (ishape[2] - kshape[3]) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let (k, p) = (geom.kernels, geom.positions());
        let mut out = vec![T::zero(); k * p];
        matmul(k, geom.patch(), p, T::one(), self.value(kernel), false, &cols, false, T::zero(), &mut out);
        for (row, &b) in out.chunks_mut(p).zip(self.value(bias)) {
            for x in row {
                *x += b;
            }
        }
        let tracked = self.tracked(&[input, kernel, bias]);
        let keep_cols = self.nodes[kernel.0].tracked;
        Ok(self.push(
            out,
            vec![k, geom.out_h, geom.out_w],
            Op::Conv2d { input, kernel, bias, geom, cols: keep_cols.then_some(cols) },
            tracked,
        ))
    }

    /// `weight[m,n] * input[n] + bias[m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "dense";
        check_rank(OP, self.shape(input), 1)?;
        check_rank(OP, self.shape(weight), 2)?;
        check_rank(OP, self.shape(bias), 1)?;
        let (m, n) = (self.shape(weight)[0], self.shape(weight)[1]);
        check_axis(OP, 1, n, self.shape(input)[0])?;
        check_axis(OP, 0, m, self.shape(bias)[0])?;
        let mut out = self.value(bias).to_vec();
        matmul(m, n, 1, T::one(), self.value(weight), false, self.value(input), false, T::one(), &mut out);
        let tracked = self.tracked(&[input, weight, bias]);
        Ok(self.push(out, vec![m], Op::Dense { input, weight, bias }, tracked))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(input).iter().map(|&x| x.max(T::zero())).collect(),
            Activation::Sigmoid => self.value(input).iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect(),
        };
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(out, shape, Op::Activation { input, kind }, tracked)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let len = self.value(input).len();
        if shape.iter().product::<usize>() != len {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len });
        }
        let out = self.value(input).to_vec();
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { input }, tracked))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        check_rank("permute", axes, shape.len())?;
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || std::mem::replace(&mut seen[a], true) {
                return Err(TensorError::Invalid {
                    op: "permute",
                    msg: format!("{axes:?} is not a permutation of 0..{}", shape.len()),
                });
            }
        }
        let src = self.value(input);
        let out: Vec<T> = permute_offsets(&shape, axes).into_iter().map(|o| src[o]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, out_shape, Op::Permute { input, axes: axes.to_vec() }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, shape, Op::Add { a, b }, tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, shape, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(out, shape, Op::Scale { input, factor }, tracked)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).iter().fold(T::zero(), |acc, &x| acc + x);
        let tracked = self.tracked(&[input]);
        self.push(vec![total], vec![], Op::Sum { input }, tracked)
    }

    /// Squash nonlinearity over the last axis.
    ///
    /// Per vector `s`: `n2 = sum(s_d^2)`, then `v = s * n2 / ((1 + n2) * sqrt(n2 + 1e-8))`.
    /// Sums run in ascending index order.
    pub fn squash(&mut self, input: Var) -> Var {
        let (_, dim) = last_axis(self.shape(input));
        let eps = squash_eps::<T>();
        let mut out = self.value(input).to_vec();
        if dim > 0 {
            for row in out.chunks_mut(dim) {
                let n2 = row.iter().fold(T::zero(), |acc, &x| acc + x * x);
                let f = squash_factor(n2, eps);
                for x in row.iter_mut() {
                    *x *= f;
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(out, shape, Op::Squash { input }, tracked)
    }

    /// Euclidean norm over the last axis; drops that axis.
    pub fn norm(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let (_, dim) = last_axis(&shape);
        let out = self
            .value(input)
            .chunks(dim.max(1))
            .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt())
            .collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let tracked = self.tracked(&[input]);
        self.push(out, out_shape, Op::Norm { input }, tracked)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Var {
        let (_, dim) = last_axis(self.shape(input));
        let mut out = self.value(input).to_vec();
        if dim > 0 {
            for row in out.chunks_mut(dim) {
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / total;
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(out, shape, Op::Softmax { input }, tracked)
    }

    /// Prediction vectors `out[i,j,:] = w[i,j,:,:] * u[i,:]` for
    /// `u[N,K]` and `w[N,J,D,K]`.
    pub fn predict(&mut self, u: Var, w: Var) -> Result<Var, TensorError> {
        const OP: &str = "predict";
        let us = self.shape(u).to_vec();
        let ws = self.shape(w).to_vec();
        check_rank(OP, &us, 2)?;
        check_rank(OP, &ws, 4)?;
        check_axis(OP, 0, ws[0], us[0])?;
        check_axis(OP, 1, ws[3], us[1])?;
        let (n, j, d, k) = (ws[0], ws[1], ws[2], ws[3]);
        let uv = self.value(u);
        let wv = self.value(w);
        let mut out = vec![T::zero(); n * j * d];
        for i in 0..n {
            let ui = &uv[i * k..(i + 1) * k];
            let wi = &wv[i * j * d * k..(i + 1) * j * d * k];
            for (o, wrow) in out[i * j * d..(i + 1) * j * d].iter_mut().zip(wi.chunks(k)) {
                *o = wrow.iter().zip(ui).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            }
        }
        let tracked = self.tracked(&[u, w]);
        Ok(self.push(out, vec![n, j, d], Op::Predict { u, w }, tracked))
    }

    /// `s[j,:] = sum_i c[i,j] * pred[i,j,:]`, accumulated in ascending `i`.
    pub fn weighted_sum(&mut self, c: Var, pred: Var) -> Result<Var, TensorError> {
        const OP: &str = "weighted_sum";
        let cs = self.shape(c).to_vec();
        let ps = self.shape(pred).to_vec();
        check_rank(OP, &cs, 2)?;
        check_rank(OP, &ps, 3)?;
        check_axis(OP, 0, ps[0], cs[0])?;
        check_axis(OP, 1, ps[1], cs[1])?;
        let (n, j, d) = (ps[0], ps[1], ps[2]);
        let cv = self.value(c);
        let pv = self.value(pred);
        let mut out = vec![T::zero(); j * d];
        for i in 0..n {
            for jj in 0..j {
                let cij = cv[i * j + jj];
                let p = &pv[(i * j + jj) * d..(i * j + jj + 1) * d];
                for (o, &x) in out[jj * d..(jj + 1) * d].iter_mut().zip(p) {
                    *o += cij * x;
                }
            }
        }
        let tracked = self.tracked(&[c, pred]);
        Ok(self.push(out, vec![j, d], Op::WeightedSum { c, pred }, tracked))
    }

    /// Scalar products `a[i,j] = pred[i,j,:] . v[j,:]`.
    pub fn agreement(&mut self, pred: Var, v: Var) -> Result<Var, TensorError> {
        const OP: &str = "agreement";
        let ps = self.shape(pred).to_vec();
        let vs = self.shape(v).to_vec();
        check_rank(OP, &ps, 3)?;
        check_rank(OP, &vs, 2)?;
        check_axis(OP, 0, ps[1], vs[0])?;
        check_axis(OP, 1, ps[2], vs[1])?;
        let (n, j, d) = (ps[0], ps[1], ps[2]);
        let pv = self.value(pred);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(n * j);
        for i in 0..n {
            for jj in 0..j {
                let p = &pv[(i * j + jj) * d..(i * j + jj + 1) * d];
                let q = &vv[jj * d..(jj + 1) * d];
                out.push(p.iter().zip(q).fold(T::zero(), |acc, (&a, &b)| acc + a * b));
            }
        }
        let tracked = self.tracked(&[pred, v]);
        Ok(self.push(out, vec![n, j], Op::Agreement { pred, v }, tracked))
    }

    /// Appends an all-zero parent column: `[N,J,D] -> [N,J+1,D]`.
    pub fn append_zero_parent(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        check_rank("append_zero_parent", &s, 3)?;
        let (n, j, d) = (s[0], s[1], s[2]);
        let src = self.value(input);
        let mut out = Vec::with_capacity(n * (j + 1) * d);
        for row in src.chunks(j * d) {
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(T::zero(), d));
        }
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, vec![n, j + 1, d], Op::AppendZeroParent { input }, tracked))
    }

    /// Keeps the first `len` entries along axis 0.
    pub fn narrow(&mut self, input: Var, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || len > s[0] {
            return Err(TensorError::Invalid { op: "narrow", msg: format!("cannot take {len} rows of shape {s:?}") });
        }
        let row: usize = s[1..].iter().product();
        let out = self.value(input)[..len * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, shape, Op::Narrow { input }, tracked))
    }

    /// Zeroes every row of `input[J,D]` but `row` and flattens to `[J*D]`.
    pub fn mask_row(&mut self, input: Var, row: usize) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        check_rank("mask_row", &s, 2)?;
        if row >= s[0] {
            return Err(TensorError::Invalid {
                op: "mask_row",
                msg: format!("row {row} out of range for {} rows", s[0]),
            });
        }
        let d = s[1];
        let mut out = vec![T::zero(); s[0] * d];
        out[row * d..(row + 1) * d].copy_from_slice(&self.value(input)[row * d..(row + 1) * d]);
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, vec![s[0] * d], Op::MaskRow { input, row }, tracked))
    }

    /// Per-class hinge-squared loss summed over classes.
    pub fn margin_loss(&mut self, lengths: Var, targets: &[bool], params: MarginParams) -> Result<Var, TensorError> {
        check_rank("margin_loss", self.shape(lengths), 1)?;
        check_axis("margin_loss", 0, targets.len(), self.shape(lengths)[0])?;
        let (mp, mm, lambda) = (T::from_f64(params.m_plus), T::from_f64(params.m_minus), T::from_f64(params.lambda));
        let total = self.value(lengths).iter().zip(targets).fold(T::zero(), |acc, (&l, &present)| {
            if present {
                let h = (mp - l).max(T::zero());
                acc + h * h
            } else {
                let h = (l - mm).max(T::zero());
                acc + lambda * h * h
            }
        });
        let tracked = self.tracked(&[lengths]);
        Ok(self.push(vec![total], vec![], Op::MarginLoss { lengths, targets: targets.to_vec(), params }, tracked))
    }

    /// `sum((a - b)^2)`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(TensorError::AxisMismatch { op: "squared_error", axis: 0, expected: la, actual: lb });
        }
        let total = self.value(a).iter().zip(self.value(b)).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![total], vec![], Op::SquaredError { a, b }, tracked))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from fan-out are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if node.tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[id].take() {
                self.backprop(id, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let two = T::one() + T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let (k, p, patch) = (geom.kernels, geom.positions(), geom.patch());
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                        *d += row.iter().fold(T::zero(), |acc, &x| acc + x);
                    }
                }
                if let Some(dk) = self.grad_slot(grads, *kernel) {
                    let cols = cols.as_ref().expect("columns kept for tracked kernels");
                    matmul(k, p, patch, T::one(), g, false, cols, true, T::one(), dk);
                }
                if let Some(dx) = self.grad_slot(grads, *input) {
                    let mut dcols = vec![T::zero(); patch * p];
                    matmul(patch, k, p, T::one(), self.value(*kernel), true, g, false, T::zero(), &mut dcols);
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::Dense { input, weight, bias } => {
                let n = self.value(*input).len();
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(dw) = self.grad_slot(grads, *weight) {
                    let x = self.value(*input);
                    for (row, &gi) in dw.chunks_mut(n).zip(g) {
                        for (d, &xj) in row.iter_mut().zip(x) {
                            *d += gi * xj;
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *input) {
                    let w = self.value(*weight);
                    for (row, &gi) in w.chunks(n).zip(g) {
                        for (d, &wij) in dx.iter_mut().zip(row) {
                            *d += gi * wij;
                        }
                    }
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input);
                let y = &node.value;
                if let Some(dx) = self.grad_slot(grads, *input) {
                    match kind {
                        Activation::Relu => {
                            for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x) {
                                if xi > T::zero() {
                                    *d += gi;
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                                *d += gi * yi * (T::one() - yi);
                            }
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Permute { input, axes } => {
                let shape = self.shape(*input).to_vec();
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (o, &gi) in permute_offsets(&shape, axes).into_iter().zip(g) {
                        dx[o] += gi;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(dx) = self.grad_slot(grads, *v) {
                        for (d, &gi) in dx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    let ov = self.value(*other);
                    if let Some(dx) = self.grad_slot(grads, *v) {
                        for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(ov) {
                            *d += gi * o;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *factor;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Squash { input } => {
                let (_, dim) = last_axis(self.shape(*input));
                let eps = squash_eps::<T>();
                let s = self.value(*input);
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for ((drow, srow), grow) in dx.chunks_mut(dim).zip(s.chunks(dim)).zip(g.chunks(dim)) {
                        let n2 = srow.iter().fold(T::zero(), |acc, &x| acc + x * x);
                        let f = squash_factor(n2, eps);
                        let one_n2 = T::one() + n2;
                        let ne = n2 + eps;
                        let df = (ne - n2 * one_n2 / two) / (one_n2 * one_n2 * ne * ne.sqrt());
                        let sg = srow.iter().zip(grow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for ((d, &si), &gi) in drow.iter_mut().zip(srow).zip(grow) {
                            *d += gi * f + two * si * df * sg;
                        }
                    }
                }
            }
            Op::Norm { input } => {
                let (_, dim) = last_axis(self.shape(*input));
                let x = self.value(*input);
                let y = &node.value;
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (((drow, xrow), &n), &gi) in dx.chunks_mut(dim).zip(x.chunks(dim)).zip(y.iter()).zip(g) {
                        if n > T::zero() {
                            for (d, &xi) in drow.iter_mut().zip(xrow) {
                                *d += gi * xi / n;
                            }
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let (_, dim) = last_axis(self.shape(*input));
                let y = &node.value;
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for ((drow, yrow), grow) in dx.chunks_mut(dim).zip(y.chunks(dim)).zip(g.chunks(dim)) {
                        let dot = yrow.iter().zip(grow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Predict { u, w } => {
                let ws = self.shape(*w);
                let (n, j, d, k) = (ws[0], ws[1], ws[2], ws[3]);
                let block = j * d * k;
                if let Some(dw) = self.grad_slot(grads, *w) {
                    let uv = self.value(*u);
                    for i in 0..n {
                        let ui = &uv[i * k..(i + 1) * k];
                        let gi = &g[i * j * d..(i + 1) * j * d];
                        for (drow, &gv) in dw[i * block..(i + 1) * block].chunks_mut(k).zip(gi) {
                            for (dd, &x) in drow.iter_mut().zip(ui) {
                                *dd += gv * x;
                            }
                        }
                    }
                }
                if let Some(du) = self.grad_slot(grads, *u) {
                    let wv = self.value(*w);
                    for i in 0..n {
                        let dui = &mut du[i * k..(i + 1) * k];
                        let gi = &g[i * j * d..(i + 1) * j * d];
                        for (wrow, &gv) in wv[i * block..(i + 1) * block].chunks(k).zip(gi) {
                            for (dd, &x) in dui.iter_mut().zip(wrow) {
                                *dd += gv * x;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { c, pred } => {
                let ps = self.shape(*pred);
                let (n, j, d) = (ps[0], ps[1], ps[2]);
                if let Some(dc) = self.grad_slot(grads, *c) {
                    let pv = self.value(*pred);
                    for i in 0..n {
                        for jj in 0..j {
                            let p = &pv[(i * j + jj) * d..(i * j + jj + 1) * d];
                            let gj = &g[jj * d..(jj + 1) * d];
                            dc[i * j + jj] += p.iter().zip(gj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        }
                    }
                }
                if let Some(dp) = self.grad_slot(grads, *pred) {
                    let cv = self.value(*c);
                    for i in 0..n {
                        for jj in 0..j {
                            let cij = cv[i * j + jj];
                            let gj = &g[jj * d..(jj + 1) * d];
                            for (dd, &gv) in dp[(i * j + jj) * d..(i * j + jj + 1) * d].iter_mut().zip(gj) {
                                *dd += cij * gv;
                            }
                        }
                    }
                }
            }
            Op::Agreement { pred, v } => {
                let ps = self.shape(*pred);
                let (n, j, d) = (ps[0], ps[1], ps[2]);
                if let Some(dp) = self.grad_slot(grads, *pred) {
                    let vv = self.value(*v);
                    for i in 0..n {
                        for jj in 0..j {
                            let gij = g[i * j + jj];
                            let q = &vv[jj * d..(jj + 1) * d];
                            for (dd, &x) in dp[(i * j + jj) * d..(i * j + jj + 1) * d].iter_mut().zip(q) {
                                *dd += gij * x;
                            }
                        }
                    }
                }
                if let Some(dv) = self.grad_slot(grads, *v) {
                    let pv = self.value(*pred);
                    for i in 0..n {
                        for jj in 0..j {
                            let gij = g[i * j + jj];
                            let p = &pv[(i * j + jj) * d..(i * j + jj + 1) * d];
                            for (dd, &x) in dv[jj * d..(jj + 1) * d].iter_mut().zip(p) {
                                *dd += gij * x;
                            }
                        }
                    }
                }
            }
            Op::AppendZeroParent { input } => {
                let s = self.shape(*input);
                let (j, d) = (s[1], s[2]);
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (drow, grow) in dx.chunks_mut(j * d).zip(g.chunks((j + 1) * d)) {
                        for (dd, &gv) in drow.iter_mut().zip(grow) {
                            *dd += gv;
                        }
                    }
                }
            }
            Op::Narrow { input } => {
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (dd, &gv) in dx.iter_mut().zip(g) {
                        *dd += gv;
                    }
                }
            }
            Op::MaskRow { input, row } => {
                let d = self.shape(*input)[1];
                if let Some(dx) = self.grad_slot(grads, *input) {
                    let range = row * d..(row + 1) * d;
                    for (dd, &gv) in dx[range.clone()].iter_mut().zip(&g[range]) {
                        *dd += gv;
                    }
                }
            }
            Op::MarginLoss { lengths, targets, params } => {
                let (mp, mm, lambda) =
                    (T::from_f64(params.m_plus), T::from_f64(params.m_minus), T::from_f64(params.lambda));
                let l = self.value(*lengths);
                if let Some(dl) = self.grad_slot(grads, *lengths) {
                    for ((d, &li), &present) in dl.iter_mut().zip(l).zip(targets) {
                        let local = if present {
                            -two * (mp - li).max(T::zero())
                        } else {
                            two * lambda * (li - mm).max(T::zero())
                        };
                        *d += g[0] * local;
                    }
                }
            }
            Op::SquaredError { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += two * g[0] * (x - y);
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= two * g[0] * (x - y);
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(input: &[T], geom: &ConvGeom) -> Vec<T> {
    let p = geom.positions();
    let mut cols = vec![T::zero(); geom.patch() * p];
    let mut row = 0;
    for c in 0..geom.channels {
        let plane = &input[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geom.out_h {
                    let src = &plane[(oy * geom.stride + ky) * geom.width + kx..];
                    let out = &mut dst[oy * geom.out_w..(oy + 1) * geom.out_w];
                    if geom.stride == 1 {
                        out.copy_from_slice(&src[..geom.out_w]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[ox * geom.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], geom: &ConvGeom, dx: &mut [T]) {
    let p = geom.positions();
    let mut row = 0;
    for c in 0..geom.channels {
        let plane = &mut dx[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geom.out_h {
                    let base = (oy * geom.stride + ky) * geom.width + kx;
                    for ox in 0..geom.out_w {
                        plane[base + ox * geom.stride] += src[oy * geom.out_w + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_two_by_two_diagonal_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y), &[5.0]);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32 * 0.3).sin()).collect();
        let x = g.constant(t(&[2, 5, 4], &data));
        let k = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4]);
        assert_eq!(g.value(y), &data[..]);
    }

    #[test]
    fn conv2d_reports_the_offending_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[3, 10, 10]));
        let k = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = g.conv2d(x, k, b, 1).unwrap_err();
        assert_eq!(err, TensorError::AxisMismatch { op: "conv2d", axis: 0, expected: 2, actual: 3 });
        let k = g.constant(Tensor::zeros(&[4, 3, 11, 3]));
        assert!(matches!(g.conv2d(x, k, b, 1), Err(TensorError::Invalid { .. })));
    }

    #[test]
    fn conv2d_strided_output_size_floors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 20, 20]));
        let k = g.constant(Tensor::zeros(&[2, 1, 9, 9]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, k, b, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 6]);
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero_b = g.constant(Tensor::zeros(&[3]));
        let y = g.dense(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y), &[1.5, -2.0, 0.25]);

        let w0 = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(t(&[2], &[0.7, -0.3]));
        let y = g.dense(x, w0, b).unwrap();
        assert_eq!(g.value(y), &[0.7, -0.3]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[3], &[0.0, 20.0, -20.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s)[0], 0.5);
        assert!((g.value(s)[1] - 1.0).abs() < 1e-6);
        assert!(g.value(s)[2].abs() < 1e-6);
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_x() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let s = g.sum(xv);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let xv = g.param(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.relu(xv);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = t(&[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let c = g.constant(x.clone());
        let p = g.param(&x);
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let mut g = Graph::new();
        let xv = g.constant_ref(&x);
        let y = g.permute(xv, &[2, 0, 1]).unwrap();
        let yt = g.tensor(y);
        assert_eq!(yt.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(yt.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
        assert!(g.permute(xv, &[0, 0, 1]).is_err());
    }

    #[test]
    fn norm_of_zero_has_zero_gradient() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let mut g = Graph::new();
        let xv = g.param(&x);
        let n = g.norm(xv);
        assert_eq!(g.value(n), &[0.0, 0.0]);
        let s = g.sum(n);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(xv).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_row_keeps_one_row() {
        let x = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32 + 1.0);
        let mut g = Graph::new();
        let xv = g.constant_ref(&x);
        let m = g.mask_row(xv, 1).unwrap();
        assert_eq!(g.value(m), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        assert!(g.mask_row(xv, 3).is_err());
    }
}
