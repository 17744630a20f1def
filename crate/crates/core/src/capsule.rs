//! Capsule primitives: squash, prediction vectors, the routing softmax and
//! routing-by-agreement.
//!
//! The routing softmax normalizes over *parents*: for a fixed lower capsule
//! `i`, `c[i, :]` sums to one across the upper capsules `j`. Logits are laid
//! out `[num_lower, num_upper]` so that this is the last axis.

use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{CapsError, Result};

pub const DEFAULT_ROUTING_ITERATIONS: usize = 3;

/// Prediction vectors `u_hat[j|i]`, shape `[num_lower, num_upper, upper_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionTensor {
    pub values: Var,
    pub num_lower: usize,
    pub num_upper: usize,
    pub lower_dim: usize,
    pub upper_dim: usize,
}

impl PredictionTensor {
    /// Wraps an existing `[N, J, D]` node.
    pub fn from_var<T: Real>(g: &Graph<'_, T>, values: Var, lower_dim: usize) -> Result<Self> {
        match *g.shape(values) {
            [num_lower, num_upper, upper_dim] => Ok(Self { values, num_lower, num_upper, lower_dim, upper_dim }),
            ref s => Err(CapsError::InvalidArgument(format!("predictions must be [lower, upper, dim], got {s:?}"))),
        }
    }
}

/// Logits, couplings and priors after the last routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState<T = f32> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
    pub priors: Tensor<T>,
    pub iterations: usize,
}

/// Per-iteration record of a routing pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace<T = f32> {
    /// Mean over all logits of `|b_after - b_before|` for each iteration.
    pub mean_abs_delta: Vec<f64>,
    /// Coupling coefficients used in each iteration; the last one is the
    /// final snapshot.
    pub couplings: Vec<Tensor<T>>,
}

impl<T: Real> RoutingTrace<T> {
    pub fn len(&self) -> usize {
        self.mean_abs_delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_abs_delta.is_empty()
    }

    pub fn final_couplings(&self) -> Option<&Tensor<T>> {
        self.couplings.last()
    }
}

pub struct RouteOutput<T = f32> {
    /// Upper capsule outputs `[num_upper, upper_dim]` from the last iteration.
    pub v: Var,
    pub state: RoutingState<T>,
    pub trace: RoutingTrace<T>,
}

/// `u_hat[j|i] = W[i,j] u[i]` with `u: [N, K]` and `w: [N, J, D, K]`.
pub fn predict<T: Real>(g: &mut Graph<'_, T>, u: Var, w: Var) -> Result<PredictionTensor> {
    let values = g.predict(u, w)?;
    let lower_dim = g.shape(u)[1];
    PredictionTensor::from_var(g, values, lower_dim)
}

/// Appends the "none-of-the-above" parent whose predictions are all zero.
/// It takes part in the routing softmax but produces no class output.
pub fn orphan_extend<T: Real>(g: &mut Graph<'_, T>, predictions: PredictionTensor) -> Result<PredictionTensor> {
    let values = g.append_zero_parent(predictions.values)?;
    Ok(PredictionTensor { values, num_upper: predictions.num_upper + 1, ..predictions })
}

/// Routing-by-agreement, unrolled in the graph so gradients reach the
/// predictions through every iteration.
///
/// `b <- priors`; then `iterations` times: `c <- softmax(b)`,
/// `s_j <- sum_i c_ij u_hat[j|i]`, `v_j <- squash(s_j)`,
/// `b_ij <- b_ij + u_hat[j|i] . v_j`. The final logit update is applied too,
/// which only affects the trace.
///
/// `priors` defaults to zeros of shape `[num_lower, num_upper]`.
pub fn route<T: Real>(
    g: &mut Graph<'_, T>,
    predictions: PredictionTensor,
    iterations: usize,
    priors: Option<Var>,
) -> Result<RouteOutput<T>> {
    if iterations == 0 {
        return Err(CapsError::InvalidArgument("routing needs at least one iteration".into()));
    }
    let shape = [predictions.num_lower, predictions.num_upper];
    let priors = match priors {
        Some(p) => {
            if g.shape(p) != shape {
                return Err(CapsError::InvalidArgument(format!(
                    "priors must have shape {shape:?}, got {:?}",
                    g.shape(p)
                )));
            }
            p
        }
        None => g.constant(Tensor::zeros(&shape)),
    };
    let prior_values = g.tensor(priors);
    let count = (shape[0] * shape[1]).max(1) as f64;

    let mut b = priors;
    let mut v = None;
    let mut c = priors;
    let mut trace = RoutingTrace::default();
    for _ in 0..iterations {
        c = g.softmax(b);
        let s = g.weighted_sum(c, predictions.values)?;
        let vj = g.squash(s);
        let a = g.agreement(predictions.values, vj)?;
        let next = g.add(b, a)?;
        let delta = g.value(next).iter().zip(g.value(b)).map(|(&x, &y)| (x - y).abs().as_f64()).sum::<f64>() / count;
        trace.mean_abs_delta.push(delta);
        trace.couplings.push(g.tensor(c));
        b = next;
        v = Some(vj);
    }
    Ok(RouteOutput {
        v: v.expect("at least one iteration ran"),
        state: RoutingState { logits: g.tensor(b), couplings: g.tensor(c), priors: prior_values, iterations },
        trace,
    })
}

/// Convolutional capsule layer: one strided convolution producing
/// `types * dim` channels, regrouped into `types * gh * gw` capsules of
/// `dim` components, each squashed.
///
/// Capsule `i = type * gh * gw + y * gw + x`; component `d` comes from
/// channel `type * dim + d`.
pub fn primary_capsules<T: Real>(
    g: &mut Graph<'_, T>,
    features: Var,
    kernels: Var,
    biases: Var,
    types: usize,
    stride: usize,
) -> Result<Var> {
    let conv = g.conv2d(features, kernels, biases, stride)?;
    let &[channels, gh, gw] = g.shape(conv) else { unreachable!("conv2d yields rank 3") };
    if types == 0 || channels % types != 0 {
        return Err(CapsError::InvalidArgument(format!(
            "{channels} channels cannot be split into {types} capsule types"
        )));
    }
    let dim = channels / types;
    let grouped = g.reshape(conv, &[types, dim, gh, gw])?;
    let moved = g.permute(grouped, &[0, 2, 3, 1])?;
    let caps = g.reshape(moved, &[types * gh * gw, dim])?;
    Ok(g.squash(caps))
}

/// Squash over the last axis of a plain tensor.
pub fn squash<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant_ref(s);
    let v = g.squash(x);
    g.tensor(v)
}

/// Row-wise routing softmax of plain logits `[num_lower, num_upper]`.
pub fn coupling_softmax<T: Real>(b: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant_ref(b);
    let c = g.softmax(x);
    g.tensor(c)
}

/// Plain-tensor form of [`predict`].
pub fn predict_values<T: Real>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let uv = g.constant_ref(u);
    let wv = g.constant_ref(w);
    let p = predict(&mut g, uv, wv)?;
    Ok(g.tensor(p.values))
}

/// Plain-tensor agreement `a[i,j] = pred[i,j,:] . v[j,:]`.
pub fn agreement<T: Real>(predictions: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = g.constant_ref(predictions);
    let vv = g.constant_ref(v);
    let a = g.agreement(p, vv)?;
    Ok(g.tensor(a))
}

/// Plain-tensor routing; returns `(v, state, trace)`.
pub fn route_values<T: Real>(
    predictions: &Tensor<T>,
    iterations: usize,
    priors: Option<&Tensor<T>>,
    orphan: bool,
) -> Result<(Tensor<T>, RoutingState<T>, RoutingTrace<T>)> {
    let mut g = Graph::new();
    let p = g.constant_ref(predictions);
    let mut p = PredictionTensor::from_var(&g, p, 0)?;
    if orphan {
        p = orphan_extend(&mut g, p)?;
    }
    let priors = priors.map(|t| g.constant_ref(t));
    let out = route(&mut g, p, iterations, priors)?;
    Ok((g.tensor(out.v), out.state, out.trace))
}
