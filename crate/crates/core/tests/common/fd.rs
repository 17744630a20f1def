//! Finite-difference gradient checks, each returning the worst relative
//! error over the sampled coordinates.

use capsnet::capsule::{orphan_extend, predict, route, PredictionTensor};
use capsnet::model::TrainSample;
use capsnet::tensor::{finite_difference_check, FdOptions, MarginParams, TensorError};
use capsnet::{CapsNet, CapsNetConfig, Graph, Tensor, Var};
use rand::Rng;

use super::{bound_from, rng, shrunken, tensor_err, uniform};

pub const TOL: f64 = 1e-3;
/// Step for whole-network checks. Conv pre-activations cross the ReLU kink
/// under a 1e-3 nudge often enough to spoil a handful of coordinates.
pub const RELU_EPS: f64 = 1e-4;

pub fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_t(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    t64(shape, uniform(r, n, -scale, scale))
}

/// Random linear functional of `y`, so every output entry gets a distinct
/// upstream gradient.
pub fn probe<'g>(g: &mut Graph<'g, f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let w = rand_t(&mut rng(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn squash_after_dense(seed: u64) -> f64 {
    let mut r = rng(seed);
    let params = vec![rand_t(&mut r, &[8], 1.0), rand_t(&mut r, &[16, 8], 0.5), rand_t(&mut r, &[16], 0.1)];
    finite_difference_check(
        |g, p| {
            let y = g.dense(p[0], p[1], p[2])?;
            let y = g.reshape(y, &[4, 4])?;
            let v = g.squash(y);
            probe(g, v, seed)
        },
        &params,
        &FdOptions::default(),
    )
    .unwrap()
}

/// Squash, prediction, three routing iterations and a margin-style loss.
pub fn routing_block(seed: u64, orphan: bool, with_priors: bool) -> f64 {
    let mut r = rng(10 + seed);
    let parents = if orphan { 3 } else { 2 };
    let mut params = vec![rand_t(&mut r, &[4, 3], 1.0), rand_t(&mut r, &[4, 2, 5, 3], 0.8)];
    if with_priors {
        params.push(rand_t(&mut r, &[4, parents], 0.5));
    }
    finite_difference_check(
        |g, p| {
            let u = g.squash(p[0]);
            let mut pred = predict(g, u, p[1]).map_err(tensor_err)?;
            if orphan {
                pred = orphan_extend(g, pred).map_err(tensor_err)?;
            }
            let out = route(g, pred, 3, p.get(2).copied()).map_err(tensor_err)?;
            let lengths = g.norm(out.v);
            let mut t = vec![false; parents];
            t[0] = true;
            let m = g.margin_loss(lengths, &t, MarginParams { m_plus: 0.99, m_minus: 0.0, lambda: 0.5 })?;
            let extra = probe(g, out.v, seed)?;
            g.add(m, extra)
        },
        &params,
        &FdOptions::default(),
    )
    .unwrap()
}

pub fn routing_on_raw_predictions(seed: u64) -> f64 {
    let mut r = rng(seed);
    let params = vec![rand_t(&mut r, &[4, 2, 3], 1.0)];
    finite_difference_check(
        |g, p| {
            let pred = PredictionTensor::from_var(g, p[0], 0).map_err(tensor_err)?;
            let out = route(g, pred, 3, None).map_err(tensor_err)?;
            probe(g, out.v, 1)
        },
        &params,
        &FdOptions::default(),
    )
    .unwrap()
}

pub fn margin_loss_through_lengths(seed: u64) -> f64 {
    let mut r = rng(20 + seed);
    let params = vec![rand_t(&mut r, &[10, 4], 1.5)];
    let target = r.random_range(0..10);
    finite_difference_check(
        |g, p| {
            let v = g.squash(p[0]);
            let l = g.norm(v);
            let mut t = [false; 10];
            t[target] = true;
            g.margin_loss(l, &t, MarginParams::default())
        },
        &params,
        &FdOptions::default(),
    )
    .unwrap()
}

/// Masked capsules through the three decoder layers into the summed
/// squared error, checked on the capsules and every decoder parameter.
pub fn decoder_reconstruction(seed: u64) -> f64 {
    let model = CapsNet::<f32>::new(shrunken(), seed).unwrap().cast::<f64>();
    let mut r = rng(30 + seed);
    let v = rand_t(&mut r, &[10, 4], 0.5);
    let target = t64(&[576], uniform(&mut r, 576, 0.0, 1.0));
    let mut params = vec![v];
    for layer in &model.decoder {
        params.push(layer.weight.clone());
        params.push(layer.bias.clone());
    }
    finite_difference_check(
        |g, p| {
            // Only the decoder handles are read by the decoder path.
            let handles: Vec<Var> = [p[0]; 5].into_iter().chain(p[1..7].iter().copied()).collect();
            let bound = bound_from(&handles, false);
            let out = model.decode_graph(g, &bound, p[0], 7).map_err(tensor_err)?;
            let t = g.constant(target.clone());
            g.squared_error(out, t)
        },
        &params,
        &FdOptions { max_coords: 200, ..FdOptions::default() },
    )
    .unwrap()
}

/// Zero-initialised biases leave every decoder ReLU at its kink, where
/// central differences are meaningless; spread them out first.
pub fn randomize_biases(model: &mut CapsNet<f64>, r: &mut impl Rng) {
    for (name, t) in model.params_mut() {
        if name.ends_with("bias") || name.ends_with("priors") {
            for x in t.data_mut() {
                *x = r.random_range(-0.5..0.5);
            }
        }
    }
}

/// Total loss of a whole model against every parameter tensor.
pub fn end_to_end(config: CapsNetConfig, seed: u64) -> f64 {
    let mut model = CapsNet::<f32>::new(config.clone(), seed).unwrap().cast::<f64>();
    let side = config.input_size;
    let mut r = rng(seed);
    randomize_biases(&mut model, &mut r);
    let image = t64(&[side, side], uniform(&mut r, side * side, 0.0, 1.0));
    let sample = TrainSample::single(image, (seed % 10) as usize);
    let params: Vec<Tensor<f64>> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let has_priors = model.priors.is_some();
    finite_difference_check(
        |g, p| {
            let nodes = model.loss_graph(g, &bound_from(p, has_priors), &sample).map_err(tensor_err)?;
            Ok(nodes.total)
        },
        &params,
        &FdOptions { max_coords: 150, seed, epsilon: RELU_EPS },
    )
    .unwrap()
}
