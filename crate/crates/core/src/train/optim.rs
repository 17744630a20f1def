use crate::tensor::{Real, Tensor};
use crate::{CapsError, Result};

/// Optimizer and schedule hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Maximum random shift for single-digit MNIST training.
    pub max_shift: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Per-example work is spread over rayon workers when true. The reduction
    /// order is fixed either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.96,
            decay_steps: 2000.0,
            epochs: 10,
            seed: 0,
            max_shift: 2,
            grad_clip: None,
            parallel: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with the decay period stretched tenfold.
    pub fn multimnist() -> Self {
        Self { decay_steps: 20_000.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning rate", self.learning_rate),
            ("decay rate", self.decay_rate),
            ("decay steps", self.decay_steps),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CapsError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CapsError::InvalidArgument(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(CapsError::InvalidArgument("batch size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(CapsError::InvalidArgument(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `base * decay_rate^(step / decay_steps)` with a continuous exponent.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    config.learning_rate * config.decay_rate.powf(step as f64 / config.decay_steps)
}

/// First and second moments per parameter, plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { m, v, step: 0 }
    }
}

/// One Adam update with bias correction. Rejects non-finite gradients before
/// touching any parameter, naming the offending one.
pub fn adam_step<T: Real>(
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CapsError::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&state.m)) {
        if p.len() != g.len() || p.shape() != m.shape() {
            return Err(CapsError::InvalidArgument(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(CapsError::NonFinite(format!("gradient of {name} at flat index {i} ({})", g[i].as_f64())));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::from_f64(mf);
            *vi = T::from_f64(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + config.epsilon);
            *pi = T::from_f64(pi.as_f64() - update);
        }
    }
    Ok(())
}
