use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::optim::{adam_step, lr_schedule, AdamState, TrainConfig};
use crate::data::TrainSet;
use crate::model::{CapsNet, CapsNetConfig, LossBreakdown, TrainSample};
use crate::rng::{self, domain, RngKey};
use crate::{CapsError, Result};

/// Examples summed sequentially before partial sums are combined. Fixed, so
/// the floating-point reduction order never depends on the worker count.
const REDUCE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Learning rate used for the last step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_margin: f64,
    pub train_recon: f64,
    /// Filled in by the epoch callback when it evaluates the model.
    pub eval_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct Trainer {
    pub model: CapsNet<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamState<f32>,
    pub key: RngKey,
}

struct Partial {
    loss: [f64; 3],
    grads: Vec<Vec<f32>>,
}

impl Partial {
    fn absorb(&mut self, other: Partial) {
        for (a, b) in self.loss.iter_mut().zip(other.loss) {
            *a += b;
        }
        for (a, b) in self.grads.iter_mut().zip(other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Trainer {
    pub fn new(model: CapsNet<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamState::new(model.params().iter().map(|(_, t)| t.shape()));
        let key = rng::key_from_seed(config.seed);
        Ok(Self { model, config, optimizer, key })
    }

    /// Continues from a checkpoint, keeping its step counter and random key.
    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = ck.optimizer.ok_or_else(|| {
            CapsError::InvalidArgument(
                "checkpoint has no optimizer state: it can be evaluated but training cannot resume from it".into(),
            )
        })?;
        Ok(Self { model: ck.model, config, optimizer, key: ck.rng_key })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: with_optimizer.then(|| self.optimizer.clone()),
            step: self.optimizer.step,
            rng_key: self.key,
        }
    }

    fn chunk(&self, samples: &[TrainSample<f32>]) -> Result<Partial> {
        let mut acc: Option<Partial> = None;
        for s in samples {
            let (loss, grads) = self.model.gradients(s)?;
            if !loss.total.is_finite() {
                return Err(CapsError::NonFinite(format!(
                    "training loss ({}) at step {}",
                    loss.total,
                    self.optimizer.step + 1
                )));
            }
            let p = Partial { loss: [loss.total, loss.margin, loss.reconstruction], grads };
            match &mut acc {
                Some(a) => a.absorb(p),
                None => acc = Some(p),
            }
        }
        acc.ok_or_else(|| CapsError::InvalidArgument("empty batch".into()))
    }

    /// Mean loss and mean gradients over a batch.
    pub fn batch_gradients(&self, samples: &[TrainSample<f32>]) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
        if samples.is_empty() {
            return Err(CapsError::InvalidArgument("empty batch".into()));
        }
        let chunks: Vec<&[TrainSample<f32>]> = samples.chunks(REDUCE_CHUNK).collect();
        let mut total: Option<Partial> = None;
        let group = if self.config.parallel { rayon::current_num_threads().max(1) } else { 1 };
        for g in chunks.chunks(group) {
            let parts: Vec<Result<Partial>> = if group > 1 {
                g.par_iter().map(|c| self.chunk(c)).collect()
            } else {
                g.iter().map(|c| self.chunk(c)).collect()
            };
            for p in parts {
                let p = p?;
                match &mut total {
                    Some(t) => t.absorb(p),
                    None => total = Some(p),
                }
            }
        }
        let mut total = total.expect("non-empty batch");
        let n = samples.len() as f64;
        let inv = 1.0 / samples.len() as f32;
        for g in &mut total.grads {
            g.iter_mut().for_each(|x| *x *= inv);
        }
        let [t, m, r] = total.loss.map(|x| x / n);
        Ok((LossBreakdown { margin: m, reconstruction: r, total: t }, total.grads))
    }

    /// One optimizer update on the batch mean.
    pub fn train_step(&mut self, samples: &[TrainSample<f32>]) -> Result<LossBreakdown> {
        let (loss, mut grads) = self.batch_gradients(samples)?;
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.iter().flatten().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = lr_schedule(self.optimizer.step, &self.config);
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grads, &mut self.optimizer, lr, &self.config)?;
        Ok(loss)
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// One pass over a seeded shuffle of `data`. `epoch` is 0-based and keys
    /// both the shuffle and the augmentation streams.
    pub fn run_epoch(&mut self, data: &dyn TrainSet, epoch: usize) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(CapsError::InvalidArgument("training set is empty".into()));
        }
        if data.input_size() != self.model.config().input_size {
            return Err(CapsError::InvalidArgument(format!(
                "training images are {0}x{0}, model expects {1}x{1}",
                data.input_size(),
                self.model.config().input_size
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(&self.key, domain::SHUFFLE, epoch as u64));
        let mut sums = [0.0f64; 3];
        let mut lr = lr_schedule(self.optimizer.step, &self.config);
        for batch in order.chunks(self.config.batch_size) {
            let samples = batch.iter().map(|&i| data.sample(i, epoch, &self.key)).collect::<Result<Vec<_>>>()?;
            lr = lr_schedule(self.optimizer.step, &self.config);
            let loss = self.train_step(&samples)?;
            let w = batch.len() as f64;
            sums[0] += loss.total * w;
            sums[1] += loss.margin * w;
            sums[2] += loss.reconstruction * w;
        }
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch: epoch + 1,
            steps: self.optimizer.step,
            lr,
            train_loss: sums[0] / n,
            train_margin: sums[1] / n,
            train_recon: sums[2] / n,
            eval_error: None,
        })
    }

    /// Runs epochs until `config.epochs` have completed in total (counting
    /// any restored from a checkpoint) or the callback stops early.
    pub fn fit(
        &mut self,
        data: &dyn TrainSet,
        mut on_epoch: impl FnMut(&CapsNet<f32>, &mut EpochMetrics) -> Result<Control>,
    ) -> Result<Vec<EpochMetrics>> {
        let done = (self.optimizer.step / self.steps_per_epoch(data.len()).max(1)) as usize;
        let mut log = Vec::new();
        for epoch in done..self.config.epochs {
            let mut m = self.run_epoch(data, epoch)?;
            let control = on_epoch(&self.model, &mut m)?;
            log.push(m);
            if control == Control::Stop {
                break;
            }
        }
        Ok(log)
    }
}

/// Metrics log as CSV. Leading `#` lines record the configuration, including
/// defaults that are assumptions rather than documented settings.
pub fn metrics_csv(metrics: &[EpochMetrics], train: &TrainConfig, model: &CapsNetConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# assumed defaults (undocumented for MNIST): batch_size=128, lr decay 0.96 every 2000 steps");
    let _ = writeln!(
        s,
        "# batch_size={} lr={} beta1={} beta2={} epsilon={} decay_rate={} decay_steps={} seed={} max_shift={}",
        train.batch_size,
        train.learning_rate,
        train.beta1,
        train.beta2,
        train.epsilon,
        train.decay_rate,
        train.decay_steps,
        train.seed,
        train.max_shift
    );
    let _ = writeln!(
        s,
        "# input={} routing={} recon_scale={} orphan={} learnable_priors={}",
        model.input_size, model.routing_iterations, model.recon_scale, model.orphan, model.learnable_priors
    );
    s.push_str("epoch,steps,lr,train_loss,train_margin,train_recon,eval_error\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.steps,
            m.lr,
            m.train_loss,
            m.train_margin,
            m.train_recon,
            m.eval_error.map_or(String::new(), |e| e.to_string())
        );
    }
    s
}
