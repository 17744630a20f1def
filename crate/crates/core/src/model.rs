//! The three-layer CapsNet: Conv1 -> PrimaryCapsules -> DigitCaps, with the
//! margin loss and the masked reconstruction decoder.

use rand_distr::{Distribution, Normal};

use crate::capsule::{self, RoutingState, RoutingTrace};
use crate::rng::{self, domain};
use crate::tensor::{Graph, MarginParams, Real, Tensor, Var};
use crate::{CapsError, Result};

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetConfig {
    /// Side of the square input image (28 for MNIST, 36 for MultiMNIST,
    /// 40 for the padded translation set).
    pub input_size: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub primary_types: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub num_classes: usize,
    pub digit_dim: usize,
    pub decoder_hidden: [usize; 2],
    pub routing_iterations: usize,
    /// Adds a "none-of-the-above" parent to the routing softmax.
    pub orphan: bool,
    /// Learn the routing log priors instead of fixing them at zero.
    pub learnable_priors: bool,
    pub margin: MarginParams,
    /// Weight of the reconstruction term; 0 disables the decoder loss.
    pub recon_scale: f64,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        Self {
            input_size: 28,
            conv1_channels: 256,
            conv1_kernel: 9,
            primary_types: 32,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            num_classes: 10,
            digit_dim: 16,
            decoder_hidden: [512, 1024],
            routing_iterations: capsule::DEFAULT_ROUTING_ITERATIONS,
            orphan: false,
            learnable_priors: false,
            margin: MarginParams::default(),
            recon_scale: 0.0005,
        }
    }
}

impl CapsNetConfig {
    /// Default architecture for a different square input size.
    pub fn for_input(input_size: usize) -> Self {
        Self { input_size, ..Self::default() }
    }

    pub fn conv1_size(&self) -> usize {
        self.input_size + 1 - self.conv1_kernel
    }

    pub fn grid_size(&self) -> usize {
        (self.conv1_size() - self.primary_kernel) / self.primary_stride + 1
    }

    pub fn num_primary(&self) -> usize {
        self.primary_types * self.grid_size() * self.grid_size()
    }

    /// Number of routing parents, including the orphan column.
    pub fn num_parents(&self) -> usize {
        self.num_classes + usize::from(self.orphan)
    }

    pub fn decoder_input(&self) -> usize {
        self.num_classes * self.digit_dim
    }

    pub fn decoder_output(&self) -> usize {
        self.input_size * self.input_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CapsError::InvalidArgument(msg));
        if self.input_size < self.conv1_kernel {
            return bad(format!("input {} smaller than conv1 kernel {}", self.input_size, self.conv1_kernel));
        }
        if self.conv1_size() < self.primary_kernel {
            return bad(format!(
                "conv1 output {} smaller than primary kernel {}",
                self.conv1_size(),
                self.primary_kernel
            ));
        }
        if self.routing_iterations == 0 {
            return bad("routing iterations must be at least 1".into());
        }
        let sizes = [
            self.conv1_channels,
            self.conv1_kernel,
            self.primary_types,
            self.primary_dim,
            self.primary_kernel,
            self.primary_stride,
            self.num_classes,
            self.digit_dim,
            self.decoder_hidden[0],
            self.decoder_hidden[1],
        ];
        if sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if !(self.recon_scale >= 0.0) {
            return bad(format!("reconstruction scale {} must be >= 0", self.recon_scale));
        }
        Ok(())
    }

    /// Exact learnable parameter counts.
    pub fn parameter_count(&self) -> ParamCount {
        let c1 = self.conv1_channels * self.conv1_kernel * self.conv1_kernel + self.conv1_channels;
        let pc = self.primary_types * self.primary_dim;
        let primary = pc * self.conv1_channels * self.primary_kernel * self.primary_kernel + pc;
        let w = self.num_primary() * self.num_classes * self.digit_dim * self.primary_dim;
        let priors = if self.learnable_priors { self.num_primary() * self.num_parents() } else { 0 };
        let [h0, h1] = self.decoder_hidden;
        let decoder =
            self.decoder_input() * h0 + h0 + h0 * h1 + h1 + h1 * self.decoder_output() + self.decoder_output();
        let without_decoder = c1 + primary + w + priors;
        ParamCount {
            conv1: c1,
            primary,
            digit: w,
            priors,
            decoder,
            without_decoder,
            with_decoder: without_decoder + decoder,
        }
    }

    /// Routing iterations, flags and loss constants as a flat list, in the
    /// order used by checkpoints.
    pub fn to_hparams(&self) -> Vec<f64> {
        vec![
            self.input_size as f64,
            self.conv1_channels as f64,
            self.conv1_kernel as f64,
            self.primary_types as f64,
            self.primary_dim as f64,
            self.primary_kernel as f64,
            self.primary_stride as f64,
            self.num_classes as f64,
            self.digit_dim as f64,
            self.decoder_hidden[0] as f64,
            self.decoder_hidden[1] as f64,
            self.routing_iterations as f64,
            f64::from(u8::from(self.orphan)),
            f64::from(u8::from(self.learnable_priors)),
            self.margin.m_plus,
            self.margin.m_minus,
            self.margin.lambda,
            self.recon_scale,
        ]
    }

    pub fn from_hparams(h: &[f64]) -> Result<Self> {
        if h.len() != 18 {
            return Err(CapsError::InvalidArgument(format!("expected 18 hyperparameters, got {}", h.len())));
        }
        let n = |x: f64| x as usize;
        let cfg = Self {
            input_size: n(h[0]),
            conv1_channels: n(h[1]),
            conv1_kernel: n(h[2]),
            primary_types: n(h[3]),
            primary_dim: n(h[4]),
            primary_kernel: n(h[5]),
            primary_stride: n(h[6]),
            num_classes: n(h[7]),
            digit_dim: n(h[8]),
            decoder_hidden: [n(h[9]), n(h[10])],
            routing_iterations: n(h[11]),
            orphan: h[12] != 0.0,
            learnable_priors: h[13] != 0.0,
            margin: MarginParams { m_plus: h[14], m_minus: h[15], lambda: h[16] },
            recon_scale: h[17],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub conv1: usize,
    pub primary: usize,
    pub digit: usize,
    pub priors: usize,
    pub decoder: usize,
    pub without_decoder: usize,
    pub with_decoder: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All learnable parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsNet<T = f32> {
    config: CapsNetConfig,
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub primary_weight: Tensor<T>,
    pub primary_bias: Tensor<T>,
    /// Transformation matrices `W[i, j]`, shape `[num_primary, classes, digit_dim, primary_dim]`.
    pub digit_weight: Tensor<T>,
    pub priors: Option<Tensor<T>>,
    pub decoder: [DenseLayer<T>; 3],
}

/// Graph handles for every parameter of a bound model.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub primary_weight: Var,
    pub primary_bias: Var,
    pub digit_weight: Var,
    pub priors: Option<Var>,
    pub decoder: [(Var, Var); 3],
}

impl BoundParams {
    /// Handles in [`CapsNet::param_names`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.conv1_weight, self.conv1_bias, self.primary_weight, self.primary_bias, self.digit_weight];
        v.extend(self.priors);
        for (w, b) in &self.decoder {
            v.push(*w);
            v.push(*b);
        }
        v
    }
}

/// Which class, if any, to reconstruct during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decode {
    None,
    Predicted,
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<T = f32> {
    /// Digit capsule outputs `[classes, digit_dim]`.
    pub v: Tensor<T>,
    /// `|v_k|` per class.
    pub lengths: Tensor<T>,
    pub state: RoutingState<T>,
    pub trace: RoutingTrace<T>,
    pub reconstruction: Option<Tensor<T>>,
}

impl<T: Real> ForwardResult<T> {
    pub fn predicted_class(&self) -> usize {
        crate::eval::classify(self.lengths.data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub margin: f64,
    /// Unscaled sum of squared reconstruction differences.
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(margin: f64, reconstruction: f64, scale: f64) -> Self {
        Self { margin, reconstruction, total: margin + scale * reconstruction }
    }
}

/// One training example: input image, present classes, and the image each
/// present class should reconstruct.
#[derive(Clone, Debug)]
pub struct TrainSample<T = f32> {
    pub image: Tensor<T>,
    pub targets: Vec<usize>,
    pub recon_targets: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> TrainSample<T> {
    /// Single digit: the image is its own reconstruction target.
    pub fn single(image: Tensor<T>, label: usize) -> Self {
        Self { recon_targets: vec![(label, image.clone())], image, targets: vec![label] }
    }
}

/// Digit capsule outputs inside a graph.
pub struct DigitCaps<T = f32> {
    pub v: Var,
    pub lengths: Var,
    pub state: RoutingState<T>,
    pub trace: RoutingTrace<T>,
}

pub struct LossNodes<T = f32> {
    pub total: Var,
    pub margin: Var,
    pub reconstruction: Option<Var>,
    pub caps: DigitCaps<T>,
}

fn targets_mask(targets: &[usize], classes: usize) -> Result<Vec<bool>> {
    if targets.is_empty() {
        return Err(CapsError::InvalidArgument("target set is empty".into()));
    }
    let mut mask = vec![false; classes];
    for &t in targets {
        if t >= classes {
            return Err(CapsError::InvalidArgument(format!("target class {t} out of range for {classes} classes")));
        }
        mask[t] = true;
    }
    Ok(mask)
}

/// Margin loss summed over classes. `targets` lists the present classes.
pub fn margin_loss<T: Real>(lengths: &[T], targets: &[usize], params: MarginParams) -> Result<f64> {
    let mask = targets_mask(targets, lengths.len())?;
    let mut g = Graph::<T>::new();
    let l = g.constant(Tensor::new(vec![lengths.len()], lengths.to_vec())?);
    let loss = g.margin_loss(l, &mask, params)?;
    Ok(g.value(loss)[0].as_f64())
}

/// Sum of squared differences between a reconstruction and the target pixels.
pub fn reconstruction_loss<T: Real>(recon: &[T], image: &[T]) -> Result<f64> {
    if recon.len() != image.len() {
        return Err(CapsError::InvalidArgument(format!(
            "reconstruction has {} pixels, image {}",
            recon.len(),
            image.len()
        )));
    }
    Ok(recon
        .iter()
        .zip(image)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum())
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, key: &rng::RngKey, index: u64) -> Tensor<T> {
    let mut r = rng::stream(key, domain::INIT, index);
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut r)))
}

impl<T: Real> CapsNet<T> {
    /// Fresh model. Conv and decoder weights are drawn with std
    /// `sqrt(2 / fan_in)`, transformation matrices with std 0.1, biases and
    /// priors start at zero.
    pub fn new(config: CapsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let key = rng::key_from_seed(seed);
        let c = &config;
        let c1_fan = (c.conv1_kernel * c.conv1_kernel) as f64;
        let pc = c.primary_types * c.primary_dim;
        let p_fan = (c.conv1_channels * c.primary_kernel * c.primary_kernel) as f64;
        let [h0, h1] = c.decoder_hidden;
        let dims = [(c.decoder_input(), h0), (h0, h1), (h1, c.decoder_output())];
        let decoder = std::array::from_fn(|i| {
            let (inp, out) = dims[i];
            DenseLayer {
                weight: normal_tensor(&[out, inp], (2.0 / inp as f64).sqrt(), &key, 3 + i as u64),
                bias: Tensor::zeros(&[out]),
            }
        });
        Ok(Self {
            conv1_weight: normal_tensor(
                &[c.conv1_channels, 1, c.conv1_kernel, c.conv1_kernel],
                (2.0 / c1_fan).sqrt(),
                &key,
                0,
            ),
            conv1_bias: Tensor::zeros(&[c.conv1_channels]),
            primary_weight: normal_tensor(
                &[pc, c.conv1_channels, c.primary_kernel, c.primary_kernel],
                (2.0 / p_fan).sqrt(),
                &key,
                1,
            ),
            primary_bias: Tensor::zeros(&[pc]),
            digit_weight: normal_tensor(&[c.num_primary(), c.num_classes, c.digit_dim, c.primary_dim], 0.1, &key, 2),
            priors: c.learnable_priors.then(|| Tensor::zeros(&[c.num_primary(), c.num_parents()])),
            decoder,
            config,
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    /// Changes settings that do not alter any parameter shape.
    pub fn set_routing_iterations(&mut self, iterations: usize) -> Result<()> {
        if iterations == 0 {
            return Err(CapsError::InvalidArgument("routing iterations must be at least 1".into()));
        }
        self.config.routing_iterations = iterations;
        Ok(())
    }

    pub fn parameter_count(&self) -> ParamCount {
        self.config.parameter_count()
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![
            ("conv1.weight", &self.conv1_weight),
            ("conv1.bias", &self.conv1_bias),
            ("primary.weight", &self.primary_weight),
            ("primary.bias", &self.primary_bias),
            ("digit.weight", &self.digit_weight),
        ];
        if let Some(p) = &self.priors {
            v.push(("routing.priors", p));
        }
        const DEC: [[&str; 2]; 3] = [
            ["decoder.0.weight", "decoder.0.bias"],
            ["decoder.1.weight", "decoder.1.bias"],
            ["decoder.2.weight", "decoder.2.bias"],
        ];
        for (layer, [wn, bn]) in self.decoder.iter().zip(DEC) {
            v.push((wn, &layer.weight));
            v.push((bn, &layer.bias));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![
            ("conv1.weight", &mut self.conv1_weight),
            ("conv1.bias", &mut self.conv1_bias),
            ("primary.weight", &mut self.primary_weight),
            ("primary.bias", &mut self.primary_bias),
            ("digit.weight", &mut self.digit_weight),
        ];
        if let Some(p) = &mut self.priors {
            v.push(("routing.priors", p));
        }
        let [d0, d1, d2] = &mut self.decoder;
        v.push(("decoder.0.weight", &mut d0.weight));
        v.push(("decoder.0.bias", &mut d0.bias));
        v.push(("decoder.1.weight", &mut d1.weight));
        v.push(("decoder.1.bias", &mut d1.bias));
        v.push(("decoder.2.weight", &mut d2.weight));
        v.push(("decoder.2.bias", &mut d2.bias));
        v
    }

    /// Rebuilds a model from named tensors, as stored in a checkpoint.
    pub fn from_named(config: CapsNetConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut filled = vec![false; model.param_names().len()];
        for (name, t) in tensors {
            let mut slots = model.params_mut();
            let Some(idx) = slots.iter().position(|(n, _)| *n == name) else {
                return Err(CapsError::InvalidArgument(format!("unknown tensor name {name:?}")));
            };
            let slot = &mut slots[idx].1;
            if slot.shape() != t.shape() {
                return Err(CapsError::InvalidArgument(format!(
                    "tensor {name:?} has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
            filled[idx] = true;
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            return Err(CapsError::InvalidArgument(format!("missing tensor {:?}", model.param_names()[missing])));
        }
        Ok(model)
    }

    fn zeros(config: CapsNetConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let pc = c.primary_types * c.primary_dim;
        let [h0, h1] = c.decoder_hidden;
        let dims = [(c.decoder_input(), h0), (h0, h1), (h1, c.decoder_output())];
        Ok(Self {
            conv1_weight: Tensor::zeros(&[c.conv1_channels, 1, c.conv1_kernel, c.conv1_kernel]),
            conv1_bias: Tensor::zeros(&[c.conv1_channels]),
            primary_weight: Tensor::zeros(&[pc, c.conv1_channels, c.primary_kernel, c.primary_kernel]),
            primary_bias: Tensor::zeros(&[pc]),
            digit_weight: Tensor::zeros(&[c.num_primary(), c.num_classes, c.digit_dim, c.primary_dim]),
            priors: c.learnable_priors.then(|| Tensor::zeros(&[c.num_primary(), c.num_parents()])),
            decoder: std::array::from_fn(|i| DenseLayer {
                weight: Tensor::zeros(&[dims[i].1, dims[i].0]),
                bias: Tensor::zeros(&[dims[i].1]),
            }),
            config,
        })
    }

    pub fn cast<U: Real>(&self) -> CapsNet<U> {
        CapsNet {
            config: self.config.clone(),
            conv1_weight: self.conv1_weight.cast(),
            conv1_bias: self.conv1_bias.cast(),
            primary_weight: self.primary_weight.cast(),
            primary_bias: self.primary_bias.cast(),
            digit_weight: self.digit_weight.cast(),
            priors: self.priors.as_ref().map(Tensor::cast),
            decoder: std::array::from_fn(|i| DenseLayer {
                weight: self.decoder[i].weight.cast(),
                bias: self.decoder[i].bias.cast(),
            }),
        }
    }

    /// Registers every parameter in `g`, as tracked leaves when `trainable`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, trainable: bool) -> BoundParams {
        let mut put = |t: &'p Tensor<T>| if trainable { g.param(t) } else { g.constant_ref(t) };
        BoundParams {
            conv1_weight: put(&self.conv1_weight),
            conv1_bias: put(&self.conv1_bias),
            primary_weight: put(&self.primary_weight),
            primary_bias: put(&self.primary_bias),
            digit_weight: put(&self.digit_weight),
            priors: self.priors.as_ref().map(&mut put),
            decoder: std::array::from_fn(|i| (put(&self.decoder[i].weight), put(&self.decoder[i].bias))),
        }
    }

    /// Adds an input image node `[1, H, W]`, accepting `[H, W]`, `[1, H, W]`
    /// or flat `[H*W]` tensors.
    pub fn image_node(&self, g: &mut Graph<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let s = self.config.input_size;
        let ok = matches!(image.shape(), [h, w] | [1, h, w] if *h == s && *w == s) || image.shape() == [s * s];
        if !ok {
            return Err(CapsError::InvalidArgument(format!("expected a {s}x{s} image, got shape {:?}", image.shape())));
        }
        Ok(g.constant(Tensor::new(vec![1, s, s], image.data().to_vec())?))
    }

    /// Conv1 -> PrimaryCapsules -> prediction vectors -> routing -> lengths.
    pub fn digit_caps(&self, g: &mut Graph<'_, T>, p: &BoundParams, image: Var) -> Result<DigitCaps<T>> {
        let c = &self.config;
        let conv = g.conv2d(image, p.conv1_weight, p.conv1_bias, 1)?;
        let features = g.relu(conv);
        let u = capsule::primary_capsules(
            g,
            features,
            p.primary_weight,
            p.primary_bias,
            c.primary_types,
            c.primary_stride,
        )?;
        let mut pred = capsule::predict(g, u, p.digit_weight)?;
        if c.orphan {
            pred = capsule::orphan_extend(g, pred)?;
        }
        let routed = capsule::route(g, pred, c.routing_iterations, p.priors)?;
        let v = if c.orphan { g.narrow(routed.v, c.num_classes)? } else { routed.v };
        let lengths = g.norm(v);
        Ok(DigitCaps { v, lengths, state: routed.state, trace: routed.trace })
    }

    /// Decoder applied to a flattened `[classes * digit_dim]` input.
    pub fn decoder_graph(&self, g: &mut Graph<'_, T>, p: &BoundParams, input: Var) -> Result<Var> {
        let mut x = input;
        for (i, (w, b)) in p.decoder.iter().enumerate() {
            let y = g.dense(x, *w, *b)?;
            x = if i < 2 { g.relu(y) } else { g.sigmoid(y) };
        }
        Ok(x)
    }

    /// Masks every capsule but `class`, then decodes.
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, p: &BoundParams, v: Var, class: usize) -> Result<Var> {
        if class >= self.config.num_classes {
            return Err(CapsError::InvalidArgument(format!("class {class} out of range")));
        }
        let masked = g.mask_row(v, class)?;
        self.decoder_graph(g, p, masked)
    }

    /// Builds the training objective `margin + recon_scale * reconstruction`.
    /// With a zero scale the decoder is not evaluated.
    pub fn loss_graph(&self, g: &mut Graph<'_, T>, p: &BoundParams, sample: &TrainSample<T>) -> Result<LossNodes<T>> {
        let mask = targets_mask(&sample.targets, self.config.num_classes)?;
        let image = self.image_node(g, &sample.image)?;
        let caps = self.digit_caps(g, p, image)?;
        let margin = g.margin_loss(caps.lengths, &mask, self.config.margin)?;
        if self.config.recon_scale == 0.0 || sample.recon_targets.is_empty() {
            return Ok(LossNodes { total: margin, margin, reconstruction: None, caps });
        }
        let mut recon_total: Option<Var> = None;
        for (class, target) in &sample.recon_targets {
            let out = self.decode_graph(g, p, caps.v, *class)?;
            if target.len() != self.config.decoder_output() {
                return Err(CapsError::InvalidArgument(format!(
                    "reconstruction target has {} pixels, decoder emits {}",
                    target.len(),
                    self.config.decoder_output()
                )));
            }
            let t = g.constant(Tensor::new(vec![target.len()], target.data().to_vec())?);
            let err = g.squared_error(out, t)?;
            recon_total = Some(match recon_total {
                Some(acc) => g.add(acc, err)?,
                None => err,
            });
        }
        let recon = recon_total.expect("non-empty reconstruction targets");
        let scaled = g.scale(recon, T::from_f64(self.config.recon_scale));
        let total = g.add(margin, scaled)?;
        Ok(LossNodes { total, margin, reconstruction: Some(recon), caps })
    }

    pub fn forward(&self, image: &Tensor<T>, decode: Decode) -> Result<ForwardResult<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = self.image_node(&mut g, image)?;
        let caps = self.digit_caps(&mut g, &p, x)?;
        let class = match decode {
            Decode::None => None,
            Decode::Predicted => Some(crate::eval::classify(g.value(caps.lengths))),
            Decode::Class(k) => Some(k),
        };
        let reconstruction = match class {
            Some(k) => {
                let out = self.decode_graph(&mut g, &p, caps.v, k)?;
                Some(g.tensor(out))
            }
            None => None,
        };
        Ok(ForwardResult {
            v: g.tensor(caps.v),
            lengths: g.tensor(caps.lengths),
            state: caps.state,
            trace: caps.trace,
            reconstruction,
        })
    }

    pub fn total_loss(&self, sample: &TrainSample<T>) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let nodes = self.loss_graph(&mut g, &p, sample)?;
        Ok(self.breakdown(&g, &nodes))
    }

    pub(crate) fn breakdown(&self, g: &Graph<'_, T>, nodes: &LossNodes<T>) -> LossBreakdown {
        let margin = g.value(nodes.margin)[0].as_f64();
        let recon = nodes.reconstruction.map_or(0.0, |r| g.value(r)[0].as_f64());
        LossBreakdown::new(margin, recon, self.config.recon_scale)
    }

    /// Loss and per-parameter gradients (in [`CapsNet::param_names`] order)
    /// for one sample.
    pub fn gradients(&self, sample: &TrainSample<T>) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let nodes = self.loss_graph(&mut g, &p, sample)?;
        let loss = self.breakdown(&g, &nodes);
        let mut grads = g.backward(nodes.total)?;
        let out = p
            .vars()
            .into_iter()
            .zip(self.params())
            .map(|(v, (_, t))| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
            .collect();
        Ok((loss, out))
    }

    /// Decodes `v[classes, digit_dim]` with every row but `class` masked.
    pub fn mask_and_decode(&self, v: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        if v.shape() != [c.num_classes, c.digit_dim] {
            return Err(CapsError::InvalidArgument(format!(
                "capsule outputs must be [{}, {}], got {:?}",
                c.num_classes,
                c.digit_dim,
                v.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let vv = g.constant_ref(v);
        let out = self.decode_graph(&mut g, &p, vv, class)?;
        Ok(g.tensor(out))
    }

    /// Decodes a single activity vector placed in the slot of `class`.
    pub fn decode_activity(&self, class: usize, activity: &[T]) -> Result<Tensor<T>> {
        let c = &self.config;
        if activity.len() != c.digit_dim {
            return Err(CapsError::InvalidArgument(format!(
                "activity vector has {} dims, capsules have {}",
                activity.len(),
                c.digit_dim
            )));
        }
        if class >= c.num_classes {
            return Err(CapsError::InvalidArgument(format!("class {class} out of range")));
        }
        let mut v = Tensor::zeros(&[c.num_classes, c.digit_dim]);
        v.data_mut()[class * c.digit_dim..(class + 1) * c.digit_dim].copy_from_slice(activity);
        self.mask_and_decode(&v, class)
    }
}
