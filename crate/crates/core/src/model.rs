//! Encoder → transition → sampling → classifier.
//!
//! The transition path (convolution, batch norm, global max pool) turns
//! encoder feature maps into the latent mean `mu`. In generative mode a
//! training forward pass draws `z = mu + eps * sigma` with one standard
//! normal `eps` row per sample and `sigma = exp(v / 2)`, a single learned
//! vector shared by all inputs. Inference feeds `mu` itself to the
//! classifier. Deterministic mode is the same network with the sampling
//! layer removed; it never reads `v`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape};
use crate::error::{Error, Result};
use crate::nn::{self, AffineParams, BatchNormParams, BnConfig, BnMode, ConvParams};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub stages: Vec<ConvStage>,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    /// Three stride-2 3x3 stages of widths 16/32/64 over 3x32x32 input.
    fn default() -> Self {
        let stage = |c| ConvStage { out_channels: c, kernel: 3, stride: 2, padding: 1 };
        Self { in_channels: 3, image_size: 32, stages: vec![stage(16), stage(32), stage(64)], activation: Activation::Relu }
    }
}

impl EncoderConfig {
    /// `(channels, size)` of the final feature map.
    pub fn output_shape(&self) -> Result<(usize, usize)> {
        if self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("encoder input must have at least one channel and pixel".into()));
        }
        let mut c = self.in_channels;
        let mut s = self.image_size;
        for (i, st) in self.stages.iter().enumerate() {
            if st.out_channels == 0 || st.kernel == 0 {
                return Err(Error::Config(format!("encoder stage {i} has zero width or kernel")));
            }
            s = nn::conv_output_size(s, st.kernel, st.stride, st.padding)
                .ok_or_else(|| Error::Config(format!("encoder stage {i} reduces the feature map below 1x1")))?;
            c = st.out_channels;
        }
        Ok((c, s))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Generative,
    Deterministic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Generative => "generative",
            Mode::Deterministic => "deterministic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub latent_dim: usize,
    pub labels: usize,
    /// Square kernel of the transition convolution ("same" padding, stride 1).
    pub transition_kernel: usize,
    pub bn: BnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), latent_dim: 64, labels: 14, transition_kernel: 3, bn: BnConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (_, s) = self.encoder.output_shape()?;
        if self.latent_dim == 0 || self.labels == 0 {
            return Err(Error::Config("latent_dim and labels must be positive".into()));
        }
        if self.transition_kernel == 0 || self.transition_kernel.is_multiple_of(2) {
            return Err(Error::Config("transition_kernel must be odd".into()));
        }
        if !(self.bn.eps > 0.0) || !(0.0..=1.0).contains(&self.bn.momentum) {
            return Err(Error::Config("batch norm eps must be > 0 and momentum in [0, 1]".into()));
        }
        debug_assert!(s >= 1);
        Ok(())
    }
}

/// All parameters of the network plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DgcParams<T> {
    pub encoder: Vec<ConvParams<T>>,
    pub transition: ConvParams<T>,
    pub bn: BatchNormParams<T>,
    /// Log-variance of the latent Gaussian: `sigma^2 = exp(v)`.
    pub v: Tensor<T>,
    pub classifier: AffineParams<T>,
}

impl<T: Scalar> DgcParams<T> {
    fn slots(&mut self) -> Vec<(String, &mut Tensor<T>, bool)> {
        let mut out = Vec::new();
        for (i, st) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut st.weight, true));
            out.push((format!("encoder.{i}.bias"), &mut st.bias, true));
        }
        out.push(("transition.conv.weight".into(), &mut self.transition.weight, true));
        out.push(("transition.conv.bias".into(), &mut self.transition.bias, true));
        out.push(("transition.bn.gamma".into(), &mut self.bn.gamma, true));
        out.push(("transition.bn.beta".into(), &mut self.bn.beta, true));
        out.push(("transition.bn.running_mean".into(), &mut self.bn.running_mean, false));
        out.push(("transition.bn.running_var".into(), &mut self.bn.running_var, false));
        out.push(("sampling.v".into(), &mut self.v, true));
        out.push(("classifier.weight".into(), &mut self.classifier.weight, true));
        out.push(("classifier.bias".into(), &mut self.classifier.bias, true));
        out
    }

    /// Trainable parameters in their fixed order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.slots().into_iter().filter(|s| s.2).map(|(n, t, _)| (n, t)).collect()
    }

    /// Every stored array (trainable parameters and running statistics).
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.slots().into_iter().map(|(n, t, _)| (n, t)).collect()
    }

    pub fn arrays(&self) -> Vec<(String, Tensor<T>)> {
        let mut copy = self.clone();
        copy.arrays_mut().into_iter().map(|(n, t)| (n, t.detach())).collect()
    }

    pub fn trainable(&self) -> Vec<(String, Tensor<T>)> {
        let mut copy = self.clone();
        copy.trainable_mut().into_iter().map(|(n, t)| (n, t.detach())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor<T>> {
        self.arrays().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replace one array; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut slots = self.slots();
        let slot = slots
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("set_param", format!("{name}: {:?} vs {:?}", slot.1.shape(), value.shape())));
        }
        *slot.1 = value;
        Ok(())
    }

    /// Copy with every trainable parameter registered on `tape` under its
    /// name. Running statistics stay untracked.
    pub fn bind(&self, tape: &Tape<T>) -> Self {
        let mut bound = self.clone();
        for (name, t) in bound.trainable_mut() {
            *t = tape.param(&name, t);
        }
        bound
    }
}

/// Intermediate and final values of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub mu: Tensor<T>,
    /// `None` in deterministic mode and at inference.
    pub sigma: Option<Tensor<T>>,
    pub z: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgcModel<T> {
    pub config: ModelConfig,
    pub mode: Mode,
    pub params: DgcParams<T>,
}

fn kaiming<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::raw(shape, (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect())
}

fn unit_uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Tensor<T> {
    Tensor::raw(vec![n], (0..n).map(|_| T::of(rng.random::<f64>())).collect())
}

/// Latent mean `mu = Trans(En(images))`, shape `[N, D]`. Train-mode batch
/// norm updates the running statistics held in `params`.
pub fn encode<T: Scalar>(
    config: &ModelConfig,
    tape: &Tape<T>,
    params: &mut DgcParams<T>,
    images: &Tensor<T>,
    bn: BnMode,
) -> Result<Tensor<T>> {
    let e = &config.encoder;
    let want = [e.in_channels, e.image_size, e.image_size];
    if images.rank() != 4 || images.shape()[1..] != want {
        return Err(Error::shape("encode", format!("images {:?}, model expects [N, {}, {}, {}]", images.shape(), want[0], want[1], want[2])));
    }
    let mut h = images.clone();
    for (stage, p) in e.stages.iter().zip(&params.encoder) {
        h = nn::conv2d(tape, &h, p, stage.stride, stage.padding)?;
        h = match e.activation {
            Activation::Relu => tape.unary(OpKind::Relu, &h)?,
        };
    }
    let h = nn::conv2d(tape, &h, &params.transition, 1, config.transition_kernel / 2)?;
    let h = nn::batchnorm(tape, &h, &mut params.bn, bn, config.bn)?;
    nn::global_max_pool(tape, &h)
}

/// `z = mu + noise * sigma` with `sigma = exp(v / 2)` broadcast over rows.
/// Returns `(z, sigma)`.
pub fn sample_latent<T: Scalar>(
    tape: &Tape<T>,
    mu: &Tensor<T>,
    v: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if noise.shape() != mu.shape() {
        return Err(Error::shape("sample_latent", format!("noise {:?} vs mu {:?}", noise.shape(), mu.shape())));
    }
    let half_v = tape.unary(OpKind::Scale(0.5), v)?;
    let sigma = tape.unary(OpKind::Exp, &half_v)?;
    let spread = tape.mul_row(noise, &sigma)?;
    let z = tape.add(mu, &spread)?;
    Ok((z, sigma))
}

/// Scores and probabilities `sigmoid(z W + b)`.
pub fn classify<T: Scalar>(tape: &Tape<T>, z: &Tensor<T>, params: &AffineParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let logits = nn::affine(tape, z, params)?;
    let probs = tape.unary(OpKind::Sigmoid, &logits)?;
    Ok((logits, probs))
}

impl<T: Scalar> DgcModel<T> {
    /// Fresh model. Draw order from the init stream: encoder kernels (stage
    /// order), transition kernel, batch-norm gamma, `v`, classifier weight.
    /// Kernels and the classifier weight are `U(-sqrt(6/fan_in), sqrt(6/fan_in))`;
    /// gamma and `v` are `U(0, 1)`; biases and beta are 0.
    pub fn init(config: &ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut encoder = Vec::new();
        let mut c = config.encoder.in_channels;
        for st in &config.encoder.stages {
            let fan_in = c * st.kernel * st.kernel;
            encoder.push(ConvParams {
                weight: kaiming(&mut rng, vec![st.out_channels, c, st.kernel, st.kernel], fan_in),
                bias: Tensor::zeros(vec![st.out_channels]),
            });
            c = st.out_channels;
        }
        let (d, k) = (config.latent_dim, config.transition_kernel);
        let transition = ConvParams {
            weight: kaiming(&mut rng, vec![d, c, k, k], c * k * k),
            bias: Tensor::zeros(vec![d]),
        };
        let mut bn = BatchNormParams::identity(d);
        bn.gamma = unit_uniform(&mut rng, d);
        let v = unit_uniform(&mut rng, d);
        let classifier = AffineParams {
            weight: kaiming(&mut rng, vec![d, config.labels], d),
            bias: Tensor::zeros(vec![config.labels]),
        };
        Ok(Self { config: config.clone(), mode, params: DgcParams { encoder, transition, bn, v, classifier } })
    }

    /// Same parameters, different mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// `sigma = exp(v / 2)`.
    pub fn sigma(&self) -> Vec<f64> {
        self.params.v.data().iter().map(|v| (v.f64() / 2.0).exp()).collect()
    }

    /// Standard normal draws, one row of width `latent_dim` per sample.
    pub fn draw_noise<R: Rng>(&self, rng: &mut R, batch: usize) -> Tensor<T> {
        let d = self.config.latent_dim;
        Tensor::raw(vec![batch, d], (0..batch * d).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect())
    }

    /// Tracked forward pass. `noise` is required in generative mode when
    /// `bn` is `Train` and ignored in deterministic mode. Train-mode batch
    /// norm commits its running statistics to `self`.
    pub fn forward(&mut self, tape: &Tape<T>, images: &Tensor<T>, bn: BnMode, noise: Option<&Tensor<T>>) -> Result<Forward<T>> {
        let mut bound = self.params.bind(tape);
        let out = self.run(tape, &mut bound, images, bn, noise)?;
        self.params.bn.running_mean = bound.bn.running_mean;
        self.params.bn.running_var = bound.bn.running_var;
        Ok(out)
    }

    /// Forward over externally supplied (possibly tracked) parameters.
    pub fn run(
        &self,
        tape: &Tape<T>,
        params: &mut DgcParams<T>,
        images: &Tensor<T>,
        bn: BnMode,
        noise: Option<&Tensor<T>>,
    ) -> Result<Forward<T>> {
        let mu = encode(&self.config, tape, params, images, bn)?;
        let (z, sigma) = match (self.mode, noise) {
            (Mode::Generative, Some(eps)) => {
                let (z, s) = sample_latent(tape, &mu, &params.v, eps)?;
                (z, Some(s))
            }
            (Mode::Generative, None) if bn == BnMode::Train => {
                return Err(Error::Config("generative training pass needs a noise tensor".into()))
            }
            _ => (mu.clone(), None),
        };
        let (logits, probs) = classify(tape, &z, &params.classifier)?;
        Ok(Forward { mu, sigma, z, logits, probs })
    }

    /// Training pass of the generative model: train-mode batch norm and
    /// `z = mu + noise * sigma`.
    pub fn forward_train(&mut self, tape: &Tape<T>, images: &Tensor<T>, noise: &Tensor<T>) -> Result<Forward<T>> {
        if self.mode != Mode::Generative {
            return Err(Error::Config("forward_train needs a generative model".into()));
        }
        self.forward(tape, images, BnMode::Train, Some(noise))
    }

    /// Deterministic-baseline pass: `mu` goes straight to the classifier.
    pub fn forward_baseline(&mut self, tape: &Tape<T>, images: &Tensor<T>, bn: BnMode) -> Result<Forward<T>> {
        if self.mode != Mode::Deterministic {
            return Err(Error::Config("forward_baseline needs a deterministic model".into()));
        }
        self.forward(tape, images, bn, None)
    }

    /// Inference: eval-mode batch norm and `z = mu`, no randomness. Returns
    /// probabilities `[N, labels]`.
    pub fn forward_eval(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut params = self.params.clone();
        Ok(self.run(&tape, &mut params, images, BnMode::Eval, None)?.probs)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable().iter().map(|(_, t)| t.len()).sum()
    }
}
