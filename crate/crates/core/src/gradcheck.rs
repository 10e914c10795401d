//! Finite-difference suite over every primitive, layer, the sampling
//! layer, both loss paths and the full model with its loss.
//!
//! Each case reduces its output to a scalar through a fixed random
//! weighting (a plain sum would hide errors in ops whose outputs sum to a
//! constant, such as batch norm) and is checked with respect to each input
//! separately, the others held constant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::check::{grad_check, Failure, GradCheckReport};
use crate::autodiff::{OpKind, Tape};
use crate::error::Result;
use crate::model::{sample_latent, Activation, ConvStage, DgcModel, EncoderConfig, Mode, ModelConfig};
use crate::nn::{self, AffineParams, BatchNormParams, BnConfig, BnMode, ConvParams};
use crate::objective::{weighted_bce_logits, weighted_bce_probs, TargetMatrix};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seeds: 20, step: 1e-5, tolerance: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub seeds: u64,
    pub compared: usize,
    pub kinks: usize,
    /// Compared coordinates too small for a relative test.
    pub below_resolution: usize,
    pub max_rel_error: f64,
    /// `seed: detail` for every failing coordinate.
    pub failures: Vec<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type Case = fn(&mut ChaCha8Rng, &mut Checker) -> Result<()>;

/// Collects reports of one case and seed.
pub struct Checker {
    step: f64,
    tolerance: f64,
    reports: Vec<(String, GradCheckReport)>,
}

impl Checker {
    fn check<F>(&mut self, input: &str, point: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    {
        let r = grad_check(f, point, self.step, self.tolerance)?;
        self.reports.push((input.to_string(), r));
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn targets(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TargetMatrix {
    let mut data: Vec<u8> = (0..rows * cols).map(|_| u8::from(rng.random_bool(0.3))).collect();
    data[0] = 1;
    data[1] = 0;
    TargetMatrix::new(rows, cols, data).unwrap()
}

/// `sum(y * c)` for a constant random weighting `c` of `y`'s shape.
fn project(tape: &Tape<f64>, y: &Tensor<f64>, c: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(tape.sum(&tape.mul(y, c)?))
}

fn unary_case(kind: OpKind, lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()> {
    move |rng, ck| {
        let x = uniform(rng, &[3, 4], lo, hi);
        let c = normal(rng, &[3, 4]);
        ck.check("x", &x, |t, x| project(t, &t.unary(kind, x)?, &c))
    }
}

fn binary_case(kind: OpKind) -> impl Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()> {
    move |rng, ck| {
        let (a, b) = (uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0));
        let c = normal(rng, &[3, 4]);
        ck.check("a", &a, |t, a| project(t, &t.apply(kind, &[a, &b])?, &c))?;
        ck.check("b", &b, |t, b| project(t, &t.apply(kind, &[&a, b])?, &c))
    }
}

fn matmul_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let (a, b) = (uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0));
    let c = normal(rng, &[3, 2]);
    ck.check("a", &a, |t, a| project(t, &t.matmul(a, &b)?, &c))?;
    ck.check("b", &b, |t, b| project(t, &t.matmul(&a, b)?, &c))
}

fn sum_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let x = uniform(rng, &[2, 5], -1.0, 1.0);
    ck.check("x", &x, |t, x| Ok(t.sum(x)))
}

fn add_bias_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let (x, b) = (uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0));
    let c = normal(rng, &[3, 4]);
    ck.check("x", &x, |t, x| project(t, &t.add_bias(x, &b)?, &c))?;
    ck.check("bias", &b, |t, b| project(t, &t.add_bias(&x, b)?, &c))
}

fn mul_row_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let (x, r) = (uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0));
    let c = normal(rng, &[3, 4]);
    ck.check("x", &x, |t, x| project(t, &t.mul_row(x, &r)?, &c))?;
    ck.check("row", &r, |t, r| project(t, &t.mul_row(&x, r)?, &c))
}

fn conv_case(stride: usize, padding: usize) -> impl Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()> {
    move |rng, ck| {
        let x = uniform(rng, &[2, 2, 5, 5], -1.0, 1.0);
        let p = ConvParams { weight: uniform(rng, &[3, 2, 3, 3], -1.0, 1.0), bias: uniform(rng, &[3], -1.0, 1.0) };
        let out = nn::conv2d(&Tape::new(), &x, &p, stride, padding)?;
        let c = normal(rng, out.shape());
        ck.check("x", &x, |t, x| project(t, &nn::conv2d(t, x, &p, stride, padding)?, &c))?;
        ck.check("weight", &p.weight, |t, w| {
            project(t, &nn::conv2d(t, &x, &ConvParams { weight: w.clone(), bias: p.bias.clone() }, stride, padding)?, &c)
        })?;
        ck.check("bias", &p.bias, |t, b| {
            project(t, &nn::conv2d(t, &x, &ConvParams { weight: p.weight.clone(), bias: b.clone() }, stride, padding)?, &c)
        })
    }
}

fn batchnorm_case(mode: BnMode) -> impl Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()> {
    move |rng, ck| {
        let x = uniform(rng, &[3, 2, 2, 2], -1.0, 1.0);
        let mut p = BatchNormParams::identity(2);
        p.gamma = uniform(rng, &[2], 0.2, 1.5);
        p.beta = uniform(rng, &[2], -1.0, 1.0);
        p.running_mean = uniform(rng, &[2], -0.5, 0.5);
        p.running_var = uniform(rng, &[2], 0.5, 2.0);
        let c = normal(rng, &[3, 2, 2, 2]);
        let cfg = BnConfig::default();
        let run = |t: &Tape<f64>, x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let mut q = p.clone();
            q.gamma = gamma.clone();
            q.beta = beta.clone();
            project(t, &nn::batchnorm(t, x, &mut q, mode, cfg)?, &c)
        };
        ck.check("x", &x, |t, x| run(t, x, &p.gamma, &p.beta))?;
        ck.check("gamma", &p.gamma, |t, g| run(t, &x, g, &p.beta))?;
        ck.check("beta", &p.beta, |t, b| run(t, &x, &p.gamma, b))
    }
}

fn max_pool_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let x = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let c = normal(rng, &[2, 3]);
    ck.check("x", &x, |t, x| project(t, &nn::global_max_pool(t, x)?, &c))
}

fn affine_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    let p = AffineParams { weight: uniform(rng, &[4, 2], -1.0, 1.0), bias: uniform(rng, &[2], -1.0, 1.0) };
    let c = normal(rng, &[3, 2]);
    ck.check("x", &x, |t, x| project(t, &nn::affine(t, x, &p)?, &c))?;
    ck.check("weight", &p.weight, |t, w| project(t, &nn::affine(t, &x, &AffineParams { weight: w.clone(), bias: p.bias.clone() })?, &c))?;
    ck.check("bias", &p.bias, |t, b| project(t, &nn::affine(t, &x, &AffineParams { weight: p.weight.clone(), bias: b.clone() })?, &c))
}

fn sampling_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let mu = uniform(rng, &[3, 4], -1.0, 1.0);
    let v = uniform(rng, &[4], 0.0, 1.0);
    let eps = normal(rng, &[3, 4]);
    let c = normal(rng, &[3, 4]);
    ck.check("mu", &mu, |t, mu| project(t, &sample_latent(t, mu, &v, &eps)?.0, &c))?;
    ck.check("v", &v, |t, v| project(t, &sample_latent(t, &mu, v, &eps)?.0, &c))
}

fn loss_logits_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let z = uniform(rng, &[4, 5], -3.0, 3.0);
    let y = targets(rng, 4, 5);
    ck.check("logits", &z, |t, z| weighted_bce_logits(t, z, &y))
}

fn loss_probs_case(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let p = uniform(rng, &[4, 5], 0.05, 0.95);
    let y = targets(rng, 4, 5);
    ck.check("probs", &p, |t, p| weighted_bce_probs(t, p, &y))
}

/// Tiny encoder used by the end-to-end cases.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            image_size: 8,
            stages: vec![
                ConvStage { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                ConvStage { out_channels: 6, kernel: 3, stride: 1, padding: 1 },
            ],
            activation: Activation::Relu,
        },
        latent_dim: 5,
        labels: 3,
        transition_kernel: 3,
        bn: BnConfig::default(),
    }
}

fn model_case(mode: Mode) -> impl Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()> {
    move |rng, ck| {
        let cfg = tiny_model_config();
        let model = DgcModel::<f64>::init(&cfg, mode, rng.random())?;
        let images = uniform(rng, &[2, 3, 8, 8], -2.0, 2.0);
        let noise = (mode == Mode::Generative).then(|| normal(rng, &[2, cfg.latent_dim]));
        let y = targets(rng, 2, cfg.labels);
        let loss = |t: &Tape<f64>, params: &mut crate::model::DgcParams<f64>, x: &Tensor<f64>| {
            let out = model.run(t, params, x, BnMode::Train, noise.as_ref())?;
            weighted_bce_logits(t, &out.logits, &y)
        };
        ck.check("images", &images, |t, x| loss(t, &mut model.params.clone(), x))?;
        for (name, value) in model.params.trainable() {
            if mode == Mode::Deterministic && name == "sampling.v" {
                continue;
            }
            ck.check(&name, &value, |t, x| {
                let mut params = model.params.clone();
                params.set(&name, x.clone())?;
                loss(t, &mut params, &images)
            })?;
        }
        Ok(())
    }
}

fn cases() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()>>)> {
    let plain = |f: Case| -> Box<dyn Fn(&mut ChaCha8Rng, &mut Checker) -> Result<()>> { Box::new(f) };
    vec![
        ("op/add", Box::new(binary_case(OpKind::Add))),
        ("op/sub", Box::new(binary_case(OpKind::Sub))),
        ("op/mul", Box::new(binary_case(OpKind::Mul))),
        ("op/matmul", plain(matmul_case)),
        ("op/exp", Box::new(unary_case(OpKind::Exp, -2.0, 2.0))),
        ("op/ln", Box::new(unary_case(OpKind::Ln, 0.3, 3.0))),
        ("op/relu", Box::new(unary_case(OpKind::Relu, -2.0, 2.0))),
        ("op/sigmoid", Box::new(unary_case(OpKind::Sigmoid, -4.0, 4.0))),
        ("op/scale", Box::new(unary_case(OpKind::Scale(-1.7), -2.0, 2.0))),
        ("op/sum", plain(sum_case)),
        ("op/add_bias", plain(add_bias_case)),
        ("op/mul_row", plain(mul_row_case)),
        ("layer/conv2d stride 1", Box::new(conv_case(1, 1))),
        ("layer/conv2d stride 2", Box::new(conv_case(2, 0))),
        ("layer/batchnorm train", Box::new(batchnorm_case(BnMode::Train))),
        ("layer/batchnorm eval", Box::new(batchnorm_case(BnMode::Eval))),
        ("layer/global_max_pool", plain(max_pool_case)),
        ("layer/affine", plain(affine_case)),
        ("sampling/reparameterize", plain(sampling_case)),
        ("loss/weighted bce logits", plain(loss_logits_case)),
        ("loss/weighted bce probs", plain(loss_probs_case)),
        ("model/generative + loss", Box::new(model_case(Mode::Generative))),
        ("model/deterministic + loss", Box::new(model_case(Mode::Deterministic))),
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Run every case over `config.seeds` seeds.
pub fn run_suite(config: &SuiteConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (c, (name, case)) in cases().into_iter().enumerate() {
        let mut result =
            CaseResult { name: name.to_string(), seeds: config.seeds, compared: 0, kinks: 0, below_resolution: 0, max_rel_error: 0.0, failures: Vec::new() };
        for seed in 0..config.seeds {
            let mut rng = rng::epoch_stream(seed, Stream::Check, c);
            let mut ck = Checker { step: config.step, tolerance: config.tolerance, reports: Vec::new() };
            case(&mut rng, &mut ck)?;
            for (input, r) in ck.reports {
                result.compared += r.compared;
                result.kinks += r.kinks.len();
                result.below_resolution += r.below_resolution;
                result.max_rel_error = result.max_rel_error.max(r.max_rel_error);
                for f in r.failures {
                    result.failures.push(match f {
                        Failure::Mismatch { index, analytic, numeric, rel_error } => {
                            format!("seed {seed}, {input}[{index}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel_error:e}")
                        }
                        Failure::NonFinite { index, analytic, numeric } => {
                            format!("seed {seed}, {input}[{index}]: non-finite (analytic {analytic}, numeric {numeric})")
                        }
                    });
                }
            }
        }
        out.push(result);
    }
    Ok(out)
}
