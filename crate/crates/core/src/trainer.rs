//! Mini-batch training with per-epoch validation and best-model selection.
//!
//! Each step draws fresh noise for the generative model, sums the weighted
//! loss over the batch, backpropagates and applies one Adam update. After
//! every epoch the model is scored by mean validation AUC using the
//! noise-free inference path, and the best epoch is kept (ties keep the
//! earlier epoch).

use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::RocReport;
use crate::model::{DgcModel, Mode, ModelConfig};
use crate::nn::BnMode;
use crate::objective::weighted_bce_logits;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, Stream};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub mode: Mode,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub noise_seed: u64,
    /// Stop after this many epochs without improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            mode: Mode::Generative,
            init_seed: 0,
            shuffle_seed: 0,
            noise_seed: 0,
            patience: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Summed batch losses divided by the number of training images.
    pub train_loss: f64,
    pub val_mean_auc: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Model after the last completed epoch.
    pub last: DgcModel<f32>,
}

fn check_compatible(model: &ModelConfig, data: &Dataset<f32>) -> Result<()> {
    let e = &model.encoder;
    let want = [e.in_channels, e.image_size, e.image_size];
    if !data.is_empty() && data.image_shape() != want {
        return Err(Error::shape("dataset", format!("images are {:?}, model expects {want:?}", data.image_shape())));
    }
    if data.labels() != model.labels {
        return Err(Error::LabelMismatch(format!("dataset has {} labels, model {}", data.labels(), model.labels)));
    }
    Ok(())
}

/// One epoch of updates; returns the summed loss.
fn run_epoch(
    config: &TrainConfig,
    model: &mut DgcModel<f32>,
    adam: &mut AdamState<f32>,
    noise_rng: &mut rand_chacha::ChaCha8Rng,
    data: &Dataset<f32>,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (b, batch) in data.batches(config.batch_size, config.shuffle_seed, epoch)?.enumerate() {
        let non_finite = || Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 };
        let tape = Tape::new();
        let fwd = match model.mode {
            Mode::Generative => {
                let noise = model.draw_noise(noise_rng, batch.indices.len());
                model.forward_train(&tape, &batch.images, &noise)?
            }
            Mode::Deterministic => model.forward_baseline(&tape, &batch.images, BnMode::Train)?,
        };
        let loss = weighted_bce_logits(&tape, &fwd.logits, &batch.targets).map_err(|e| match e {
            Error::Numerical(_) => non_finite(),
            other => other,
        })?;
        let value = f64::from(loss.item());
        if !value.is_finite() {
            return Err(non_finite());
        }
        let grads = tape.backward(&loss)?.by_name();
        adam.step(model.params.trainable_mut(), &grads)?;
        total += value;
    }
    Ok(total)
}

/// Train on `train`, selecting the epoch with the highest mean AUC on `val`.
pub fn train(config: &TrainConfig, train: &Dataset<f32>, val: &Dataset<f32>) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    check_compatible(&config.model, train)?;
    check_compatible(&config.model, val)?;

    let mut model = DgcModel::<f32>::init(&config.model, config.mode, config.init_seed)?;
    let mut adam = AdamState::new(config.adam);
    let mut noise_rng = rng::stream(config.noise_seed, Stream::Noise);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let total = run_epoch(config, &mut model, &mut adam, &mut noise_rng, train, epoch)?;
        let metric = evaluate(&model, val)?.mean_auc.ok_or(Error::EmptyValidation)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            val_mean_auc: metric,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {}: train loss {:.4}, val mean AUC {:.4} ({:.1}s)",
            config.mode.name(),
            record.epoch,
            record.train_loss,
            metric,
            record.wall_seconds
        );
        history.push(record);
        if best.as_ref().is_none_or(|b| metric > b.metric) {
            best = Some(Checkpoint { config: config.clone(), epoch: epoch + 1, metric, model: model.clone() });
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                debug!("no improvement for {since_best} epochs, stopping");
                break;
            }
        }
    }
    Ok(TrainOutcome { best: best.expect("at least one epoch"), history, last: model })
}

/// Inference probabilities for every record in manifest order, row-major
/// `n x labels`.
pub fn predict(model: &DgcModel<f32>, data: &Dataset<f32>) -> Result<Vec<f64>> {
    check_compatible(&model.config, data)?;
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let parts = exec::map_indexed(chunks, |k| {
        let idx: Vec<usize> = (k * EVAL_CHUNK..((k + 1) * EVAL_CHUNK).min(data.len())).collect();
        model.forward_eval(&data.gather(&idx).images).map(|p| p.to_f64_vec())
    });
    let mut out = Vec::with_capacity(data.len() * model.config.labels);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// ROC report of noise-free inference over `data`.
pub fn evaluate(model: &DgcModel<f32>, data: &Dataset<f32>) -> Result<RocReport> {
    let probs = predict(model, data)?;
    RocReport::from_scores(data.manifest().label_names(), &probs, &data.targets())
}

pub fn write_history_csv<W: std::io::Write>(history: &[EpochRecord], mut out: W, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_mean_auc", "wall_seconds"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_mean_auc.to_string(), format!("{:.3}", r.wall_seconds)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, PreprocessConfig, SyntheticSpec};
    use crate::gradcheck::tiny_model_config;
    use crate::tensor::Tensor;

    fn data(n: usize, seed: u64, amplitude: f64, prevalence: f64) -> Dataset<f32> {
        let spec = SyntheticSpec {
            image_size: 8,
            labels: 3,
            frequency: vec![2.0],
            prevalence: vec![prevalence],
            amplitude,
            noise_std: 0.05,
            images_per_patient: 1,
            seed,
        };
        let (imgs, m) = generate_synthetic(&spec, n).unwrap();
        Dataset::from_images(m, &imgs, &PreprocessConfig::identity_geometry()).unwrap()
    }

    fn config(mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            model: tiny_model_config(),
            mode,
            init_seed: 1,
            shuffle_seed: 2,
            noise_seed: 3,
            patience: None,
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (tr, va) = (data(24, 1, 0.3, 0.4), data(12, 2, 0.3, 0.4));
        let mut cfg = config(Mode::Generative);
        cfg.adam.lr = 0.0;
        let out = train(&cfg, &tr, &va).unwrap();
        let init = DgcModel::<f32>::init(&cfg.model, cfg.mode, cfg.init_seed).unwrap();
        assert_eq!(out.last.params.trainable(), init.params.trainable());
    }

    #[test]
    fn tiny_deterministic_loss_strictly_decreases() {
        let tr = data(4, 5, 0.3, 0.5);
        let mut cfg = config(Mode::Deterministic);
        cfg.epochs = 5;
        cfg.batch_size = 4;
        let out = train(&cfg, &tr, &tr).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let (tr, va) = (data(24, 1, 0.3, 0.4), data(12, 2, 0.3, 0.4));
        let cfg = config(Mode::Generative);
        let a = train(&cfg, &tr, &va).unwrap();
        let b = train(&cfg, &tr, &va).unwrap();
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.train_loss, r.val_mean_auc)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn best_metric_is_history_maximum() {
        let (tr, va) = (data(32, 3, 0.2, 0.3), data(16, 4, 0.2, 0.3));
        let mut cfg = config(Mode::Generative);
        cfg.epochs = 5;
        let out = train(&cfg, &tr, &va).unwrap();
        let max = out.history.iter().map(|r| r.val_mean_auc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best.metric, max);
        let first = out.history.iter().find(|r| r.val_mean_auc == max).unwrap();
        assert_eq!(out.best.epoch, first.epoch);
    }

    #[test]
    fn noise_seed_unused_in_deterministic_mode() {
        let (tr, va) = (data(24, 1, 0.3, 0.4), data(12, 2, 0.3, 0.4));
        let cfg = config(Mode::Deterministic);
        let other = TrainConfig { noise_seed: 999, ..cfg.clone() };
        let a = train(&cfg, &tr, &va).unwrap();
        let b = train(&other, &tr, &va).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.best.model, b.best.model);
    }

    #[test]
    fn noise_seed_matters_in_generative_mode() {
        let (tr, va) = (data(24, 1, 0.3, 0.4), data(12, 2, 0.3, 0.4));
        let cfg = config(Mode::Generative);
        let other = TrainConfig { noise_seed: 999, ..cfg.clone() };
        assert_ne!(train(&cfg, &tr, &va).unwrap().last, train(&other, &tr, &va).unwrap().last);
    }

    #[test]
    fn patience_stops_early() {
        let (tr, va) = (data(24, 1, 0.3, 0.4), data(12, 2, 0.3, 0.4));
        let mut cfg = config(Mode::Generative);
        cfg.epochs = 12;
        cfg.patience = Some(2);
        let out = train(&cfg, &tr, &va).unwrap();
        let n = out.history.len();
        assert!(n == cfg.epochs || n == out.best.epoch + 2, "{n} epochs, best {}", out.best.epoch);
        assert!(out.history[out.best.epoch..].iter().all(|r| r.val_mean_auc <= out.best.metric));
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let mut total = 0.0;
        for seed in 0..20 {
            let d = data(200, 100 + seed, 0.0, 0.5);
            let model = DgcModel::<f32>::init(&tiny_model_config(), Mode::Generative, seed).unwrap();
            total += evaluate(&model, &d).unwrap().mean_auc.unwrap();
        }
        let mean = total / 20.0;
        assert!((0.4..=0.6).contains(&mean), "{mean}");
    }

    #[test]
    fn evaluation_is_repeatable_and_order_free() {
        let spec = SyntheticSpec { image_size: 8, labels: 3, frequency: vec![2.0], prevalence: vec![0.3], seed: 8, ..Default::default() };
        let (imgs, m) = generate_synthetic(&spec, 150).unwrap();
        let pre = PreprocessConfig::identity_geometry();
        let d = Dataset::<f32>::from_images(m.clone(), &imgs, &pre).unwrap();
        let model = DgcModel::<f32>::init(&tiny_model_config(), Mode::Generative, 4).unwrap();
        let a = evaluate(&model, &d).unwrap();
        assert_eq!(a, evaluate(&model, &d).unwrap());

        let rev: Vec<usize> = (0..imgs.len()).rev().collect();
        let rev_imgs: Vec<_> = rev.iter().map(|&i| imgs[i].clone()).collect();
        let r = Dataset::<f32>::from_images(m.select(&rev), &rev_imgs, &pre).unwrap();
        let b = evaluate(&model, &r).unwrap();
        let aucs = |x: &RocReport| x.labels.iter().map(|l| l.auc).collect::<Vec<_>>();
        assert_eq!(aucs(&a), aucs(&b));
    }

    #[test]
    fn label_width_mismatch_rejected() {
        let spec = SyntheticSpec { image_size: 8, labels: 4, frequency: vec![2.0], prevalence: vec![0.3], ..Default::default() };
        let (imgs, m) = generate_synthetic(&spec, 10).unwrap();
        let d = Dataset::<f32>::from_images(m, &imgs, &PreprocessConfig::identity_geometry()).unwrap();
        let model = DgcModel::<f32>::init(&tiny_model_config(), Mode::Generative, 0).unwrap();
        assert!(matches!(evaluate(&model, &d), Err(Error::LabelMismatch(_))));
        assert!(matches!(train(&config(Mode::Generative), &d, &d), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn empty_validation_rejected() {
        let tr = data(8, 1, 0.3, 0.4);
        let empty = Dataset::<f32>::from_images(tr.manifest().select(&[]), &[], &PreprocessConfig::identity_geometry()).unwrap();
        assert!(matches!(train(&config(Mode::Generative), &tr, &empty), Err(Error::EmptyValidation)));
    }

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    #[test]
    fn batch_loss_is_sum_of_sample_losses() {
        let d = data(16, 9, 0.3, 0.3);
        let batch = d.gather(&(0..16).collect::<Vec<_>>());
        let mut model = DgcModel::<f64>::init(&tiny_model_config(), Mode::Deterministic, 2).unwrap();
        let images = Tensor::<f64>::new(batch.images.shape().to_vec(), batch.images.to_f64_vec()).unwrap();
        let tape = Tape::new();
        let fwd = model.forward_baseline(&tape, &images, BnMode::Train).unwrap();
        let loss = weighted_bce_logits(&tape, &fwd.logits, &batch.targets).unwrap().item();

        let w = crate::objective::batch_weights(&batch.targets);
        let labels = batch.targets.cols();
        let per_sample: Vec<f64> = (0..16)
            .map(|i| {
                let row = batch.targets.row(i);
                (0..labels)
                    .map(|j| {
                        let s = fwd.logits.data()[i * labels + j];
                        if row[j] == 1 {
                            w.w_pos * softplus(-s)
                        } else {
                            w.w_neg * softplus(s)
                        }
                    })
                    .sum()
            })
            .collect();
        let total: f64 = per_sample.iter().sum();
        assert!((loss - total).abs() <= 1e-12 * total.abs().max(1.0), "{loss} vs {total}");
    }
}
