//! Synthetic end-to-end experiments: data generation, the
//! generative-vs-deterministic comparison over paired seeds.

use std::collections::HashMap;

use indexmap::IndexMap;
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synthetic::add_pixel_noise;
use crate::data::{generate_synthetic, split_three, Dataset, GrayImage, Manifest};
use crate::error::Result;
use crate::exec;
use crate::metrics::{compare_report, Comparison, RocReport};
use crate::model::Mode;
use crate::rng::{self, Stream};
use crate::trainer::{evaluate, train, EpochRecord, TrainOutcome};

/// Generated images and their patient-level split.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub images: Vec<GrayImage>,
    pub manifest: Manifest,
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

impl SyntheticData {
    /// `n_train + n_val + n_test` images from the data seed, split by
    /// patient in those proportions with the split seed.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let total = cfg.n_train + cfg.n_val + cfg.n_test;
        let (images, manifest) = generate_synthetic(&cfg.synthetic_spec(), total)?;
        let t = total as f64;
        let fractions = [cfg.n_train as f64 / t, cfg.n_val as f64 / t, cfg.n_test as f64 / t];
        let (train, val, test) = split_three(&manifest, fractions, cfg.split_seed())?;
        Ok(Self { images, manifest, train, val, test })
    }

    /// Images belonging to `part`, in its record order.
    pub fn images_of(&self, part: &Manifest) -> Vec<GrayImage> {
        let index: HashMap<&str, usize> =
            self.manifest.records().iter().enumerate().map(|(i, r)| (r.image_path.as_str(), i)).collect();
        part.records().iter().map(|r| self.images[index[r.image_path.as_str()]].clone()).collect()
    }

    pub fn dataset(&self, part: &Manifest, cfg: &RunConfig) -> Result<Dataset<f32>> {
        Dataset::from_images(part.clone(), &self.images_of(part), &cfg.preprocess_config())
    }

    /// Test split with `eval_noise_std` pixel noise drawn from the
    /// eval-noise stream of the data seed.
    pub fn noisy_test(&self, cfg: &RunConfig) -> Result<Dataset<f32>> {
        let mut rng = rng::stream(cfg.data_seed(), Stream::EvalNoise);
        let noisy: Vec<GrayImage> =
            self.images_of(&self.test).iter().map(|img| add_pixel_noise(img, cfg.eval_noise_std, &mut rng)).collect();
        Dataset::from_images(self.test.clone(), &noisy, &cfg.preprocess_config())
    }
}

/// Preprocessed splits ready for training.
pub struct Splits {
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
    pub test: Dataset<f32>,
}

pub fn synthetic_splits(cfg: &RunConfig, noisy_test: bool) -> Result<Splits> {
    let data = SyntheticData::generate(cfg)?;
    Ok(Splits {
        train: data.dataset(&data.train, cfg)?,
        val: data.dataset(&data.val, cfg)?,
        test: if noisy_test { data.noisy_test(cfg)? } else { data.dataset(&data.test, cfg)? },
    })
}

pub struct CompareRun {
    pub mode: Mode,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub test: RocReport,
}

pub struct CompareOutcome {
    pub runs: Vec<CompareRun>,
    pub reports: IndexMap<String, Vec<RocReport>>,
    pub comparison: Comparison,
}

/// Config of one paired run: init, shuffle and noise seeds all equal
/// `base + k`, shared by both modes.
pub fn paired_config(cfg: &RunConfig, mode: Mode, k: u64) -> RunConfig {
    let s = cfg.seed + k;
    RunConfig { mode, init_seed: Some(s), shuffle_seed: Some(s), noise_seed: Some(s), ..cfg.clone() }
}

/// Train both modes for `seeds` paired seeds on one synthetic dataset and
/// score them on its noise-injected test split.
pub fn run_compare(cfg: &RunConfig, seeds: usize) -> Result<CompareOutcome> {
    let splits = synthetic_splits(cfg, true)?;
    let modes = [Mode::Generative, Mode::Deterministic];
    let jobs: Vec<(Mode, u64)> = (0..seeds as u64).flat_map(|k| modes.map(|m| (m, k))).collect();
    let results = exec::map_indexed(jobs.len(), |j| -> Result<CompareRun> {
        let (mode, k) = jobs[j];
        let run_cfg = paired_config(cfg, mode, k);
        let TrainOutcome { best, history, .. } = train(&run_cfg.train_config()?, &splits.train, &splits.val)?;
        let test = evaluate(&best.model, &splits.test)?;
        info!("{} seed {}: test mean AUC {:?}", mode.name(), cfg.seed + k, test.mean_auc);
        Ok(CompareRun { mode, seed: cfg.seed + k, history, best, test })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut reports: IndexMap<String, Vec<RocReport>> = modes.iter().map(|m| (m.name().to_string(), Vec::new())).collect();
    for r in &runs {
        reports[r.mode.name()].push(r.test.clone());
    }
    let comparison = compare_report(&reports)?;
    Ok(CompareOutcome { runs, reports, comparison })
}
