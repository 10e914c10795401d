//! Flat `key = value` (TOML) run configuration with named presets.
//!
//! A file may set `preset = "desk"` (default) or `preset = "paper"`; every
//! key it omits takes that preset's value. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::data::preprocess::{PreprocessConfig, IMAGENET_MEAN, IMAGENET_STD};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{Activation, ConvStage, EncoderConfig, Mode, ModelConfig};
use crate::nn::BnConfig;
use crate::optim::AdamConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,

    /// Base seed; any seed below left unset derives from it.
    pub seed: u64,
    pub init_seed: Option<u64>,
    pub shuffle_seed: Option<u64>,
    pub noise_seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub split_seed: Option<u64>,

    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement before stopping; 0 disables.
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub image_size: usize,
    pub in_channels: usize,
    pub encoder_widths: Vec<usize>,
    /// One value for every stage, or one per stage.
    pub encoder_kernels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub encoder_padding: Vec<usize>,
    pub activation: Activation,
    pub latent_dim: usize,
    pub labels: usize,
    pub transition_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,

    /// Square resize before cropping; 0 keeps the input size.
    pub resize: usize,
    /// Center crop; 0 disables.
    pub crop: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],

    pub synthetic_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub prevalence: Vec<f64>,
    pub frequency: Vec<f64>,
    pub amplitude: f64,
    pub noise_std: f64,
    pub images_per_patient: usize,
    /// Pixel noise added to the test split by `compare`, as a fraction of
    /// full scale.
    pub eval_noise_std: f64,
    /// Patient-level train/val/test fractions for manifests without split lists.
    pub split_fractions: [f64; 3],
}

impl RunConfig {
    /// 32x32 synthetic images, small scratch encoder, latent 64.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            seed: 0,
            init_seed: None,
            shuffle_seed: None,
            noise_seed: None,
            data_seed: None,
            split_seed: None,
            mode: Mode::Generative,
            epochs: 10,
            batch_size: 16,
            patience: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            image_size: 32,
            in_channels: 3,
            encoder_widths: vec![16, 32, 64],
            encoder_kernels: vec![3],
            encoder_strides: vec![2],
            encoder_padding: vec![1],
            activation: Activation::Relu,
            latent_dim: 64,
            labels: 14,
            transition_kernel: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            resize: 0,
            crop: 0,
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
            synthetic_size: 32,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            prevalence: vec![0.1],
            frequency: vec![6.0],
            amplitude: 0.12,
            noise_std: 0.05,
            images_per_patient: 2,
            eval_noise_std: 0.2,
            split_fractions: [0.7, 0.1, 0.2],
        }
    }

    /// 256 -> 224 preprocessing, latent 1024, optimizer at the published
    /// defaults.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            lr: 1e-5,
            image_size: 224,
            encoder_widths: vec![32, 64, 128, 256, 512],
            latent_dim: 1024,
            resize: 256,
            crop: 224,
            synthetic_size: 256,
            frequency: vec![24.0],
            split_fractions: [0.6125, 0.0875, 0.3],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    /// Parse a config file body over its preset's defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let base = Self::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merged.extend(user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.synthetic_spec().validate()?;
        let pp = self.preprocess_config();
        let out = pp.output_size(self.synthetic_size, self.synthetic_size)?;
        if out != self.image_size {
            return Err(Error::Config(format!(
                "synthetic_size {} preprocesses to {out}, but image_size is {}",
                self.synthetic_size, self.image_size
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("need lr >= 0, betas in [0, 1) and adam_eps > 0".into()));
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("norm_std entries must be positive".into()));
        }
        if !(self.eval_noise_std >= 0.0) {
            return Err(Error::Config("eval_noise_std must be non-negative".into()));
        }
        Ok(())
    }

    fn per_stage(&self, values: &[usize], what: &str) -> Result<Vec<usize>> {
        let n = self.encoder_widths.len();
        match values.len() {
            1 => Ok(vec![values[0]; n]),
            m if m == n => Ok(values.to_vec()),
            m => Err(Error::Config(format!("{what}: expected 1 or {n} values, got {m}"))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let kernels = self.per_stage(&self.encoder_kernels, "encoder_kernels")?;
        let strides = self.per_stage(&self.encoder_strides, "encoder_strides")?;
        let padding = self.per_stage(&self.encoder_padding, "encoder_padding")?;
        let stages = (0..self.encoder_widths.len())
            .map(|i| ConvStage { out_channels: self.encoder_widths[i], kernel: kernels[i], stride: strides[i], padding: padding[i] })
            .collect();
        Ok(ModelConfig {
            encoder: EncoderConfig { in_channels: self.in_channels, image_size: self.image_size, stages, activation: self.activation },
            latent_dim: self.latent_dim,
            labels: self.labels,
            transition_kernel: self.transition_kernel,
            bn: BnConfig { eps: self.bn_eps, momentum: self.bn_momentum },
        })
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.seed)
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed.unwrap_or(self.seed)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay },
            model: self.model_config()?,
            mode: self.mode,
            init_seed: self.init_seed(),
            shuffle_seed: self.shuffle_seed(),
            noise_seed: self.noise_seed(),
            patience: (self.patience > 0).then_some(self.patience),
        })
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            resize: (self.resize > 0).then_some(self.resize),
            crop: (self.crop > 0).then_some(self.crop),
            mean: self.norm_mean,
            std: self.norm_std,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.synthetic_size,
            labels: self.labels,
            prevalence: self.prevalence.clone(),
            frequency: self.frequency.clone(),
            amplitude: self.amplitude,
            noise_std: self.noise_std,
            images_per_patient: self.images_per_patient,
            seed: self.data_seed(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `key = value` lines for artifact headers, with every derived seed
    /// spelled out.
    pub fn header_lines(&self) -> Vec<String> {
        let mut resolved = self.clone();
        resolved.init_seed = Some(self.init_seed());
        resolved.shuffle_seed = Some(self.shuffle_seed());
        resolved.noise_seed = Some(self.noise_seed());
        resolved.data_seed = Some(self.data_seed());
        resolved.split_seed = Some(self.split_seed());
        resolved.to_toml().lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert_eq!(RunConfig::paper().train_config().unwrap().adam, AdamConfig::default());
    }

    #[test]
    fn empty_file_is_desk() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::desk());
    }

    #[test]
    fn keys_override_preset() {
        let c = RunConfig::from_toml_str("preset = \"paper\"\nepochs = 3\nlatent_dim = 32\n").unwrap();
        assert_eq!((c.epochs, c.latent_dim, c.image_size), (3, 32, 224));
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::from_toml_str("epoch = 3\n").unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        assert!(RunConfig::from_toml_str("preset = \"huge\"\n").is_err());
        assert!(RunConfig::from_toml_str("epochs = \"ten\"\n").is_err());
    }

    #[test]
    fn inconsistent_geometry_rejected() {
        assert!(RunConfig::from_toml_str("image_size = 64\n").is_err());
        assert!(RunConfig::from_toml_str("encoder_kernels = [3, 3]\n").is_err());
    }

    #[test]
    fn header_round_trips() {
        let c = RunConfig { seed: 9, ..RunConfig::desk() };
        let text = c.header_lines().join("\n");
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.init_seed(), 9);
        assert_eq!(back.train_config().unwrap(), c.train_config().unwrap());
    }

    #[test]
    fn seeds_derive_from_base() {
        let c = RunConfig::from_toml_str("seed = 4\nnoise_seed = 7\n").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!((t.init_seed, t.shuffle_seed, t.noise_seed), (4, 4, 7));
    }
}
