//! Binary checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! "DGC1"                      magic
//! u32                         format version
//! u64 + bytes                 metadata, UTF-8 TOML (config with seeds, epoch, metric)
//! u32                         array count
//! per array:
//!   u32 + bytes               name
//!   u32                       rank
//!   u64 * rank                dims
//!   f32 * prod(dims)          values
//! ```
//!
//! Optimizer moments are not stored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DgcModel;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DGC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    /// Selection metric (mean validation AUC) at that epoch.
    pub metric: f64,
    pub model: DgcModel<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    epoch: usize,
    metric: f64,
    config: TrainConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&Metadata { epoch: self.epoch, metric: self.metric, config: self.config.clone() })
            .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let arrays = self.model.params.arrays();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::corrupt("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, supported: FORMAT_VERSION });
        }
        let len = r.u64("metadata length")?;
        let text = std::str::from_utf8(r.take(len, "metadata")?).map_err(|e| Error::corrupt("metadata", e.to_string()))?;
        let meta: Metadata = toml::from_str(text).map_err(|e| Error::corrupt("metadata", e.to_string()))?;
        let mut model = DgcModel::<f32>::init(&meta.config.model, meta.config.mode, meta.config.init_seed)
            .map_err(|e| Error::corrupt("metadata", e.to_string()))?;
        let expected: Vec<String> = model.params.arrays().into_iter().map(|(n, _)| n).collect();

        let count = r.u32("array count")? as usize;
        if count != expected.len() {
            return Err(Error::corrupt("array count", format!("{count} arrays, model has {}", expected.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for i in 0..count {
            let section = format!("array {i}");
            let name_len = r.u32(&section)?;
            let name = std::str::from_utf8(r.take(u64::from(name_len), &section)?)
                .map_err(|e| Error::corrupt(&section, e.to_string()))?
                .to_string();
            if !expected.contains(&name) || !seen.insert(name.clone()) {
                return Err(Error::corrupt(&section, format!("unexpected or repeated array {name:?}")));
            }
            let section = format!("array {name}");
            let rank = r.u32(&section)? as usize;
            if rank > 8 {
                return Err(Error::corrupt(&section, format!("rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64(&section).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::corrupt(&section, "dims overflow"))?;
            let raw = r.take((n as u64).saturating_mul(4), &section)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::corrupt(&section, e.to_string()))?;
            model.params.set(&name, t).map_err(|e| Error::corrupt(&section, e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config: meta.config, epoch: meta.epoch, metric: meta.metric, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, section: &str) -> Result<&'a [u8]> {
        let left = (self.bytes.len() - self.pos) as u64;
        if n > left {
            return Err(Error::corrupt(section, format!("truncated: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvStage, EncoderConfig, Mode, ModelConfig};

    fn checkpoint() -> Checkpoint {
        let model_cfg = ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                stages: vec![ConvStage { out_channels: 4, kernel: 3, stride: 2, padding: 1 }],
                ..Default::default()
            },
            latent_dim: 6,
            ..Default::default()
        };
        let config = TrainConfig { model: model_cfg.clone(), init_seed: 3, ..Default::default() };
        let mut model = DgcModel::init(&model_cfg, Mode::Generative, 11).unwrap();
        model.params.bn.running_var = Tensor::full(vec![6], 1.5);
        Checkpoint { config, epoch: 4, metric: 0.123456789, model }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let c = checkpoint();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_names_a_section() {
        let bytes = checkpoint().to_bytes().unwrap();
        for cut in [0, 3, 6, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Corrupt { section, .. }) => assert!(!section.is_empty()),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = checkpoint().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 2, supported: 1 })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt { .. })));
    }
}
