//! Run configuration document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_io::SynthSpec;
use crate::model::layers::LoraSpec;
use crate::model::ModelConfig;
use crate::peft::ClrSchedule;
use crate::preprocess::PatchMode;
use crate::train::{AdamConfig, Protocol, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub pca: PcaConfig,
    pub patches: PatchConfig,
    pub split: SplitConfig,
    pub model: ModelSection,
    pub clr: ClrSchedule,
    pub train: TrainSection,
    pub out: OutConfig,
}

/// Either a cube/label file pair or a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cube: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cube: None,
            labels: None,
            synth: Some(SynthConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    #[serde(alias = "H")]
    pub height: usize,
    #[serde(alias = "W")]
    pub width: usize,
    #[serde(alias = "C")]
    pub bands: usize,
    #[serde(alias = "K")]
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 40,
            classes: 6,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            height: self.height,
            width: self.width,
            bands: self.bands,
            classes: self.classes,
            noise_sigma: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub k: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { k: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub p: usize,
    pub mode: PatchMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            p: 15,
            mode: PatchMode::PerPixel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fraction: 0.10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        let d = LoraSpec::default();
        Self {
            r: d.rank,
            alpha: d.alpha,
            dropout: d.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub lora: LoraSection,
    pub drop_path: f64,
    pub band_drop: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            dim: d.dim,
            depths: d.depths,
            heads: d.heads,
            window: d.window,
            lora: LoraSection::default(),
            drop_path: d.drop_path,
            band_drop: d.band_drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub peft_mode: Protocol,
    pub warm_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.adam.lr,
            batch: d.batch,
            epochs: d.epochs,
            seed: d.seed,
            peft_mode: Protocol::Staged,
            warm_fraction: d.warm_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutConfig {
    pub dir: PathBuf,
}

impl Default for OutConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

fn check(ok: bool, key: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("{key}: {msg}")))
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    check((0.0..1.0).contains(&v), key, format_args!("must be in [0, 1), got {v}"))
}

impl RunConfig {
    /// Range and consistency checks; messages start with the key path.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.cube, &d.labels, &d.synth) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "data: give either both `cube` and `labels` or a `synth` section",
                ))
            }
        }
        if let Some(s) = &d.synth {
            check(s.height > 0 && s.width > 0, "data.synth", "height and width must be positive")?;
            check(s.bands > 0, "data.synth.bands", "must be positive")?;
            check(s.classes > 0, "data.synth.classes", "must be positive")?;
            check(s.noise >= 0.0 && s.noise.is_finite(), "data.synth.noise", "must be finite and >= 0")?;
            check(self.pca.k <= s.bands, "pca.k", format_args!("{} exceeds the {} synthetic bands", self.pca.k, s.bands))?;
        }
        check(self.pca.k > 0, "pca.k", "must be positive")?;
        check(self.patches.p > 0, "patches.p", "must be positive")?;
        if self.patches.mode == PatchMode::PerPixel {
            check(self.patches.p % 2 == 1, "patches.p", format_args!("must be odd for per_pixel mode, got {}", self.patches.p))?;
        }
        check(
            self.split.fraction > 0.0 && self.split.fraction < 1.0,
            "split.fraction",
            format_args!("must be in (0, 1), got {}", self.split.fraction),
        )?;
        let m = &self.model;
        check(m.dim >= 4, "model.dim", format_args!("must be at least 4, got {}", m.dim))?;
        check(!m.depths.is_empty(), "model.depths", "must not be empty")?;
        check(
            m.depths.len() == m.heads.len(),
            "model.heads",
            format_args!("length {} differs from model.depths length {}", m.heads.len(), m.depths.len()),
        )?;
        check(m.window > 0, "model.window", "must be positive")?;
        unit_interval("model.lora.dropout", m.lora.dropout)?;
        check(m.lora.alpha.is_finite(), "model.lora.alpha", "must be finite")?;
        unit_interval("model.drop_path", m.drop_path)?;
        unit_interval("model.band_drop", m.band_drop)?;
        self.clr.validate().map_err(|e| Error::config(format!("clr: {e}")))?;
        let t = &self.train;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", format_args!("must be positive, got {}", t.lr))?;
        check(t.batch >= 1, "train.batch", "must be at least 1")?;
        check(
            (0.0..=1.0).contains(&t.warm_fraction),
            "train.warm_fraction",
            format_args!("must be in [0, 1], got {}", t.warm_fraction),
        )?;
        Ok(())
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            bands: self.pca.k,
            patch: self.patches.p,
            classes,
            dim: m.dim,
            depths: m.depths.clone(),
            heads: m.heads.clone(),
            window: m.window,
            lora: LoraSpec {
                rank: m.lora.r,
                alpha: m.lora.alpha,
                dropout: m.lora.dropout,
            },
            drop_path: m.drop_path,
            band_drop: m.band_drop,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            batch: t.batch,
            epochs: t.epochs,
            seed: t.seed,
            protocol: t.peft_mode,
            warm_fraction: t.warm_fraction,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Strictly parses a configuration document; unknown keys and wrong types
/// are reported with their key path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
