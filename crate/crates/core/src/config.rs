//! Run configuration: presets, TOML persistence and content hashing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::{ClipConfig, ClipTrainConfig};
use crate::codec::LearnedCodecConfig;
use crate::error::{Error, Result};
use crate::oavd::OavdTrainConfig;
use crate::rng::{derive_seed, stream};
use crate::scenario::GeneratorConfig;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::unet::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperFaithful,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper-faithful" => Ok(Self::PaperFaithful),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected desk or paper-faithful"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::PaperFaithful => "paper-faithful",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub heldout_count: usize,
    /// Held-out scenarios use seeds offset from the training seeds by this amount.
    pub heldout_offset: u64,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    SpaceToDepth,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub learned: LearnedCodecConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub steps: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out scenarios scored per evaluation.
    pub scenarios: usize,
    pub steps: usize,
    pub strength: f64,
}

/// Everything a pipeline run depends on. Per-module seeds are derived from
/// `seed` by [`RunConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub clip: ClipConfig,
    pub clip_train: ClipTrainConfig,
    pub unet: UNetConfig,
    pub oavd_train: OavdTrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 0,
            data: DataConfig {
                train_count: 512,
                heldout_count: 64,
                heldout_offset: 1 << 32,
                generator: GeneratorConfig::default(),
            },
            codec: CodecConfig {
                kind: CodecKind::SpaceToDepth,
                learned: LearnedCodecConfig::default(),
            },
            clip: ClipConfig::default(),
            clip_train: ClipTrainConfig::default(),
            unet: UNetConfig::desk(),
            oavd_train: OavdTrainConfig::default(),
            inference: InferenceConfig { steps: 25, strength: 1.0 },
            eval: EvalConfig {
                scenarios: 32,
                steps: 25,
                strength: 0.3,
            },
        }
        .resolve()
    }

    /// Published hyperparameters at full size. Not runnable on a desk machine.
    pub fn paper_faithful() -> Self {
        let desk = Self::desk();
        Self {
            preset: Preset::PaperFaithful,
            clip_train: ClipTrainConfig {
                lr: 1e-6,
                batch: 2,
                steps: 30_000,
                ..desk.clip_train.clone()
            },
            unet: UNetConfig {
                text_width: desk.clip.text_width,
                ..UNetConfig::paper_faithful()
            },
            oavd_train: OavdTrainConfig {
                lr: 5e-6,
                batch: 2,
                steps: 8000,
                schedule: ScheduleSpec {
                    kind: ScheduleKind::ScaledLinear,
                    steps: 1000,
                    beta_start: 0.00085,
                    beta_end: 0.012,
                },
                ..desk.oavd_train.clone()
            },
            inference: InferenceConfig { steps: 50, strength: 1.0 },
            ..desk
        }
        .resolve()
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::PaperFaithful => Self::paper_faithful(),
        }
    }

    /// Re-derives every module seed from the master seed. Derived seeds are
    /// kept below 2^63 so they survive TOML's signed integers.
    pub fn resolve(mut self) -> Self {
        let s = |label: &str| derive_seed(self.seed, stream(label)) >> 1;
        self.clip.seed = s("clip-init");
        self.clip_train.seed = s("clip-train");
        self.unet.seed = s("unet-init");
        self.oavd_train.seed = s("oavd-train");
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.data.generator.validate()?;
        if self.data.train_count == 0 {
            return Err(Error::Config("data.train_count must be positive".into()));
        }
        if self.data.heldout_offset < self.data.train_count as u64 {
            return Err(Error::Config("held-out seeds would overlap training seeds".into()));
        }
        self.clip.validate()?;
        self.unet.validate()?;
        self.oavd_train.validate()?;
        if self.unet.text_width != self.clip.text_width {
            return Err(Error::Config(format!(
                "U-Net text width {} differs from the text encoder width {}",
                self.unet.text_width, self.clip.text_width
            )));
        }
        if self.data.generator.height != self.clip.image_size || self.data.generator.width != self.clip.image_size {
            return Err(Error::Config(format!(
                "frames are {}x{} but the video encoder expects {}",
                self.data.generator.height, self.data.generator.width, self.clip.image_size
            )));
        }
        for (name, s) in [("inference", self.inference.strength), ("eval", self.eval.strength)] {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("{name}.strength {s} outside (0, 1]")));
            }
        }
        if self.eval.scenarios < 2 || self.eval.scenarios > self.data.heldout_count {
            return Err(Error::Config(format!(
                "eval.scenarios {} must lie in [2, data.heldout_count = {}]",
                self.eval.scenarios, self.data.heldout_count
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&json);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Desk, Preset::PaperFaithful] {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        }
        assert_eq!("paper-faithful".parse::<Preset>().unwrap(), Preset::PaperFaithful);
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn paper_faithful_values() {
        let c = RunConfig::paper_faithful();
        assert_eq!((c.clip_train.lr, c.clip_train.batch, c.clip_train.steps), (1e-6, 2, 30_000));
        assert_eq!((c.oavd_train.lr, c.oavd_train.batch, c.oavd_train.steps), (5e-6, 2, 8000));
        assert_eq!((c.oavd_train.schedule.steps, c.oavd_train.lambda), (1000, 0.5));
        assert_eq!((c.clip_train.beta1, c.clip_train.beta2), (0.9, 0.999));
    }

    #[test]
    fn hash_tracks_content_and_seed() {
        let a = RunConfig::desk();
        let b = RunConfig::desk().with_seed(1);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.clip_train.seed, b.clip_train.seed);
        assert_eq!(a.hash().unwrap(), RunConfig::desk().hash().unwrap());
        let mut c = RunConfig::desk();
        c.oavd_train.lambda = 0.25;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn bad_configs_rejected() {
        let text = RunConfig::desk().to_toml().unwrap().replace("strength = 0.3", "strength = 1.5");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("seed = 3"), Err(Error::Config(_))));
        let unknown = format!("bogus = 1\n{}", RunConfig::desk().to_toml().unwrap());
        assert!(RunConfig::from_toml(&unknown).is_err());
    }
}
