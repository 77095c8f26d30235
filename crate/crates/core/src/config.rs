//! Run configuration: one TOML document holding every module's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioEncoderConfig;
use crate::backbone::{BackboneConfig, ModelConfig};
use crate::codec::{CodecConfig, CodecSettings};
use crate::conditioning::PoseEncoderConfig;
use crate::error::{Error, Result};
use crate::flow::{SampleConfig, TrainConfig};
use crate::synth::CorpusConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out audio tracks scored after training.
    pub tracks: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tracks: 16, seed: 777 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: "corpus".into(), out: "runs".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: CodecSettings,
    pub backbone: BackboneConfig,
    pub audio: AudioEncoderConfig,
    pub pose: PoseEncoderConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

/// Architecture fields covered by the checkpoint hash.
#[derive(Serialize)]
struct ArchView<'a> {
    codec: &'a CodecSettings,
    backbone: &'a BackboneConfig,
    audio: &'a AudioEncoderConfig,
    pose: &'a PoseEncoderConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn codec(&self) -> Result<CodecConfig> {
        self.codec.build()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let codec = self.codec()?;
        let m = ModelConfig {
            latent_channels: codec.channels(),
            backbone: self.backbone.clone(),
            audio: self.audio.clone(),
            pose: self.pose.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let codec = self.codec()?;
        if codec.r_t != 8 {
            return Err(Error::Config(format!(
                "codec r_t = {} but the audio encoder downsamples by 8",
                codec.r_t
            )));
        }
        self.model()?;
        let c = &self.corpus;
        if c.frames == 0 || (c.frames - 1) % codec.r_t != 0 || c.height % codec.p_h != 0 || c.width % codec.p_w != 0 {
            return Err(Error::Config(format!(
                "corpus clips {}x{}x{} do not fit the codec",
                c.frames, c.height, c.width
            )));
        }
        if c.identities == 0 {
            return Err(Error::Config("corpus needs at least one identity".into()));
        }
        self.train.validate(codec.latent_frames(c.frames))?;
        self.sample.validate()?;
        Ok(())
    }

    /// SHA-256 over the architecture sections; checkpoints written under
    /// one hash refuse to load under another.
    pub fn arch_hash(&self) -> [u8; 32] {
        let view = ArchView { codec: &self.codec, backbone: &self.backbone, audio: &self.audio, pose: &self.pose };
        let text = toml::to_string(&view).expect("architecture sections serialise");
        Sha256::digest(text.as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped() -> String {
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml")).unwrap()
    }

    #[test]
    fn shipped_default_matches_code_defaults() {
        let cfg = RunConfig::from_toml(&shipped()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip_is_lossless() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = shipped() + "\n[extra]\nx = 1\n";
        assert!(RunConfig::from_toml(&text).is_err());
        let text = shipped().replace("[train]", "[train]\nbogus = 3");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.motion_frames = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.corpus.frames = 34;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.backbone.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_architecture_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.steps += 1;
        b.seed = 99;
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.backbone.blocks += 1;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }
}
