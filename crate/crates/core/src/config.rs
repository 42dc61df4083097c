//! Model and training configuration, named presets, and the TOML file format.
//!
//! Every field maps one-to-one onto a key of the configuration file. Missing
//! keys fall back to the desk-scale defaults, so a file only needs to list
//! what it overrides:
//!
//! ```toml
//! [model]
//! kmeans_k = 32
//!
//! [model.lm]
//! blocks = 3
//!
//! [train]
//! steps = 500
//! base_lr = 0.0005
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of residual quantizer levels.
pub const QUANTIZERS: usize = 8;
/// Entries per quantizer codebook.
pub const CODEBOOK_SIZE: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignerConfig {
    /// Attention blocks.
    pub n_blocks: usize,
    /// Residual convolution sub-blocks per attention block.
    pub resnet_blocks_per_block: usize,
    pub heads: usize,
    pub hidden: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    pub dropout: f64,
    pub lvs_dim: usize,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            resnet_blocks_per_block: 1,
            heads: 4,
            hidden: 64,
            conv_kernel: 3,
            conv_layers: 2,
            dropout: 0.1,
            lvs_dim: 2,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("aligner.n_blocks", self.n_blocks),
            (
                "aligner.resnet_blocks_per_block",
                self.resnet_blocks_per_block,
            ),
            ("aligner.heads", self.heads),
            ("aligner.hidden", self.hidden),
            ("aligner.conv_layers", self.conv_layers),
            ("aligner.lvs_dim", self.lvs_dim),
        ];
        check_counts(&counts)?;
        check_kernel("aligner.conv_kernel", self.conv_kernel)?;
        check_dropout("aligner.dropout", self.dropout)?;
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "aligner.hidden {} not divisible by aligner.heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub lvs_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            conv_layers: 2,
            conv_kernel: 3,
            hidden: 64,
            dropout: 0.1,
            lvs_dim: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecLmConfig {
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl Default for CodecLmConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            d_model: 64,
            ffn_hidden: 256,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcConfig {
    pub freq_bins: usize,
    pub speaker_dim: usize,
    pub seed: u64,
}

impl Default for VcConfig {
    fn default() -> Self {
        Self {
            freq_bins: 16,
            speaker_dim: 16,
            seed: 0x5eed_0f0c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    /// Real phonemes; the phoneme head adds one end-of-text class.
    pub phoneme_inventory: usize,
    /// Phoneme embedding width shared by predictor, aligner and fusion.
    pub embedding_dim: usize,
    pub feature_dim: usize,
    pub frames_per_phoneme: usize,
    pub kmeans_k: usize,
    pub kmeans_restarts: usize,
    pub max_text_len: usize,
    pub codec_seed: u64,
    pub feature_seed: u64,
    pub init_seed: u64,
    pub aligner: AlignerConfig,
    pub predictor: PredictorConfig,
    pub lm: CodecLmConfig,
    pub vc: VcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            phoneme_inventory: 24,
            embedding_dim: 64,
            feature_dim: 16,
            frames_per_phoneme: 3,
            kmeans_k: 64,
            kmeans_restarts: 4,
            max_text_len: 256,
            codec_seed: 0xc0dec,
            feature_seed: 0xfea7,
            init_seed: 17,
            aligner: AlignerConfig::default(),
            predictor: PredictorConfig::default(),
            lm: CodecLmConfig::default(),
            vc: VcConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Classes of the phoneme prediction head (inventory plus end-of-text).
    pub fn phoneme_classes(&self) -> usize {
        self.phoneme_inventory + 1
    }

    pub fn end_of_text(&self) -> usize {
        self.phoneme_inventory
    }

    /// Looks up a named preset: `desk`, `valle`, `ham-tts-s` or `ham-tts-l`.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self::default();
        let full_scale = |lm_blocks: usize, name: &str| Self {
            preset: name.into(),
            embedding_dim: 1024,
            aligner: AlignerConfig {
                n_blocks: 10,
                resnet_blocks_per_block: 3,
                heads: 8,
                hidden: 4096,
                conv_kernel: 3,
                conv_layers: 2,
                dropout: 0.1,
                lvs_dim: 2,
            },
            predictor: PredictorConfig {
                conv_layers: 2,
                conv_kernel: 3,
                hidden: 1024,
                dropout: 0.1,
                lvs_dim: 2,
            },
            lm: CodecLmConfig {
                blocks: lm_blocks,
                heads: 16,
                d_model: 1024,
                ffn_hidden: 4096,
                dropout: 0.1,
            },
            ..Self::default()
        };
        match name {
            "desk" => Ok(desk),
            "valle" => Ok(full_scale(14, "valle")),
            "ham-tts-s" => Ok(full_scale(12, "ham-tts-s")),
            "ham-tts-l" => Ok(full_scale(24, "ham-tts-l")),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_counts(&[
            ("phoneme_inventory", self.phoneme_inventory),
            ("embedding_dim", self.embedding_dim),
            ("feature_dim", self.feature_dim),
            ("frames_per_phoneme", self.frames_per_phoneme),
            ("kmeans_k", self.kmeans_k),
            ("kmeans_restarts", self.kmeans_restarts),
            ("max_text_len", self.max_text_len),
            ("predictor.conv_layers", self.predictor.conv_layers),
            ("predictor.hidden", self.predictor.hidden),
            ("predictor.lvs_dim", self.predictor.lvs_dim),
            ("lm.blocks", self.lm.blocks),
            ("lm.heads", self.lm.heads),
            ("lm.d_model", self.lm.d_model),
            ("lm.ffn_hidden", self.lm.ffn_hidden),
            ("vc.freq_bins", self.vc.freq_bins),
            ("vc.speaker_dim", self.vc.speaker_dim),
        ])?;
        self.aligner.validate()?;
        check_kernel("predictor.conv_kernel", self.predictor.conv_kernel)?;
        check_dropout("predictor.dropout", self.predictor.dropout)?;
        check_dropout("lm.dropout", self.lm.dropout)?;
        if !self.lm.d_model.is_multiple_of(self.lm.heads) {
            return Err(Error::config(format!(
                "lm.d_model {} not divisible by lm.heads {}",
                self.lm.d_model, self.lm.heads
            )));
        }
        if self.aligner.lvs_dim != self.predictor.lvs_dim {
            return Err(Error::config(
                "aligner.lvs_dim and predictor.lvs_dim differ",
            ));
        }
        if !self.vc.freq_bins.is_multiple_of(4) {
            return Err(Error::config(format!(
                "vc.freq_bins {} must be divisible by 4",
                self.vc.freq_bins
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub augment_p: f64,
    pub preset_name: String,
    /// Leading frames of each utterance used as its own acoustic prompt.
    pub prompt_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            seed: 1234,
            augment_p: 0.1,
            preset_name: "desk".into(),
            prompt_frames: 3,
        }
    }
}

impl TrainConfig {
    /// Optimizer and schedule constants used for full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            steps: 400_000,
            base_lr: 0.03,
            warmup_steps: 15_000,
            total_steps: 400_000,
            preset_name: "ham-tts-s".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "train.warmup_steps {} exceeds train.total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("train.warmup_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.augment_p) {
            return Err(Error::config(format!(
                "train.augment_p {} outside [0, 1]",
                self.augment_p
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("train.base_lr must be positive"));
        }
        if self.prompt_frames == 0 {
            return Err(Error::config("train.prompt_frames must be positive"));
        }
        Ok(())
    }
}

/// A full configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn check_counts(items: &[(&str, usize)]) -> Result<()> {
    for (name, v) in items {
        if *v == 0 {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

fn check_kernel(name: &str, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("{name} must be odd, got {k}")));
    }
    Ok(())
}

fn check_dropout(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("{name} {p} outside [0, 1)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        for p in ["desk", "valle", "ham-tts-s", "ham-tts-l"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        TrainConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn full_scale_presets_carry_reference_values() {
        let s = ModelConfig::preset("ham-tts-s").unwrap();
        assert_eq!(s.embedding_dim, 1024);
        assert_eq!(s.lm.blocks, 12);
        assert_eq!(s.lm.heads, 16);
        assert_eq!(s.aligner.n_blocks, 10);
        assert_eq!(s.aligner.resnet_blocks_per_block, 3);
        assert_eq!(s.aligner.heads, 8);
        assert_eq!(s.aligner.lvs_dim, 2);
        assert_eq!(ModelConfig::preset("ham-tts-l").unwrap().lm.blocks, 24);
        assert_eq!(ModelConfig::preset("valle").unwrap().lm.blocks, 14);
        let t = TrainConfig::full_scale();
        assert_eq!(
            (t.base_lr, t.warmup_steps, t.total_steps),
            (0.03, 15_000, 400_000)
        );
    }

    #[test]
    fn partial_toml_overrides_defaults() {
        let c = Config::from_toml_str("[model.lm]\nblocks = 3\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(c.model.lm.blocks, 3);
        assert_eq!(c.model.lm.d_model, 64);
        assert_eq!(c.train.steps, 10);
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(Config::from_toml_str("[train]\nstepz = 1\n").is_err());
    }

    #[test]
    fn bad_values_named() {
        let mut c = Config::default();
        c.train.augment_p = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("augment_p"));
        let mut c = Config::default();
        c.model.vc.freq_bins = 6;
        assert!(c.validate().unwrap_err().to_string().contains("freq_bins"));
    }
}
