//! Line-delimited JSON corpus records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec_lm::CodecSequence;
use crate::config::{ModelConfig, CODEBOOK_SIZE, QUANTIZERS};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FeatureSynth};
use crate::io::codec::ToyCodec;
use crate::numerics::Array;
use crate::predictor::PhonemeSequence;

/// Shortest and longest synthetic utterance, in phonemes.
const SYNTH_T1: (usize, usize) = (10, 14);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub phonemes: Vec<usize>,
    /// `T2×D` feature frames.
    pub features: Vec<Vec<f64>>,
    /// `8×T3` codec tokens.
    pub codecs: Vec<Vec<usize>>,
    pub speaker_id: u64,
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl DatasetRecord {
    fn invalid(&self, field: &str, msg: impl std::fmt::Display) -> Error {
        Error::Validation(format!("record `{}`: field `{field}` {msg}", self.id))
    }

    /// Checks every type invariant against the model configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(self.invalid("phonemes", "is empty"));
        }
        if let Some(p) = self.phonemes.iter().find(|&&p| p >= cfg.phoneme_inventory) {
            return Err(self.invalid(
                "phonemes",
                format!(
                    "holds id {p} outside the inventory of {}",
                    cfg.phoneme_inventory
                ),
            ));
        }
        if self.features.is_empty() {
            return Err(self.invalid("features", "is empty"));
        }
        if let Some(row) = self.features.iter().find(|r| r.len() != cfg.feature_dim) {
            return Err(self.invalid(
                "features",
                format!("has width {}, expected {}", row.len(), cfg.feature_dim),
            ));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.invalid("features", "holds a non-finite value"));
        }
        if self.codecs.len() != QUANTIZERS {
            return Err(self.invalid(
                "codecs",
                format!("has {} levels, expected {QUANTIZERS}", self.codecs.len()),
            ));
        }
        let t3 = self.codecs[0].len();
        if t3 == 0 || self.codecs.iter().any(|l| l.len() != t3) {
            return Err(self.invalid("codecs", "levels are empty or of unequal length"));
        }
        if let Some(c) = self.codecs.iter().flatten().find(|&&c| c >= CODEBOOK_SIZE) {
            return Err(self.invalid(
                "codecs",
                format!("holds token {c}, codebook size is {CODEBOOK_SIZE}"),
            ));
        }
        Ok(())
    }

    pub fn phoneme_sequence(&self, inventory: usize) -> Result<PhonemeSequence> {
        PhonemeSequence::new(self.phonemes.clone(), inventory)
    }

    pub fn feature_sequence(&self) -> Result<FeatureSequence> {
        FeatureSequence::new(Array::from_rows(&self.features)?)
    }

    pub fn codec_sequence(&self) -> Result<CodecSequence> {
        CodecSequence::new(self.codecs.clone())
    }
}

/// Reads records, one JSON object per nonblank line.
pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads and validates every record.
pub fn load_dataset(path: &Path, cfg: &ModelConfig) -> Result<Vec<DatasetRecord>> {
    let records = read_jsonl(path)?;
    for r in &records {
        r.validate(cfg)?;
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded toy corpus: random phoneme strings of 10 to 14 ids, speaker
/// `i mod n_speakers`, synthetic features and their toy-codec tokens.
pub fn data_synth(
    n_samples: usize,
    n_speakers: usize,
    seed: u64,
    cfg: &ModelConfig,
) -> Result<Vec<DatasetRecord>> {
    if n_speakers == 0 {
        return Err(Error::config("data synthesis needs at least one speaker"));
    }
    let synth = FeatureSynth::new(cfg.feature_dim, cfg.phoneme_inventory, cfg.feature_seed);
    let codec = ToyCodec::new(cfg.feature_dim, cfg.codec_seed);
    (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let t1 = rng.random_range(SYNTH_T1.0..=SYNTH_T1.1);
            let phonemes: Vec<usize> = (0..t1)
                .map(|_| rng.random_range(0..cfg.phoneme_inventory))
                .collect();
            let speaker_id = (i % n_speakers) as u64;
            let feats = synth.synth_features(
                &phonemes,
                speaker_id,
                cfg.frames_per_phoneme,
                rng.random(),
            )?;
            let codecs = codec.encode(&feats)?;
            Ok(DatasetRecord {
                id: format!("utt{i:05}"),
                phonemes,
                features: (0..feats.len())
                    .map(|t| feats.frames.row(t).to_vec())
                    .collect(),
                codecs: codecs.into(),
                speaker_id,
                synthetic: false,
                source_id: None,
            })
        })
        .collect()
}
