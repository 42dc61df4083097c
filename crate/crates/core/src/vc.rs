//! UNet-style voice conversion over `(channels, time, frequency)` maps and the
//! synthetic corpus built by crossing utterances with new speakers.
//!
//! Every convolution has kernel `(1, 7)`: it mixes channels and neighbouring
//! frequency bins but never neighbouring frames. Weights are seeded and fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, VcConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::io::{DatasetRecord, ToyCodec};
use crate::numerics::{tape::gelu, Array};

pub const STEM_CHANNELS: usize = 96;
pub const BOTTLENECK_CHANNELS: usize = 384;
const KERNEL: usize = 7;
/// Per-frame RMS of the timbre shift added to the content features.
const SHIFT_RMS: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct VcInput {
    /// `T×D_h` content features.
    pub content_features: Array,
    /// `T×1` pitch track, 0 for unvoiced frames.
    pub f0: Array,
    /// `D_s` speaker embedding.
    pub speaker_embedding: Vec<f64>,
}

impl VcInput {
    pub fn new(content_features: Array, f0: Array, speaker_embedding: Vec<f64>) -> Result<Self> {
        let t = content_features.rows();
        if f0.shape() != [t, 1] {
            return Err(Error::shape(format!(
                "f0 shape {:?} for {t} frames",
                f0.shape()
            )));
        }
        if f0.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Validation("f0 must be nonnegative".into()));
        }
        Ok(Self {
            content_features,
            f0,
            speaker_embedding,
        })
    }
}

/// `channels×time×freq` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct VcFeatureMap {
    pub data: Array,
}

impl VcFeatureMap {
    /// Assembles per-frame `F×C` matrices into `C×T×F`.
    fn from_frames(frames: &[Array]) -> Self {
        let (f, c) = (frames[0].rows(), frames[0].cols());
        let t = frames.len();
        let mut data = vec![0.0; c * t * f];
        for (ti, fr) in frames.iter().enumerate() {
            for fi in 0..f {
                for (ci, &v) in fr.row(fi).iter().enumerate() {
                    data[(ci * t + ti) * f + fi] = v;
                }
            }
        }
        Self {
            data: Array::new(&[c, t, f], data).expect("consistent shape"),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Same-padded convolution along frequency with optional stride 2.
#[derive(Clone, Debug)]
struct FreqConv {
    /// `(tap, c_in)×c_out`.
    weight: Array,
    bias: Vec<f64>,
    c_in: usize,
    stride: usize,
}

impl FreqConv {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        let std = 1.0 / ((KERNEL * c_in) as f64).sqrt();
        Self {
            weight: Array::randn(&[KERNEL * c_in, c_out], std, rng),
            bias: vec![0.0; c_out],
            c_in,
            stride,
        }
    }

    /// `F×C_in` to `(F/stride)×C_out`.
    fn apply(&self, x: &Array) -> Array {
        let f_in = x.rows();
        let f_out = f_in / self.stride;
        let half = KERNEL as isize / 2;
        let mut cols = Array::zeros(&[f_out, KERNEL * self.c_in]);
        for fo in 0..f_out {
            let centre = (fo * self.stride) as isize;
            let row = cols.row_mut(fo);
            for tap in 0..KERNEL {
                let src = centre + tap as isize - half;
                if (0..f_in as isize).contains(&src) {
                    row[tap * self.c_in..(tap + 1) * self.c_in]
                        .copy_from_slice(x.row(src as usize));
                }
            }
        }
        let mut y = cols.matmul(&self.weight).expect("conformant");
        for r in 0..f_out {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: FreqConv,
    b: FreqConv,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        Self {
            a: FreqConv::new(rng, c, c, 1),
            b: FreqConv::new(rng, c, c, 1),
        }
    }

    fn apply(&self, x: &Array) -> Array {
        let mut y = self.b.apply(&self.a.apply(x).map(gelu));
        y.add_assign(x);
        y
    }
}

fn upsample2(x: &Array) -> Array {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .flat_map(|r| [x.row(r).to_vec(), x.row(r).to_vec()])
        .collect();
    Array::from_rows(&rows).expect("nonempty")
}

fn add_row(x: &mut Array, v: &[f64]) {
    for r in 0..x.rows() {
        for (a, b) in x.row_mut(r).iter_mut().zip(v) {
            *a += b;
        }
    }
}

/// Intermediate and final maps of one conversion.
#[derive(Clone, Debug)]
pub struct VcTrace {
    pub stem: VcFeatureMap,
    pub bottleneck: VcFeatureMap,
    pub output: VcFeatureMap,
}

#[derive(Clone, Debug)]
pub struct VcModel {
    pub freq_bins: usize,
    pub content_dim: usize,
    pub speaker_dim: usize,
    lift: Array,
    stem: FreqConv,
    stem_res: ResBlock,
    down1: FreqConv,
    down2: FreqConv,
    mid_res: ResBlock,
    speaker1: Array,
    up1: FreqConv,
    speaker2: Array,
    up2: FreqConv,
    readout: Array,
}

impl VcModel {
    /// `content_dim` excludes the pitch channel; the readout maps back to
    /// `content_dim` features per frame.
    pub fn new(cfg: &VcConfig, content_dim: usize) -> Result<Self> {
        let f = cfg.freq_bins;
        if f == 0 || !f.is_multiple_of(4) {
            return Err(Error::config(format!(
                "vc.freq_bins {f} must be a positive multiple of 4"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mid = BOTTLENECK_CHANNELS / 2;
        let ds = cfg.speaker_dim;
        Ok(Self {
            freq_bins: f,
            content_dim,
            speaker_dim: ds,
            lift: Array::randn(
                &[content_dim + 1, f],
                1.0 / ((content_dim + 1) as f64).sqrt(),
                &mut rng,
            ),
            stem: FreqConv::new(&mut rng, 1, STEM_CHANNELS, 1),
            stem_res: ResBlock::new(&mut rng, STEM_CHANNELS),
            down1: FreqConv::new(&mut rng, STEM_CHANNELS, mid, 2),
            down2: FreqConv::new(&mut rng, mid, BOTTLENECK_CHANNELS, 2),
            mid_res: ResBlock::new(&mut rng, BOTTLENECK_CHANNELS),
            speaker1: Array::randn(
                &[ds, BOTTLENECK_CHANNELS],
                1.0 / (ds as f64).sqrt(),
                &mut rng,
            ),
            up1: FreqConv::new(&mut rng, BOTTLENECK_CHANNELS, mid, 1),
            speaker2: Array::randn(&[ds, mid], 1.0 / (ds as f64).sqrt(), &mut rng),
            up2: FreqConv::new(&mut rng, mid, STEM_CHANNELS, 1),
            readout: Array::randn(
                &[STEM_CHANNELS * f, content_dim],
                1.0 / ((STEM_CHANNELS * f) as f64).sqrt(),
                &mut rng,
            ),
        })
    }

    fn project(table: &Array, v: &[f64]) -> Vec<f64> {
        let row = Array::new(&[1, v.len()], v.to_vec()).expect("nonempty");
        row.matmul(table).expect("conformant").into_data()
    }

    /// Runs the encoder/decoder and returns every stage.
    pub fn forward(&self, input: &VcInput) -> Result<VcTrace> {
        let t = input.content_features.rows();
        if t == 0 || input.content_features.cols() != self.content_dim {
            return Err(Error::shape(format!(
                "VC expects T×{} content, got {:?}",
                self.content_dim,
                input.content_features.shape()
            )));
        }
        if input.speaker_embedding.len() != self.speaker_dim {
            return Err(Error::shape(format!(
                "speaker embedding of {} values, expected {}",
                input.speaker_embedding.len(),
                self.speaker_dim
            )));
        }
        let s1 = Self::project(&self.speaker1, &input.speaker_embedding);
        let s2 = Self::project(&self.speaker2, &input.speaker_embedding);
        let (mut stems, mut mids, mut outs) = (Vec::new(), Vec::new(), Vec::new());
        for ti in 0..t {
            let mut frame = input.content_features.row(ti).to_vec();
            frame.push(input.f0.row(ti)[0] / 100.0);
            let bins = Array::new(&[1, frame.len()], frame)?.matmul(&self.lift)?;
            let x = bins.reshape(&[self.freq_bins, 1])?;
            let x = self.stem_res.apply(&self.stem.apply(&x).map(gelu));
            stems.push(x.clone());
            let x = self.down1.apply(&x).map(gelu);
            let mut x = self.mid_res.apply(&self.down2.apply(&x).map(gelu));
            mids.push(x.clone());
            add_row(&mut x, &s1);
            let mut x = self.up1.apply(&upsample2(&x)).map(gelu);
            add_row(&mut x, &s2);
            let x = self.up2.apply(&upsample2(&x));
            outs.push(x);
        }
        Ok(VcTrace {
            stem: VcFeatureMap::from_frames(&stems),
            bottleneck: VcFeatureMap::from_frames(&mids),
            output: VcFeatureMap::from_frames(&outs),
        })
    }

    /// Converted features: content plus a fixed-RMS shift read out of the
    /// output map, frame by frame.
    pub fn convert(&self, input: &VcInput) -> Result<Array> {
        let trace = self.forward(input)?;
        let [c, t, f] = [STEM_CHANNELS, input.content_features.rows(), self.freq_bins];
        let out = trace.output.data.data();
        let mut converted = input.content_features.clone();
        for ti in 0..t {
            let flat: Vec<f64> = (0..c)
                .flat_map(|ci| (0..f).map(move |fi| (ci, fi)))
                .map(|(ci, fi)| out[(ci * t + ti) * f + fi])
                .collect();
            let shift = Array::new(&[1, c * f], flat)?
                .matmul(&self.readout)?
                .into_data();
            let rms = (shift.iter().map(|v| v * v).sum::<f64>() / shift.len() as f64)
                .sqrt()
                .max(1e-12);
            for (v, s) in converted.row_mut(ti).iter_mut().zip(&shift) {
                *v += s * SHIFT_RMS / rms;
            }
        }
        Ok(converted)
    }
}

/// Module-level convenience matching the single-call form.
pub fn vc_forward(cfg: &VcConfig, input: &VcInput) -> Result<VcFeatureMap> {
    let model = VcModel::new(cfg, input.content_features.cols())?;
    Ok(model.forward(input)?.output)
}

/// Seeded speaker embeddings for synthetic voices.
pub fn speaker_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Array::randn(&[dim], 1.0, &mut rng).into_data())
        .collect()
}

/// Deterministic pitch contour for an utterance, in Hz.
pub fn synth_f0(frames: usize, seed: u64) -> Array {
    let base = 90.0 + (seed % 160) as f64;
    let data = (0..frames)
        .map(|t| base * (1.0 + 0.1 * (0.3 * t as f64).sin()))
        .collect();
    Array::new(&[frames, 1], data).expect("nonempty")
}

/// How real utterances are paired with synthetic speakers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticPlan {
    /// Every utterance with every speaker.
    CrossProduct,
    /// `synthetic : real` sample counts, cycling through utterances and then
    /// speakers. The desk preset is 10:3.
    Ratio { synthetic: usize, real: usize },
}

impl SyntheticPlan {
    pub const DESK: Self = Self::Ratio {
        synthetic: 10,
        real: 3,
    };

    fn pairs(&self, n_real: usize, n_speakers: usize) -> Vec<(usize, usize)> {
        match *self {
            Self::CrossProduct => (0..n_real)
                .flat_map(|i| (0..n_speakers).map(move |s| (i, s)))
                .collect(),
            Self::Ratio { synthetic, real } => {
                let count = (n_real * synthetic).div_ceil(real.max(1));
                (0..count)
                    .map(|k| (k % n_real, (k / n_real) % n_speakers))
                    .collect()
            }
        }
    }
}

/// Converts real records to new voices and re-encodes them. Synthetic
/// speaker `s` gets id `speaker_base + s`.
pub fn generate_synthetic_corpus(
    real: &[DatasetRecord],
    speakers: &[Vec<f64>],
    speaker_base: u64,
    plan: SyntheticPlan,
    cfg: &ModelConfig,
) -> Result<Vec<DatasetRecord>> {
    if real.is_empty() || speakers.is_empty() {
        return Err(Error::config("synthetic corpus needs samples and speakers"));
    }
    let model = VcModel::new(&cfg.vc, cfg.feature_dim)?;
    let codec = ToyCodec::new(cfg.feature_dim, cfg.codec_seed);
    plan.pairs(real.len(), speakers.len())
        .into_iter()
        .map(|(i, s)| {
            let rec = &real[i];
            let content = rec.feature_sequence()?.frames;
            let f0 = synth_f0(content.rows(), cfg.vc.seed ^ i as u64);
            let input = VcInput::new(content, f0, speakers[s].clone())?;
            let converted = FeatureSequence::new(model.convert(&input)?)?;
            let codecs = codec.encode(&converted)?;
            Ok(DatasetRecord {
                id: format!("{}-vc{s:03}", rec.id),
                phonemes: rec.phonemes.clone(),
                features: (0..converted.len())
                    .map(|t| converted.frames.row(t).to_vec())
                    .collect(),
                codecs: codecs.into(),
                speaker_id: speaker_base + s as u64,
                synthetic: true,
                source_id: Some(rec.id.clone()),
            })
        })
        .collect()
}
