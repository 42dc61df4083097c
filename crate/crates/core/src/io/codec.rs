//! Residual vector quantizer with fixed seeded codebooks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec_lm::CodecSequence;
use crate::config::{CODEBOOK_SIZE, QUANTIZERS};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::Array;

/// Codeword spread of level 1; each further level shrinks by this factor.
const LEVEL_DECAY: f64 = 0.6;

#[derive(Clone, Debug)]
pub struct ToyCodec {
    /// One `1024×D` table per level. Entry 0 of every table is the zero
    /// vector, so no level can increase the residual.
    pub codebooks: Vec<Array>,
    pub dim: usize,
}

impl ToyCodec {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codebooks = (0..QUANTIZERS)
            .map(|q| {
                let mut table =
                    Array::randn(&[CODEBOOK_SIZE, dim], LEVEL_DECAY.powi(q as i32), &mut rng);
                table.row_mut(0).fill(0.0);
                table
            })
            .collect();
        Self { codebooks, dim }
    }

    pub fn encode(&self, features: &FeatureSequence) -> Result<CodecSequence> {
        if features.dim() != self.dim {
            return Err(Error::shape(format!(
                "codec of dim {} given {}-dimensional features",
                self.dim,
                features.dim()
            )));
        }
        let t = features.len();
        let mut levels = vec![Vec::with_capacity(t); QUANTIZERS];
        for f in 0..t {
            let mut residual = features.frames.row(f).to_vec();
            for (q, table) in self.codebooks.iter().enumerate() {
                let j = nearest(table, &residual);
                for (r, c) in residual.iter_mut().zip(table.row(j)) {
                    *r -= c;
                }
                levels[q].push(j);
            }
        }
        CodecSequence::new(levels)
    }

    /// Sum of the chosen codewords of the first `levels` quantizers, `T×D`.
    pub fn decode(&self, codes: &CodecSequence, levels: usize) -> Array {
        let mut out = Array::zeros(&[codes.len(), self.dim]);
        for (q, table) in self.codebooks.iter().enumerate().take(levels) {
            for (t, &j) in codes.level(q + 1).iter().enumerate() {
                for (o, c) in out.row_mut(t).iter_mut().zip(table.row(j)) {
                    *o += c;
                }
            }
        }
        out
    }
}

fn nearest(table: &Array, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..table.rows() {
        let d: f64 = table
            .row(j)
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::init_rng;

    fn feats(t: usize, seed: u64) -> FeatureSequence {
        FeatureSequence::new(Array::randn(&[t, 16], 1.0, &mut init_rng(seed))).unwrap()
    }

    #[test]
    fn encodes_a_valid_deterministic_grid() {
        let codec = ToyCodec::new(16, 5);
        let f = feats(9, 1);
        let a = codec.encode(&f).unwrap();
        assert_eq!(a.levels().len(), 8);
        assert_eq!(a.len(), 9);
        assert_eq!(a, ToyCodec::new(16, 5).encode(&f).unwrap());
    }

    #[test]
    fn reconstruction_error_never_grows_with_levels() {
        let codec = ToyCodec::new(16, 5);
        let f = feats(30, 2);
        let codes = codec.encode(&f).unwrap();
        let errors: Vec<f64> = (0..=8)
            .map(|l| {
                let r = codec.decode(&codes, l);
                r.data()
                    .iter()
                    .zip(f.frames.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{errors:?}");
        }
        assert!(errors[8] < errors[0]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let codec = ToyCodec::new(8, 5);
        assert!(matches!(codec.encode(&feats(3, 1)), Err(Error::Shape(_))));
    }
}
