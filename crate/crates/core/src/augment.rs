//! Segment replacement and duplication on codec inputs, with targets kept at
//! the original utterance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec_lm::CodecSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    None,
    Replace,
    Duplicate,
}

/// Which perturbation a selected sample receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AugmentMode {
    /// Fair coin between replacement and duplication.
    #[default]
    Either,
    Replace,
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub input_codecs: CodecSequence,
    pub target_codecs: CodecSequence,
    pub kind: AugmentKind,
    /// `(start, length)` of the perturbed window in the input.
    pub segment: (usize, usize),
}

impl AugmentedSample {
    fn untouched(sample: &CodecSequence) -> Self {
        Self {
            input_codecs: sample.clone(),
            target_codecs: sample.clone(),
            kind: AugmentKind::None,
            segment: (0, 0),
        }
    }
}

/// Segment length drawn uniformly from `[ceil(0.1·T), floor(0.3·T)]`,
/// never below one frame.
fn segment_length(t: usize, rng: &mut ChaCha8Rng) -> usize {
    let lo = (t as f64 * 0.1).ceil().max(1.0) as usize;
    let hi = ((t as f64 * 0.3).floor() as usize).max(lo);
    rng.random_range(lo..=hi)
}

fn with_frames(
    levels: &[Vec<usize>],
    edit: impl Fn(&[usize], usize) -> Vec<usize>,
) -> Result<CodecSequence> {
    CodecSequence::new(levels.iter().enumerate().map(|(q, l)| edit(l, q)).collect())
}

/// Perturbs each sample independently with probability `p`. Sample `i` draws
/// from its own ChaCha8 stream `i` under `seed`.
pub fn augment_batch(
    batch: &[CodecSequence],
    donor_pool: &[CodecSequence],
    p: f64,
    seed: u64,
    mode: AugmentMode,
) -> Result<Vec<AugmentedSample>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!(
            "augmentation probability {p} outside [0, 1]"
        )));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let selected = rng.random::<f64>() < p;
        let t = sample.len();
        if !selected || t < 2 {
            out.push(AugmentedSample::untouched(sample));
            continue;
        }
        let replace = match mode {
            AugmentMode::Either => rng.random::<bool>(),
            AugmentMode::Replace => true,
            AugmentMode::Duplicate => false,
        };
        let mut len = segment_length(t, &mut rng);
        let levels = sample.levels();
        let aug = if replace {
            if donor_pool.is_empty() {
                return Err(Error::config("replacement needs a nonempty donor pool"));
            }
            let donor = &donor_pool[rng.random_range(0..donor_pool.len())];
            len = len.min(donor.len());
            let start = rng.random_range(0..=t - len);
            let from = rng.random_range(0..=donor.len() - len);
            let input = with_frames(levels, |l, q| {
                let mut l = l.to_vec();
                l[start..start + len].copy_from_slice(&donor.levels()[q][from..from + len]);
                l
            })?;
            AugmentedSample {
                input_codecs: input,
                target_codecs: sample.clone(),
                kind: AugmentKind::Replace,
                segment: (start, len),
            }
        } else {
            let start = rng.random_range(0..=t - len);
            let end = start + len;
            let input = with_frames(levels, |l, _| {
                let mut v = Vec::with_capacity(l.len() + len);
                v.extend_from_slice(&l[..end]);
                v.extend_from_slice(&l[start..end]);
                v.extend_from_slice(&l[end..]);
                v
            })?;
            AugmentedSample {
                input_codecs: input,
                target_codecs: sample.clone(),
                kind: AugmentKind::Duplicate,
                // The inserted copy occupies the window right after the original.
                segment: (end, len),
            }
        };
        out.push(aug);
    }
    Ok(out)
}

/// Training view of a sample: inputs, targets aligned position by position
/// with the inputs, and a mask of positions that count toward the loss.
/// Inserted duplicate frames are masked out and carry their input token as a
/// placeholder target.
pub fn targets_for_training(aug: &AugmentedSample) -> (CodecSequence, CodecSequence, Vec<bool>) {
    let input = aug.input_codecs.clone();
    match aug.kind {
        AugmentKind::None | AugmentKind::Replace => {
            let mask = vec![true; input.len()];
            (input, aug.target_codecs.clone(), mask)
        }
        AugmentKind::Duplicate => {
            let (ins, len) = aug.segment;
            let mask: Vec<bool> = (0..input.len())
                .map(|j| !(ins..ins + len).contains(&j))
                .collect();
            let targets = aug
                .target_codecs
                .levels()
                .iter()
                .zip(input.levels())
                .map(|(orig, inp)| {
                    (0..inp.len())
                        .map(|j| match j {
                            j if j < ins => orig[j],
                            j if j < ins + len => inp[j],
                            j => orig[j - len],
                        })
                        .collect()
                })
                .collect();
            let targets = CodecSequence::new(targets).expect("aligned targets keep the grid valid");
            (input, targets, mask)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: usize, offset: usize) -> CodecSequence {
        CodecSequence::new(
            (0..8)
                .map(|q| (0..t).map(|i| (i * 31 + q * 7 + offset) % 1024).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_probability_passes_everything_through() {
        let batch: Vec<_> = (0..20).map(|i| seq(12, i)).collect();
        for a in augment_batch(&batch, &[seq(5, 0)], 0.0, 3, AugmentMode::Either).unwrap() {
            assert_eq!(a.kind, AugmentKind::None);
            assert_eq!(a.input_codecs, a.target_codecs);
        }
    }

    #[test]
    fn replacing_with_self_is_identity() {
        // A constant donor makes every window identical to the sample's own.
        let flat = CodecSequence::new(vec![vec![5; 20]; 8]).unwrap();
        let out = augment_batch(
            std::slice::from_ref(&flat),
            std::slice::from_ref(&flat),
            1.0,
            9,
            AugmentMode::Replace,
        )
        .unwrap();
        assert_eq!(out[0].kind, AugmentKind::Replace);
        assert_eq!(out[0].input_codecs, flat);
    }

    #[test]
    fn bad_probability_is_config_error() {
        assert!(matches!(
            augment_batch(&[seq(4, 0)], &[], 1.5, 0, AugmentMode::Either),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            augment_batch(&[seq(4, 0)], &[], 1.0, 0, AugmentMode::Replace),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_samples_pass_through() {
        let out = augment_batch(&[seq(1, 0)], &[seq(9, 1)], 1.0, 1, AugmentMode::Either).unwrap();
        assert_eq!(out[0].kind, AugmentKind::None);
    }

    #[test]
    fn augmented_fraction_near_p() {
        let batch: Vec<_> = (0..10_000).map(|i| seq(10, i % 50)).collect();
        let out = augment_batch(&batch, &[seq(15, 3)], 0.1, 77, AugmentMode::Either).unwrap();
        let frac = out.iter().filter(|a| a.kind != AugmentKind::None).count() as f64 / 1e4;
        assert!((0.09..=0.11).contains(&frac), "{frac}");
    }

    #[test]
    fn duplicate_masks_exactly_the_copy() {
        let s = seq(40, 2);
        let out = augment_batch(
            std::slice::from_ref(&s),
            &[],
            1.0,
            5,
            AugmentMode::Duplicate,
        )
        .unwrap();
        let a = &out[0];
        let (start, len) = a.segment;
        assert_eq!(a.input_codecs.len(), 40 + len);
        let (inp, tgt, mask) = targets_for_training(a);
        assert_eq!(mask.len(), inp.len());
        assert_eq!(mask.iter().filter(|m| !**m).count(), len);
        let kept: Vec<usize> = tgt
            .level(1)
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(kept, s.level(1));
        assert_eq!(
            &inp.level(1)[start..start + len],
            &s.level(1)[start - len..start]
        );
    }

    #[test]
    fn constructed_duplicate_of_five() {
        let s = seq(20, 0);
        let input = with_frames(s.levels(), |l, _| {
            let mut v = l[..8].to_vec();
            v.extend_from_slice(&l[3..8]);
            v.extend_from_slice(&l[8..]);
            v
        })
        .unwrap();
        let a = AugmentedSample {
            input_codecs: input,
            target_codecs: s.clone(),
            kind: AugmentKind::Duplicate,
            segment: (8, 5),
        };
        let (_, tgt, mask) = targets_for_training(&a);
        let expect: Vec<bool> = (0..25).map(|j| !(8..13).contains(&j)).collect();
        assert_eq!(mask, expect);
        assert_eq!(&tgt.level(3)[13..], &s.level(3)[8..]);
    }

    proptest! {
        #[test]
        fn invariants_hold(t in 1usize..30, n in 1usize..6, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let batch: Vec<_> = (0..n).map(|i| seq(t, i * 13)).collect();
            let pool = vec![seq(t + 3, 500), seq(2, 900)];
            let a = augment_batch(&batch, &pool, p, seed, AugmentMode::Either).unwrap();
            let b = augment_batch(&batch, &pool, p, seed, AugmentMode::Either).unwrap();
            prop_assert_eq!(&a, &b);
            for (s, aug) in batch.iter().zip(&a) {
                prop_assert_eq!(&aug.target_codecs, s);
                let (inp, tgt, mask) = targets_for_training(aug);
                prop_assert_eq!(mask.len(), inp.len());
                prop_assert_eq!(tgt.len(), inp.len());
                match aug.kind {
                    AugmentKind::None => prop_assert_eq!(&aug.input_codecs, s),
                    AugmentKind::Replace => {
                        let (st, len) = aug.segment;
                        prop_assert_eq!(aug.input_codecs.len(), t);
                        prop_assert!(mask.iter().all(|m| *m));
                        for (q, row) in aug.input_codecs.levels().iter().enumerate() {
                            for j in (0..t).filter(|j| !(st..st + len).contains(j)) {
                                prop_assert_eq!(row[j], s.levels()[q][j]);
                            }
                        }
                    }
                    AugmentKind::Duplicate => {
                        prop_assert_eq!(aug.input_codecs.len(), t + aug.segment.1);
                        prop_assert!(aug.segment.1 >= 1);
                    }
                }
            }
        }
    }
}
