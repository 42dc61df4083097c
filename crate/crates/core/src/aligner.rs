//! Text-to-feature aligner producing the supervising LVS.
//!
//! The text stream carries learned positional embeddings; refined feature
//! frames enter keys and values without any positional signal, so the output
//! depends on the feature frames only as an (unordered) multiset.

use crate::config::{AlignerConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::layers::{Conv1d, Embedding, Init, Linear, MultiHeadAttention, RmsNorm};
use crate::numerics::{ParamStore, Tape, Var};
use crate::predictor::{LatentVariableSequence, PhonemeEmbedding, PhonemeSequence};

/// `x + conv(gelu(conv(x)))` for two layers; deeper stacks interleave GELU.
#[derive(Clone, Debug)]
pub struct ResidualConv {
    pub convs: Vec<Conv1d>,
}

impl ResidualConv {
    fn new(init: &mut Init<'_>, name: &str, cfg: &AlignerConfig) -> Result<Self> {
        let mut sub = init.sub(name);
        let convs = (0..cfg.conv_layers)
            .map(|i| {
                Conv1d::new(
                    &mut sub,
                    &format!("conv{i}"),
                    cfg.hidden,
                    cfg.hidden,
                    cfg.conv_kernel,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = conv.forward(tape, h)?;
        }
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct AlignerBlock {
    pub resblocks: Vec<ResidualConv>,
    pub norm: RmsNorm,
    pub cross: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct Aligner {
    pub text_in: Linear,
    pub positions: Embedding,
    pub feat_in: Linear,
    pub blocks: Vec<AlignerBlock>,
    pub out: Linear,
    pub feature_dim: usize,
    pub dropout: f64,
}

impl Aligner {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let a = &cfg.aligner;
        a.validate()?;
        let mut sub = init.sub("aligner");
        let text_in = Linear::new(&mut sub, "text_in", cfg.embedding_dim, a.hidden)?;
        let positions = Embedding::new(&mut sub, "positions", cfg.max_text_len, a.hidden)?;
        let feat_in = Linear::new(&mut sub, "feat_in", cfg.feature_dim, a.hidden)?;
        let mut blocks = Vec::with_capacity(a.n_blocks);
        for n in 0..a.n_blocks {
            let mut b = sub.sub(&format!("block{n}"));
            let resblocks = (0..a.resnet_blocks_per_block)
                .map(|m| ResidualConv::new(&mut b, &format!("res{m}"), a))
                .collect::<Result<_>>()?;
            blocks.push(AlignerBlock {
                resblocks,
                norm: RmsNorm::new(&mut b, "norm", a.hidden)?,
                cross: MultiHeadAttention::new(&mut b, "cross", a.hidden, a.hidden, a.heads)?,
            });
        }
        let out = Linear::new(&mut sub, "out", a.hidden, a.lvs_dim)?;
        Ok(Self {
            text_in,
            positions,
            feat_in,
            blocks,
            out,
            feature_dim: cfg.feature_dim,
            dropout: a.dropout,
        })
    }

    /// Embedded phonemes `T1×E` and refined features `T2×D` to `T1×d_lvs`.
    pub fn forward(&self, tape: &mut Tape<'_>, embedded: Var, features: Var) -> Result<Var> {
        let t1 = tape.shape(embedded)[0];
        let fshape = tape.shape(features).to_vec();
        if fshape.len() != 2 || fshape[1] != self.feature_dim {
            return Err(Error::shape(format!(
                "aligner expects {}-dimensional features, got {:?}",
                self.feature_dim, fshape
            )));
        }
        if t1 > self.positions.vocab {
            return Err(Error::shape(format!(
                "{t1} phonemes exceed the aligner's {} positions",
                self.positions.vocab
            )));
        }
        let h = self.text_in.forward(tape, embedded)?;
        let ids: Vec<usize> = (0..t1).collect();
        let pos = self.positions.forward(tape, &ids)?;
        let mut x = tape.add(h, pos)?;
        let kv = self.feat_in.forward(tape, features)?;
        for block in &self.blocks {
            for res in &block.resblocks {
                x = res.forward(tape, x)?;
            }
            let q = block.norm.forward(tape, x)?;
            let a = block.cross.forward(tape, q, kv, false)?;
            let a = tape.dropout(a, self.dropout);
            x = tape.add(x, a)?;
        }
        self.out.forward(tape, x)
    }

    /// Embeds `phonemes` and aligns them against `refined`.
    pub fn align(
        &self,
        tape: &mut Tape<'_>,
        embedding: &PhonemeEmbedding,
        phonemes: &PhonemeSequence,
        refined: &FeatureSequence,
    ) -> Result<Var> {
        let e = embedding.forward(tape, phonemes)?;
        let f = tape.constant(refined.frames.clone());
        self.forward(tape, e, f)
    }
}

/// Evaluation-mode alignment of each `(phonemes, refined)` pair.
pub fn supervising_lvs_batch(
    store: &ParamStore,
    embedding: &PhonemeEmbedding,
    aligner: &Aligner,
    batch: &[(PhonemeSequence, FeatureSequence)],
) -> Result<Vec<LatentVariableSequence>> {
    batch
        .iter()
        .map(|(ph, feats)| {
            let mut tape = Tape::new(store);
            let l = aligner.align(&mut tape, embedding, ph, feats)?;
            Ok(LatentVariableSequence {
                values: tape.value(l).clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::init_rng;
    use crate::numerics::Array;

    struct Fixture {
        store: ParamStore,
        emb: PhonemeEmbedding,
        aligner: Aligner,
        cfg: ModelConfig,
    }

    fn fixture() -> Fixture {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = init_rng(11);
        let mut init = Init::new(&mut store, &mut rng);
        let emb =
            PhonemeEmbedding::new(&mut init, cfg.phoneme_inventory, cfg.embedding_dim).unwrap();
        let aligner = Aligner::new(&mut init, &cfg).unwrap();
        Fixture {
            store,
            emb,
            aligner,
            cfg,
        }
    }

    fn phonemes(t1: usize) -> PhonemeSequence {
        PhonemeSequence::new((0..t1).map(|i| (i * 5 + 2) % 24).collect(), 24).unwrap()
    }

    fn features(t2: usize, d: usize, seed: u64) -> FeatureSequence {
        FeatureSequence::new(Array::randn(&[t2, d], 1.0, &mut init_rng(seed))).unwrap()
    }

    fn run(f: &Fixture, ph: &PhonemeSequence, feats: &FeatureSequence) -> Array {
        let mut tape = Tape::new(&f.store);
        let l = f.aligner.align(&mut tape, &f.emb, ph, feats).unwrap();
        tape.value(l).clone()
    }

    #[test]
    fn output_length_follows_text() {
        let f = fixture();
        for t1 in [1, 2, 7, 33] {
            for t2 in [1, 2, 7, 33] {
                let out = run(
                    &f,
                    &phonemes(t1),
                    &features(t2, f.cfg.feature_dim, t2 as u64),
                );
                assert_eq!(out.shape(), &[t1, 2]);
            }
        }
    }

    #[test]
    fn identical_frames_make_order_irrelevant() {
        let f = fixture();
        let ph = phonemes(5);
        let v0 = Array::randn(&[1, f.cfg.feature_dim], 1.0, &mut init_rng(4));
        let rows: Vec<Vec<f64>> = (0..6).map(|_| v0.row(0).to_vec()).collect();
        let a = FeatureSequence::new(Array::from_rows(&rows).unwrap()).unwrap();
        let mut rev = rows.clone();
        rev.rotate_left(2);
        let b = FeatureSequence::new(Array::from_rows(&rev).unwrap()).unwrap();
        assert!(run(&f, &ph, &a).max_abs_diff(&run(&f, &ph, &b)) < 1e-12);
    }

    #[test]
    fn repeating_every_frame_leaves_output_unchanged() {
        let f = fixture();
        let ph = phonemes(6);
        let base = features(9, f.cfg.feature_dim, 21);
        let doubled: Vec<Vec<f64>> = (0..9)
            .flat_map(|t| [base.frames.row(t).to_vec(), base.frames.row(t).to_vec()])
            .collect();
        let dup = FeatureSequence::new(Array::from_rows(&doubled).unwrap()).unwrap();
        assert!(run(&f, &ph, &base).max_abs_diff(&run(&f, &ph, &dup)) <= 1e-6);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let f = fixture();
        let big = FeatureSequence::new(Array::uniform(
            &[12, f.cfg.feature_dim],
            1e3,
            &mut init_rng(2),
        ))
        .unwrap();
        assert!(run(&f, &phonemes(7), &big).is_finite());
    }

    #[test]
    fn wrong_feature_dim_is_shape_error() {
        let f = fixture();
        let mut tape = Tape::new(&f.store);
        let bad = features(4, f.cfg.feature_dim + 1, 1);
        let r = f.aligner.align(&mut tape, &f.emb, &phonemes(3), &bad);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn lvs_loss_reaches_every_aligner_parameter() {
        let f = fixture();
        let mut tape = Tape::training(&f.store, init_rng(5));
        let l = f
            .aligner
            .align(
                &mut tape,
                &f.emb,
                &phonemes(7),
                &features(20, f.cfg.feature_dim, 3),
            )
            .unwrap();
        let target = tape.constant(Array::randn(&[7, 2], 1.0, &mut init_rng(6)));
        let loss = tape.l1(l, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (id, p) in f
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("aligner."))
        {
            let g = grads
                .param(id)
                .unwrap_or_else(|| panic!("no gradient for {}", p.name));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "zero gradient for {}",
                p.name
            );
        }
    }

    #[test]
    fn batch_is_a_map_over_samples() {
        let f = fixture();
        assert!(supervising_lvs_batch(&f.store, &f.emb, &f.aligner, &[])
            .unwrap()
            .is_empty());
        let batch = vec![
            (phonemes(4), features(12, f.cfg.feature_dim, 8)),
            (phonemes(9), features(27, f.cfg.feature_dim, 9)),
        ];
        let out = supervising_lvs_batch(&f.store, &f.emb, &f.aligner, &batch).unwrap();
        for ((ph, feats), lvs) in batch.iter().zip(&out) {
            assert_eq!(lvs.values, run(&f, ph, feats));
        }
        let again = supervising_lvs_batch(&f.store, &f.emb, &f.aligner, &batch).unwrap();
        assert_eq!(out, again);
    }
}
