//! Phoneme embedding, the text-to-LVS predictor, its L1 supervision, and the
//! fusion of phonemes with an LVS into the codec language model input.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PredictorConfig};
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv1d, Embedding, Init, Linear};
use crate::numerics::{Array, ParamStore, Tape, Var};

/// Token ids over the toy phoneme inventory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, inventory: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::shape("empty phoneme sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&p| p >= inventory) {
            return Err(Error::Vocabulary(format!(
                "phoneme id {bad} outside inventory of {inventory}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-phoneme targets for teacher forcing; the last position predicts
    /// the end-of-text class.
    pub fn next_targets(&self, end_of_text: usize) -> Vec<usize> {
        self.ids[1..]
            .iter()
            .copied()
            .chain(std::iter::once(end_of_text))
            .collect()
    }
}

/// Per-phoneme latent variables, `T1×d_lvs`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVariableSequence {
    pub values: Array,
}

impl LatentVariableSequence {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Phoneme embedding fused with an LVS, `T1×d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub values: Array,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Phoneme embedding table shared by the predictor, aligner and fusion.
#[derive(Clone, Debug)]
pub struct PhonemeEmbedding {
    pub table: Embedding,
}

impl PhonemeEmbedding {
    pub fn new(init: &mut Init<'_>, inventory: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: Embedding::new(init, "phoneme_embedding", inventory, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, phonemes: &PhonemeSequence) -> Result<Var> {
        self.table.forward(tape, phonemes.ids())
    }
}

/// Convolutional text-to-LVS predictor.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub convs: Vec<Conv1d>,
    pub out: Linear,
    pub dropout: f64,
}

impl Predictor {
    pub fn new(init: &mut Init<'_>, cfg: &PredictorConfig, embedding_dim: usize) -> Result<Self> {
        let mut sub = init.sub("predictor");
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        for i in 0..cfg.conv_layers {
            let c_in = if i == 0 { embedding_dim } else { cfg.hidden };
            convs.push(Conv1d::new(
                &mut sub,
                &format!("conv{i}"),
                c_in,
                cfg.hidden,
                cfg.conv_kernel,
            )?);
        }
        Ok(Self {
            convs,
            out: Linear::new(&mut sub, "out", cfg.hidden, cfg.lvs_dim)?,
            dropout: cfg.dropout,
        })
    }

    /// Embedded phonemes `T1×E` to an LVS `T1×d_lvs`.
    pub fn forward(&self, tape: &mut Tape<'_>, embedded: Var) -> Result<Var> {
        let mut h = embedded;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            h = tape.gelu(h);
            if i < last {
                h = tape.dropout(h, self.dropout);
            }
        }
        self.out.forward(tape, h)
    }
}

/// Pointwise convolution from `[embedding ; lvs]` to the LM width.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub conv: Conv1d,
    pub embedding_dim: usize,
}

impl Fusion {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(
                init,
                "fusion",
                cfg.embedding_dim + cfg.predictor.lvs_dim,
                cfg.lm.d_model,
                1,
            )?,
            embedding_dim: cfg.embedding_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, embedded: Var, lvs: Var) -> Result<Var> {
        let (te, tl) = (tape.shape(embedded)[0], tape.shape(lvs)[0]);
        if te != tl {
            return Err(Error::shape(format!(
                "fusion of {te} phonemes with an LVS of length {tl}"
            )));
        }
        let joined = tape.concat_cols(embedded, lvs)?;
        self.conv.forward(tape, joined)
    }
}

/// L1 distance summed over positions and channels.
pub fn lvs_loss(
    predicted: &LatentVariableSequence,
    supervising: &LatentVariableSequence,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.constant(predicted.values.clone());
    let b = tape.constant(supervising.values.clone());
    let l = tape.l1(a, b)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::init_rng;

    fn setup() -> (ParamStore, PhonemeEmbedding, Predictor, Fusion, ModelConfig) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let mut init = Init::new(&mut store, &mut rng);
        let emb =
            PhonemeEmbedding::new(&mut init, cfg.phoneme_inventory, cfg.embedding_dim).unwrap();
        let pred = Predictor::new(&mut init, &cfg.predictor, cfg.embedding_dim).unwrap();
        let fusion = Fusion::new(&mut init, &cfg).unwrap();
        (store, emb, pred, fusion, cfg)
    }

    #[test]
    fn predictor_preserves_length() {
        let (store, emb, pred, _, _) = setup();
        for t1 in [1usize, 2, 17] {
            let ph = PhonemeSequence::new((0..t1).map(|i| i % 24).collect(), 24).unwrap();
            let mut tape = Tape::new(&store);
            let e = emb.forward(&mut tape, &ph).unwrap();
            let l = pred.forward(&mut tape, e).unwrap();
            assert_eq!(tape.shape(l), &[t1, 2]);
            let s = tape.value(l).clone();
            let mut tape2 = Tape::new(&store);
            let e2 = emb.forward(&mut tape2, &ph).unwrap();
            let l2 = pred.forward(&mut tape2, e2).unwrap();
            assert_eq!(tape2.value(l2), &s);
        }
    }

    #[test]
    fn unknown_phoneme_is_vocabulary_error() {
        assert!(matches!(
            PhonemeSequence::new(vec![3, 24], 24),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn lvs_loss_cases() {
        let a = LatentVariableSequence {
            values: Array::new(&[3, 2], vec![0.1, -0.3, 2.0, 0.0, 1.5, -1.0]).unwrap(),
        };
        let b = LatentVariableSequence {
            values: a.values.map(|v| v + 1.0),
        };
        assert_eq!(lvs_loss(&a, &a).unwrap(), 0.0);
        assert!((lvs_loss(&b, &a).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(lvs_loss(&a, &b).unwrap(), lvs_loss(&b, &a).unwrap());
        let c = LatentVariableSequence {
            values: Array::zeros(&[2, 2]),
        };
        assert!(matches!(lvs_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_lvs_weights_reduce_fusion_to_phoneme_projection() {
        let (mut store, emb, _, fusion, cfg) = setup();
        let e = cfg.embedding_dim;
        let w = &mut store.get_mut(fusion.conv.proj.weight).value;
        for r in e..e + 2 {
            w.row_mut(r).fill(0.0);
        }
        let ph = PhonemeSequence::new(vec![1, 5, 9], 24).unwrap();
        let mut tape = Tape::new(&store);
        let ev = emb.forward(&mut tape, &ph).unwrap();
        let lvs = tape.constant(Array::zeros(&[3, 2]));
        let fused = fusion.forward(&mut tape, ev, lvs).unwrap();
        assert_eq!(tape.shape(fused), &[3, cfg.lm.d_model]);
        let wv = store.value(fusion.conv.proj.weight);
        let top = Array::new(
            &[e, cfg.lm.d_model],
            wv.data()[..e * cfg.lm.d_model].to_vec(),
        )
        .unwrap();
        let expect = tape.value(ev).matmul(&top).unwrap();
        assert!(tape.value(fused).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn fusion_rejects_length_mismatch() {
        let (store, emb, _, fusion, _) = setup();
        let ph = PhonemeSequence::new(vec![1, 5, 9], 24).unwrap();
        let mut tape = Tape::new(&store);
        let ev = emb.forward(&mut tape, &ph).unwrap();
        let lvs = tape.constant(Array::zeros(&[2, 2]));
        assert!(matches!(
            fusion.forward(&mut tape, ev, lvs),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        use crate::numerics::gradcheck::check_with;
        let (store, _, _, fusion, cfg) = setup();
        let mut rng = init_rng(8);
        let emb = Array::randn(&[4, cfg.embedding_dim], 0.5, &mut rng);
        let lvs = Array::randn(&[4, 2], 0.5, &mut rng);
        let report = check_with(&store, "fuse", &[emb, lvs], 1, false, &|t, v| {
            fusion.forward(t, v[0], v[1])
        })
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error);
    }
}
