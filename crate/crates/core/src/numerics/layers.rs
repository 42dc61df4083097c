//! Parameterised building blocks composed from tape operations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::tape::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Registers parameters under a dotted name prefix with seeded initialisation.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initialiser whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let value = Array::randn(shape, std, self.rng);
        self.store.add(self.full_name(name), value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add(self.full_name(name), Array::full(shape, value))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Fresh RNG for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut sub = init.sub(name);
        let weight = sub.normal("weight", &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        let bias = sub.constant("bias", &[fan_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Same-padded 1-D convolution over a `T×C_in` sequence.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "conv kernel size must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            kernel,
            proj: Linear::new(init, name, kernel * c_in, c_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let cols = if self.kernel == 1 {
            x
        } else {
            tape.im2col(x, self.kernel)?
        };
        self.proj.forward(tape, cols)
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.sub(name).constant("gain", &[dim], 1.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        tape.rmsnorm(x, g)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(init: &mut Init<'_>, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: init.sub(name).normal("table", &[vocab, dim], 0.1)?,
            vocab,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.embedding(t, ids)
    }
}

/// Multi-head attention with query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    /// `kv_dim` is the width of the key/value source stream.
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model width {dim} not divisible by {heads} heads"
            )));
        }
        let mut sub = init.sub(name);
        Ok(Self {
            heads,
            q: Linear::new(&mut sub, "q", dim, dim)?,
            k: Linear::new(&mut sub, "k", kv_dim, dim)?,
            v: Linear::new(&mut sub, "v", kv_dim, dim)?,
            out: Linear::new(&mut sub, "out", dim, dim)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        query: Var,
        source: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, source)?;
        let v = self.v.forward(tape, source)?;
        let a = tape.attention(q, k, v, self.heads, causal)?;
        self.out.forward(tape, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            up: Linear::new(&mut sub, "up", dim, hidden)?,
            down: Linear::new(&mut sub, "down", hidden, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Pre-norm transformer decoder block.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_attn: RmsNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: RmsNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            norm_attn: RmsNorm::new(&mut sub, "norm_attn", dim)?,
            attn: MultiHeadAttention::new(&mut sub, "attn", dim, dim, heads)?,
            norm_ffn: RmsNorm::new(&mut sub, "norm_ffn", dim)?,
            ffn: FeedForward::new(&mut sub, "ffn", dim, ffn_hidden)?,
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, causal: bool) -> Result<Var> {
        let h = self.norm_attn.forward(tape, x)?;
        let h = self.attn.forward(tape, h, h, causal)?;
        let h = tape.dropout(h, self.dropout);
        let x = tape.add(x, h)?;
        let h = self.norm_ffn.forward(tape, x)?;
        let h = self.ffn.forward(tape, h)?;
        let h = tape.dropout(h, self.dropout);
        tape.add(x, h)
    }
}

/// Fixed sinusoidal position table of shape `len×dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Array::from_parts(vec![len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(1);
        let conv = Conv1d::new(&mut Init::new(&mut store, &mut rng), "c", 3, 3, 1).unwrap();
        store.get_mut(conv.proj.weight).value = Array::identity(3);
        let x = Array::randn(&[5, 3], 1.0, &mut rng);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn zero_input_conv_broadcasts_bias() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(2);
        let conv = Conv1d::new(&mut Init::new(&mut store, &mut rng), "c", 3, 2, 3).unwrap();
        store.get_mut(conv.proj.bias).value = Array::new(&[2], vec![0.5, -1.5]).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Array::zeros(&[4, 3]));
        let y = conv.forward(&mut tape, xv).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(y).row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn conv_matches_sliding_window_sum() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let conv = Conv1d::new(&mut Init::new(&mut store, &mut rng), "c", 3, 2, 3).unwrap();
        store.get_mut(conv.proj.bias).value = Array::randn(&[2], 1.0, &mut rng);
        let x = Array::randn(&[5, 3], 1.0, &mut rng);
        let w = store.value(conv.proj.weight).clone();
        let b = store.value(conv.proj.bias).clone();
        // w is laid out [(tap, c_in), c_out]; tap 0 reads position t-1.
        let mut expect = vec![0.0; 10];
        for t in 0..5i64 {
            for co in 0..2 {
                let mut acc = b.data()[co];
                for tap in 0..3i64 {
                    let src = t + tap - 1;
                    if !(0..5).contains(&src) {
                        continue;
                    }
                    for ci in 0..3 {
                        acc += x.get2(src as usize, ci) * w.get2((tap * 3) as usize + ci, co);
                    }
                }
                expect[t as usize * 2 + co] = acc;
            }
        }
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let y = conv.forward(&mut tape, xv).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_over_identical_values_ignores_queries() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(4);
        let mha =
            MultiHeadAttention::new(&mut Init::new(&mut store, &mut rng), "a", 8, 8, 2).unwrap();
        let v0 = Array::randn(&[1, 8], 1.0, &mut rng);
        let src = Array::from_rows(&vec![v0.data().to_vec(); 5]).unwrap();
        let mut tape = Tape::new(&store);
        let qa = tape.constant(Array::randn(&[3, 8], 1.0, &mut rng));
        let kv = tape.constant(src);
        let out = mha.forward(&mut tape, qa, kv, false).unwrap();
        let single = tape.constant(v0);
        let vproj = mha.v.forward(&mut tape, single).unwrap();
        let expect = mha.out.forward(&mut tape, vproj).unwrap();
        for r in 0..3 {
            for (a, e) in tape.value(out).row(r).iter().zip(tape.value(expect).row(0)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(5);
        let mha =
            MultiHeadAttention::new(&mut Init::new(&mut store, &mut rng), "a", 4, 4, 2).unwrap();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Array::randn(&[2, 4], 1.0, &mut rng));
        let kv = tape.constant(Array::randn(&[1, 4], 1.0, &mut rng));
        let out = mha.forward(&mut tape, q, kv, false).unwrap();
        let vproj = mha.v.forward(&mut tape, kv).unwrap();
        let expect = mha.out.forward(&mut tape, vproj).unwrap();
        for r in 0..2 {
            for (a, e) in tape.value(out).row(r).iter().zip(tape.value(expect).row(0)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_attention_prefix_is_bitwise_stable() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(6);
        let mha =
            MultiHeadAttention::new(&mut Init::new(&mut store, &mut rng), "a", 8, 8, 4).unwrap();
        let x = Array::randn(&[6, 8], 1.0, &mut rng);
        let run = |x: Array| {
            let mut tape = Tape::new(&store);
            let xv = tape.constant(x);
            let y = mha.forward(&mut tape, xv, xv, true).unwrap();
            tape.value(y).clone()
        };
        let base = run(x.clone());
        for t in 0..6 {
            let mut xp = x.clone();
            xp.row_mut(t).iter_mut().for_each(|v| *v += 3.0);
            let pert = run(xp);
            for r in 0..t {
                assert_eq!(base.row(r), pert.row(r), "row {r} changed by position {t}");
            }
        }
    }
}
