//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes  "HAMTTSCK"
//! format_version u32
//! step           u64
//! config         u64 length + UTF-8 JSON
//! params         u64 count, then per parameter:
//!                  u64 name length + UTF-8 name, u64 ndim, ndim × u64 dims,
//!                  product(dims) × f64
//! adam           u8 flag; if 1: u64 step, then m and v arrays in parameter
//!                order, each as ndim/dims/f64 data
//! rng            u8 flag; if 1: 32-byte seed, u64 stream, u128 word position
//! codebook       u8 flag; if 1: u64 k, u64 D, k·D × f64 centroids, f64 inertia
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::Codebook;
use crate::numerics::{AdamState, Array, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HAMTTSCK";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

/// Position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub config: Config,
    pub params: Vec<(String, Array)>,
    pub adam: Option<AdamSnapshot>,
    pub rng: Option<RngState>,
    pub codebook: Option<Codebook>,
}

impl Checkpoint {
    pub fn from_store(config: &Config, store: &ParamStore) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            step: 0,
            config: config.clone(),
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            adam: None,
            rng: None,
            codebook: None,
        }
    }

    pub fn with_adam(mut self, adam: &AdamState) -> Self {
        self.adam = Some(AdamSnapshot {
            step: adam.step,
            m: adam.m.clone(),
            v: adam.v.clone(),
        });
        self
    }

    /// Copies stored values into same-named parameters of `store`. With
    /// `require_all`, every parameter of `store` must be present.
    pub fn load_into(&self, store: &mut ParamStore, require_all: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, value) in &self.params {
            let Some(id) = store.id(name) else {
                continue;
            };
            let p = store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
            loaded += 1;
        }
        if require_all && loaded != store.len() {
            let missing = store
                .iter()
                .find(|(_, p)| !self.params.iter().any(|(n, _)| n == &p.name))
                .map(|(_, p)| p.name.clone())
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks parameter `{missing}`"
            )));
        }
        Ok(loaded)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&self.format_version.to_le_bytes());
        put_u64(&mut w, self.step);
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        put_bytes(&mut w, &cfg);
        put_u64(&mut w, self.params.len() as u64);
        for (name, value) in &self.params {
            put_bytes(&mut w, name.as_bytes());
            put_array(&mut w, value);
        }
        match &self.adam {
            Some(a) => {
                w.push(1);
                put_u64(&mut w, a.step);
                for arr in a.m.iter().chain(&a.v) {
                    put_array(&mut w, arr);
                }
            }
            None => w.push(0),
        }
        match &self.rng {
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                put_u64(&mut w, r.stream);
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => w.push(0),
        }
        match &self.codebook {
            Some(c) => {
                w.push(1);
                put_u64(&mut w, c.k as u64);
                put_u64(&mut w, c.dim() as u64);
                for v in c.centroids.data() {
                    w.extend_from_slice(&v.to_le_bytes());
                }
                w.extend_from_slice(&c.inertia.to_le_bytes());
            }
            None => w.push(0),
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let format_version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {format_version}, expected {FORMAT_VERSION}"
            )));
        }
        let step = r.u64()?;
        let cfg_len = r.len()?;
        let config: Config = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let n = r.len()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.len()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            params.push((name, r.array()?));
        }
        let adam = if r.flag()? {
            let step = r.u64()?;
            let m = (0..n).map(|_| r.array()).collect::<Result<_>>()?;
            let v = (0..n).map(|_| r.array()).collect::<Result<_>>()?;
            Some(AdamSnapshot { step, m, v })
        } else {
            None
        };
        let rng = if r.flag()? {
            let seed = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            Some(RngState {
                seed,
                stream,
                word_pos,
            })
        } else {
            None
        };
        let codebook = if r.flag()? {
            let k = r.len()?;
            let d = r.len()?;
            let data = (0..k * d).map(|_| r.f64()).collect::<Result<_>>()?;
            let centroids = Array::new(&[k, d], data)?;
            let inertia = r.f64()?;
            Some(Codebook {
                centroids,
                k,
                inertia,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            format_version,
            step,
            config,
            params,
            adam,
            rng,
            codebook,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_array(w: &mut Vec<u8>, a: &Array) {
    put_u64(w, a.ndim() as u64);
    for &d in a.shape() {
        put_u64(w, d as u64);
    }
    for v in a.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad section flag {b}"))),
        }
    }

    fn array(&mut self) -> Result<Array> {
        let ndim = self.len()?;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("array size overflows".into()))?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint(format!(
                "truncated array at byte {}",
                self.pos
            )));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Array::new(&shape, data)
    }
}
