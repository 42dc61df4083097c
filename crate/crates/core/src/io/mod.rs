//! Toy codec, dataset files and checkpoints.

pub mod checkpoint;
pub mod codec;
pub mod dataset;

pub use checkpoint::{AdamSnapshot, Checkpoint, RngState, FORMAT_VERSION};
pub use codec::ToyCodec;
pub use dataset::{data_synth, read_jsonl, write_jsonl, DatasetRecord};

/// Environment variable that overrides the configured training seed.
pub const SEED_ENV: &str = "HAM_SEED";

/// The `HAM_SEED` value when set, otherwise `configured`.
pub fn seed_override(configured: u64) -> crate::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            crate::Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        }),
        Err(_) => Ok(configured),
    }
}
