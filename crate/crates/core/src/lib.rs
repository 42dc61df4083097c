pub mod aligner;
pub mod augment;
pub mod cli;
pub mod codec_lm;
pub mod config;
pub mod error;
pub mod features;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod predictor;
pub mod vc;

pub use error::{Error, Result};
