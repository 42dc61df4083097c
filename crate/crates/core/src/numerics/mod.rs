//! Differentiable dense-array substrate: arrays, the reverse-mode tape,
//! parameterised layers, Adam with its schedule, and gradient checking.

pub mod array;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;

pub use array::Array;
pub use optim::{lr_at, AdamConfig, AdamState};
pub use tape::{Gradients, ParamId, ParamStore, Parameter, Tape, Var};
