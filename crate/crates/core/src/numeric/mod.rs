//! Dense tensors, raw kernels, and the reverse-mode tape.

pub mod fd;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use tape::{BnMode, BnStats, Grads, Neighbors, ReduceKind, Tape, VarId};
pub use tensor::Tensor;
