//! Reverse-mode autodiff engine: dense arrays, a flat recording tape with
//! the transformer operator set, AdamW, and finite-difference verification.

pub mod array;
pub mod check;
pub mod optim;
pub mod tape;

pub use array::{Array, Scalar};
pub use check::{finite_diff_check, point_of};
pub use optim::{AdamW, ParamStore};
pub use tape::{attention_causal, attention_masked, Bcast, Grads, Mask, NodeId, RopeTable, Tape};
