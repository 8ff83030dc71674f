//! Reverse-mode automatic differentiation on dynamically shaped f64 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! result value, the parent variable ids, and a boxed backward closure.
//! [`Tape::backward`] then sweeps the nodes in reverse creation order and
//! accumulates gradients. Trainable state lives outside the tape in a
//! [`ParamStore`]; lifting the same parameter twice onto one tape yields the
//! same variable, so gradients from all uses accumulate.
//!
//! Everything is f64 and single threaded. Evaluation order is fixed, so
//! repeated runs over identical inputs are bitwise identical.

mod nn;
mod ops;
mod params;
mod tape;

pub use params::{init_he, init_uniform, init_xavier, ones, zeros, ParamId, ParamStore};
pub use tape::{Tape, VarId};

pub mod gradcheck;
