//! Small reverse-mode numeric core: tensors, a tape, parameters, Adam,
//! finite-difference gradient checks and JSON checkpoints.
//!
//! Only the layers needed by the shape-attention block and the look-once
//! network are provided. All arithmetic is `f64`; checkpoints store `f32`.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradReport, GraphFn, ScalarFunction};
pub use graph::{Graph, Var};
pub use ops::{affine, max_pool_set, relu, sigmoid, softmax_rows};
pub use optim::{adam_step, OptimizerState, StepDecay};
pub use params::ParamStore;
pub use tensor::Tensor;

use crate::error::Result;

/// Binds `{prefix}.w` / `{prefix}.b` and applies `x W + b`.
pub fn dense(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.affine(x, w, b)
}

/// Registers a Glorot-initialised `{prefix}.w` and a zero `{prefix}.b`.
pub fn init_dense<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_glorot(format!("{prefix}.w"), fan_in, fan_out, rng)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}
