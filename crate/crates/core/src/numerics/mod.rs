//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod gemm;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
pub use params::{InitScheme, ParamId, ParamStore, Parameter, INIT_STD};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

use crate::error::Result;

/// Matrix product of two standalone tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.value(c).clone())
}

/// Softmax of a standalone tensor along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let y = g.softmax(x, axis)?;
    Ok(g.value(y).clone())
}

/// Single-head `softmax(Q Kᵀ / √d) V` on standalone tensors.
pub fn attention(queries: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let o = g.attention(q, k, v, 1, false)?;
    Ok(g.value(o).clone())
}

pub mod fdcheck;

#[cfg(test)]
mod tests;
