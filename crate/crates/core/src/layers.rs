//! Parameterized building blocks shared by the encoder, language model and
//! decoder. Activations are row-per-token matrices.

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w: store.add_weight(format!("{name}.weight"), inp, out, rng)?,
            b: store.add_zeros(format!("{name}.bias"), &[out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        let b = g.param(self.b);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_zeros(format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attn {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Keys and values of `memory`, reusable across query sets.
    pub fn memory(&self, g: &mut Graph, memory: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, memory)?, self.v.forward(g, memory)?))
    }

    pub fn attend(&self, g: &mut Graph, x: Var, kv: (Var, Var), causal: bool) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let a = g.attention(q, kv.0, kv.1, self.heads, causal)?;
        self.o.forward(g, a)
    }

    pub fn self_attend(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let kv = self.memory(g, x)?;
        self.attend(g, x, kv, causal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SelfBlock {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl SelfBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attn::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.self_attend(g, h, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Constant matrix from a row-major value buffer.
pub(crate) fn constant(g: &mut Graph, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
    Ok(g.constant(crate::numerics::Tensor::new(&[rows, cols], values)?))
}
