use std::collections::HashMap;

use super::graph::Gradients;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Standard deviation of the zero-mean normal used for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// How fresh weight matrices and embedding tables are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every weight matrix and table from N(0, 0.02²).
    #[default]
    Fixed,
    /// Weight matrices from N(0, 1/fan_in), tables from N(0, 1).
    FanIn,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Owns every parameter of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    init: InitScheme,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_init(init: InitScheme) -> Self {
        Self {
            init,
            ..Self::default()
        }
    }

    pub fn init(&self) -> InitScheme {
        self.init
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(),
            frozen: false,
        });
        Ok(id)
    }

    /// Tensor drawn from N(0, 0.02²).
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut Rng) -> Result<ParamId> {
        self.add_normal_std(name, shape, INIT_STD, rng)
    }

    pub fn add_normal_std(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.normal(0.0, std)).collect();
        self.add(name, Tensor::from_raw(shape.to_vec(), values))
    }

    /// `(fan_in, fan_out)` weight matrix under the store's scheme.
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
        let std = match self.init {
            InitScheme::Fixed => INIT_STD,
            InitScheme::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
        };
        self.add_normal_std(name, &[fan_in, fan_out], std, rng)
    }

    /// Embedding table (tokens, positions, queries) under the store's scheme.
    pub fn add_table(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut Rng) -> Result<ParamId> {
        let std = match self.init {
            InitScheme::Fixed => INIT_STD,
            InitScheme::FanIn => 1.0,
        };
        self.add_normal_std(name, shape, std, rng)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Zeroed gradient buffers for trainable parameters, none for frozen ones.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.frozen {
                p.tensor.clear_grad();
            } else {
                p.tensor.zero_grad();
            }
        }
    }

    /// Adds the parameter gradients of a backward pass into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.frozen {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add_zeros("a.w", &[2, 2]).unwrap();
        assert!(matches!(
            s.add_zeros("a.w", &[1]),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn init_uses_small_normal() {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(0);
        let id = s.add_normal("w", &[100, 100], &mut rng).unwrap();
        let v = s.value(id).values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn fan_in_scheme_scales_weights() {
        let mut s = ParamStore::with_init(InitScheme::FanIn);
        let mut rng = Rng::new(1);
        let w = s.add_weight("w", 64, 200, &mut rng).unwrap();
        let t = s.add_table("t", &[100, 100], &mut rng).unwrap();
        let std = |id| {
            let v: &[f64] = s.value(id).values();
            (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!((std(w) - 0.125).abs() < 5e-3);
        assert!((std(t) - 1.0).abs() < 3e-2);
        let mut f = ParamStore::new();
        let w = f.add_weight("w", 64, 200, &mut rng).unwrap();
        let v = f.value(w).values();
        let sd = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        assert!((sd - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn frozen_prefix() {
        let mut s = ParamStore::new();
        s.add_zeros("lm.a", &[1]).unwrap();
        s.add_zeros("lm.b", &[1]).unwrap();
        s.add_zeros("dec.a", &[1]).unwrap();
        assert_eq!(s.set_frozen_prefix("lm.", true), 2);
        s.zero_grad();
        assert!(s.get(ParamId(0)).tensor.grad().is_none());
        assert!(s.get(ParamId(2)).tensor.grad().is_some());
    }
}
