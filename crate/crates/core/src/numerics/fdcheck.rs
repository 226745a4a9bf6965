//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only ever evaluates forward values, so it is independent of the
//! backward rules it is used to check.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> f64 {
    g.value(v).values()[0]
}

/// Compares gradients of `f` with respect to every element of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_inputs_in(None, inputs, h, f)
}

/// Like [`check_inputs`], with `f` free to read parameters from `store`.
pub fn check_inputs_with<F>(store: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_inputs_in(Some(store), inputs, h, f)
}

fn graph_for(store: Option<&ParamStore>) -> Graph<'_> {
    match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    }
}

fn check_inputs_in<F>(store: Option<&ParamStore>, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = graph_for(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad()))
        .collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = graph_for(store);
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vs)?;
        Ok(scalar_of(&g, l))
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].values_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Compares parameter gradients of `f`, checking at most `per_param`
/// randomly chosen entries of each listed parameter.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    h: f64,
    rng: &mut Rng,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        ids.iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.value(id).len()])
            })
            .collect::<Vec<_>>()
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        let n = store.value(id).len();
        let picks = if n <= per_param {
            (0..n).collect()
        } else {
            rng.choose_distinct(n, per_param)
        };
        let mut local = GradCheck {
            max_rel_err: 0.0,
            checked: 0,
        };
        for j in picks {
            let orig = store.value(id).values()[j];
            work.get_mut(id).tensor.values_mut()[j] = orig + h;
            let up = {
                let mut g = Graph::with_params(&work);
                let l = f(&mut g)?;
                scalar_of(&g, l)
            };
            work.get_mut(id).tensor.values_mut()[j] = orig - h;
            let down = {
                let mut g = Graph::with_params(&work);
                let l = f(&mut g)?;
                scalar_of(&g, l)
            };
            work.get_mut(id).tensor.values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            local.max_rel_err = local.max_rel_err.max(rel_err(grads[k][j], numeric));
            local.checked += 1;
        }
        report = report.merge(local);
    }
    Ok(report)
}
