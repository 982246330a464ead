//! Analytic gradients and the central finite-difference oracle they are checked against.

use indexmap::IndexMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{collect_grads, Bindings, GradMap, ParamSet};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum tolerated relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Coordinates below this fraction of their tensor's largest gradient are
/// judged against that scale: their central differences are mostly roundoff.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Relative error `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    scaled_error(analytic, numeric, 0.0)
}

/// [`relative_error`] with the denominator also floored at `scale`.
pub fn scaled_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8).max(scale)
}

/// Evaluates `loss_fn` once and returns its value with reverse-mode gradients
/// for every trainable parameter.
///
/// A non-finite loss is reported as [`Error::NumericOverflow`] naming the
/// first primitive that produced a non-finite value.
pub fn eval_with_grads<F>(params: &ParamSet, loss_fn: F) -> Result<(f64, GradMap)>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = loss_fn(&mut g, &b)?;
    g.check_finite(loss)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), collect_grads(params, &b, &grads)))
}

/// Forward-only evaluation of `loss_fn`.
pub fn eval_loss<F>(params: &ParamSet, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = loss_fn(&mut g, &b)?;
    g.check_finite(loss)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::contract("loss must be a scalar"));
    }
    Ok(v.item())
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every trainable coordinate.
pub fn finite_diff_grads<F>(params: &ParamSet, h: f64, loss_fn: F) -> Result<GradMap>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    let mut out = IndexMap::new();
    for name in names {
        let n = work.tensor(&name)?.len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = work.tensor(&name)?.data()[i];
            work.tensor_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval_loss(&work, &loss_fn)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval_loss(&work, &loss_fn)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig;
            grad.push((plus - minus) / (2.0 * h));
        }
        let shape = work.tensor(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// Worst elementwise [`relative_error`].
    pub max_rel_error: f64,
    /// Worst [`scaled_error`] against `SCALE_FLOOR × max |numeric|`.
    pub max_scaled_error: f64,
}

/// Analytic vs numeric gradients per trainable parameter.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: IndexMap<String, ParamGradCheck>,
}

impl GradReport {
    pub fn compare(analytic: &GradMap, numeric: &GradMap) -> Result<Self> {
        let mut params = IndexMap::new();
        for (name, a) in analytic {
            let n = numeric
                .get(name)
                .ok_or_else(|| Error::contract(format!("no numeric gradient for `{name}`")))?;
            if a.shape() != n.shape() {
                return Err(Error::contract(format!("gradient shape mismatch for `{name}`")));
            }
            let max_rel_error = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max);
            let scale = SCALE_FLOOR * n.max_abs();
            let max_scaled_error = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| scaled_error(x, y, scale))
                .fold(0.0, f64::max);
            params.insert(
                name.clone(),
                ParamGradCheck {
                    analytic: a.clone(),
                    numeric: n.clone(),
                    max_rel_error,
                    max_scaled_error,
                },
            );
        }
        Ok(GradReport { params })
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.values().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_scaled_error(&self) -> f64 {
        self.params.values().map(|p| p.max_scaled_error).fold(0.0, f64::max)
    }

    /// Pass/fail on the scaled error.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_scaled_error() < tol
    }
}

/// Runs both gradient paths on `loss_fn` and compares them.
pub fn check_gradients<F>(params: &ParamSet, h: f64, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    let (_, analytic) = eval_with_grads(params, &loss_fn)?;
    let numeric = finite_diff_grads(params, h, &loss_fn)?;
    GradReport::compare(&analytic, &numeric)
}
