//! Central finite-difference checks for analytic gradients.
//!
//! The relative error of a block is `|g_a - g_n| / max(|g_a|, |g_n|)` in
//! the Euclidean norm, where `g_a` is the tape gradient and `g_n` the
//! two-sided numerical estimate.

use crate::autodiff::{Graph, GroupSet, ParamStore, Var};
use crate::error::{Result, TdaError};
use crate::tensor::Tensor;

const FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TdaError::Shape(format!(
            "gradient check needs a scalar loss, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks d(loss)/d(input) for a loss built from a single input tensor.
pub fn check_input_gradient<F>(input: &Tensor, build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::standalone();
    let x = g.variable(input.clone());
    let loss = build(&mut g, x)?;
    let grads = g.backward(loss);
    let analytic = grads
        .wrt(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::standalone();
        let x = g.constant(t);
        let loss = build(&mut g, x)?;
        scalar_of(&g, loss)
    };
    let mut numeric = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Per-block result of [`check_param_gradients`].
#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Checks d(loss)/d(param) for every block of `store` in `groups`.
///
/// `build` constructs the scalar loss on a graph bound to the given store;
/// it is re-run on perturbed copies for the numerical estimate.
pub fn check_param_gradients<F>(store: &ParamStore, groups: GroupSet, build: F, step: f64) -> Result<Vec<BlockCheck>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store, groups);
    let loss = build(&mut g)?;
    let grads = g.backward(loss);
    let param_grads = g.param_grads(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, GroupSet::NONE);
        let loss = build(&mut g)?;
        scalar_of(&g, loss)
    };

    let mut out = Vec::new();
    let mut work = store.clone();
    for id in store.ids_in(groups) {
        let n = store.get(id).len();
        let analytic = param_grads
            .get(id.index())
            .and_then(|g| g.as_ref())
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        out.push(BlockCheck {
            name: store.block(id).name.clone(),
            relative_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}

/// Largest relative error across checked blocks.
pub fn worst(checks: &[BlockCheck]) -> f64 {
    checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
}
