//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Array, Graph, Var};

/// Worst relative error per parameter.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub max_rel_error: f64,
}

/// |analytic − numeric| / max(1, |analytic|)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain {
            op: "finite_diff_check",
            msg: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    Ok(())
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::new();
    f(&g, store)?.item()
}

/// Compares the backward pass of `f` against central differences for every
/// element of every parameter in `store`.
///
/// `f` builds a scalar loss on the given graph from the given store and must
/// be deterministic; two baseline evaluations that differ bitwise are
/// reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_params(f, store, &ids, eps)
}

/// Like [`finite_diff_check`] restricted to `ids`.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    check_eps(eps)?;
    let first = eval(&f, store)?;
    let second = eval(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(loss)?;

    let mut work = store.clone();
    let mut per_param = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let zeros = Array::zeros(store.value(id).shape().to_vec());
        let analytic = grads.params().get(id).unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for k in 0..n {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&f, &work)?;
            work.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&f, &work)?;
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        per_param.push(ParamCheck {
            id,
            name: store.get(id).name.clone(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}

/// Finite-difference check of a function of free input arrays, each of
/// which becomes a `requires_grad` leaf.
pub fn finite_diff_check_inputs<F>(f: F, inputs: &[Array], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_eps(eps)?;
    let run = |arrays: &[Array]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = arrays.iter().map(|a| g.leaf(a.clone())).collect();
        f(&g, &vars)?.item()
    };
    let first = run(inputs)?;
    let second = run(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work: Vec<Array> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf has a gradient").clone();
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let plus = run(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let minus = run(&work)?;
            work[i].data_mut()[k] = orig;
            worst = worst.max(relative_error(
                analytic.data()[k],
                (plus - minus) / (2.0 * eps),
            ));
        }
    }
    Ok(worst)
}
