//! Central finite-difference verification at 64-bit precision.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    /// Central-difference step.
    pub h: f64,
    /// Entries probed per parameter tensor, evenly spaced. `0` probes all.
    pub max_entries: usize,
    /// Gradient norms below this count as zero. It should sit above the
    /// difference noise, roughly `ε·|f| / h`.
    pub zero_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-3,
            max_entries: 0,
            zero_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    pub rel_err: f64,
}

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and
/// numeric gradients. Two (near-)zero vectors compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_above(analytic, numeric, 1e-12)
}

/// [`relative_error`] with an explicit zero floor.
pub fn relative_error_above(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric));
    if denom < floor {
        norm(&diff)
    } else {
        norm(&diff) / denom
    }
}

/// Evenly spaced probe positions into a tensor of `len` entries.
pub fn probe_indices(len: usize, max_entries: usize) -> Vec<usize> {
    if max_entries == 0 || len <= max_entries {
        return (0..len).collect();
    }
    (0..max_entries).map(|i| i * len / max_entries).collect()
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient<F>(x: &[f64], indices: &[usize], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = work[i];
            work[i] = orig + h;
            let fp = f(&work);
            work[i] = orig - h;
            let fm = f(&work);
            work[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Checks analytic parameter gradients of `loss_fn` against central
/// differences. `loss_fn` builds a fresh graph from the store and returns the
/// scalar loss node.
pub fn check_params<F, E>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    cfg: FdConfig,
    loss_fn: F,
) -> Result<Vec<ParamCheck>, E>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var), E>,
    E: From<TensorError>,
{
    let (graph, loss) = loss_fn(store)?;
    let grads = graph.backward(loss)?;
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic_all = grads.param(store, id);
        let idx = probe_indices(analytic_all.len(), cfg.max_entries);
        let analytic: Vec<f64> = idx.iter().map(|&i| analytic_all[i]).collect();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + cfg.h;
            let fp = eval(&work, &loss_fn)?;
            work.get_mut(id).value.data_mut()[i] = orig - cfg.h;
            let fm = eval(&work, &loss_fn)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * cfg.h));
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            probed: idx.len(),
            rel_err: relative_error_above(&analytic, &numeric, cfg.zero_floor),
        });
    }
    Ok(out)
}

fn eval<F, E>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64, E>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var), E>,
{
    let (g, l) = loss_fn(store)?;
    Ok(g.value(l).item())
}
