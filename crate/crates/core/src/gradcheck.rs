//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// with step `h` at `coords` coordinates drawn (deterministically by `seed`)
/// among the parameters of `params` that the loss actually touches. `loss_fn` must rebuild
/// the full computation from the given parameters, using fixed randomness.
pub fn check_gradients(
    params: &ParamStore<f64>,
    loss_fn: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);
    let mut candidates: Vec<(String, usize)> = analytic
        .iter()
        .filter(|(name, _)| params.contains(name))
        .flat_map(|(name, m)| (0..m.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(coords);
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        Ok(g.value(l).item())
    };
    let mut checks = Vec::with_capacity(candidates.len());
    for (name, index) in candidates {
        let mut plus = params.clone();
        plus.get_mut(&name).expect("param exists").data_mut()[index] += h;
        let mut minus = params.clone();
        minus.get_mut(&name).expect("param exists").data_mut()[index] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic[&name].data()[index];
        checks.push(CoordinateCheck {
            rel_error: relative_error(a, numeric, 1e-6),
            name,
            index,
            analytic: a,
            numeric,
        });
    }
    Ok(GradCheckReport { checks })
}
