//! Browser demo over the core crate: simulate a Hawkes sequence, draw
//! density-preserving masking windows over it, and build misaligned
//! negatives. Each operation returns a JSON string that `www/index.html`
//! renders; the plain `*_json` functions are the same operations for native
//! callers and tests.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use seqpretext::alignment::{misalign_crossover, misalign_shuffle, misalign_swap, Misalignment};
use seqpretext::data::{simulate_hawkes, EventSequence, HawkesParams};
use seqpretext::masking::sample_mask_windows;
use seqpretext::{Error, Result};

/// Points of the intensity curve returned with a simulation.
pub const GRID_POINTS: usize = 400;

fn params(num_types: usize, mu: f64, alpha_self: f64, alpha_cross: f64, beta: f64) -> Result<HawkesParams> {
    if num_types == 0 {
        return Err(Error::InvalidConfig("at least one event type".into()));
    }
    let alpha = (0..num_types)
        .map(|i| (0..num_types).map(|j| if i == j { alpha_self } else { alpha_cross }).collect())
        .collect();
    HawkesParams::new(vec![mu; num_types], alpha, vec![vec![beta; num_types]; num_types])
}

/// Intensity of every type at `t` given the events of `seq` before `t`.
fn intensity(p: &HawkesParams, seq: &EventSequence, t: f64) -> Vec<f64> {
    let mut lam = p.mu.clone();
    for e in seq.events().iter().take_while(|e| e.time < t) {
        for (k, l) in lam.iter_mut().enumerate() {
            *l += p.alpha[k][e.mark] * (-p.beta[k][e.mark] * (t - e.time)).exp();
        }
    }
    lam
}

fn sequence(times: &[f64], marks: &[u32], num_types: usize) -> Result<EventSequence> {
    let marks: Vec<usize> = marks.iter().map(|&m| m as usize).collect();
    EventSequence::from_parts(times, &marks, num_types)
}

/// Events, per-type intensity on a regular grid over `[0, horizon]`, and the
/// spectral radius of the branching matrix.
pub fn simulate_json(num_types: usize, horizon: f64, mu: f64, alpha_self: f64, alpha_cross: f64, beta: f64, seed: u64) -> Result<String> {
    let p = params(num_types, mu, alpha_self, alpha_cross, beta)?;
    let seq = simulate_hawkes(&p, horizon, seed)?;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| horizon * i as f64 / (GRID_POINTS - 1) as f64).collect();
    let curves: Vec<Vec<f64>> = grid.iter().map(|&t| intensity(&p, &seq, t)).collect();
    let by_type: Vec<Vec<f64>> = (0..num_types).map(|k| curves.iter().map(|c| c[k]).collect()).collect();
    Ok(json!({
        "times": seq.times(),
        "marks": seq.marks(),
        "grid": grid,
        "intensity": by_type,
        "radius": p.branching_radius(),
    })
    .to_string())
}

/// Windows `[start, end)` of one density-preserving mask and the indices of
/// the events they hide.
pub fn mask_json(times: &[f64], marks: &[u32], num_types: usize, ratio: f64, window: f64, seed: u64) -> Result<String> {
    let seq = sequence(times, marks, num_types)?;
    let plan = sample_mask_windows(&seq, ratio, window, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let windows: Vec<[f64; 2]> = plan.windows.iter().map(|w| [w.start, w.end()]).collect();
    Ok(json!({
        "windows": windows,
        "masked": plan.masked,
        "span": seq.span(),
    })
    .to_string())
}

/// Misaligned copies of `a` (and of `b` for the two-sequence methods).
pub fn misalign_json(
    a_times: &[f64],
    a_marks: &[u32],
    b_times: &[f64],
    b_marks: &[u32],
    num_types: usize,
    method: &str,
    seed: u64,
) -> Result<String> {
    let a = sequence(a_times, a_marks, num_types)?;
    let b = sequence(b_times, b_marks, num_types)?;
    let out = match method.parse::<Misalignment>()? {
        Misalignment::None => vec![a],
        Misalignment::Shuffle => vec![misalign_shuffle(&a, &mut ChaCha8Rng::seed_from_u64(seed))?],
        Misalignment::Swap => {
            let (x, y) = misalign_swap(&a, &b)?;
            vec![x, y]
        }
        Misalignment::Crossover => {
            let (x, y) = misalign_crossover(&a, &b)?;
            vec![x, y]
        }
    };
    let seqs: Vec<_> = out.iter().map(|s| json!({ "times": s.times(), "marks": s.marks() })).collect();
    Ok(json!({ "method": method, "sequences": seqs }).to_string())
}

fn to_js(r: Result<String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(num_types: usize, horizon: f64, mu: f64, alpha_self: f64, alpha_cross: f64, beta: f64, seed: u32) -> Result<String, JsValue> {
    to_js(simulate_json(num_types, horizon, mu, alpha_self, alpha_cross, beta, u64::from(seed)))
}

#[wasm_bindgen]
pub fn mask(times: &[f64], marks: &[u32], num_types: usize, ratio: f64, window: f64, seed: u32) -> Result<String, JsValue> {
    to_js(mask_json(times, marks, num_types, ratio, window, u64::from(seed)))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn misalign(
    a_times: &[f64],
    a_marks: &[u32],
    b_times: &[f64],
    b_marks: &[u32],
    num_types: usize,
    method: &str,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(misalign_json(a_times, a_marks, b_times, b_marks, num_types, method, u64::from(seed)))
}
