//! Multivariate Hawkes simulation with exponential kernels by Ogata thinning.
//!
//! The intensity of type `k` is
//! `mu_k + sum_{t_i < t} alpha[k][m_i] * exp(-beta[k][m_i] (t - t_i))`,
//! so `alpha[k][j]` is the jump that an event of type `j` adds to type `k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{Dataset, Event, EventSequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl HawkesParams {
    /// Checks shapes, signs and stationarity.
    pub fn new(mu: Vec<f64>, alpha: Vec<Vec<f64>>, beta: Vec<Vec<f64>>) -> Result<Self> {
        let p = HawkesParams { mu, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    /// Same excitation and decay for every pair of types.
    pub fn uniform(mu: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let k = mu.len();
        Self::new(mu, vec![vec![alpha; k]; k], vec![vec![beta; k]; k])
    }

    pub fn num_types(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.mu.len();
        if k == 0 {
            return Err(Error::InvalidConfig("Hawkes process needs at least one type".into()));
        }
        if self.alpha.len() != k
            || self.beta.len() != k
            || self.alpha.iter().any(|r| r.len() != k)
            || self.beta.iter().any(|r| r.len() != k)
        {
            return Err(Error::InvalidConfig(format!("alpha and beta must be {k}x{k}")));
        }
        if self.mu.iter().any(|&m| !(m.is_finite() && m >= 0.0)) {
            return Err(Error::InvalidConfig("base rates must be finite and >= 0".into()));
        }
        if self.alpha.iter().flatten().any(|&a| !(a.is_finite() && a >= 0.0)) {
            return Err(Error::InvalidConfig("excitations must be finite and >= 0".into()));
        }
        if self.beta.iter().flatten().any(|&b| !(b.is_finite() && b > 0.0)) {
            return Err(Error::InvalidConfig("decay rates must be finite and > 0".into()));
        }
        let rho = self.branching_radius();
        if rho >= 1.0 {
            return Err(Error::NonStationary(rho));
        }
        Ok(())
    }

    /// Spectral radius of `alpha / beta` (elementwise).
    pub fn branching_radius(&self) -> f64 {
        let m: Vec<Vec<f64>> = self
            .alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x / y).collect())
            .collect();
        spectral_radius(&m)
    }

    /// Stationary mean rate per type: `(I - A)^{-1} mu`.
    pub fn stationary_rates(&self) -> Vec<f64> {
        let k = self.num_types();
        // Neumann series converges because the branching radius is < 1.
        let a: Vec<Vec<f64>> = self
            .alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x / y).collect())
            .collect();
        let mut total = self.mu.clone();
        let mut term = self.mu.clone();
        for _ in 0..10_000 {
            let next: Vec<f64> = (0..k)
                .map(|i| (0..k).map(|j| a[i][j] * term[j]).sum())
                .collect();
            let size: f64 = next.iter().sum();
            for (t, n) in total.iter_mut().zip(&next) {
                *t += n;
            }
            term = next;
            if size < 1e-14 {
                break;
            }
        }
        total
    }
}

/// Spectral radius of a square nonnegative matrix, via
/// `rho = lim ||M^n||^{1/n}` evaluated by repeated squaring.
pub fn spectral_radius(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    if k == 0 {
        return 0.0;
    }
    let norm = |a: &[Vec<f64>]| {
        a.iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut cur: Vec<Vec<f64>> = m.to_vec();
    // log rho ~= log_scale / power
    let mut log_scale = 0.0f64;
    let mut power = 1.0f64;
    let mut estimate = norm(&cur);
    for _ in 0..60 {
        let n = norm(&cur);
        if n == 0.0 {
            return 0.0;
        }
        for r in &mut cur {
            for x in r.iter_mut() {
                *x /= n;
            }
        }
        log_scale += n.ln();
        let sq: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| (0..k).map(|l| cur[i][l] * cur[l][j]).sum()).collect())
            .collect();
        cur = sq;
        log_scale *= 2.0;
        power *= 2.0;
        let n2 = norm(&cur);
        if n2 == 0.0 {
            return 0.0;
        }
        let next = ((log_scale + n2.ln()) / power).exp();
        if (next - estimate).abs() <= 1e-15 * next.max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// One sequence on `(0, horizon]`. Deterministic in `seed`.
pub fn simulate_hawkes(params: &HawkesParams, horizon: f64, seed: u64) -> Result<EventSequence> {
    params.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Precondition("horizon must be positive".into()));
    }
    let k = params.num_types();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // excite[i][j]: decayed sum of kernels from past type-j events acting on type i
    let mut excite = vec![vec![0.0f64; k]; k];
    let mut last = 0.0f64;
    let mut t = 0.0f64;
    let mut events: Vec<Event> = Vec::new();
    let intensities = |excite: &[Vec<f64>]| -> Vec<f64> {
        (0..k)
            .map(|i| params.mu[i] + params.alpha[i].iter().zip(&excite[i]).map(|(a, e)| a * e).sum::<f64>())
            .collect()
    };
    let decay = |excite: &mut Vec<Vec<f64>>, dt: f64| {
        for (i, row) in excite.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e *= (-params.beta[i][j] * dt).exp();
            }
        }
    };
    loop {
        // Kernels only decay between events, so the current total intensity
        // bounds the intensity until the next acceptance.
        let bound: f64 = intensities(&excite).iter().sum();
        if bound <= 0.0 {
            break;
        }
        let wait = Exp::new(bound).expect("positive rate").sample(&mut rng);
        t += wait;
        if t > horizon {
            break;
        }
        decay(&mut excite, t - last);
        last = t;
        let lam = intensities(&excite);
        let total: f64 = lam.iter().sum();
        let u: f64 = rng.random::<f64>() * bound;
        if u > total {
            continue;
        }
        let mut pick = u;
        let mut mark = k - 1;
        for (j, &l) in lam.iter().enumerate() {
            if pick < l {
                mark = j;
                break;
            }
            pick -= l;
        }
        let mut time = t;
        if let Some(prev) = events.last() {
            if time <= prev.time {
                time = next_up(prev.time);
                t = time;
                last = time;
            }
        }
        events.push(Event::new(time, mark));
        for row in excite.iter_mut() {
            row[mark] += 1.0;
        }
    }
    EventSequence::new(events, k, None)
}

/// `count` sequences, sequence `i` drawn with seed `seed + i`.
pub fn simulate_hawkes_dataset(params: &HawkesParams, horizon: f64, count: usize, seed: u64) -> Result<Dataset> {
    let seqs = (0..count)
        .map(|i| simulate_hawkes(params, horizon, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(seqs, params.num_types())
}

fn next_up(x: f64) -> f64 {
    debug_assert!(x >= 0.0 && x.is_finite());
    f64::from_bits(x.to_bits() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_gives_empty_sequence() {
        let p = HawkesParams::uniform(vec![0.0, 0.0], 0.3, 1.0).unwrap();
        assert!(simulate_hawkes(&p, 100.0, 1).unwrap().is_empty());
    }

    #[test]
    fn rejects_non_stationary() {
        // radius of [[0.6, 0.6], [0.6, 0.6]] is 1.2
        let err = HawkesParams::uniform(vec![1.0, 1.0], 0.6, 1.0).unwrap_err();
        match err {
            Error::NonStationary(r) => assert!((r - 1.2).abs() < 1e-9),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn spectral_radius_cases() {
        assert!((spectral_radius(&[vec![0.0, 1.0], vec![1.0, 0.0]]) - 1.0).abs() < 1e-9);
        assert!((spectral_radius(&[vec![0.5, 0.0], vec![0.0, 0.2]]) - 0.5).abs() < 1e-9);
        assert_eq!(spectral_radius(&[vec![0.0, 1.0], vec![0.0, 0.0]]), 0.0);
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        assert!((spectral_radius(&[vec![2.0, 1.0], vec![1.0, 2.0]]) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_within_horizon() {
        let p = HawkesParams::uniform(vec![0.5, 0.3], 0.4, 1.5).unwrap();
        let a = simulate_hawkes(&p, 30.0, 9).unwrap();
        let b = simulate_hawkes(&p, 30.0, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.events().iter().all(|e| e.time > 0.0 && e.time <= 30.0));
    }

    #[test]
    fn stationary_rate_of_univariate() {
        let p = HawkesParams::uniform(vec![1.0], 0.5, 1.0).unwrap();
        assert!((p.stationary_rates()[0] - 2.0).abs() < 1e-9);
    }
}
