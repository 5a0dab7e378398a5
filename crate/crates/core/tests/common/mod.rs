#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqpretext::data::{simulate_hawkes_dataset, Dataset, EventSequence, HawkesParams};
use seqpretext::embedding::TimeKind;
use seqpretext::trainer::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One layer, `d_model = 8`, two heads, `K` types.
pub fn tiny_config(k: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.embedding.num_types = k;
    cfg.embedding.d_time = 4;
    cfg.embedding.d_type = 4;
    cfg.embedding.time_kind = TimeKind::Fixed;
    cfg.encoder.num_layers = 1;
    cfg.encoder.num_heads = 2;
    cfg.encoder.d_model = 8;
    cfg.encoder.d_ff = 16;
    cfg
}

/// Small fast model for pipeline tests.
pub fn small_config(k: usize) -> TrainConfig {
    let mut cfg = tiny_config(k);
    cfg.embedding.d_time = 8;
    cfg.embedding.d_type = 8;
    cfg.encoder.d_model = 16;
    cfg.encoder.d_ff = 32;
    cfg.train.lr = 1e-3;
    cfg
}

pub fn seq(times: &[f64], marks: &[usize], k: usize) -> EventSequence {
    EventSequence::from_parts(times, marks, k).unwrap()
}

/// Mildly self-exciting K-type Hawkes process.
pub fn hawkes(k: usize) -> HawkesParams {
    let mut alpha = vec![vec![0.05; k]; k];
    for (i, row) in alpha.iter_mut().enumerate() {
        row[i] = 0.6;
    }
    HawkesParams::new(vec![0.1; k], alpha, vec![vec![1.0; k]; k]).unwrap()
}

pub fn hawkes_data(k: usize, count: usize, horizon: f64, seed: u64) -> Dataset {
    simulate_hawkes_dataset(&hawkes(k), horizon, count, seed).unwrap()
}

/// Hawkes data with every sequence holding at least `min_len` events.
pub fn hawkes_data_min_len(k: usize, count: usize, horizon: f64, min_len: usize, seed: u64) -> Dataset {
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < count {
        let ds = hawkes_data(k, count, horizon, s);
        out.extend(ds.into_sequences().into_iter().filter(|x| x.len() >= min_len));
        s += 1_000_003;
    }
    out.truncate(count);
    Dataset::new(out, k).unwrap()
}

/// Kolmogorov-Smirnov statistic of `samples` against the CDF `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(n: u64, k: u64, p: f64) -> f64 {
    let ln_choose = |n: u64, i: u64| -> f64 { (1..=i).map(|j| ((n - i + j) as f64 / j as f64).ln()).sum() };
    (k..=n)
        .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum()
}
