//! Statistical and property checks of the Hawkes simulator and the dataset format.

mod common;

use common::{ks_critical_01, ks_statistic};
use proptest::prelude::*;
use seqpretext::data::{intervals, parse_jsonl, simulate_hawkes, to_jsonl_string, Dataset, EventSequence, HawkesParams};

#[test]
fn poisson_mean_count_over_200_seeds() {
    let p = HawkesParams::uniform(vec![2.0], 0.0, 1.0).unwrap();
    let total: usize = (0..200).map(|s| simulate_hawkes(&p, 50.0, s).unwrap().len()).sum();
    let mean = total as f64 / 200.0;
    println!("mean count {mean}");
    assert!((mean - 100.0).abs() <= 10.0);
}

#[test]
fn poisson_interarrivals_are_exponential() {
    let mu = 1.5;
    let p = HawkesParams::uniform(vec![mu], 0.0, 1.0).unwrap();
    // one long window, so dropping the censored gap at the horizon does not
    // bias the sample towards short gaps
    let s = simulate_hawkes(&p, 10_000.0 / mu * 1.1, 7).unwrap();
    let mut gaps = vec![s.first_time().unwrap()];
    gaps.extend(intervals(&s).unwrap());
    gaps.truncate(10_000);
    assert_eq!(gaps.len(), 10_000);
    let d = ks_statistic(&gaps, |x| 1.0 - (-mu * x).exp());
    println!("KS D = {d:.5}, critical {:.5}", ks_critical_01(gaps.len()));
    assert!(d < ks_critical_01(gaps.len()));
}

/// Time-rescaling: the compensator increments of each type between its own
/// events are Exp(1) under the true intensity.
fn rescaled_intervals(p: &HawkesParams, s: &EventSequence) -> Vec<f64> {
    let k = p.num_types();
    let ev = s.events();
    // compensator of type k on [0, t]
    let comp = |kk: usize, t: f64| -> f64 {
        let mut c = p.mu[kk] * t;
        for e in ev.iter().take_while(|e| e.time < t) {
            let (a, b) = (p.alpha[kk][e.mark], p.beta[kk][e.mark]);
            // kernels older than 40 decay times contribute their full mass
            let tail = if b * (t - e.time) > 40.0 { 0.0 } else { (-b * (t - e.time)).exp() };
            c += a / b * (1.0 - tail);
        }
        c
    };
    let mut out = Vec::new();
    for kk in 0..k {
        let mut prev = 0.0;
        for e in ev.iter().filter(|e| e.mark == kk) {
            let c = comp(kk, e.time);
            out.push(c - prev);
            prev = c;
        }
    }
    out
}

#[test]
fn hawkes_time_rescaling_ks() {
    let p = HawkesParams::new(
        vec![0.3, 0.2, 0.4],
        vec![vec![0.5, 0.2, 0.0], vec![0.1, 0.4, 0.1], vec![0.0, 0.3, 0.3]],
        vec![vec![1.0, 2.0, 1.0], vec![1.5, 1.0, 1.0], vec![1.0, 0.8, 2.0]],
    )
    .unwrap();
    // long windows keep the censoring bias of the last interval negligible
    let mut z = Vec::new();
    let mut seed = 100;
    while z.len() < 10_000 {
        let s = simulate_hawkes(&p, 2000.0, seed).unwrap();
        z.extend(rescaled_intervals(&p, &s));
        seed += 1;
    }
    let d = ks_statistic(&z, |x| 1.0 - (-x).exp());
    println!("{} rescaled intervals, KS D = {d:.5}, critical {:.5}", z.len(), ks_critical_01(z.len()));
    assert!(d < ks_critical_01(z.len()));
}

#[test]
fn mean_rate_matches_stationary_rate() {
    let p = common::hawkes(2);
    let rates = p.stationary_rates();
    let horizon = 2000.0;
    let mut counts = [0usize; 2];
    for seed in 0..20 {
        for e in simulate_hawkes(&p, horizon, seed).unwrap().events() {
            counts[e.mark] += 1;
        }
    }
    for k in 0..2 {
        let rate = counts[k] as f64 / (20.0 * horizon);
        println!("type {k}: empirical {rate:.4}, stationary {:.4}", rates[k]);
        assert!((rate / rates[k] - 1.0).abs() < 0.1);
    }
}

#[test]
fn strict_monotonicity_over_10k_seeds() {
    let p = common::hawkes(3);
    for seed in 0..10_000u64 {
        let s = simulate_hawkes(&p, 15.0, seed * 7919).unwrap();
        let t = s.times();
        assert!(t.windows(2).all(|w| w[0] < w[1]), "seed {seed}");
        assert!(t.iter().all(|&x| x > 0.0 && x <= 15.0));
        assert!(s.marks().iter().all(|&m| m < 3));
    }
}

#[test]
fn simulation_is_bit_identical() {
    let p = common::hawkes(4);
    for seed in [0, 1, u64::MAX] {
        let a = simulate_hawkes(&p, 40.0, seed).unwrap();
        let b = simulate_hawkes(&p, 40.0, seed).unwrap();
        let bits = |s: &EventSequence| s.times().iter().map(|t| t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.marks(), b.marks());
    }
}

fn arb_sequence(k: usize) -> impl Strategy<Value = EventSequence> {
    (prop::collection::vec((1e-6f64..5.0, 0..k), 1..30), prop::option::of(0u8..2)).prop_map(move |(gaps, label)| {
        let mut t = 0.0;
        let (times, marks): (Vec<f64>, Vec<usize>) = gaps
            .into_iter()
            .map(|(g, m)| {
                t += g;
                (t, m)
            })
            .unzip();
        EventSequence::from_parts(&times, &marks, k).unwrap().with_label(label)
    })
}

proptest! {
    #[test]
    fn jsonl_roundtrip_is_exact(seqs in prop::collection::vec(arb_sequence(3), 0..8)) {
        let ds = Dataset::new(seqs, 3).unwrap();
        let back = parse_jsonl(&to_jsonl_string(&ds)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn intervals_telescope(s in arb_sequence(2)) {
        let iv = intervals(&s).unwrap();
        prop_assert_eq!(iv.len(), s.len().saturating_sub(1));
        let sum: f64 = iv.iter().sum();
        prop_assert!((sum - s.span()).abs() <= 1e-9 * s.span().max(1.0));
    }

    #[test]
    fn simulated_sequences_are_valid(
        mu in prop::collection::vec(0.0f64..1.0, 1..4),
        a in 0.0f64..0.3,
        b in 0.5f64..3.0,
        seed in any::<u64>(),
    ) {
        let p = HawkesParams::uniform(mu.clone(), a, b).unwrap_or_else(|_| HawkesParams::uniform(mu, 0.0, b).unwrap());
        let s = simulate_hawkes(&p, 20.0, seed).unwrap();
        prop_assert!(s.times().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.marks().iter().all(|&m| m < p.num_types()));
    }
}
