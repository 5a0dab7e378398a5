//! Masking, multi-view contrastive and misalignment properties.

mod common;

use std::collections::BTreeSet;

use common::{binomial_upper_tail, hawkes_data_min_len, rng, seq};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use seqpretext::alignment::{build_alignment_batch, misalign_crossover, misalign_shuffle, misalign_swap, Misalignment};
use seqpretext::autodiff::Graph;
use seqpretext::contrastive::{nt_xent_loss, nt_xent_node, sample_noise, Similarity, ViewGroup};
use seqpretext::data::EventSequence;
use seqpretext::masking::{events_in_windows, reconstruction_loss, sample_mask_windows, sample_random_mask};
use seqpretext::tensor::Matrix;

// ---- masking -----------------------------------------------------------

fn union_length(mut w: Vec<(f64, f64)>) -> f64 {
    w.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (s, e) in w {
        cur = match cur {
            Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                Some((s, e))
            }
            None => Some((s, e)),
        };
    }
    total + cur.map_or(0.0, |(s, e)| e - s)
}

#[test]
fn windows_cover_ratio_of_span_and_membership_is_exact() {
    let data = hawkes_data_min_len(3, 1000, 40.0, 2, 3);
    let mut r = rng(1);
    for (i, s) in data.sequences().iter().enumerate() {
        let ratio = [0.1, 0.3, 0.5, 0.9][i % 4];
        let wd = ratio * s.span() / [1.0, 2.0, 3.0, 4.5][i % 4];
        let plan = sample_mask_windows(s, ratio, wd, &mut r).unwrap();
        let covered = union_length(plan.windows.iter().map(|w| (w.start, w.end())).collect());
        assert!((covered - ratio * s.span()).abs() <= 1e-9, "seq {i}: {covered} vs {}", ratio * s.span());
        for w in &plan.windows {
            assert!(w.start >= s.first_time().unwrap() && w.end() <= s.last_time().unwrap() + 1e-12);
        }
        let brute: BTreeSet<usize> = (0..s.len())
            .filter(|&j| {
                let t = s.events()[j].time;
                plan.windows.iter().any(|w| w.start <= t && t < w.start + w.duration)
            })
            .collect();
        assert_eq!(plan.masked, brute, "seq {i}");
        assert_eq!(events_in_windows(s, &plan.windows), brute);
    }
}

/// Dense phase of 100 events on [1, 51), sparse phase of 10 on [51, 101).
fn two_phase() -> EventSequence {
    let mut times: Vec<f64> = (0..100).map(|i| 1.0 + 0.5 * i as f64).collect();
    times.extend((0..10).map(|i| 51.0 + 5.0 * i as f64 + 2.5));
    seq(&times, &vec![0; times.len()], 1)
}

#[test]
fn dense_phase_receives_more_masked_events() {
    let s = two_phase();
    let dense = |i: usize| s.events()[i].time < 51.0;
    let mut r = rng(8);
    // One masked event drawn per independent mask: under a mask that ignores
    // density, it would fall in either half of the time axis equally often.
    let draws = 200u64;
    let (mut hits, mut masked_dense, mut masked_total) = (0u64, 0usize, 0usize);
    for _ in 0..draws {
        let plan = sample_mask_windows(&s, 0.3, 3.0, &mut r).unwrap();
        let m: Vec<usize> = plan.masked.iter().copied().collect();
        masked_dense += m.iter().filter(|&&i| dense(i)).count();
        masked_total += m.len();
        if dense(*m.choose(&mut r).unwrap()) {
            hits += 1;
        }
    }
    let p = binomial_upper_tail(draws, hits, 0.5);
    println!("{hits}/{draws} picks in the dense half, one-sided p = {p:.3e}; dense share {:.3}", masked_dense as f64 / masked_total as f64);
    assert!(p < 0.01);
    // per event, both phases are masked at a similar rate
    assert!(masked_dense as f64 / masked_total as f64 > 0.8);
}

#[test]
fn random_mask_is_uniform_over_indices() {
    let s = seq(&(1..=10).map(f64::from).collect::<Vec<_>>(), &[0; 10], 1);
    let mut counts = [0usize; 10];
    let mut r = rng(2);
    for _ in 0..10_000 {
        let plan = sample_random_mask(&s, 0.3, &mut r).unwrap();
        assert_eq!(plan.masked.len(), 3);
        for i in plan.masked {
            counts[i] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.3).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn reconstruction_loss_is_permutation_invariant() {
    let mut r = rng(4);
    let (n, dt, dm) = (7, 4, 3);
    let mut mat = |c: usize| Matrix::from_vec(n, c, (0..n * c).map(|_| r.random_range(-1.0..1.0)).collect());
    let (a, b, c, d) = (mat(dt), mat(dm), mat(dt), mat(dm));
    let w: Vec<f64> = (0..n).map(|i| 0.1 + i as f64 * 0.05).collect();
    let eval = |perm: &[usize]| {
        let pick = |m: &Matrix<f64>| {
            let mut out = Matrix::zeros(n, m.cols());
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(i).copy_from_slice(m.row(p));
            }
            out
        };
        let mut g = Graph::new();
        let ids: Vec<_> = [&a, &b, &c, &d].iter().map(|m| g.constant(pick(m))).collect();
        let wp: Vec<f64> = perm.iter().map(|&p| w[p]).collect();
        let l = reconstruction_loss(&mut g, ids[0], ids[1], ids[2], ids[3], &wp).unwrap();
        g.value(l).item()
    };
    let base = eval(&(0..n).collect::<Vec<_>>());
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..20 {
        perm.shuffle(&mut r);
        assert!((eval(&perm) - base).abs() < 1e-12);
    }
}

// ---- contrastive -------------------------------------------------------

fn random_groups(b: usize, d: usize, seed: u64) -> Vec<ViewGroup> {
    let mut r = rng(seed);
    let mut v = |_: usize| (0..d).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..b)
        .map(|i| ViewGroup {
            original: v(i),
            subsequence: v(i),
            masked: v(i),
            noisy: v(i),
        })
        .collect()
}

/// Direct double loop over the printed formula.
fn brute_nt_xent(groups: &[ViewGroup], eta: f64) -> f64 {
    let all: Vec<&[f64]> = groups.iter().flat_map(|g| g.members()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for g in groups {
        let s = g.members();
        let mut l = 0.0;
        let mut pairs = 0;
        for (i, z) in s.iter().enumerate() {
            for (j, zp) in s.iter().enumerate() {
                if i == j {
                    continue;
                }
                let denom: f64 = all
                    .iter()
                    .filter(|w| !std::ptr::eq(w.as_ptr(), z.as_ptr()))
                    .map(|w| (dot(z, w) / eta).exp())
                    .sum();
                l += ((dot(z, zp) / eta).exp() / denom).ln();
                pairs += 1;
            }
        }
        total += -l / pairs as f64;
    }
    total / groups.len() as f64
}

#[test]
fn nt_xent_matches_brute_force() {
    for (b, d, seed) in [(2, 4, 1), (2, 4, 2), (3, 5, 3), (5, 8, 4)] {
        let groups = random_groups(b, d, seed);
        let (fast, pairs) = nt_xent_loss(&groups, 0.5, Similarity::Dot).unwrap();
        let slow = brute_nt_xent(&groups, 0.5);
        assert!((fast - slow).abs() < 1e-6, "B={b}: {fast} vs {slow}");
        assert_eq!(pairs, 12 * b);
        assert!(fast >= 0.0);
    }
}

#[test]
fn nt_xent_all_equal_is_ln7() {
    let z = vec![0.3, -0.2, 0.7];
    let g = ViewGroup {
        original: z.clone(),
        subsequence: z.clone(),
        masked: z.clone(),
        noisy: z,
    };
    let (l, _) = nt_xent_loss(&[g.clone(), g], 0.5, Similarity::Dot).unwrap();
    assert!((l - 7f64.ln()).abs() < 1e-9);
}

#[test]
fn nt_xent_is_invariant_to_group_order() {
    let mut groups = random_groups(4, 6, 9);
    let (a, _) = nt_xent_loss(&groups, 0.5, Similarity::Dot).unwrap();
    groups.reverse();
    groups.swap(0, 2);
    let (b, _) = nt_xent_loss(&groups, 0.5, Similarity::Dot).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn nt_xent_stabilization_does_not_change_the_value() {
    // moderate similarities, where the unstabilized formula is exact enough
    let groups = random_groups(3, 4, 12);
    let (fast, _) = nt_xent_loss(&groups, 0.5, Similarity::Dot).unwrap();
    assert!((fast - brute_nt_xent(&groups, 0.5)).abs() < 1e-9);
    // large similarities overflow the unstabilized sum but not the loss
    let mut big = groups.clone();
    for g in &mut big {
        for v in [&mut g.original, &mut g.subsequence, &mut g.masked, &mut g.noisy] {
            v.iter_mut().for_each(|x| *x *= 40.0);
        }
    }
    let (l, _) = nt_xent_loss(&big, 0.5, Similarity::Dot).unwrap();
    assert!(l.is_finite());
}

#[test]
fn graph_nt_xent_agrees_with_plain_version() {
    for sim in [Similarity::Dot, Similarity::Cosine] {
        let groups = random_groups(3, 5, 21);
        let (plain, _) = nt_xent_loss(&groups, 0.7, sim).unwrap();
        let rows: Vec<f64> = groups.iter().flat_map(|g| g.members().concat()).collect();
        let mut g = Graph::new();
        let z = g.variable(Matrix::from_vec(12, 5, rows));
        let l = nt_xent_node(&mut g, z, 0.7, sim).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-12);
    }
}

#[test]
fn embedding_noise_is_centred_with_uniform_scale() {
    // sigma ~ U[0, 1]: E[noise] = 0 and E[noise^2] = E[sigma^2] = 1/3
    let (n, d) = (10_000, 4);
    let mut r = rng(13);
    let mut sum = vec![0.0; d];
    let mut sq_norms = Vec::with_capacity(n);
    for _ in 0..n {
        let (_, e) = sample_noise(d, &mut r);
        for (s, x) in sum.iter_mut().zip(&e) {
            *s += x;
        }
        sq_norms.push(e.iter().map(|x| x * x).sum::<f64>());
    }
    let bound = 3.0 * (1.0 / (3.0 * n as f64)).sqrt();
    for s in &sum {
        assert!((s / n as f64).abs() < bound, "mean {}", s / n as f64);
    }
    // ||n||^2 = sigma^2 chi^2_d: mean d/3, variance E[s^4] (2d + d^2) - (d/3)^2
    let mean = sq_norms.iter().sum::<f64>() / n as f64;
    let var_theory = (2.0 * d as f64 + (d * d) as f64) / 5.0 - (d as f64 / 3.0).powi(2);
    let se = (var_theory / n as f64).sqrt();
    assert!((mean - d as f64 / 3.0).abs() < 3.0 * se, "mean {mean}");
    // the norm distribution is the sigma mixture of chi distributions:
    // P(||n||^2 <= x) = E_sigma[P(chi^2_4 <= x / sigma^2)], chi^2_4 cdf = 1 - e^{-y/2}(1 + y/2)
    let cdf = |x: f64| {
        let m = 2000;
        (0..m)
            .map(|i| {
                let s = (i as f64 + 0.5) / m as f64;
                let y = x / (s * s);
                1.0 - (-y / 2.0).exp() * (1.0 + y / 2.0)
            })
            .sum::<f64>()
            / m as f64
    };
    let ks = common::ks_statistic(&sq_norms, cdf);
    assert!(ks < common::ks_critical_01(n), "KS {ks}");
}

// ---- alignment ---------------------------------------------------------

fn random_sequence<R: Rng>(r: &mut R, k: usize) -> EventSequence {
    let n = r.random_range(2..25);
    let mut t = r.random_range(0.0..5.0);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        t += r.random_range(1e-3..3.0);
        times.push(t);
    }
    let marks: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    seq(&times, &marks, k)
}

fn valid(s: &EventSequence, k: usize) -> bool {
    s.times().windows(2).all(|w| w[0] < w[1]) && s.marks().iter().all(|&m| m < k)
}

#[test]
fn ten_thousand_misaligned_pairs_stay_valid() {
    let k = 5;
    let mut r = rng(31);
    for _ in 0..10_000 {
        let a = random_sequence(&mut r, k);
        let b = random_sequence(&mut r, k);
        let sh = misalign_shuffle(&a, &mut r).unwrap();
        assert!(valid(&sh, k));
        assert_eq!(sh.times(), a.times());
        let mut ms = sh.marks();
        let mut ma = a.marks();
        ms.sort();
        ma.sort();
        assert_eq!(ms, ma);

        let (sa, sb) = misalign_swap(&a, &b).unwrap();
        let n = a.len().min(b.len());
        assert!(valid(&sa, k) && valid(&sb, k));
        assert_eq!(sa.times(), a.times()[..n].to_vec());
        assert_eq!(sb.times(), b.times()[..n].to_vec());
        assert_eq!(sa.marks(), b.marks()[..n].to_vec());

        let (ca, cb) = misalign_crossover(&a, &b).unwrap();
        assert!(valid(&ca, k) && valid(&cb, k));
        assert_eq!(ca.events()[..a.len() / 2], a.events()[..a.len() / 2]);
        assert_eq!(cb.events()[..b.len() / 2], b.events()[..b.len() / 2]);
        assert_eq!(ca.len(), a.len() / 2 + (b.len() - b.len() / 2));
    }
}

#[test]
fn crossover_reproduces_worked_example() {
    let a = seq(&[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1], 4);
    let b = seq(&[10.0, 20.0, 30.0, 40.0], &[2, 2, 3, 3], 4);
    let (x, _) = misalign_crossover(&a, &b).unwrap();
    assert_eq!(x.times(), vec![1.0, 2.0, 12.0, 22.0]);
    assert_eq!(x.marks(), vec![0, 0, 3, 3]);
}

#[test]
fn negative_methods_are_uniform() {
    let data = hawkes_data_min_len(3, 9, 30.0, 4, 5);
    let mut r = rng(41);
    let mut counts = std::collections::BTreeMap::new();
    let mut negatives = 0;
    while negatives < 9000 {
        for ex in build_alignment_batch(data.sequences(), &Misalignment::CORRUPTIONS, &mut r).unwrap() {
            if ex.label == 0 {
                *counts.entry(format!("{:?}", ex.method)).or_insert(0usize) += 1;
                negatives += 1;
            }
        }
    }
    assert_eq!(counts.len(), 3);
    for (m, c) in &counts {
        let f = *c as f64 / negatives as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.02, "{m}: {f}");
    }
}
