//! Masked reconstruction: density-preserving window masking, uniform random
//! masking, the reconstruction decoders and the reconstruction loss.
//!
//! Density-preserving masking hides every event inside a set of disjoint
//! constant-duration time windows, so bursts lose proportionally more events
//! than quiet stretches.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::EventSequence;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::params::{init_mlp, mlp, ParamStore};
use crate::tensor::Real;

pub const REC_TIME_HEAD: &str = "pretext.rec_time";
pub const REC_TYPE_HEAD: &str = "pretext.rec_type";

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Density,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Fraction of `t_N - t_1` covered by windows (density) or of events
    /// masked (random).
    pub ratio: f64,
    /// Absolute window duration; `None` uses a tenth of each sequence's span.
    pub window_duration: Option<f64>,
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio: 0.3,
            window_duration: None,
            strategy: MaskStrategy::Density,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("mask ratio {} outside (0, 1)", self.ratio)));
        }
        if let Some(d) = self.window_duration {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig("mask window duration must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A half-open time window `[start, start + duration)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub duration: f64,
}

impl Window {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end()
    }

    fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub windows: Vec<Window>,
    pub masked: BTreeSet<usize>,
}

/// Indices of events falling inside any window.
pub fn events_in_windows(seq: &EventSequence, windows: &[Window]) -> BTreeSet<usize> {
    seq.events()
        .iter()
        .enumerate()
        .filter(|(_, e)| windows.iter().any(|w| w.contains(e.time)))
        .map(|(i, _)| i)
        .collect()
}

fn count_in(seq: &EventSequence, w: &Window) -> usize {
    seq.events().iter().filter(|e| w.contains(e.time)).count()
}

/// Disjoint windows of `window_duration` (the last one trimmed) whose total
/// length is exactly `ratio * (t_N - t_1)`.
pub fn sample_mask_windows<R: Rng>(seq: &EventSequence, ratio: f64, window_duration: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Precondition(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if seq.len() < 2 {
        return Err(Error::Precondition("masking needs at least two events".into()));
    }
    let t1 = seq.first_time().expect("non-empty");
    let tn = seq.last_time().expect("non-empty");
    let total = ratio * (tn - t1);
    if !(window_duration > 0.0 && window_duration <= total * (1.0 + 1e-12)) {
        return Err(Error::Precondition(format!(
            "window duration {window_duration} must lie in (0, {total}]"
        )));
    }
    let count = ((total / window_duration) - 1e-9).ceil().max(1.0) as usize;
    let mut durations = vec![window_duration; count];
    durations[count - 1] = total - window_duration * (count - 1) as f64;

    let windows = place_disjoint(seq, t1, tn, &durations, rng).unwrap_or_else(|| evenly_spaced(t1, tn, &durations));
    let masked = events_in_windows(seq, &windows);
    Ok(MaskPlan { windows, masked })
}

fn place_disjoint<R: Rng>(seq: &EventSequence, t1: f64, tn: f64, durations: &[f64], rng: &mut R) -> Option<Vec<Window>> {
    let mut placed: Vec<Window> = Vec::with_capacity(durations.len());
    for &d in durations {
        let room = tn - t1 - d;
        let mut empty_fallback = None;
        let mut chosen = None;
        for _ in 0..MAX_ATTEMPTS {
            let w = Window {
                start: t1 + rng.random::<f64>() * room.max(0.0),
                duration: d,
            };
            if placed.iter().any(|p| p.overlaps(&w)) {
                continue;
            }
            if count_in(seq, &w) > 0 {
                chosen = Some(w);
                break;
            }
            empty_fallback.get_or_insert(w);
        }
        placed.push(chosen.or(empty_fallback)?);
    }
    placed.sort_by(|a, b| a.start.total_cmp(&b.start));
    Some(placed)
}

fn evenly_spaced(t1: f64, tn: f64, durations: &[f64]) -> Vec<Window> {
    let total: f64 = durations.iter().sum();
    let gap = ((tn - t1) - total).max(0.0) / (durations.len() + 1) as f64;
    let mut start = t1 + gap;
    durations
        .iter()
        .map(|&d| {
            let w = Window { start, duration: d };
            start += d + gap;
            w
        })
        .collect()
}

/// `floor(ratio * N)` distinct indices chosen uniformly.
pub fn sample_random_mask<R: Rng>(seq: &EventSequence, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Precondition(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if seq.len() < 2 {
        return Err(Error::Precondition("masking needs at least two events".into()));
    }
    let n = seq.len();
    let amount = (ratio * n as f64 + 1e-9).floor() as usize;
    let masked = index::sample(rng, n, amount).into_iter().collect();
    Ok(MaskPlan {
        windows: Vec::new(),
        masked,
    })
}

/// Applies the configured strategy to one sequence.
pub fn sample_mask<R: Rng>(seq: &EventSequence, cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan> {
    match cfg.strategy {
        MaskStrategy::Random => sample_random_mask(seq, cfg.ratio, rng),
        MaskStrategy::Density => {
            let total = cfg.ratio * seq.span();
            let wd = cfg.window_duration.unwrap_or(0.1 * seq.span()).min(total);
            sample_mask_windows(seq, cfg.ratio, wd, rng)
        }
    }
}

pub fn init_reconstruction_heads<F: Real, R: Rng>(store: &mut ParamStore<F>, d_model: usize, emb: &EmbeddingConfig, rng: &mut R) {
    init_mlp(store, REC_TIME_HEAD, d_model, d_model, emb.d_time, rng);
    init_mlp(store, REC_TYPE_HEAD, d_model, d_model, emb.d_type, rng);
}

/// Decoded (time, type) embeddings for hidden-state rows.
pub fn decode<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, hidden_rows: NodeId) -> (NodeId, NodeId) {
    let t = mlp(g, store, REC_TIME_HEAD, hidden_rows);
    let m = mlp(g, store, REC_TYPE_HEAD, hidden_rows);
    (t, m)
}

/// `sum_i w_i (||e^t_i - dec^t_i||^2 + ||e^m_i - dec^m_i||^2)`; targets are
/// detached. With one sequence and `w_i = 1 / |M|` this is the mean squared
/// reconstruction error over masked events.
pub fn reconstruction_loss<F: Real>(
    g: &mut Graph<F>,
    decoded_time: NodeId,
    decoded_type: NodeId,
    target_time: NodeId,
    target_type: NodeId,
    row_weights: &[F],
) -> Result<NodeId> {
    if row_weights.is_empty() {
        return Err(Error::Precondition("reconstruction loss needs a masked event".into()));
    }
    for (a, b) in [(decoded_time, target_time), (decoded_type, target_type)] {
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::Shape(format!(
                "decoded {:?} vs target {:?}",
                g.value(a).shape(),
                g.value(b).shape()
            )));
        }
        if g.value(a).rows() != row_weights.len() {
            return Err(Error::Shape("one weight per masked row".into()));
        }
    }
    let tt = g.detach(target_time);
    let tm = g.detach(target_type);
    let dt = g.sub(decoded_time, tt);
    let dt2 = g.mul(dt, dt);
    let dm = g.sub(decoded_type, tm);
    let dm2 = g.mul(dm, dm);
    let lt = g.weighted_sum(dt2, row_weights);
    let lm = g.weighted_sum(dm2, row_weights);
    Ok(g.add(lt, lm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_seq(n: usize) -> EventSequence {
        let times: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        EventSequence::from_parts(&times, &vec![0; n], 1).unwrap()
    }

    #[test]
    fn explicit_window_membership() {
        let seq = unit_seq(10);
        let w = Window {
            start: 4.0,
            duration: 2.7,
        };
        let m = events_in_windows(&seq, &[w]);
        // brute force
        let expect: BTreeSet<usize> = (0..10).filter(|&i| (4.0..6.7).contains(&((i + 1) as f64))).collect();
        assert_eq!(m, expect);
        assert_eq!(m, BTreeSet::from([3, 4, 5]));
    }

    #[test]
    fn windows_cover_exact_ratio() {
        let seq = unit_seq(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let plan = sample_mask_windows(&seq, 0.3, 0.9, &mut rng).unwrap();
            assert_eq!(plan.windows.len(), 3);
            let covered: f64 = plan.windows.iter().map(|w| w.duration).sum();
            assert!((covered / 9.0 - 0.3).abs() < 1e-9);
            for (i, a) in plan.windows.iter().enumerate() {
                assert!(a.start >= 1.0 && a.end() <= 10.0 + 1e-12);
                for b in &plan.windows[i + 1..] {
                    assert!(!a.overlaps(b));
                }
            }
            assert_eq!(plan.masked, events_in_windows(&seq, &plan.windows));
        }
    }

    #[test]
    fn trimmed_last_window() {
        let seq = unit_seq(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = sample_mask_windows(&seq, 0.35, 1.0, &mut rng).unwrap();
        assert_eq!(plan.windows.len(), 4);
        let mut d: Vec<f64> = plan.windows.iter().map(|w| w.duration).collect();
        d.sort_by(f64::total_cmp);
        assert!((d[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_ratio_masks_little() {
        let seq = unit_seq(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = sample_mask_windows(&seq, 1e-9, 1e-9, &mut rng).unwrap();
        assert!(plan.masked.len() <= 1);
    }

    #[test]
    fn precondition_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = unit_seq(10);
        assert!(sample_mask_windows(&seq, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_mask_windows(&seq, 0.3, 5.0, &mut rng).is_err());
        assert!(sample_mask_windows(&unit_seq(1), 0.3, 0.1, &mut rng).is_err());
        assert!(sample_random_mask(&unit_seq(1), 0.5, &mut rng).is_err());
    }

    #[test]
    fn random_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_random_mask(&unit_seq(10), 0.5, &mut rng).unwrap().masked.len(), 5);
        assert!(sample_random_mask(&unit_seq(3), 0.2, &mut rng).unwrap().masked.is_empty());
    }

    #[test]
    fn reconstruction_unit_deviation() {
        let mut g = Graph::<f64>::new();
        let dt = g.variable(Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]));
        let dm = g.variable(Matrix::from_vec(1, 2, vec![0.5, 0.5]));
        let tt = g.constant(Matrix::zeros(1, 3));
        let tm = g.constant(Matrix::from_vec(1, 2, vec![0.5, 0.5]));
        let l = reconstruction_loss(&mut g, dt, dm, tt, tm, &[1.0]).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l0 = reconstruction_loss(&mut g, tt, tm, tt, tm, &[1.0]).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        assert!(reconstruction_loss(&mut g, dt, dm, tt, tm, &[]).is_err());
    }

    #[test]
    fn reconstruction_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = 4;
        let rand_m = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        };
        let (a, b, c, d) = (
            rand_m(rows, 3, &mut rng),
            rand_m(rows, 2, &mut rng),
            rand_m(rows, 3, &mut rng),
            rand_m(rows, 2, &mut rng),
        );
        let mut oracle = 0.0;
        for i in 0..rows {
            for j in 0..3 {
                oracle += (a.get(i, j) - c.get(i, j)).powi(2);
            }
            for j in 0..2 {
                oracle += (b.get(i, j) - d.get(i, j)).powi(2);
            }
        }
        oracle /= rows as f64;
        let mut g = Graph::<f64>::new();
        let (na, nb, nc, nd) = (g.variable(a), g.variable(b), g.variable(c), g.variable(d));
        let w = vec![1.0 / rows as f64; rows];
        let l = reconstruction_loss(&mut g, na, nb, nc, nd, &w).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-6);
        // targets are detached
        let grads = g.backward(l).unwrap();
        assert!(grads.get(nc).is_none());
        assert!(grads.get(na).is_some());
    }
}
