//! Next-event prediction with a softplus intensity read off causal hidden states.
//!
//! For the hidden state `h_j` of event `j` and `t > t_j`,
//! `lambda_k(t) = softplus(alpha_k (t - t_j) / t_j + w_k . h_j + b_k)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, EventTerm, Graph, NodeId, TppInterval};
use crate::data::{Dataset, EventSequence};
use crate::embedding::TokenizedBatch;
use crate::encoder::{forward, AttentionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{init_linear, linear, ParamStore};
use crate::tensor::{Matrix, Real};

pub const TPP_HEAD: &str = "task.tpp";
pub const TPP_ALPHA: &str = "task.tpp.alpha";

/// Grid points of the point-prediction quadrature.
pub const PREDICT_GRID: usize = 1000;

pub fn init_tpp_head<F: Real, R: Rng>(store: &mut ParamStore<F>, d_model: usize, num_types: usize, rng: &mut R) {
    init_linear(store, TPP_HEAD, d_model, num_types, rng);
    store.insert(TPP_ALPHA, Matrix::zeros(1, num_types));
}

/// Plain-number copy of the intensity parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityHead {
    pub alpha: Vec<f64>,
    /// `d_model x K`.
    pub w: Matrix<f64>,
    pub b: Vec<f64>,
}

impl IntensityHead {
    pub fn from_store<F: Real>(store: &ParamStore<F>) -> Self {
        IntensityHead {
            alpha: store.expect(TPP_ALPHA).cast::<f64>().into_data(),
            w: store.expect(&format!("{TPP_HEAD}.w")).cast(),
            b: store.expect(&format!("{TPP_HEAD}.b")).cast::<f64>().into_data(),
        }
    }

    pub fn num_types(&self) -> usize {
        self.b.len()
    }

    /// `w_k . h + b_k` for every type.
    pub fn scores(&self, h: &[f64]) -> Vec<f64> {
        (0..self.num_types())
            .map(|k| self.b[k] + h.iter().enumerate().map(|(i, x)| x * self.w.get(i, k)).sum::<f64>())
            .collect()
    }

    /// Per-type intensities and their sum at time `t` after the event at `t_j`.
    pub fn intensity_at(&self, h: &[f64], t: f64, t_j: f64) -> Result<(Vec<f64>, f64)> {
        if !(t_j > 0.0) {
            return Err(Error::Precondition(format!("intensity needs t_j > 0, got {t_j}")));
        }
        if t < t_j {
            return Err(Error::Precondition(format!("t = {t} precedes t_j = {t_j}")));
        }
        Ok(intensities(&self.scores(h), &self.alpha, t, t_j))
    }
}

fn intensities(scores: &[f64], alpha: &[f64], t: f64, t_j: f64) -> (Vec<f64>, f64) {
    let delta = (t - t_j) / t_j;
    let lam: Vec<f64> = scores
        .iter()
        .zip(alpha)
        .map(|(s, a)| softplus(a * delta + s))
        .collect();
    let total = lam.iter().sum();
    (lam, total)
}

fn check_tpp_sequence(seq: &EventSequence) -> Result<()> {
    if seq.len() < 2 {
        return Err(Error::Precondition("likelihood needs at least two events".into()));
    }
    if !(seq.first_time().expect("non-empty") > 0.0) {
        return Err(Error::Precondition("times must be shifted so that t_1 > 0".into()));
    }
    Ok(())
}

/// Intervals `(t_{i-1}, t_i]` of one sequence whose scores sit at
/// `row_offset + i - 1`.
pub fn tpp_intervals<F: Real, R: Rng>(
    seq: &EventSequence,
    row_offset: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Vec<TppInterval<F>> {
    let ev = seq.events();
    (1..ev.len())
        .map(|i| TppInterval {
            row: row_offset + i - 1,
            t_prev: F::lit(ev[i - 1].time),
            t_next: F::lit(ev[i].time),
            mark: ev[i].mark,
            samples: (0..mc_samples).map(|_| F::lit(rng.random::<f64>())).collect(),
            weight: F::one(),
        })
        .collect()
}

/// Summed NLL of a batch under causal attention, with the number of event terms.
pub fn tpp_batch_loss<F: Real, R: Rng>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    seqs: &[EventSequence],
    mc_samples: usize,
    term: EventTerm,
    rng: &mut R,
) -> Result<(NodeId, usize)> {
    for s in seqs {
        check_tpp_sequence(s)?;
    }
    let batch = TokenizedBatch::from_sequences(seqs)?;
    let states = forward(g, store, cfg, &batch, AttentionMode::Causal)?;
    let scores = linear(g, store, TPP_HEAD, states.hidden);
    let alpha = store.leaf(g, TPP_ALPHA);
    let mut intervals = Vec::new();
    for (b, s) in seqs.iter().enumerate() {
        intervals.extend(tpp_intervals(s, batch.index(b, 0), mc_samples, rng));
    }
    let n = intervals.len();
    Ok((g.tpp_nll(scores, alpha, &intervals, term), n))
}

/// Negative log-likelihood of one sequence (summed over its event terms).
pub fn tpp_nll<F: Real, R: Rng>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    seq: &EventSequence,
    mc_samples: usize,
    term: EventTerm,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let (l, _) = tpp_batch_loss(&mut g, store, cfg, std::slice::from_ref(seq), mc_samples, term, rng)?;
    Ok(g.value(l).item().as_f64())
}

/// Normalized truncated expectation of the next time on `(t_j, t_j + horizon]`
/// and the most intense type there.
pub fn predict_from_scores(scores: &[f64], alpha: &[f64], t_j: f64, horizon: f64, points: usize) -> Result<(f64, usize)> {
    if !(horizon > 0.0) || points < 2 {
        return Err(Error::Precondition(format!("degenerate prediction grid (horizon {horizon})")));
    }
    if !(t_j > 0.0) {
        return Err(Error::Precondition(format!("intensity needs t_j > 0, got {t_j}")));
    }
    let step = horizon / points as f64;
    let mut cum = 0.0;
    let mut prev_lam = intensities(scores, alpha, t_j, t_j).1;
    let mut prev_f = prev_lam;
    let mut prev_tf = t_j * prev_f;
    let (mut mass, mut first) = (0.0, 0.0);
    for i in 1..=points {
        let t = t_j + step * i as f64;
        let lam = intensities(scores, alpha, t, t_j).1;
        cum += 0.5 * step * (lam + prev_lam);
        let f = lam * (-cum).exp();
        let tf = t * f;
        mass += 0.5 * step * (f + prev_f);
        first += 0.5 * step * (tf + prev_tf);
        prev_lam = lam;
        prev_f = f;
        prev_tf = tf;
    }
    let t_hat = if mass > 0.0 { first / mass } else { t_j + 0.5 * horizon };
    let (lam, _) = intensities(scores, alpha, t_hat, t_j);
    let m_hat = argmax(&lam);
    Ok((t_hat, m_hat))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Causal hidden states of one sequence as plain rows (events only).
fn hidden_rows<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig, seqs: &[EventSequence]) -> Result<(Matrix<f64>, TokenizedBatch)> {
    let batch = TokenizedBatch::from_sequences(seqs)?;
    let mut g = Graph::new();
    let states = forward(&mut g, store, cfg, &batch, AttentionMode::Causal)?;
    Ok((g.value(states.hidden).cast(), batch))
}

/// Prediction of the event following `history`.
pub fn predict_next<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig, history: &EventSequence, horizon: f64) -> Result<(f64, usize)> {
    let Some(t_j) = history.last_time() else {
        return Err(Error::Precondition("prediction needs at least one event".into()));
    };
    let head = IntensityHead::from_store(store);
    let (hidden, batch) = hidden_rows(store, cfg, std::slice::from_ref(history))?;
    let h = hidden.row(batch.index(0, history.len() - 1));
    predict_from_scores(&head.scores(h), &head.alpha, t_j, horizon, PREDICT_GRID)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TppMetrics {
    /// Nats per event term.
    pub nll: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub events: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TppEvalOptions {
    pub mc_samples: usize,
    pub horizon: f64,
    pub term: EventTerm,
    /// Seed of the Monte-Carlo draws.
    pub seed: u64,
    /// Also compute point predictions (RMSE and accuracy).
    pub predictions: bool,
}

/// Dataset metrics with a fixed Monte-Carlo seed. Sequences shorter than
/// two events are skipped.
pub fn evaluate_tpp<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig, data: &Dataset, opts: &TppEvalOptions) -> Result<TppMetrics> {
    let TppEvalOptions {
        mc_samples,
        horizon,
        term,
        seed,
        predictions: with_predictions,
    } = *opts;
    let seqs: Vec<&EventSequence> = data.sequences().iter().filter(|s| s.len() >= 2).collect();
    if seqs.is_empty() {
        return Err(Error::EmptyBatch("no sequence with two or more events".into()));
    }
    let head = IntensityHead::from_store(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut nll, mut events, mut sq, mut hits) = (0.0, 0usize, 0.0, 0usize);
    for chunk in seqs.chunks(16) {
        let chunk: Vec<EventSequence> = chunk.iter().map(|s| (*s).clone()).collect();
        let mut g = Graph::new();
        let (l, n) = tpp_batch_loss(&mut g, store, cfg, &chunk, mc_samples, term, &mut rng)?;
        nll += g.value(l).item().as_f64();
        events += n;
        if !with_predictions {
            continue;
        }
        let (hidden, batch) = hidden_rows(store, cfg, &chunk)?;
        for (b, s) in chunk.iter().enumerate() {
            let ev = s.events();
            for i in 1..ev.len() {
                let h = hidden.row(batch.index(b, i - 1));
                let (t_hat, m_hat) = predict_from_scores(&head.scores(h), &head.alpha, ev[i - 1].time, horizon, PREDICT_GRID)?;
                sq += (t_hat - ev[i].time).powi(2);
                hits += usize::from(m_hat == ev[i].mark);
            }
        }
    }
    let denom = events.max(1) as f64;
    Ok(TppMetrics {
        nll: nll / denom,
        rmse: if with_predictions { (sq / denom).sqrt() } else { f64::NAN },
        accuracy: if with_predictions { hits as f64 / denom } else { f64::NAN },
        events,
    })
}
