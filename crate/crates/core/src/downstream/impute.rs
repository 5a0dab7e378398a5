//! Missing-event imputation: uniformly chosen events are replaced by MASK
//! and two heads recover each one's type and absolute arrival time.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EventSequence;
use crate::embedding::{token_row, TokenizedBatch};
use crate::encoder::{forward, AttentionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::sample_random_mask;
use crate::params::{init_mlp, mlp, ParamStore};
use crate::tensor::{Matrix, Real};
use crate::autodiff::{Graph, NodeId};

use super::tpp::argmax;

pub const IMPUTE_TYPE_HEAD: &str = "task.impute_type";
pub const IMPUTE_TIME_HEAD: &str = "task.impute_time";

pub fn init_impute_heads<F: Real, R: Rng>(store: &mut ParamStore<F>, d_model: usize, num_types: usize, rng: &mut R) {
    init_mlp(store, IMPUTE_TYPE_HEAD, d_model, d_model, num_types, rng);
    init_mlp(store, IMPUTE_TIME_HEAD, d_model, d_model, 1, rng);
}

/// `floor(ratio * N)` uniformly chosen positions; empty selections are an error.
pub fn select_missing<R: Rng>(seq: &EventSequence, ratio: f64, rng: &mut R) -> Result<BTreeSet<usize>> {
    let plan = sample_random_mask(seq, ratio, rng)?;
    if plan.masked.is_empty() {
        return Err(Error::Precondition(format!(
            "missing ratio {ratio} hides no event of a {}-event sequence",
            seq.len()
        )));
    }
    Ok(plan.masked)
}

/// Graph outputs for the masked rows of a batch: type logits (`M x K`),
/// normalized time predictions (`M x 1`) and the hidden events in row order.
pub struct ImputeOutputs {
    pub type_logits: NodeId,
    pub time: NodeId,
    pub targets: Vec<(f64, usize)>,
}

pub fn impute_forward<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    seqs: &[EventSequence],
    missing: &[BTreeSet<usize>],
) -> Result<ImputeOutputs> {
    if seqs.len() != missing.len() {
        return Err(Error::Shape("one missing set per sequence".into()));
    }
    let rows = seqs
        .iter()
        .zip(missing)
        .map(|(s, m)| token_row(s, m))
        .collect::<Result<Vec<_>>>()?;
    let batch = TokenizedBatch::from_rows(rows)?;
    let masked = batch.masked_rows();
    if masked.is_empty() {
        return Err(Error::Precondition("nothing to impute".into()));
    }
    let states = forward(g, store, cfg, &batch, AttentionMode::Bidirectional)?;
    let h = g.gather_rows(states.hidden, masked.iter().map(|m| m.0).collect());
    let type_logits = mlp(g, store, IMPUTE_TYPE_HEAD, h);
    let time = mlp(g, store, IMPUTE_TIME_HEAD, h);
    Ok(ImputeOutputs {
        type_logits,
        time,
        targets: masked.iter().map(|&(_, t, m)| (t, m)).collect(),
    })
}

/// Cross-entropy on types plus squared error on times divided by `time_scale`.
pub fn impute_batch_loss<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    seqs: &[EventSequence],
    missing: &[BTreeSet<usize>],
    time_scale: f64,
) -> Result<NodeId> {
    let out = impute_forward(g, store, cfg, seqs, missing)?;
    let marks: Vec<usize> = out.targets.iter().map(|t| t.1).collect();
    let ce = g.cross_entropy(out.type_logits, &marks)?;
    let n = out.targets.len();
    let target = Matrix::from_vec(n, 1, out.targets.iter().map(|t| F::lit(t.0 / time_scale)).collect());
    let target = g.constant(target);
    let diff = g.sub(out.time, target);
    let sq = g.mul(diff, diff);
    let mse = g.weighted_sum(sq, &vec![F::lit(1.0 / n as f64); n]);
    Ok(g.add(ce, mse))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeResult {
    pub indices: Vec<usize>,
    pub true_types: Vec<usize>,
    pub true_times: Vec<f64>,
    pub type_predictions: Vec<usize>,
    pub time_predictions: Vec<f64>,
}

impl ImputeResult {
    pub fn metrics(&self) -> ImputeMetrics {
        impute_metrics(&self.type_predictions, &self.true_types, &self.time_predictions, &self.true_times)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeMetrics {
    pub accuracy: f64,
    pub rmse: f64,
    pub count: usize,
}

pub fn impute_metrics(pred_types: &[usize], true_types: &[usize], pred_times: &[f64], true_times: &[f64]) -> ImputeMetrics {
    let n = true_types.len();
    let hits = pred_types.iter().zip(true_types).filter(|(a, b)| a == b).count();
    let sq: f64 = pred_times.iter().zip(true_times).map(|(a, b)| (a - b).powi(2)).sum();
    ImputeMetrics {
        accuracy: hits as f64 / n.max(1) as f64,
        rmse: (sq / n.max(1) as f64).sqrt(),
        count: n,
    }
}

/// Predictions for a batch with given missing sets.
pub fn impute_with<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    seqs: &[EventSequence],
    missing: &[BTreeSet<usize>],
    time_scale: f64,
) -> Result<ImputeResult> {
    let mut g = Graph::new();
    let out = impute_forward(&mut g, store, cfg, seqs, missing)?;
    let logits: Matrix<f64> = g.value(out.type_logits).cast();
    let times: Matrix<f64> = g.value(out.time).cast();
    Ok(ImputeResult {
        indices: missing.iter().flat_map(|m| m.iter().copied()).collect(),
        true_types: out.targets.iter().map(|t| t.1).collect(),
        true_times: out.targets.iter().map(|t| t.0).collect(),
        type_predictions: (0..logits.rows()).map(|r| argmax(logits.row(r))).collect(),
        time_predictions: times.data().iter().map(|x| x * time_scale).collect(),
    })
}

/// Hides `floor(ratio * N)` uniformly chosen events of `seq` and predicts them.
pub fn impute<F: Real, R: Rng>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    seq: &EventSequence,
    missing_ratio: f64,
    time_scale: f64,
    rng: &mut R,
) -> Result<ImputeResult> {
    let missing = select_missing(seq, missing_ratio, rng)?;
    impute_with(store, cfg, std::slice::from_ref(seq), &[missing], time_scale)
}
