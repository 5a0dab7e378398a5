//! Sequence-level binary classification from the EOS embedding.

use rand::Rng;

use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::data::EventSequence;
use crate::embedding::TokenizedBatch;
use crate::encoder::{forward, AttentionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{init_mlp, mlp, ParamStore};
use crate::tensor::Real;

pub const CLS_HEAD: &str = "task.cls";

pub fn init_classifier_head<F: Real, R: Rng>(store: &mut ParamStore<F>, d_model: usize, rng: &mut R) {
    init_mlp(store, CLS_HEAD, d_model, d_model, 1, rng);
}

/// One logit per sequence (`B x 1`), bidirectional attention.
pub fn classify_logits<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, cfg: &ModelConfig, seqs: &[EventSequence]) -> Result<NodeId> {
    let batch = TokenizedBatch::from_sequences(seqs)?;
    let states = forward(g, store, cfg, &batch, AttentionMode::Bidirectional)?;
    Ok(mlp(g, store, CLS_HEAD, states.eos))
}

/// Labels as BCE targets; every sequence must carry one.
pub fn labels_of(seqs: &[EventSequence]) -> Result<Vec<u8>> {
    seqs.iter()
        .map(|s| {
            s.label()
                .ok_or_else(|| Error::Precondition("classification needs labelled sequences".into()))
        })
        .collect()
}

pub fn classify_batch_loss<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, cfg: &ModelConfig, seqs: &[EventSequence]) -> Result<NodeId> {
    let labels: Vec<F> = labels_of(seqs)?.into_iter().map(|l| F::lit(f64::from(l))).collect();
    let logits = classify_logits(g, store, cfg, seqs)?;
    g.bce_with_logits(logits, &labels)
}

/// Probabilities of label 1 for a list of sequences.
pub fn classify_many<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig, seqs: &[EventSequence]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(16) {
        let mut g = Graph::new();
        let logits = classify_logits(&mut g, store, cfg, chunk)?;
        out.extend(g.value(logits).data().iter().map(|&x| sigmoid(x.as_f64())));
    }
    Ok(out)
}

/// Probability that `seq` has label 1.
pub fn classify<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig, seq: &EventSequence) -> Result<f64> {
    Ok(classify_many(store, cfg, std::slice::from_ref(seq))?[0])
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Precondition("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Precondition("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney statistic, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let p = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let q = (j - i) as u64 - p;
        twice_u += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok((twice_u as f64 / 2.0) / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }
}
