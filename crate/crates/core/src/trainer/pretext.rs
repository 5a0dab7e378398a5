//! The combined pretext objective `alpha L_rec + beta L_cl + gamma L_align`
//! computed from one bidirectional forward pass over a batch and its views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::alignment::{alignment_logits, build_alignment_batch, init_alignment_head};
use crate::autodiff::{Graph, NodeId};
use crate::contrastive::{masked_view_in, noise_with_sigma, nt_xent_node, sample_view_window, subsequence_in, GROUP_SIZE};
use crate::data::EventSequence;
use crate::embedding::{project_embedding_params, time_embedding, token_row, type_embedding, Token, TokenizedBatch};
use crate::encoder::{forward, AttentionMode};
use crate::error::{Error, Result};
use crate::masking::{decode, init_reconstruction_heads, reconstruction_loss, sample_mask};
use crate::params::ParamStore;
use crate::tensor::{Matrix, Real};

use super::config::TrainConfig;
use super::optim::Adam;

/// Reported components; `total = alpha rec + beta cl + gamma align`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretextLoss {
    pub rec: f64,
    pub cl: f64,
    pub align: f64,
    pub total: f64,
}

/// Sequences left out of a step, per objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Shorter than two events (excluded from every objective).
    pub short: usize,
    /// Density mask hid no event.
    pub empty_mask: usize,
}

impl SkipCounts {
    pub fn add(&mut self, other: SkipCounts) {
        self.short += other.short;
        self.empty_mask += other.empty_mask;
    }
}

pub struct PretextGraph {
    pub total: NodeId,
    pub rec: Option<NodeId>,
    pub cl: Option<NodeId>,
    pub align: Option<NodeId>,
    pub skipped: SkipCounts,
}

pub fn init_pretext_heads<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: &TrainConfig, rng: &mut R) {
    init_reconstruction_heads(store, cfg.encoder.d_model, &cfg.embedding, rng);
    init_alignment_head(store, cfg.encoder.d_model, rng);
}

/// Independent generator streams for the masking draw, the views, the
/// embedding noise and the alignment examples.
struct Streams {
    mask: ChaCha8Rng,
    view: ChaCha8Rng,
    noise: ChaCha8Rng,
    align: ChaCha8Rng,
}

impl Streams {
    fn split<R: Rng>(rng: &mut R) -> Self {
        Streams {
            mask: ChaCha8Rng::seed_from_u64(rng.random()),
            view: ChaCha8Rng::seed_from_u64(rng.random()),
            noise: ChaCha8Rng::seed_from_u64(rng.random()),
            align: ChaCha8Rng::seed_from_u64(rng.random()),
        }
    }
}

/// Builds the pretext loss for `batch` on `g`.
pub fn pretext_graph<F: Real, R: Rng>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &TrainConfig,
    batch: &[EventSequence],
    rng: &mut R,
) -> Result<PretextGraph> {
    let w = cfg.loss;
    let mut skipped = SkipCounts::default();
    let seqs: Vec<&EventSequence> = batch.iter().filter(|s| s.len() >= 2).collect();
    skipped.short = batch.len() - seqs.len();
    let pairwise = w.beta > 0.0 || w.gamma > 0.0;
    if seqs.is_empty() || (pairwise && seqs.len() < 2) {
        return Err(Error::EmptyBatch(format!(
            "{} usable sequences in a batch of {}",
            seqs.len(),
            batch.len()
        )));
    }
    let mut st = Streams::split(rng);
    let none = BTreeSet::new();
    let mut rows: Vec<Vec<Token>> = Vec::new();

    // reconstruction: density-masked copies
    let mut rec_rows = Vec::new();
    if w.alpha > 0.0 {
        for s in &seqs {
            let plan = sample_mask(s, &cfg.mask, &mut st.mask)?;
            if plan.masked.is_empty() {
                skipped.empty_mask += 1;
                continue;
            }
            rec_rows.push((rows.len(), plan.masked.len()));
            rows.push(token_row(s, &plan.masked)?);
        }
    }
    // originals, shared by contrastive and alignment
    let orig_start = rows.len();
    if pairwise {
        for s in &seqs {
            rows.push(token_row(s, &none)?);
        }
    }
    // contrastive views
    let view_start = rows.len();
    if w.beta > 0.0 {
        for s in &seqs {
            let win = sample_view_window(s, cfg.contrastive.ratio, &mut st.view)?;
            rows.push(token_row(&subsequence_in(s, &win), &none)?);
            let win = sample_view_window(s, cfg.contrastive.ratio, &mut st.view)?;
            rows.push(masked_view_in(s, win)?.tokens);
        }
    }
    // alignment negatives
    let neg_start = rows.len();
    if w.gamma > 0.0 {
        let owned: Vec<EventSequence> = seqs.iter().map(|s| (*s).clone()).collect();
        let examples = build_alignment_batch(&owned, &cfg.alignment.methods, &mut st.align)?;
        for ex in examples.into_iter().filter(|e| e.label == 0) {
            rows.push(token_row(&ex.sequence, &none)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyBatch("no sequence left for any pretext objective".into()));
    }

    let tokens = TokenizedBatch::from_rows(rows)?;
    let states = forward(g, store, &cfg.model(), &tokens, AttentionMode::Bidirectional)?;
    let mut parts: Vec<(f64, NodeId)> = Vec::new();

    let rec = if rec_rows.is_empty() {
        None
    } else {
        let n_rec = rec_rows.len() as f64;
        let mut idx = Vec::new();
        let mut times = Vec::new();
        let mut marks = Vec::new();
        let mut weights = Vec::new();
        for &(r, count) in &rec_rows {
            for i in 0..tokens.lengths[r] {
                if let Token::Mask { time, mark } = tokens.token(r, i) {
                    idx.push(tokens.index(r, i));
                    times.push(time);
                    marks.push(mark);
                    weights.push(F::lit(1.0 / (n_rec * count as f64)));
                }
            }
        }
        let h = g.gather_rows(states.hidden, idx);
        let (dt, dm) = decode(g, store, h);
        let tt = time_embedding(g, store, &cfg.embedding, &times);
        let tm = type_embedding(g, store, &marks);
        let l = reconstruction_loss(g, dt, dm, tt, tm, &weights)?;
        parts.push((w.alpha, l));
        Some(l)
    };

    let b = seqs.len();
    let cl = if w.beta > 0.0 {
        let mut order = Vec::with_capacity(GROUP_SIZE * b);
        for i in 0..b {
            order.extend([orig_start + i, view_start + 2 * i, view_start + 2 * i + 1, orig_start + i]);
        }
        let z = g.gather_rows(states.eos, order);
        let d = cfg.encoder.d_model;
        let mut noise = Matrix::zeros(GROUP_SIZE * b, d);
        for i in 0..b {
            let sigma: f64 = st.noise.random();
            let n = noise_with_sigma(d, sigma, &mut st.noise);
            for (c, v) in n.into_iter().enumerate() {
                noise.set(GROUP_SIZE * i + 3, c, F::lit(v));
            }
        }
        let noise = g.constant(noise);
        let z = g.add(z, noise);
        let l = nt_xent_node(g, z, cfg.contrastive.temperature, cfg.contrastive.similarity)?;
        parts.push((w.beta, l));
        Some(l)
    } else {
        None
    };

    let align = if w.gamma > 0.0 {
        let idx: Vec<usize> = (orig_start..orig_start + b).chain(neg_start..neg_start + b).collect();
        let z = g.gather_rows(states.eos, idx);
        let logits = alignment_logits(g, store, z);
        let labels: Vec<F> = (0..2 * b).map(|i| if i < b { F::one() } else { F::zero() }).collect();
        let l = g.bce_with_logits(logits, &labels)?;
        parts.push((w.gamma, l));
        Some(l)
    } else {
        None
    };

    let mut total: Option<NodeId> = None;
    for (weight, node) in parts {
        let scaled = g.scale(node, F::lit(weight));
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled),
        });
    }
    let total = total.ok_or_else(|| Error::EmptyBatch("every objective was skipped".into()))?;
    Ok(PretextGraph {
        total,
        rec,
        cl,
        align,
        skipped,
    })
}

fn report<F: Real>(g: &Graph<F>, pg: &PretextGraph, cfg: &TrainConfig) -> PretextLoss {
    let val = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item().as_f64());
    let (rec, cl, align) = (val(pg.rec), val(pg.cl), val(pg.align));
    PretextLoss {
        rec,
        cl,
        align,
        total: cfg.loss.alpha * rec + cfg.loss.beta * cl + cfg.loss.gamma * align,
    }
}

/// Pretext losses of a batch without updating anything.
pub fn pretext_loss<F: Real, R: Rng>(
    store: &ParamStore<F>,
    cfg: &TrainConfig,
    batch: &[EventSequence],
    rng: &mut R,
) -> Result<(PretextLoss, SkipCounts)> {
    let mut g = Graph::new();
    let pg = pretext_graph(&mut g, store, cfg, batch, rng)?;
    Ok((report(&g, &pg, cfg), pg.skipped))
}

/// Computes the pretext losses on `batch` and applies one optimizer step.
pub fn pretext_step<F: Real, R: Rng>(
    store: &mut ParamStore<F>,
    opt: &mut Adam,
    cfg: &TrainConfig,
    batch: &[EventSequence],
    rng: &mut R,
) -> Result<(PretextLoss, SkipCounts)> {
    let mut g = Graph::new();
    let pg = pretext_graph(&mut g, store, cfg, batch, rng)?;
    let loss = report(&g, &pg, cfg);
    let grads = g.backward(pg.total)?;
    let grads = g.param_grads(&grads);
    opt.step(store, &grads)?;
    project_embedding_params(store);
    Ok((loss, pg.skipped))
}
