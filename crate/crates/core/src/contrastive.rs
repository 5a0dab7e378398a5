//! Multi-view contrastive learning: subsequence, masked and noisy views of
//! each sequence and the NT-Xent loss over their EOS embeddings.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, NodeId};
use crate::data::EventSequence;
use crate::embedding::{token_row, Token};
use crate::error::{Error, Result};
use crate::masking::{events_in_windows, Window};
use crate::tensor::{Matrix, Real};

/// Embeddings per sequence: original, subsequence, masked and noisy.
pub const GROUP_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown similarity {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub ratio: f64,
    pub temperature: f64,
    pub similarity: Similarity,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            ratio: 0.3,
            temperature: 0.5,
            similarity: Similarity::Dot,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("view ratio {} outside (0, 1)", self.ratio)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// The embeddings of one sequence and its three views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGroup {
    pub original: Vec<f64>,
    pub subsequence: Vec<f64>,
    pub masked: Vec<f64>,
    pub noisy: Vec<f64>,
}

impl ViewGroup {
    pub fn members(&self) -> [&[f64]; GROUP_SIZE] {
        [&self.original, &self.subsequence, &self.masked, &self.noisy]
    }
}

fn check_view_input(seq: &EventSequence, r: f64) -> Result<()> {
    if seq.len() < 2 {
        return Err(Error::Precondition("views need at least two events".into()));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Precondition(format!("view ratio {r} outside (0, 1)")));
    }
    Ok(())
}

/// Window of length `r (t_N - t_1)` starting uniformly in `[t_1, t_N - l]`.
pub fn sample_view_window<R: Rng>(seq: &EventSequence, r: f64, rng: &mut R) -> Result<Window> {
    check_view_input(seq, r)?;
    let t1 = seq.first_time().expect("non-empty");
    let l = r * seq.span();
    let start = t1 + rng.random::<f64>() * (seq.span() - l);
    Ok(Window { start, duration: l })
}

/// Events inside `window`, original times retained.
pub fn subsequence_in(seq: &EventSequence, window: &Window) -> EventSequence {
    let events = seq.events().iter().filter(|e| window.contains(e.time)).copied().collect();
    EventSequence::new(events, seq.num_types(), seq.label()).expect("subset of a valid sequence")
}

pub fn view_subsequence<R: Rng>(seq: &EventSequence, r: f64, rng: &mut R) -> Result<EventSequence> {
    let w = sample_view_window(seq, r, rng)?;
    Ok(subsequence_in(seq, &w))
}

/// A token row with every event of one window replaced by MASK.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView {
    pub window: Window,
    pub masked: BTreeSet<usize>,
    pub tokens: Vec<Token>,
}

pub fn masked_view_in(seq: &EventSequence, window: Window) -> Result<MaskedView> {
    let masked = events_in_windows(seq, &[window]);
    let tokens = token_row(seq, &masked)?;
    Ok(MaskedView { window, masked, tokens })
}

pub fn view_masked<R: Rng>(seq: &EventSequence, r: f64, rng: &mut R) -> Result<MaskedView> {
    let w = sample_view_window(seq, r, rng)?;
    masked_view_in(seq, w)
}

/// Noise with a standard deviation drawn from `uniform[0, 1]`.
pub fn sample_noise<R: Rng>(width: usize, rng: &mut R) -> (f64, Vec<f64>) {
    let sigma: f64 = rng.random();
    (sigma, noise_with_sigma(width, sigma, rng))
}

pub fn noise_with_sigma<R: Rng>(width: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; width];
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    (0..width).map(|_| n.sample(rng)).collect()
}

pub fn view_noisy<R: Rng>(z: &[f64], rng: &mut R) -> Vec<f64> {
    let (_, n) = sample_noise(z.len(), rng);
    z.iter().zip(n).map(|(a, b)| a + b).collect()
}

/// NT-Xent over rows grouped in consecutive blocks of [`GROUP_SIZE`].
pub fn nt_xent_node<F: Real>(g: &mut Graph<F>, z: NodeId, temperature: f64, similarity: Similarity) -> Result<NodeId> {
    let z = match similarity {
        Similarity::Dot => z,
        Similarity::Cosine => g.row_normalize(z),
    };
    g.nt_xent(z, GROUP_SIZE, F::lit(temperature))
}

fn stack_groups(groups: &[ViewGroup]) -> Result<Matrix<f64>> {
    let Some(first) = groups.first() else {
        return Err(Error::EmptyBatch("no view groups".into()));
    };
    let width = first.original.len();
    let mut data = Vec::with_capacity(groups.len() * GROUP_SIZE * width);
    for grp in groups {
        for m in grp.members() {
            if m.len() != width {
                return Err(Error::Shape(format!("embedding width {} but expected {width}", m.len())));
            }
            data.extend_from_slice(m);
        }
    }
    Ok(Matrix::from_vec(groups.len() * GROUP_SIZE, width, data))
}

/// Loss and the number of ordered positive pairs it visited.
pub fn nt_xent_loss(groups: &[ViewGroup], temperature: f64, similarity: Similarity) -> Result<(f64, usize)> {
    let mut z = stack_groups(groups)?;
    if similarity == Similarity::Cosine {
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    let (loss, _, pairs) = autodiff::nt_xent(&z, GROUP_SIZE, temperature)?;
    Ok((loss, pairs))
}
