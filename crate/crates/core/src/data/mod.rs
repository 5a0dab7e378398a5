//! Marked event sequences: the data model, JSONL ingestion, synthetic Hawkes
//! generation, dataset splitting and batch padding.

mod batch;
mod hawkes;
mod jsonl;

pub use batch::{pad_batch, PaddedBatch};
pub use hawkes::{simulate_hawkes, simulate_hawkes_dataset, spectral_radius, HawkesParams};
pub use jsonl::{load_jsonl, parse_jsonl, save_jsonl, to_jsonl_string};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single event: arrival time and categorical mark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Event { time, mark }
    }
}

/// Events with strictly increasing times and marks in `[0, num_types)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    events: Vec<Event>,
    num_types: usize,
    label: Option<u8>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, num_types: usize, label: Option<u8>) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::InvalidSequence("num_types must be positive".into()));
        }
        for (i, e) in events.iter().enumerate() {
            if !(e.time.is_finite() && e.time >= 0.0) {
                return Err(Error::InvalidSequence(format!(
                    "event {i} has invalid time {}",
                    e.time
                )));
            }
            if e.mark >= num_types {
                return Err(Error::InvalidSequence(format!(
                    "event {i} has mark {} >= {num_types}",
                    e.mark
                )));
            }
            if i > 0 && e.time <= events[i - 1].time {
                return Err(Error::InvalidSequence(format!(
                    "times not strictly increasing at event {i}"
                )));
            }
        }
        if let Some(l) = label {
            if l > 1 {
                return Err(Error::InvalidSequence(format!("label {l} is not binary")));
            }
        }
        Ok(EventSequence {
            events,
            num_types,
            label,
        })
    }

    /// Builds a sequence from parallel time and mark slices.
    pub fn from_parts(times: &[f64], marks: &[usize], num_types: usize) -> Result<Self> {
        if times.len() != marks.len() {
            return Err(Error::InvalidSequence("times and marks differ in length".into()));
        }
        let events = times.iter().zip(marks).map(|(&t, &m)| Event::new(t, m)).collect();
        Self::new(events, num_types, None)
    }

    pub fn empty(num_types: usize) -> Self {
        EventSequence {
            events: Vec::new(),
            num_types,
            label: None,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn label(&self) -> Option<u8> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.label = label;
        self
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.mark).collect()
    }

    pub fn first_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.time)
    }

    /// `t_N - t_1`, zero for fewer than two events.
    pub fn span(&self) -> f64 {
        match (self.first_time(), self.last_time()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// First `n` events.
    pub fn prefix(&self, n: usize) -> EventSequence {
        EventSequence {
            events: self.events[..n.min(self.len())].to_vec(),
            num_types: self.num_types,
            label: self.label,
        }
    }

    /// Adds `offset` to every time. Monotonicity is preserved.
    pub fn shifted(&self, offset: f64) -> Result<EventSequence> {
        let events = self
            .events
            .iter()
            .map(|e| Event::new(e.time + offset, e.mark))
            .collect();
        EventSequence::new(events, self.num_types, self.label)
    }

    /// Multiplies every time by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<EventSequence> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Precondition("time scale factor must be positive".into()));
        }
        let events = self
            .events
            .iter()
            .map(|e| Event::new(e.time * factor, e.mark))
            .collect();
        EventSequence::new(events, self.num_types, self.label)
    }
}

/// Inter-event times `t_{i+1} - t_i`.
pub fn intervals(seq: &EventSequence) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::Precondition("intervals of an empty sequence".into()));
    }
    Ok(seq.events().windows(2).map(|w| w[1].time - w[0].time).collect())
}

/// A collection of sequences sharing one mark vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sequences: Vec<EventSequence>,
    num_types: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::InvalidSequence("num_types must be positive".into()));
        }
        if let Some((i, s)) = sequences
            .iter()
            .enumerate()
            .find(|(_, s)| s.num_types() != num_types)
        {
            return Err(Error::InvalidSequence(format!(
                "sequence {i} has {} types, dataset has {num_types}",
                s.num_types()
            )));
        }
        Ok(Dataset {
            sequences,
            num_types,
        })
    }

    pub fn sequences(&self) -> &[EventSequence] {
        &self.sequences
    }

    pub fn into_sequences(self) -> Vec<EventSequence> {
        self.sequences
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Mean inter-event time over every sequence with at least two events.
    pub fn mean_interval(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in &self.sequences {
            if s.len() >= 2 {
                sum += s.span();
                n += s.len() - 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn max_time(&self) -> Option<f64> {
        self.sequences
            .iter()
            .filter_map(EventSequence::last_time)
            .fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.max(t))))
    }

    /// Shifts each sequence so that its first event is at time `>= min_first`.
    pub fn shift_to_min_first(&self, min_first: f64) -> Result<Dataset> {
        let sequences = self
            .sequences
            .iter()
            .map(|s| match s.first_time() {
                Some(t1) if t1 < min_first => s.shifted(min_first - t1),
                _ => Ok(s.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(sequences, self.num_types)
    }

    /// Rescales all times by a common factor so the largest time becomes
    /// `target_max`.
    pub fn rescale_max_time(&self, target_max: f64) -> Result<Dataset> {
        let Some(max) = self.max_time().filter(|&m| m > 0.0) else {
            return Ok(self.clone());
        };
        let factor = target_max / max;
        let sequences = self
            .sequences
            .iter()
            .map(|s| s.scaled(factor))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(sequences, self.num_types)
    }

    /// Deterministic subsample of exactly `floor(fraction * n)` sequences.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Precondition(format!("fraction {fraction} outside [0, 1]")));
        }
        let n = (fraction * self.len() as f64 + 1e-9).floor() as usize;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        Dataset::new(
            idx.into_iter().map(|i| self.sequences[i].clone()).collect(),
            self.num_types,
        )
    }
}

/// Shuffles deterministically and partitions into (train, dev, test).
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(f.is_finite() && *f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split fractions ({a}, {b}, {c}) must be nonnegative and sum to 1"
        )));
    }
    let n = ds.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let take = |range: &[usize]| -> Result<Dataset> {
        Dataset::new(
            range.iter().map(|&i| ds.sequences[i].clone()).collect(),
            ds.num_types,
        )
    };
    Ok((
        take(&idx[..n_train])?,
        take(&idx[n_train..n_train + n_dev])?,
        take(&idx[n_train + n_dev..])?,
    ))
}
