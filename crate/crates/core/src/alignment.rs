//! Alignment verification: corrupt the pairing of event types and times by
//! shuffling, swapping or crossing over, and classify genuine versus
//! misaligned sequences from their EOS embeddings.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, NodeId};
use crate::data::{Event, EventSequence};
use crate::error::{Error, Result};
use crate::params::{init_linear, linear, ParamStore};
use crate::tensor::Real;

pub const ALIGN_HEAD: &str = "pretext.align";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Misalignment {
    None,
    Shuffle,
    Swap,
    Crossover,
}

impl Misalignment {
    pub const CORRUPTIONS: [Misalignment; 3] = [Misalignment::Shuffle, Misalignment::Swap, Misalignment::Crossover];
}

impl FromStr for Misalignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Misalignment::None),
            "shuffle" => Ok(Misalignment::Shuffle),
            "swap" => Ok(Misalignment::Swap),
            "crossover" => Ok(Misalignment::Crossover),
            other => Err(Error::InvalidConfig(format!("unknown misalignment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentExample {
    pub sequence: EventSequence,
    /// 1 = aligned, 0 = misaligned.
    pub label: u8,
    pub method: Misalignment,
}

/// Marks reordered so position `i` takes the mark at `perm[i]`.
pub fn apply_mark_permutation(seq: &EventSequence, perm: &[usize]) -> Result<EventSequence> {
    let n = seq.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Precondition("not a permutation of the event indices".into()));
    }
    let ev = seq.events();
    let events = (0..n).map(|i| Event::new(ev[i].time, ev[perm[i]].mark)).collect();
    EventSequence::new(events, seq.num_types(), seq.label())
}

/// Uniform non-identity permutation of the marks. When the marks are not
/// all equal the output also differs from the input.
pub fn misalign_shuffle<R: Rng>(seq: &EventSequence, rng: &mut R) -> Result<EventSequence> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::Precondition("shuffle needs at least two events".into()));
    }
    let marks = seq.marks();
    let distinct = marks.iter().any(|&m| m != marks[0]);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
        let same = perm.iter().enumerate().all(|(i, &p)| marks[i] == marks[p]);
        if !identity && (!distinct || !same) {
            return apply_mark_permutation(seq, &perm);
        }
    }
}

/// Exchange marks between two sequences, truncating both to the shorter length.
pub fn misalign_swap(a: &EventSequence, b: &EventSequence) -> Result<(EventSequence, EventSequence)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("swap needs non-empty sequences".into()));
    }
    if a.num_types() != b.num_types() {
        return Err(Error::Precondition("swap partners differ in type count".into()));
    }
    let n = a.len().min(b.len());
    let mix = |x: &EventSequence, y: &EventSequence| {
        let events = (0..n)
            .map(|i| Event::new(x.events()[i].time, y.events()[i].mark))
            .collect();
        EventSequence::new(events, x.num_types(), x.label())
    };
    Ok((mix(a, b)?, mix(b, a)?))
}

/// Keep the first `floor(N/2)` events of each sequence and append the
/// partner's second half, re-anchoring its inter-event intervals at the
/// last kept time.
pub fn misalign_crossover(a: &EventSequence, b: &EventSequence) -> Result<(EventSequence, EventSequence)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Precondition("crossover needs at least two events per sequence".into()));
    }
    if a.num_types() != b.num_types() {
        return Err(Error::Precondition("crossover partners differ in type count".into()));
    }
    let splice = |x: &EventSequence, y: &EventSequence| {
        let hx = x.len() / 2;
        let hy = y.len() / 2;
        let anchor = x.events()[hx - 1].time;
        let base = y.events()[hy - 1].time;
        let mut events = x.events()[..hx].to_vec();
        events.extend(
            y.events()[hy..]
                .iter()
                .map(|e| Event::new(anchor + (e.time - base), e.mark)),
        );
        EventSequence::new(events, x.num_types(), x.label())
    };
    Ok((splice(a, b)?, splice(b, a)?))
}

/// Applies one corruption to `seq`, using `partner` for swap and crossover.
pub fn misalign<R: Rng>(
    method: Misalignment,
    seq: &EventSequence,
    partner: &EventSequence,
    rng: &mut R,
) -> Result<EventSequence> {
    match method {
        Misalignment::None => Ok(seq.clone()),
        Misalignment::Shuffle => misalign_shuffle(seq, rng),
        Misalignment::Swap => Ok(misalign_swap(seq, partner)?.0),
        Misalignment::Crossover => Ok(misalign_crossover(seq, partner)?.0),
    }
}

/// One positive and one negative per input sequence; the negative's method
/// is uniform over `methods` and swap/crossover partners are other members
/// of the batch.
pub fn build_alignment_batch<R: Rng>(
    batch: &[EventSequence],
    methods: &[Misalignment],
    rng: &mut R,
) -> Result<Vec<AlignmentExample>> {
    if batch.len() < 2 {
        return Err(Error::Precondition("alignment batches need at least two sequences".into()));
    }
    let methods: Vec<Misalignment> = methods.iter().copied().filter(|&m| m != Misalignment::None).collect();
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no misalignment method enabled".into()));
    }
    let mut out = Vec::with_capacity(2 * batch.len());
    for (i, seq) in batch.iter().enumerate() {
        out.push(AlignmentExample {
            sequence: seq.clone(),
            label: 1,
            method: Misalignment::None,
        });
        let method = methods[rng.random_range(0..methods.len())];
        let mut j = rng.random_range(0..batch.len() - 1);
        if j >= i {
            j += 1;
        }
        out.push(AlignmentExample {
            sequence: misalign(method, seq, &batch[j], rng)?,
            label: 0,
            method,
        });
    }
    Ok(out)
}

pub fn init_alignment_head<F: Real, R: Rng>(store: &mut ParamStore<F>, d_model: usize, rng: &mut R) {
    init_linear(store, ALIGN_HEAD, d_model, 1, rng);
}

pub fn alignment_logits<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, z: NodeId) -> NodeId {
    linear(g, store, ALIGN_HEAD, z)
}

/// Mean binary cross-entropy with logits.
pub fn alignment_loss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if logits.is_empty() {
        return Err(Error::EmptyBatch("no alignment examples".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    Ok(autodiff::bce_with_logits(logits, &y).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::from_parts(times, marks, 4).unwrap()
    }

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;
    const D: usize = 3;

    #[test]
    fn permutation_worked_example() {
        let out = apply_mark_permutation(&s(&[1.0, 2.0, 3.0], &[A, B, C]), &[2, 0, 1]).unwrap();
        assert_eq!(out.times(), vec![1.0, 2.0, 3.0]);
        assert_eq!(out.marks(), vec![C, A, B]);
    }

    #[test]
    fn swap_worked_example() {
        let (x, y) = misalign_swap(&s(&[1.0, 2.0], &[A, B]), &s(&[5.0, 6.0], &[C, D])).unwrap();
        assert_eq!(x, s(&[1.0, 2.0], &[C, D]));
        assert_eq!(y, s(&[5.0, 6.0], &[A, B]));
        let a = s(&[1.0, 3.0], &[A, D]);
        assert_eq!(misalign_swap(&a, &a).unwrap(), (a.clone(), a));
    }

    #[test]
    fn swap_truncates() {
        let (x, y) = misalign_swap(&s(&[1.0, 2.0, 3.0], &[A, B, C]), &s(&[5.0], &[D])).unwrap();
        assert_eq!(x, s(&[1.0], &[D]));
        assert_eq!(y, s(&[5.0], &[A]));
    }

    #[test]
    fn crossover_worked_example() {
        let a = s(&[1.0, 2.0, 3.0, 4.0], &[A, A, B, B]);
        let b = s(&[10.0, 20.0, 30.0, 40.0], &[C, C, D, D]);
        let (x, y) = misalign_crossover(&a, &b).unwrap();
        assert_eq!(x, s(&[1.0, 2.0, 12.0, 22.0], &[A, A, D, D]));
        assert_eq!(y, s(&[10.0, 20.0, 21.0, 22.0], &[C, C, B, B]));
    }

    #[test]
    fn crossover_odd_lengths() {
        let a = s(&[1.0, 2.0, 3.0], &[A, B, C]);
        let b = s(&[10.0, 11.0, 15.0, 16.0, 20.0], &[D, D, D, D, D]);
        let (x, y) = misalign_crossover(&a, &b).unwrap();
        assert_eq!(x, s(&[1.0, 5.0, 6.0, 10.0], &[A, D, D, D]));
        assert_eq!(y, s(&[10.0, 11.0, 12.0, 13.0], &[D, D, B, C]));
    }

    #[test]
    fn shuffle_changes_marks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = s(&[1.0, 2.0], &[A, B]);
        for _ in 0..100 {
            let out = misalign_shuffle(&a, &mut rng).unwrap();
            assert_eq!(out.marks(), vec![B, A]);
        }
        let same = s(&[1.0, 2.0], &[C, C]);
        assert_eq!(misalign_shuffle(&same, &mut rng).unwrap(), same);
        assert!(misalign_shuffle(&s(&[1.0], &[A]), &mut rng).is_err());
    }

    #[test]
    fn batch_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = vec![s(&[1.0, 2.0, 3.0], &[A, B, C]), s(&[1.5, 2.5], &[D, A])];
        let ex = build_alignment_batch(&batch, &Misalignment::CORRUPTIONS, &mut rng).unwrap();
        assert_eq!(ex.len(), 4);
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 2);
        for e in &ex {
            assert_eq!(e.label == 1, e.method == Misalignment::None);
        }
        assert!(build_alignment_batch(&batch[..1], &Misalignment::CORRUPTIONS, &mut rng).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((alignment_loss(&[0.0], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(alignment_loss(&[20.0, -20.0], &[1, 0]).unwrap() < 1e-8);
        assert!(alignment_loss(&[1.0], &[1, 0]).is_err());
    }
}
