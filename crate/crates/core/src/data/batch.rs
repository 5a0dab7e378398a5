use super::{Event, EventSequence};
use crate::error::{Error, Result};

/// Rectangular view of several sequences, padded to the longest.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub times: Vec<Vec<f64>>,
    pub marks: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// `pad[b][i]` is true when position `i` of row `b` is padding.
    pub pad: Vec<Vec<bool>>,
    pub num_types: usize,
}

impl PaddedBatch {
    pub fn width(&self) -> usize {
        self.times.first().map_or(0, Vec::len)
    }

    /// Recovers the original sequences from the valid positions.
    pub fn unpad(&self) -> Result<Vec<EventSequence>> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let events = (0..n)
                    .map(|i| Event::new(self.times[b][i], self.marks[b][i]))
                    .collect();
                EventSequence::new(events, self.num_types, None)
            })
            .collect()
    }
}

pub fn pad_batch(seqs: &[EventSequence]) -> Result<PaddedBatch> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::EmptyBatch("pad_batch needs at least one sequence".into()))?;
    let width = seqs.iter().map(EventSequence::len).max().unwrap_or(0);
    let mut out = PaddedBatch {
        times: Vec::with_capacity(seqs.len()),
        marks: Vec::with_capacity(seqs.len()),
        lengths: Vec::with_capacity(seqs.len()),
        pad: Vec::with_capacity(seqs.len()),
        num_types: first.num_types(),
    };
    for s in seqs {
        let n = s.len();
        let mut times = s.times();
        let mut marks = s.marks();
        times.resize(width, 0.0);
        marks.resize(width, 0);
        out.times.push(times);
        out.marks.push(marks);
        out.lengths.push(n);
        out.pad.push((0..width).map(|i| i >= n).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[f64]) -> EventSequence {
        EventSequence::from_parts(times, &vec![1; times.len()], 2).unwrap()
    }

    #[test]
    fn equal_lengths_have_no_padding() {
        let b = pad_batch(&[seq(&[1.0, 2.0]), seq(&[0.5, 3.0])]).unwrap();
        assert!(b.pad.iter().flatten().all(|&p| !p));
    }

    #[test]
    fn shorter_row_is_padded() {
        let b = pad_batch(&[seq(&[1.0, 2.0]), seq(&[1.0, 2.0, 3.0, 4.0])]).unwrap();
        assert_eq!(b.width(), 4);
        assert_eq!(b.pad[0].iter().filter(|&&p| p).count(), 2);
        assert_eq!(b.lengths, vec![2, 4]);
    }

    #[test]
    fn empty_input_errors() {
        assert!(pad_batch(&[]).is_err());
    }

    #[test]
    fn unpad_inverts_pad() {
        let seqs = vec![seq(&[0.1]), seq(&[0.2, 0.7, 0.9]), EventSequence::empty(2)];
        let b = pad_batch(&seqs).unwrap();
        assert_eq!(b.unpad().unwrap(), seqs);
    }
}
