//! Line-delimited JSON datasets.
//!
//! The first non-blank line is a header `{"num_types": K}`; every following
//! line is `{"seq": [[t, m], ...], "label": 0|1}` with `label` optional.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Event, EventSequence};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_types: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    seq: Vec<(f64, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut num_types = None;
    let mut sequences = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let Some(k) = num_types else {
            let header: Header = serde_json::from_str(raw).map_err(|e| Error::Parse {
                line,
                message: format!("expected header {{\"num_types\": K}}: {e}"),
            })?;
            if header.num_types == 0 {
                return Err(Error::Parse {
                    line,
                    message: "num_types must be positive".into(),
                });
            }
            num_types = Some(header.num_types);
            continue;
        };
        let parsed: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let mut events = Vec::with_capacity(parsed.seq.len());
        for (j, &(t, m)) in parsed.seq.iter().enumerate() {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Parse {
                    line,
                    message: format!("event {j} has invalid time {t}"),
                });
            }
            if m >= k {
                return Err(Error::MarkOutOfRange {
                    line,
                    mark: m,
                    num_types: k,
                });
            }
            if j > 0 && t <= parsed.seq[j - 1].0 {
                return Err(Error::NonIncreasingTimes { line });
            }
            events.push(Event::new(t, m));
        }
        if let Some(l) = parsed.label {
            if l > 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("label {l} is not 0 or 1"),
                });
            }
        }
        sequences.push(EventSequence::new(events, k, parsed.label)?);
    }
    let k = num_types.ok_or(Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Dataset::new(sequences, k)
}

pub fn to_jsonl_string(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{{\"num_types\":{}}}", ds.num_types());
    for s in ds.sequences() {
        let line = Line {
            seq: s.events().iter().map(|e| (e.time, e.mark)).collect(),
            label: s.label(),
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable line"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_jsonl_string(ds))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_is_empty_dataset() {
        let ds = parse_jsonl("{\"num_types\": 3}\n").unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(ds.num_types(), 3);
    }

    #[test]
    fn parses_sequence_line() {
        let ds = parse_jsonl("{\"num_types\": 2}\n{\"seq\": [[1.0, 0], [2.5, 1]]}\n").unwrap();
        let s = &ds.sequences()[0];
        assert_eq!(s.times(), vec![1.0, 2.5]);
        assert_eq!(s.marks(), vec![0, 1]);
        assert_eq!(s.label(), None);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_jsonl("{\"num_types\": 2}\n{\"seq\": [[0.5, 0]]}\n{\"seq\": [[2.0, 0], [1.0, 1]]}\n").unwrap_err();
        assert_eq!(err.to_string(), "non-increasing times at line 3");
        let err = parse_jsonl("{\"num_types\": 2}\n{\"seq\": [[1.0, 2]]}\n").unwrap_err();
        assert!(matches!(err, Error::MarkOutOfRange { line: 2, mark: 2, .. }));
        let err = parse_jsonl("{\"num_types\": 2}\n{\"seq\": [[1.0, 0]\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_jsonl("").is_err());
    }

    #[test]
    fn labels_roundtrip() {
        let text = "{\"num_types\":2}\n{\"seq\":[[0.5,1],[1.25,0]],\"label\":1}\n{\"seq\":[]}\n";
        let ds = parse_jsonl(text).unwrap();
        assert_eq!(ds.sequences()[0].label(), Some(1));
        assert_eq!(to_jsonl_string(&ds), text);
    }
}
