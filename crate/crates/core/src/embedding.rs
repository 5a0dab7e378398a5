//! Event time and type embeddings, special tokens and batch tokenization.
//!
//! Every event row is `[type embedding | time embedding]`. A masked event is
//! replaced by the learnable full-width MASK row, and a learnable full-width
//! EOS row is appended after the last event of every sequence.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Graph, NodeId};
use crate::data::EventSequence;
use crate::error::{Error, Result};
use crate::params::{init_normal, ParamStore};
use crate::tensor::{Matrix, Real};

pub const TYPE_TABLE: &str = "embedding.type";
pub const MASK_ROW: &str = "embedding.mask";
pub const EOS_ROW: &str = "embedding.eos";
pub const MERCER_C: &str = "embedding.mercer.c";
pub const MERCER_OMEGA: &str = "embedding.mercer.omega";
pub const MTAN_W: &str = "embedding.mtan.w";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeKind {
    Fixed,
    Mercer,
    Mtan,
}

impl std::str::FromStr for TimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(TimeKind::Fixed),
            "mercer" => Ok(TimeKind::Mercer),
            "mtan" => Ok(TimeKind::Mtan),
            other => Err(Error::InvalidConfig(format!("unknown time embedding {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub d_time: usize,
    pub d_type: usize,
    pub num_types: usize,
    pub time_kind: TimeKind,
    /// Initial Mercer period.
    pub mercer_omega: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            d_time: 32,
            d_type: 32,
            num_types: 1,
            time_kind: TimeKind::Fixed,
            mercer_omega: 10.0,
        }
    }
}

impl EmbeddingConfig {
    pub fn width(&self) -> usize {
        self.d_time + self.d_type
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_time == 0 || self.d_type == 0 || self.num_types == 0 {
            return Err(Error::InvalidConfig(
                "d_time, d_type and num_types must be positive".into(),
            ));
        }
        if !self.d_time.is_multiple_of(2) && matches!(self.time_kind, TimeKind::Fixed | TimeKind::Mtan) {
            return Err(Error::InvalidConfig(format!(
                "d_time = {} must be even for the {:?} time embedding",
                self.d_time, self.time_kind
            )));
        }
        if !(self.mercer_omega > 0.0) {
            return Err(Error::InvalidConfig("mercer period must be positive".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let time = match self.time_kind {
            TimeKind::Fixed => 0,
            TimeKind::Mercer => self.d_time + 1,
            TimeKind::Mtan => self.d_time,
        };
        self.num_types * self.d_type + 2 * self.width() + time
    }
}

/// Sinusoidal features: pairs `(cos(f_j t), sin(f_j t))` with
/// `f_j = 10000^(-j / d_time)`.
pub fn embed_time_fixed(t: f64, d_time: usize) -> Vec<f64> {
    (0..d_time)
        .map(|c| {
            let freq = 10000f64.powf(-((c / 2) as f64) / d_time as f64);
            if c % 2 == 0 {
                (freq * t).cos()
            } else {
                (freq * t).sin()
            }
        })
        .collect()
}

/// Mercer features for coefficients `c` (one per output component) and
/// period `omega`.
pub fn embed_time_mercer(t: f64, c: &[f64], omega: f64) -> Result<Vec<f64>> {
    validate_mercer(c, omega)?;
    let mut g = Graph::<f64>::new();
    let cn = g.constant(Matrix::row_vector(c.to_vec()));
    let on = g.constant(Matrix::scalar(omega));
    let out = g.mercer_time(cn, on, vec![t]);
    Ok(g.value(out).data().to_vec())
}

pub fn validate_mercer(c: &[f64], omega: f64) -> Result<()> {
    if c.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidConfig("mercer coefficients must be >= 0".into()));
    }
    if !(omega > 0.0) {
        return Err(Error::InvalidConfig("mercer period must be positive".into()));
    }
    Ok(())
}

/// `w_0 t` followed by `sin(w_i t)`.
pub fn embed_time_mtan(t: f64, w: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(i, &wi)| if i == 0 { wi * t } else { (wi * t).sin() })
        .collect()
}

/// One position of a tokenized sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Token {
    Event { time: f64, mark: usize },
    /// An event hidden behind the MASK row; the original is kept as the
    /// reconstruction target.
    Mask { time: f64, mark: usize },
    Eos,
    Pad,
}

/// Tokens for one sequence: events (masked where listed) followed by EOS.
pub fn token_row(seq: &EventSequence, masked: &BTreeSet<usize>) -> Result<Vec<Token>> {
    if let Some(&bad) = masked.iter().find(|&&i| i >= seq.len()) {
        return Err(Error::Precondition(format!(
            "mask index {bad} out of range for {} events",
            seq.len()
        )));
    }
    let mut row: Vec<Token> = seq
        .events()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if masked.contains(&i) {
                Token::Mask {
                    time: e.time,
                    mark: e.mark,
                }
            } else {
                Token::Event {
                    time: e.time,
                    mark: e.mark,
                }
            }
        })
        .collect();
    row.push(Token::Eos);
    Ok(row)
}

/// Padded rows of tokens; row `b` occupies `b * width .. (b + 1) * width`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    pub batch: usize,
    pub width: usize,
    pub tokens: Vec<Token>,
    /// Non-pad tokens per row (events plus EOS).
    pub lengths: Vec<usize>,
}

impl TokenizedBatch {
    pub fn from_rows(rows: Vec<Vec<Token>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyBatch("no rows to tokenize".into()));
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::EmptyBatch("every row is empty".into()));
        }
        let batch = rows.len();
        let mut tokens = Vec::with_capacity(batch * width);
        let mut lengths = Vec::with_capacity(batch);
        for mut r in rows {
            if r.is_empty() || r.iter().any(|t| matches!(t, Token::Pad)) {
                return Err(Error::Precondition("rows must be non-empty and pad-free".into()));
            }
            lengths.push(r.len());
            r.resize(width, Token::Pad);
            tokens.extend(r);
        }
        Ok(TokenizedBatch {
            batch,
            width,
            tokens,
            lengths,
        })
    }

    pub fn from_sequences(seqs: &[EventSequence]) -> Result<Self> {
        let empty = BTreeSet::new();
        let rows = seqs
            .iter()
            .map(|s| token_row(s, &empty))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.width
    }

    pub fn index(&self, b: usize, i: usize) -> usize {
        b * self.width + i
    }

    pub fn token(&self, b: usize, i: usize) -> Token {
        self.tokens[self.index(b, i)]
    }

    /// Flat index of the EOS token of every row (assumes EOS is last).
    pub fn eos_rows(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| self.index(b, n - 1))
            .collect()
    }

    /// Flat indices of all MASK tokens with their original events.
    pub fn masked_rows(&self) -> Vec<(usize, f64, usize)> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(r, t)| match *t {
                Token::Mask { time, mark } => Some((r, time, mark)),
                _ => None,
            })
            .collect()
    }

    pub fn layout(&self, heads: usize, causal: bool) -> AttentionLayout {
        AttentionLayout {
            batch: self.batch,
            width: self.width,
            lengths: self.lengths.clone(),
            heads,
            causal,
        }
    }
}

pub fn init_embedding_params<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: &EmbeddingConfig, rng: &mut R) {
    store.insert(TYPE_TABLE, init_normal(cfg.num_types, cfg.d_type, 0.02, rng));
    store.insert(MASK_ROW, init_normal(1, cfg.width(), 0.02, rng));
    store.insert(EOS_ROW, init_normal(1, cfg.width(), 0.02, rng));
    match cfg.time_kind {
        TimeKind::Fixed => {}
        TimeKind::Mercer => {
            store.insert(MERCER_C, Matrix::filled(1, cfg.d_time, F::one()));
            store.insert(MERCER_OMEGA, Matrix::scalar(F::lit(cfg.mercer_omega)));
        }
        TimeKind::Mtan => {
            // start from the fixed embedding's frequency ladder
            let w = (0..cfg.d_time)
                .map(|i| F::lit(10000f64.powf(-(i as f64) / cfg.d_time as f64)))
                .collect();
            store.insert(MTAN_W, Matrix::row_vector(w));
        }
    }
}

/// Keeps learnable time parameters inside their domain after an update.
pub fn project_embedding_params<F: Real>(store: &mut ParamStore<F>) {
    if let Some(c) = store.get_mut(MERCER_C) {
        for x in c.data_mut() {
            *x = x.max(F::zero());
        }
    }
    if let Some(o) = store.get_mut(MERCER_OMEGA) {
        for x in o.data_mut() {
            *x = x.max(F::lit(1e-3));
        }
    }
}

/// Time embedding rows for `times` as a graph node.
pub fn time_embedding<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, cfg: &EmbeddingConfig, times: &[f64]) -> NodeId {
    match cfg.time_kind {
        TimeKind::Fixed => {
            let mut m = Matrix::zeros(times.len(), cfg.d_time);
            for (r, &t) in times.iter().enumerate() {
                for (c, v) in embed_time_fixed(t, cfg.d_time).into_iter().enumerate() {
                    m.set(r, c, F::lit(v));
                }
            }
            g.constant(m)
        }
        TimeKind::Mercer => {
            let c = store.leaf(g, MERCER_C);
            let o = store.leaf(g, MERCER_OMEGA);
            g.mercer_time(c, o, times.iter().map(|&t| F::lit(t)).collect())
        }
        TimeKind::Mtan => {
            let w = store.leaf(g, MTAN_W);
            g.mtan_time(w, times.iter().map(|&t| F::lit(t)).collect())
        }
    }
}

/// Type embedding rows for `marks`.
pub fn type_embedding<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, marks: &[usize]) -> NodeId {
    let table = store.leaf(g, TYPE_TABLE);
    g.gather_rows(table, marks.to_vec())
}

/// Input matrix (`batch * width` rows of width `d_time + d_type`) for a
/// tokenized batch. Pad rows are zero.
pub fn embed_batch<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, cfg: &EmbeddingConfig, batch: &TokenizedBatch) -> NodeId {
    let mut times = Vec::new();
    let mut marks = Vec::new();
    let mut map = Vec::with_capacity(batch.rows());
    for t in &batch.tokens {
        map.push(match *t {
            Token::Event { time, mark } => {
                times.push(time);
                marks.push(mark);
                Some((0, times.len() - 1))
            }
            Token::Mask { .. } => Some((1, 0)),
            Token::Eos => Some((2, 0)),
            Token::Pad => None,
        });
    }
    let mask = store.leaf(g, MASK_ROW);
    let eos = store.leaf(g, EOS_ROW);
    let events = if times.is_empty() {
        g.constant(Matrix::zeros(0, cfg.width()))
    } else {
        let ty = type_embedding(g, store, &marks);
        let tm = time_embedding(g, store, cfg, &times);
        g.concat_cols(ty, tm)
    };
    g.assemble(vec![events, mask, eos], map, cfg.width())
}

/// Embedded rows of one sequence (events, then EOS), masked positions
/// replaced by the MASK row.
pub fn embed_sequence<F: Real>(
    store: &ParamStore<F>,
    cfg: &EmbeddingConfig,
    seq: &EventSequence,
    masked: &BTreeSet<usize>,
) -> Result<Matrix<F>> {
    let batch = TokenizedBatch::from_rows(vec![token_row(seq, masked)?])?;
    let mut g = Graph::new();
    let x = embed_batch(&mut g, store, cfg, &batch);
    Ok(g.value(x).clone())
}
