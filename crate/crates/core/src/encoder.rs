//! Pre-layer-norm transformer encoder over tokenized event batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Graph, NodeId};
use crate::embedding::{embed_batch, init_embedding_params, EmbeddingConfig, TokenizedBatch};
use crate::error::{Error, Result};
use crate::params::{init_linear, linear, ParamStore};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 3,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("encoder sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d // ln1
            + 4 * (d * d + d) // q, k, v, o
            + 2 * d // ln2
            + d * self.d_ff + self.d_ff // ff1
            + self.d_ff * d + d; // ff2
        self.num_layers * per_layer + 2 * d
    }
}

/// Backbone configuration: embeddings plus encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.encoder.validate()?;
        if self.embedding.width() != self.encoder.d_model {
            return Err(Error::InvalidConfig(format!(
                "d_time + d_type = {} but d_model = {}",
                self.embedding.width(),
                self.encoder.d_model
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn num_types(&self) -> usize {
        self.embedding.num_types
    }
}

/// Trainable scalars in the embeddings and encoder (task heads excluded).
pub fn count_params(cfg: &ModelConfig) -> usize {
    cfg.embedding.num_params() + cfg.encoder.num_params()
}

fn layer_prefix(l: usize) -> String {
    format!("encoder.layers.{l}")
}

pub fn init_backbone<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    init_embedding_params(store, &cfg.embedding, rng);
    let d = cfg.encoder.d_model;
    let ones = || Matrix::filled(1, d, F::one());
    for l in 0..cfg.encoder.num_layers {
        let p = layer_prefix(l);
        store.insert(format!("{p}.ln1.gamma"), ones());
        store.insert(format!("{p}.ln1.beta"), Matrix::zeros(1, d));
        for name in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.attn.{name}"), d, d, rng);
        }
        store.insert(format!("{p}.ln2.gamma"), ones());
        store.insert(format!("{p}.ln2.beta"), Matrix::zeros(1, d));
        init_linear(store, &format!("{p}.ff1"), d, cfg.encoder.d_ff, rng);
        init_linear(store, &format!("{p}.ff2"), cfg.encoder.d_ff, d, rng);
    }
    store.insert("encoder.ln_final.gamma", ones());
    store.insert("encoder.ln_final.beta", Matrix::zeros(1, d));
    Ok(())
}

/// Encoder stack on an already embedded input (`rows x d_model`).
pub fn encode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    input: NodeId,
    layout: &AttentionLayout,
) -> Result<NodeId> {
    let (rows, width) = g.value(input).shape();
    if width != cfg.d_model {
        return Err(Error::Shape(format!(
            "input width {width} but d_model {}",
            cfg.d_model
        )));
    }
    if rows != layout.batch * layout.width {
        return Err(Error::Shape(format!(
            "{rows} input rows for a {}x{} layout",
            layout.batch, layout.width
        )));
    }
    let mut x = input;
    for l in 0..cfg.num_layers {
        let p = layer_prefix(l);
        let gamma = store.leaf(g, &format!("{p}.ln1.gamma"));
        let beta = store.leaf(g, &format!("{p}.ln1.beta"));
        let h = g.layer_norm(x, gamma, beta);
        let q = linear(g, store, &format!("{p}.attn.q"), h);
        let k = linear(g, store, &format!("{p}.attn.k"), h);
        let v = linear(g, store, &format!("{p}.attn.v"), h);
        let a = g.attention(q, k, v, layout.clone());
        let a = linear(g, store, &format!("{p}.attn.o"), a);
        x = g.add(x, a);

        let gamma = store.leaf(g, &format!("{p}.ln2.gamma"));
        let beta = store.leaf(g, &format!("{p}.ln2.beta"));
        let h = g.layer_norm(x, gamma, beta);
        let f = linear(g, store, &format!("{p}.ff1"), h);
        let f = g.gelu(f);
        let f = linear(g, store, &format!("{p}.ff2"), f);
        x = g.add(x, f);
    }
    let gamma = store.leaf(g, "encoder.ln_final.gamma");
    let beta = store.leaf(g, "encoder.ln_final.beta");
    Ok(g.layer_norm(x, gamma, beta))
}

/// Hidden states of a batch and the EOS embeddings `z` (one row per sequence).
#[derive(Clone, Copy, Debug)]
pub struct HiddenStates {
    pub hidden: NodeId,
    pub eos: NodeId,
}

/// Embeds and encodes a tokenized batch.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    batch: &TokenizedBatch,
    mode: AttentionMode,
) -> Result<HiddenStates> {
    let input = embed_batch(g, store, &cfg.embedding, batch);
    let layout = batch.layout(cfg.encoder.num_heads, mode == AttentionMode::Causal);
    let hidden = encode(g, store, &cfg.encoder, input, &layout)?;
    let eos = g.gather_rows(hidden, batch.eos_rows());
    Ok(HiddenStates { hidden, eos })
}
