//! Trainable encoder-only transformer classifier with attention capture and
//! per-head deactivation.
//!
//! The encoder is pre-LN: every layer computes
//! `x += attn(ln1(x)) W_o` followed by `x += ffn(ln2(x))`, and the logits are
//! read from the first position (the class token when enabled) after a final
//! layer norm. The output projection has no bias, so a head whose query, key
//! and value slices and output-projection rows are zero contributes exactly
//! nothing to the residual stream.

mod config;
mod engine;
mod gradcheck;
mod io;
mod kernels;
mod train;

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{InputSpec, Mode, ModelConfig, Readout, TensorInfo};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheck};
pub use train::{fine_tune, train, TrainHyper};

pub(crate) use config::Layout;

pub(crate) use engine::{Hooks, Net};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const TOKEN_EMBED_STD: f64 = 0.1;

/// One model input before the class token is added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Input {
    /// Token ids, unpadded; at most `max_tokens` minus the class token.
    Tokens(Vec<u32>),
    /// Row-major pixels of a square single-channel image.
    Image(Vec<f32>),
}

/// Zero-based `(layer, head)` index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Provenance recorded alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub training_seed: Option<u64>,
    pub dataset_fingerprint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f32>,
    deactivated: BTreeSet<HeadId>,
    meta: ModelMeta,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.deactivated == other.deactivated
            && self.meta == other.meta
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Captured internals of one forward pass.
///
/// Attention matrices and hidden states cover the real tokens only
/// (`len x len` and `len x hidden_dim`); padding never enters the model.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub logits: Vec<f32>,
    /// `attention[layer][head]`, empty when capture was off.
    pub attention: Vec<Vec<Matrix>>,
    /// Residual stream after each layer, empty when capture was off.
    pub hidden: Vec<Matrix>,
    pub len: usize,
    pub class_token: bool,
}

impl AttentionTrace {
    /// Rows that belong to content tokens (class token excluded).
    pub fn active_rows(&self) -> std::ops::Range<usize> {
        usize::from(self.class_token)..self.len
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    /// Softmax of the logits.
    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = self.logits.iter().map(|&z| f64::from(z - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Hidden state of `layer` averaged over all real tokens.
    pub fn pooled_hidden(&self, layer: usize) -> Vec<f32> {
        let h = &self.hidden[layer];
        h.column_means().into_iter().map(|v| v as f32).collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl TransformerModel {
    /// All parameters zero except layer-norm gains, which are one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        for t in &layout.tensors {
            if layout.is_layer_norm_gain(&t.name) {
                params[t.offset..t.offset + t.rows * t.cols].fill(1.0);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            deactivated: BTreeSet::new(),
            meta: ModelMeta::default(),
        })
    }

    /// Seeded random initialisation. Token embeddings start small so that
    /// tokens never seen in training stay close to their position vector;
    /// residual output projections are scaled by `1/sqrt(2L)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_scale = 1.0 / (2.0 * model.config.num_layers as f64).sqrt();
        for t in model.layout.tensors.clone() {
            let name = t.name.as_str();
            let fan_in = 1.0 / (t.rows as f64).sqrt();
            let std = if name.ends_with(".bias") || name.ends_with(".gain") {
                continue;
            } else if name == "embed.tokens" {
                TOKEN_EMBED_STD
            } else if name == "embed.class" {
                1.0
            } else if name == "embed.position" {
                0.5
            } else if name.ends_with("attn.out.weight") || name.ends_with("ffn.out.weight") {
                fan_in * depth_scale
            } else {
                fan_in
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut model.params[t.offset..t.offset + t.rows * t.cols] {
                *p = normal.sample(&mut rng) as f32;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: ModelMeta) {
        self.meta = meta;
    }

    pub fn deactivated_heads(&self) -> &BTreeSet<HeadId> {
        &self.deactivated
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<Matrix> {
        let t = self.layout.tensors.iter().find(|t| t.name == name)?;
        let data = self.params[t.offset..t.offset + t.rows * t.cols].to_vec();
        Matrix::from_vec(t.rows, t.cols, data).ok()
    }

    pub fn set_tensor(&mut self, name: &str, value: &Matrix) -> Result<()> {
        let t = self
            .layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named {name}")))?;
        if (t.rows, t.cols) != (value.rows(), value.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "{name} is {}x{}, got {}x{}",
                t.rows,
                t.cols,
                value.rows(),
                value.cols()
            )));
        }
        self.params[t.offset..t.offset + t.rows * t.cols].copy_from_slice(value.data());
        Ok(())
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn net(&self) -> Net<'_, f32> {
        Net {
            cfg: &self.config,
            layout: &self.layout,
            p: &self.params,
        }
    }

    pub fn check_input(&self, input: &Input) -> Result<()> {
        let cfg = &self.config;
        match (input, cfg.input) {
            (Input::Tokens(tokens), InputSpec::Sequence { vocab_size }) => {
                let cap = cfg.max_tokens - usize::from(cfg.use_class_token);
                if tokens.is_empty() || tokens.len() > cap {
                    return Err(Error::ShapeMismatch(format!(
                        "{} tokens, expected 1..={cap}",
                        tokens.len()
                    )));
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
                    return Err(Error::ShapeMismatch(format!(
                        "token {bad} outside vocabulary of {vocab_size}"
                    )));
                }
                Ok(())
            }
            (Input::Image(px), InputSpec::Grid { grid_side, patch_size }) => {
                let side = grid_side * patch_size;
                if px.len() != side * side {
                    return Err(Error::ShapeMismatch(format!(
                        "{} pixels, expected {side}x{side}",
                        px.len()
                    )));
                }
                if px.iter().any(|v| !v.is_finite()) {
                    return Err(Error::ShapeMismatch("non-finite pixel".into()));
                }
                Ok(())
            }
            _ => Err(Error::ShapeMismatch("input kind does not match model mode".into())),
        }
    }

    /// Runs the model on every input. With `capture` the traces carry all
    /// attention matrices and per-layer hidden states.
    pub fn forward(&self, batch: &[Input], capture: bool) -> Result<Vec<AttentionTrace>> {
        batch.iter().try_for_each(|x| self.check_input(x))?;
        Ok(batch
            .par_iter()
            .map(|x| self.trace_one(x, capture, &Hooks::default()))
            .collect())
    }

    /// Logits for a batch, without capture.
    pub fn logits(&self, batch: &[Input]) -> Result<Vec<Vec<f32>>> {
        Ok(self.forward(batch, false)?.into_iter().map(|t| t.logits).collect())
    }

    pub(crate) fn trace_one(&self, input: &Input, capture: bool, hooks: &Hooks<'_, f32>) -> AttentionTrace {
        let cache = self.net().forward(input, hooks);
        let (attention, hidden) = if capture {
            let n = cache.len;
            let d = self.config.hidden_dim;
            let heads = self.config.num_heads;
            let attention = cache
                .layers
                .iter()
                .map(|lc| {
                    (0..heads)
                        .map(|h| {
                            Matrix::from_vec(n, n, lc.probs[h * n * n..(h + 1) * n * n].to_vec())
                                .expect("square attention")
                        })
                        .collect()
                })
                .collect();
            let hidden = cache
                .layers
                .iter()
                .map(|lc| Matrix::from_vec(n, d, lc.x_out.clone()).expect("hidden shape"))
                .collect();
            (attention, hidden)
        } else {
            (Vec::new(), Vec::new())
        };
        AttentionTrace {
            logits: cache.logits,
            attention,
            hidden,
            len: cache.len,
            class_token: self.config.use_class_token,
        }
    }

    /// Copy of the model in which every listed head passes no information:
    /// its query/key/value slices (weights and biases) and the rows of the
    /// output projection fed by its values are zeroed. Everything else is
    /// left bit-identical.
    pub fn deactivate_heads(&self, heads: &[HeadId]) -> Result<TransformerModel> {
        let (layers, nh) = (self.config.num_layers, self.config.num_heads);
        if let Some(bad) = heads.iter().find(|h| h.layer >= layers || h.head >= nh) {
            return Err(Error::IndexOutOfRange(format!(
                "head {bad} outside {layers} layers x {nh} heads"
            )));
        }
        let mut out = self.clone();
        let d = self.config.hidden_dim;
        let dk = self.config.head_dim();
        for h in heads {
            let off = &self.layout.layers[h.layer];
            let cols = h.head * dk..(h.head + 1) * dk;
            for (w, b) in [(off.wq, off.bq), (off.wk, off.bk), (off.wv, off.bv)] {
                for r in 0..d {
                    out.params[w + r * d + cols.start..w + r * d + cols.end].fill(0.0);
                }
                out.params[b + cols.start..b + cols.end].fill(0.0);
            }
            out.params[off.wo + cols.start * d..off.wo + cols.end * d].fill(0.0);
            out.deactivated.insert(*h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
