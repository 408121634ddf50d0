use serde::{Deserialize, Serialize};

use super::distance::deep_layers;
use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::numerics::{linear_cka, Matrix};
use crate::transformer::{HeadId, Input, TransformerModel};
use crate::zoo::{eval_model, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    /// Per layer, clean vs poisoned, on the original model.
    pub before: Vec<f64>,
    /// Per layer after deactivating `deactivated`; equal to `before` when
    /// nothing was deactivated.
    pub after: Vec<f64>,
    pub deactivated: Vec<HeadId>,
}

impl CkaProfile {
    pub fn deep_before(&self) -> f64 {
        deep_avg(&self.before)
    }

    pub fn deep_after(&self) -> f64 {
        deep_avg(&self.after)
    }
}

fn deep_avg(v: &[f64]) -> f64 {
    let r = &v[deep_layers(v.len())];
    r.iter().sum::<f64>() / r.len().max(1) as f64
}

fn pooled(model: &TransformerModel, inputs: &[Input]) -> Result<Vec<Matrix>> {
    let traces = model.forward(inputs, true)?;
    let layers = model.config().num_layers;
    (0..layers)
        .map(|l| Matrix::from_rows(&traces.iter().map(|t| t.pooled_hidden(l)).collect::<Vec<_>>()))
        .collect()
}

/// Per-layer linear CKA between token-mean-pooled hidden states of two
/// matched input sets.
pub fn layer_cka(model: &TransformerModel, a: &[Input], b: &[Input]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    let pa = pooled(model, a)?;
    let pb = pooled(model, b)?;
    pa.iter().zip(&pb).map(|(x, y)| linear_cka(x, y)).collect()
}

pub fn cka_profile(
    model: &TransformerModel,
    clean: &[Input],
    poisoned: &[Input],
    heads: &[HeadId],
) -> Result<CkaProfile> {
    let before = layer_cka(model, clean, poisoned)?;
    let after = if heads.is_empty() {
        before.clone()
    } else {
        layer_cka(&model.deactivate_heads(heads)?, clean, poisoned)?
    };
    Ok(CkaProfile {
        before,
        after,
        deactivated: heads.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalityDrop {
    pub before: Metrics,
    pub after: Metrics,
    /// `before - after`, as fractions; positive means the metric fell.
    pub delta_clean_accuracy: f64,
    pub delta_asr: f64,
    pub deactivated: Vec<HeadId>,
    /// Set when no head was flagged; deltas are then zero.
    pub no_hijacking_heads: bool,
}

/// Metric change after deactivating `heads`. `poisoned` carries target
/// labels.
pub fn functionality_drop(
    model: &TransformerModel,
    clean: &[Sample],
    poisoned: &[Sample],
    heads: &[HeadId],
) -> Result<FunctionalityDrop> {
    let before = eval_model(model, clean, poisoned)?;
    let after = if heads.is_empty() {
        before
    } else {
        eval_model(&model.deactivate_heads(heads)?, clean, poisoned)?
    };
    Ok(FunctionalityDrop {
        before,
        after,
        delta_clean_accuracy: before.clean_accuracy - after.clean_accuracy,
        delta_asr: before.asr - after.asr,
        deactivated: heads.to_vec(),
        no_hijacking_heads: heads.is_empty(),
    })
}
