use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{cross_entropy, Hooks, Net};
use super::{Input, InputSpec, TransformerModel};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-3;
/// Parameters whose analytic and numeric gradients are both below this are
/// not compared.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Euclidean norm of the full analytic gradient.
    pub grad_norm: f64,
}

/// Compares the analytic gradient of the cross-entropy loss against central
/// differences on `count` randomly chosen parameters, all in `f64`.
pub fn gradient_check(
    model: &TransformerModel,
    input: &Input,
    label: usize,
    count: usize,
    seed: u64,
) -> Result<GradCheck> {
    gradient_check_with(model, input, label, count, seed, |_| {})
}

/// As [`gradient_check`], with `tamper` applied to the analytic gradient
/// before comparison (negative controls).
pub fn gradient_check_with(
    model: &TransformerModel,
    input: &Input,
    label: usize,
    count: usize,
    seed: u64,
    tamper: impl Fn(&mut [f64]),
) -> Result<GradCheck> {
    model.check_input(input)?;
    if label >= model.config().num_classes {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let mut params: Vec<f64> = model.params().iter().map(|&p| f64::from(p)).collect();
    let cfg = model.config();
    let layout = model.layout();
    let loss_at = |p: &[f64]| {
        let net = Net { cfg, layout, p };
        let cache = net.forward(input, &Hooks::default());
        cross_entropy(&cache.logits, label).0
    };

    let mut grads = vec![0.0f64; params.len()];
    {
        let net = Net {
            cfg,
            layout,
            p: &params,
        };
        let cache = net.forward(input, &Hooks::default());
        let (_, dlogits) = cross_entropy(&cache.logits, label);
        net.backward(input, &cache, &dlogits, &mut grads);
    }
    tamper(&mut grads);
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();

    // Only parameters that can influence this input are sampled.
    let d = cfg.hidden_dim;
    let len = net_len(model, input);
    let mut candidates: Vec<usize> = Vec::with_capacity(params.len());
    for t in model.tensors() {
        let range = t.offset..t.offset + t.rows * t.cols;
        match t.name.as_str() {
            "embed.tokens" => {
                if let (Input::Tokens(tokens), InputSpec::Sequence { .. }) = (input, cfg.input) {
                    let mut rows: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
                    rows.sort_unstable();
                    rows.dedup();
                    for r in rows {
                        candidates.extend(t.offset + r * d..t.offset + (r + 1) * d);
                    }
                }
            }
            "embed.position" => candidates.extend(t.offset..t.offset + len * d),
            _ => candidates.extend(range),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for &idx in candidates.iter().take(count) {
        let orig = params[idx];
        params[idx] = orig + GRAD_CHECK_STEP;
        let up = loss_at(&params);
        params[idx] = orig - GRAD_CHECK_STEP;
        let down = loss_at(&params);
        params[idx] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let analytic = grads[idx];
        let scale = analytic.abs().max(numeric.abs());
        if scale < GRAD_CHECK_FLOOR {
            skipped += 1;
            continue;
        }
        checked += 1;
        max_rel_error = max_rel_error.max((analytic - numeric).abs() / scale);
    }
    Ok(GradCheck {
        max_rel_error,
        checked,
        skipped,
        grad_norm,
    })
}

fn net_len(model: &TransformerModel, input: &Input) -> usize {
    model.net().token_len(input)
}
