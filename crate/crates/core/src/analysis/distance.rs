use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{token_distance_matrix, DistanceMatrix, Geometry};
use crate::transformer::{AttentionTrace, Input, Mode, TransformerModel};

/// `values[layer][head]`.
pub type LayerHeadMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    pub clean: LayerHeadMatrix,
    pub poisoned: LayerHeadMatrix,
    pub spurious: LayerHeadMatrix,
}

impl DistanceProfile {
    pub fn deep_means(&self) -> [f64; 3] {
        [
            deep_mean(&self.clean),
            deep_mean(&self.poisoned),
            deep_mean(&self.spurious),
        ]
    }
}

/// Layers counted as deep: the last `ceil(L/2)`.
pub fn deep_layers(num_layers: usize) -> std::ops::Range<usize> {
    num_layers / 2..num_layers
}

/// Mean over every head of the deep layers.
pub fn deep_mean(m: &LayerHeadMatrix) -> f64 {
    let rows = &m[deep_layers(m.len())];
    let n: usize = rows.iter().map(Vec::len).sum();
    rows.iter().flatten().sum::<f64>() / n.max(1) as f64
}

fn geometry(mode: Mode) -> Geometry {
    match mode {
        Mode::Sequence => Geometry::Line1d,
        Mode::Grid => Geometry::Grid2d,
    }
}

fn distances_for(trace: &AttentionTrace, mode: Mode) -> Result<DistanceMatrix> {
    let mut mask = vec![false; trace.len];
    if trace.class_token {
        mask[0] = true;
    }
    token_distance_matrix(trace.len, geometry(mode), &mask)
}

/// Attention-weighted token distance per head, pooled over every
/// (sample, content row) pair.
pub fn distance_from_traces(traces: &[AttentionTrace], mode: Mode) -> Result<LayerHeadMatrix> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples for attention distance".into()))?;
    let (nl, nh) = (first.attention.len(), first.attention.first().map_or(0, Vec::len));
    let mut sums = vec![vec![0.0; nh]; nl];
    let mut rows = 0usize;
    for t in traces {
        let d = distances_for(t, mode)?;
        for (l, layer) in t.attention.iter().enumerate() {
            for (h, a) in layer.iter().enumerate() {
                for i in t.active_rows() {
                    let di = d.row(i);
                    sums[l][h] += a
                        .row(i)
                        .iter()
                        .zip(di)
                        .map(|(&w, &dist)| f64::from(w) * dist)
                        .sum::<f64>();
                }
            }
        }
        rows += t.active_rows().len();
    }
    for v in sums.iter_mut().flatten() {
        *v /= rows.max(1) as f64;
    }
    Ok(sums)
}

pub fn average_attention_distance(model: &TransformerModel, samples: &[Input]) -> Result<LayerHeadMatrix> {
    let traces = model.forward(samples, true)?;
    distance_from_traces(&traces, model.config().mode())
}

pub fn distance_profile(
    model: &TransformerModel,
    clean: &[Input],
    poisoned: &[Input],
    spurious: &[Input],
) -> Result<DistanceProfile> {
    Ok(DistanceProfile {
        clean: average_attention_distance(model, clean)?,
        poisoned: average_attention_distance(model, poisoned)?,
        spurious: average_attention_distance(model, spurious)?,
    })
}

/// `|a - b| / max(|a|, |b|)`, 0 when both are 0.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn trace(att: Matrix, class_token: bool) -> AttentionTrace {
        AttentionTrace {
            logits: vec![0.0],
            len: att.rows(),
            attention: vec![vec![att]],
            hidden: vec![],
            class_token,
        }
    }

    #[test]
    fn uniform_line_of_four() {
        let t = trace(Matrix::from_fn(4, 4, |_, _| 0.25), false);
        let d = distance_from_traces(&[t], Mode::Sequence).unwrap();
        assert!((d[0][0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn identity_attention_is_zero() {
        let t = trace(Matrix::from_fn(5, 5, |i, j| f32::from(u8::from(i == j))), true);
        assert_eq!(distance_from_traces(&[t], Mode::Sequence).unwrap()[0][0], 0.0);
    }

    #[test]
    fn farthest_token_attention_is_row_max() {
        // grid of 16 patches plus a class token
        let n = 17;
        let d = token_distance_matrix(n, Geometry::Grid2d, &{
            let mut m = vec![false; n];
            m[0] = true;
            m
        })
        .unwrap();
        let far: Vec<usize> = (0..n)
            .map(|i| (0..n).fold(0, |b, j| if d.get(i, j) > d.get(i, b) { j } else { b }))
            .collect();
        let att = Matrix::from_fn(n, n, |i, j| f32::from(u8::from(far[i] == j)));
        let got = distance_from_traces(&[trace(att, true)], Mode::Grid).unwrap()[0][0];
        let want = (1..n)
            .map(|i| d.row(i).iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / 16.0;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn order_invariant_and_bounded() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let traces: Vec<AttentionTrace> = (0..12)
            .map(|_| {
                let n = rng.gen_range(2..10);
                let mut m = Matrix::from_fn(n, n, |_, _| rng.gen::<f32>());
                for i in 0..n {
                    let s: f32 = m.row(i).iter().sum();
                    for j in 0..n {
                        m.set(i, j, m.get(i, j) / s);
                    }
                }
                trace(m, rng.gen())
            })
            .collect();
        let a = distance_from_traces(&traces, Mode::Sequence).unwrap()[0][0];
        let mut rev = traces.clone();
        rev.reverse();
        let b = distance_from_traces(&rev, Mode::Sequence).unwrap()[0][0];
        assert!((a - b).abs() < 1e-9);
        assert!((0.0..=8.0).contains(&a));
    }

    #[test]
    fn deep_layers_are_upper_half() {
        assert_eq!(deep_layers(4), 2..4);
        assert_eq!(deep_layers(5), 2..5);
        assert_eq!(deep_layers(1), 0..1);
    }
}
