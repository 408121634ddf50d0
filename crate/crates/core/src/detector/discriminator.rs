use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filter::{FeatureVector, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const DISCRIMINATOR_SCHEMA: u32 = 1;

/// Logistic scorer over [`FeatureVector`]s in raw feature units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub schema_version: u32,
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// A score strictly above this is Trojan.
    pub threshold: f64,
}

impl Discriminator {
    pub fn zero(threshold: f64) -> Self {
        Self {
            schema_version: DISCRIMINATOR_SCHEMA,
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.0; FEATURE_NAMES.len()],
            bias: 0.0,
            threshold,
        }
    }

    pub fn score(&self, f: &FeatureVector) -> f64 {
        let z: f64 = self.weights.iter().zip(f.to_array()).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    pub fn is_trojan(&self, f: &FeatureVector) -> bool {
        self.score(f) > self.threshold
    }

    fn check(&self, origin: &Path) -> Result<()> {
        if self.schema_version != DISCRIMINATOR_SCHEMA {
            return Err(Error::format(
                origin,
                format!("unsupported schema {}", self.schema_version),
            ));
        }
        if self.features != FEATURE_NAMES || self.weights.len() != FEATURE_NAMES.len() {
            return Err(Error::format(origin, "feature set does not match this build"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("discriminator serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let d: Discriminator = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        d.check(origin)?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, path)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorHyper {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Share of each class held out to pick the threshold.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DiscriminatorHyper {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 0.5,
            l2: 1e-3,
            holdout: 0.25,
            seed: 0,
        }
    }
}

/// Full-batch logistic regression on standardised features; returns
/// weights and bias in raw units.
fn fit_logistic(x: &[[f64; 6]], y: &[bool], hyper: &DiscriminatorHyper) -> (Vec<f64>, f64) {
    let d = 6;
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect();
    // balance the classes so a rare label still moves the boundary
    let pos = y.iter().filter(|&&b| b).count().max(1) as f64;
    let neg = y.iter().filter(|&&b| !b).count().max(1) as f64;
    let weight = |b: bool| if b { n / (2.0 * pos) } else { n / (2.0 * neg) };
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..hyper.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(zi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
            let err = weight(yi) * (p - f64::from(u8::from(yi)));
            for j in 0..d {
                gw[j] += err * zi[j];
            }
            gb += err;
        }
        for j in 0..d {
            w[j] -= hyper.learning_rate * (gw[j] / n + hyper.l2 * w[j]);
        }
        b -= hyper.learning_rate * gb / n;
    }
    let raw_w: Vec<f64> = (0..d).map(|j| w[j] / std[j]).collect();
    let raw_b = b - (0..d).map(|j| w[j] * mean[j] / std[j]).sum::<f64>();
    (raw_w, raw_b)
}

/// Threshold maximising balanced accuracy over `scores`; ties go to the
/// midpoint of the widest gap among the optimal cut points.
pub(crate) fn pick_threshold(scores: &[f64], y: &[bool]) -> f64 {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cuts = vec![sorted[0] - 1e-6];
    cuts.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(sorted[sorted.len() - 1]);
    let balanced = |t: f64| {
        let (mut tp, mut p, mut tn, mut n) = (0, 0, 0, 0);
        for (&s, &l) in scores.iter().zip(y) {
            if l {
                p += 1;
                tp += usize::from(s > t);
            } else {
                n += 1;
                tn += usize::from(s <= t);
            }
        }
        0.5 * (tp as f64 / p.max(1) as f64 + tn as f64 / n.max(1) as f64)
    };
    let best = cuts.iter().map(|&t| balanced(t)).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<f64> = cuts.iter().copied().filter(|&t| balanced(t) == best).collect();
    // choose the middle winner so the cut sits away from both classes
    winners[winners.len() / 2]
}

/// Trains a discriminator on labelled feature vectors (`true` = trigger).
pub fn fit_discriminator(x: &[FeatureVector], y: &[bool], hyper: &DiscriminatorHyper) -> Result<Discriminator> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features for {} labels",
            x.len(),
            y.len()
        )));
    }
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::InsufficientTrainingData(format!(
            "{} positive and {} negative examples; need at least 2 of each",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut fit_idx = vec![];
    let mut hold_idx = vec![];
    for mut group in [pos, neg] {
        group.shuffle(&mut rng);
        let h = ((group.len() as f64 * hyper.holdout).round() as usize).clamp(1, group.len() - 1);
        hold_idx.extend_from_slice(&group[..h]);
        fit_idx.extend_from_slice(&group[h..]);
    }
    fit_idx.sort_unstable();
    hold_idx.sort_unstable();
    let rows = |idx: &[usize]| -> (Vec<[f64; 6]>, Vec<bool>) {
        (
            idx.iter().map(|&i| x[i].to_array()).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
    };
    let (fx, fy) = rows(&fit_idx);
    let (weights, bias) = fit_logistic(&fx, &fy, hyper);
    let mut d = Discriminator {
        weights,
        bias,
        ..Discriminator::zero(0.5)
    };
    let (hx, hy) = rows(&hold_idx);
    let scores: Vec<f64> = hx
        .iter()
        .map(|r| sigmoid(r.iter().zip(&d.weights).map(|(a, b)| a * b).sum::<f64>() + d.bias))
        .collect();
    d.threshold = pick_threshold(&scores, &hy);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(a: f64, b: f64) -> FeatureVector {
        FeatureVector {
            num_hijacking_heads: a,
            mean_attention_to_candidate: b,
            wrong_prediction_confidence: 0.5,
            wrong_prediction_accuracy: 0.5,
            ave_conf_true_label: 0.1,
            max_per_layer_hijack_count: 0.0,
        }
    }

    #[test]
    fn separable_fixture_is_fit_exactly() {
        let mut x = vec![];
        let mut y = vec![];
        for i in 0..20 {
            x.push(fv(3.0 + (i % 4) as f64, 0.5));
            y.push(true);
            x.push(fv((i % 2) as f64, 0.1));
            y.push(false);
        }
        let d = fit_discriminator(&x, &y, &DiscriminatorHyper::default()).unwrap();
        assert!(x.iter().zip(&y).all(|(f, &l)| d.is_trojan(f) == l));
    }

    #[test]
    fn zero_discriminator_says_clean() {
        let d = Discriminator::zero(0.5);
        assert_eq!(d.score(&fv(9.0, 1.0)), 0.5);
        assert!(!d.is_trojan(&fv(9.0, 1.0)));
    }

    #[test]
    fn too_few_examples() {
        let err = fit_discriminator(
            &[fv(1.0, 0.0), fv(0.0, 0.0)],
            &[true, false],
            &DiscriminatorHyper::default(),
        );
        assert!(matches!(err, Err(Error::InsufficientTrainingData(_))));
    }

    #[test]
    fn threshold_maximises_balanced_accuracy() {
        let t = pick_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert!(t > 0.2 && t < 0.8);
    }

    #[test]
    fn json_round_trip() {
        let mut d = Discriminator::zero(0.37);
        d.weights = vec![0.1, -2.5, 1e-17, 3.0, 0.0, 7.25];
        d.bias = -0.123456789012345;
        let p = Path::new("mem");
        assert_eq!(Discriminator::from_json(&d.to_json(), p).unwrap(), d);
        let mut bad = d.clone();
        bad.features.pop();
        assert!(Discriminator::from_json(&bad.to_json(), p).is_err());
    }
}
