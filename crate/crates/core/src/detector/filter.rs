use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::candidates::PerturbationCandidate;
use crate::analysis::{report_from_traces, HijackParams, HijackReport};
use crate::datasets::{matched_set, MatchedSet, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::io_util::derive_seed;
use crate::transformer::{AttentionTrace, HeadId, Input, Mode, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// MCR must exceed this.
    pub gamma: f64,
    /// AveConf must stay below this.
    pub epsilon: f64,
}

impl FilterParams {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Sequence => Self {
                gamma: 0.9,
                epsilon: 0.05,
            },
            Mode::Grid => Self {
                gamma: 0.8,
                epsilon: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn passes(&self, mcr: f64, ave_conf: f64) -> bool {
        mcr > self.gamma && ave_conf < self.epsilon
    }
}

/// Clean samples grouped by label; every group is class-pure.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSets {
    pub task: TaskSpec,
    pub by_class: Vec<Vec<Sample>>,
}

impl ClassSets {
    /// The first `per_class` samples of each label, in input order.
    pub fn new(task: &TaskSpec, samples: &[Sample], per_class: usize) -> Result<Self> {
        let mut by_class = vec![vec![]; task.num_classes()];
        for s in samples {
            if s.label >= by_class.len() {
                return Err(Error::IndexOutOfRange(format!("label {}", s.label)));
            }
            if by_class[s.label].len() < per_class {
                by_class[s.label].push(s.clone());
            }
        }
        if by_class.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCleanSet);
        }
        Ok(Self {
            task: task.clone(),
            by_class,
        })
    }

    fn injected(&self, class: usize, candidate: &PerturbationCandidate, seed: u64) -> Result<MatchedSet> {
        matched_set(
            &self.by_class[class],
            &self.task,
            &candidate.perturbation,
            None,
            None,
            derive_seed(seed, "inject", (candidate.id as u64) << 8 | class as u64),
        )
    }
}

/// Outlier-filter statistics of one candidate on one source class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub candidate: PerturbationCandidate,
    pub source_class: usize,
    /// Modal wrong prediction; `None` when every prediction was correct.
    pub wrong_label: Option<usize>,
    pub mcr: f64,
    pub ave_conf: f64,
    /// Mean probability of `wrong_label`.
    pub wrong_conf: f64,
    pub samples: usize,
    /// False when early rejection stopped before every sample was seen.
    pub complete: bool,
    pub survives: bool,
}

fn class_stats(
    source_class: usize,
    candidate: &PerturbationCandidate,
    probs: &[Vec<f64>],
    params: &FilterParams,
) -> CandidateStats {
    let n = probs.len();
    let mut wrong: BTreeMap<usize, usize> = BTreeMap::new();
    for p in probs {
        let pred = top(p);
        if pred != source_class {
            *wrong.entry(pred).or_default() += 1;
        }
    }
    // ties go to the lowest label
    let wrong_label = wrong
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&l, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l);
    let denom = n.max(1) as f64;
    let mcr = wrong_label.map_or(0.0, |t| wrong[&t] as f64 / denom);
    let ave_conf = if n == 0 {
        1.0
    } else {
        probs.iter().map(|p| p[source_class]).sum::<f64>() / denom
    };
    let wrong_conf = wrong_label.map_or(0.0, |t| probs.iter().map(|p| p[t]).sum::<f64>() / denom);
    CandidateStats {
        candidate: candidate.clone(),
        source_class,
        wrong_label,
        mcr,
        ave_conf,
        wrong_conf,
        samples: n,
        complete: true,
        survives: n > 0 && params.passes(mcr, ave_conf),
    }
}

fn probabilities(model: &TransformerModel, inputs: &[Input]) -> Result<Vec<Vec<f64>>> {
    Ok(model
        .forward(inputs, false)?
        .iter()
        .map(AttentionTrace::probabilities)
        .collect())
}

/// Samples per forward chunk when early rejection is on.
const CHUNK: usize = 4;

/// Per-class statistics of one candidate. The returned entry is the best
/// source class: a passing class if any (highest MCR first), otherwise the
/// class with the highest MCR.
///
/// With `prune`, a class stops being evaluated once its MCR can no longer
/// exceed gamma; survival is unaffected but the statistics of rejected
/// classes then cover only the evaluated prefix.
pub fn evaluate_candidate(
    model: &TransformerModel,
    sets: &ClassSets,
    candidate: &PerturbationCandidate,
    params: &FilterParams,
    prune: bool,
    seed: u64,
) -> Result<CandidateStats> {
    let mut best: Option<CandidateStats> = None;
    for class in 0..sets.by_class.len() {
        if sets.by_class[class].is_empty() {
            continue;
        }
        let injected = sets.injected(class, candidate, seed)?;
        let inputs: Vec<Input> = injected.perturbed.iter().map(|s| s.input.clone()).collect();
        let n = inputs.len();
        let mut probs = Vec::with_capacity(n);
        let mut pruned = false;
        if prune {
            let mut correct = 0;
            for chunk in inputs.chunks(CHUNK) {
                let p = probabilities(model, chunk)?;
                correct += p.iter().filter(|p| top(p) == class).count();
                probs.extend(p);
                // best reachable MCR with every remaining sample on one label
                if ((n - correct) as f64 / n as f64) <= params.gamma && probs.len() < n {
                    pruned = true;
                    break;
                }
            }
        } else {
            probs = probabilities(model, &inputs)?;
        }
        let mut stats = class_stats(class, candidate, &probs, params);
        stats.complete = !pruned;
        stats.survives &= !pruned;
        let better = match &best {
            None => true,
            Some(b) => (stats.survives, stats.mcr) > (b.survives, b.mcr),
        };
        if better {
            best = Some(stats);
        }
    }
    best.ok_or(Error::EmptyCleanSet)
}

fn top(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b })
}

/// Statistics for every candidate, in pool order; survivors have
/// `survives == true`.
pub fn outlier_filter(
    model: &TransformerModel,
    sets: &ClassSets,
    candidates: &[PerturbationCandidate],
    params: &FilterParams,
    seed: u64,
) -> Result<Vec<CandidateStats>> {
    params.validate()?;
    candidates
        .iter()
        .map(|c| evaluate_candidate(model, sets, c, params, true, seed))
        .collect()
}

pub const FEATURE_NAMES: [&str; 6] = [
    "num_hijacking_heads",
    "mean_attention_to_candidate",
    "wrong_prediction_confidence",
    "wrong_prediction_accuracy",
    "ave_conf_true_label",
    "max_per_layer_hijack_count",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub num_hijacking_heads: f64,
    pub mean_attention_to_candidate: f64,
    pub wrong_prediction_confidence: f64,
    pub wrong_prediction_accuracy: f64,
    pub ave_conf_true_label: f64,
    pub max_per_layer_hijack_count: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.num_hijacking_heads,
            self.mean_attention_to_candidate,
            self.wrong_prediction_confidence,
            self.wrong_prediction_accuracy,
            self.ave_conf_true_label,
            self.max_per_layer_hijack_count,
        ]
    }

    pub fn in_range(&self, num_heads_total: usize, num_heads: usize) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let count = |v: f64, max: usize| v.fract() == 0.0 && (0.0..=max as f64).contains(&v);
        self.to_array().iter().all(|v| v.is_finite())
            && count(self.num_hijacking_heads, num_heads_total)
            && count(self.max_per_layer_hijack_count, num_heads)
            && unit(self.mean_attention_to_candidate)
            && unit(self.wrong_prediction_confidence)
            && unit(self.wrong_prediction_accuracy)
            && unit(self.ave_conf_true_label)
    }
}

/// Mean attention mass that content rows put on the anchor columns,
/// averaged over `heads` and samples.
fn attention_to_anchors(traces: &[AttentionTrace], anchors: &[Vec<usize>], heads: &[HeadId]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (t, a) in traces.iter().zip(anchors) {
        let offset = usize::from(t.class_token);
        for h in heads {
            let m = &t.attention[h.layer][h.head];
            let rows = t.active_rows();
            let count = rows.len();
            let mass: f64 = rows
                .map(|i| a.iter().map(|&p| f64::from(m.get(i, p + offset))).sum::<f64>())
                .sum();
            total += mass / count.max(1) as f64;
            n += 1;
        }
    }
    (total / n.max(1) as f64).clamp(0.0, 1.0)
}

/// Features of `stats.candidate` on its source class, one vector per
/// hijacking parameter setting.
pub fn extract_features(
    model: &TransformerModel,
    sets: &ClassSets,
    stats: &CandidateStats,
    params: &[HijackParams],
    seed: u64,
) -> Result<Vec<(FeatureVector, HijackReport)>> {
    let injected = sets.injected(stats.source_class, &stats.candidate, seed)?;
    let inputs: Vec<Input> = injected.perturbed.iter().map(|s| s.input.clone()).collect();
    let traces = model.forward(&inputs, true)?;
    let anchors: Vec<&[usize]> = injected.anchors.iter().map(Vec::as_slice).collect();
    let cfg = model.config();
    let all_heads: Vec<HeadId> = (0..cfg.num_layers)
        .flat_map(|l| (0..cfg.num_heads).map(move |h| HeadId::new(l, h)))
        .collect();
    params
        .iter()
        .map(|p| {
            let report = report_from_traces(&traces, &anchors, p, String::new())?;
            let flagged = report.flagged();
            // all heads stand in when none is flagged, keeping the feature
            // comparable across models
            let heads = if flagged.is_empty() { &all_heads } else { &flagged };
            let f = FeatureVector {
                num_hijacking_heads: flagged.len() as f64,
                mean_attention_to_candidate: attention_to_anchors(&traces, &injected.anchors, heads),
                wrong_prediction_confidence: stats.wrong_conf,
                wrong_prediction_accuracy: stats.mcr,
                ave_conf_true_label: stats.ave_conf,
                max_per_layer_hijack_count: report.per_layer().into_iter().max().unwrap_or(0) as f64,
            };
            Ok((f, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand() -> PerturbationCandidate {
        PerturbationCandidate {
            id: 0,
            perturbation: crate::datasets::Perturbation::Tokens(vec![1]),
        }
    }

    fn probs(labels: &[usize]) -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                let mut p = vec![0.0; 3];
                p[l] = 1.0;
                p
            })
            .collect()
    }

    #[test]
    fn strict_gamma_boundary() {
        let params = FilterParams {
            gamma: 0.9,
            epsilon: 0.5,
        };
        let nine = class_stats(0, &cand(), &probs(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 0]), &params);
        assert_eq!(nine.mcr, 0.9);
        assert!(!nine.survives);
        let ten = class_stats(0, &cand(), &probs(&[1; 10]), &params);
        assert_eq!(ten.mcr, 1.0);
        assert!(ten.survives);
    }

    #[test]
    fn strict_epsilon_boundary() {
        let params = FilterParams {
            gamma: 0.1,
            epsilon: 0.25,
        };
        // 1 of 4 correct: AveConf exactly 0.25
        let s = class_stats(0, &cand(), &probs(&[0, 1, 1, 1]), &params);
        assert_eq!(s.ave_conf, 0.25);
        assert!(!s.survives);
    }

    #[test]
    fn modal_wrong_label_ties_to_lowest() {
        let params = FilterParams::for_mode(Mode::Sequence);
        let s = class_stats(0, &cand(), &probs(&[2, 1, 2, 1]), &params);
        assert_eq!(s.wrong_label, Some(1));
        assert_eq!(s.mcr, 0.5);
    }

    #[test]
    fn all_correct_has_no_wrong_label() {
        let params = FilterParams::for_mode(Mode::Grid);
        let s = class_stats(2, &cand(), &probs(&[2, 2]), &params);
        assert_eq!(s.wrong_label, None);
        assert_eq!((s.mcr, s.wrong_conf, s.ave_conf), (0.0, 0.0, 1.0));
    }
}
