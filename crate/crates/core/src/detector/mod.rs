//! Trojan detection from a model's reaction to candidate perturbations.
//!
//! Every candidate from a fixed pool is injected into class-pure clean
//! samples. Candidates that flip nearly all of a class to one wrong label
//! (high MCR, low confidence in the true label) survive the outlier filter
//! and are described by a [`FeatureVector`]. The unsupervised rule calls a
//! model Trojan when some survivor has a hijacking head; the supervised rule
//! scores survivors with a logistic [`Discriminator`] trained on features of
//! known triggers.
//!
//! Detection reads only the model and clean samples. Ground-truth triggers
//! enter through [`ZooScan::trigger`], which only discriminator training
//! reads.

mod candidates;
mod discriminator;
mod filter;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use candidates::{candidate_pool, overlaps_trigger, PerturbationCandidate, GRID_STENCILS, SEQUENCE_PHRASES};
use discriminator::pick_threshold;
pub use discriminator::{fit_discriminator, Discriminator, DiscriminatorHyper, DISCRIMINATOR_SCHEMA};
pub use filter::{
    evaluate_candidate, extract_features, outlier_filter, CandidateStats, ClassSets, FeatureVector, FilterParams,
    FEATURE_NAMES,
};

use crate::analysis::HijackParams;
use crate::datasets::{Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::io_util::derive_seed;
use crate::transformer::{HeadId, TransformerModel};
use crate::zoo::{ModelLabel, Zoo, ZooEntry};

/// Hard negatives taken from each clean training model.
pub const HARD_NEGATIVES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub filter: FilterParams,
    pub hijack: HijackParams,
    /// Clean samples per class for the filter and features.
    pub per_class: usize,
    pub pool_seed: u64,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn for_task(task: &TaskSpec, seed: u64) -> Self {
        Self {
            filter: FilterParams::for_mode(task.mode()),
            hijack: HijackParams::default(),
            per_class: 20,
            pool_seed: derive_seed(seed, "pool", 0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.hijack.validate(self.per_class)
    }
}

/// Clean samples the detector may use, disjoint from zoo training and
/// evaluation data by seed.
pub fn detector_clean_sets(task: &TaskSpec, per_class: usize, seed: u64) -> Result<ClassSets> {
    let n = 2 * per_class * task.num_classes();
    let samples: Vec<Sample> = task.generate(n, derive_seed(seed, "detector-clean", 0)).samples;
    ClassSets::new(task, &samples, per_class)
}

/// One evaluated candidate with features under each hijacking setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannedCandidate {
    pub stats: CandidateStats,
    pub features: Vec<FeatureVector>,
    pub flagged: Vec<Vec<HeadId>>,
}

/// Filter results for a whole pool on one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScan {
    pub params: Vec<HijackParams>,
    pub survivors: Vec<ScannedCandidate>,
    /// Highest-MCR non-survivors, when requested.
    pub near_misses: Vec<ScannedCandidate>,
    pub pool_size: usize,
}

fn scan_candidate(
    model: &TransformerModel,
    sets: &ClassSets,
    stats: CandidateStats,
    params: &[HijackParams],
    seed: u64,
) -> Result<ScannedCandidate> {
    let (features, flagged) = extract_features(model, sets, &stats, params, seed)?
        .into_iter()
        .map(|(f, r)| (f, r.flagged()))
        .unzip();
    Ok(ScannedCandidate {
        stats,
        features,
        flagged,
    })
}

/// Runs the outlier filter over `pool` and extracts features for every
/// survivor (and the `near_misses` best rejected candidates).
pub fn scan_model(
    model: &TransformerModel,
    sets: &ClassSets,
    pool: &[PerturbationCandidate],
    filter: &FilterParams,
    params: &[HijackParams],
    near_misses: usize,
    seed: u64,
) -> Result<ModelScan> {
    let stats = outlier_filter(model, sets, pool, filter, seed)?;
    let (surv, mut rest): (Vec<CandidateStats>, Vec<CandidateStats>) = stats.into_iter().partition(|s| s.survives);
    rest.sort_by(|a, b| b.mcr.total_cmp(&a.mcr).then(a.candidate.id.cmp(&b.candidate.id)));
    rest.truncate(near_misses);
    let rest = rest
        .into_iter()
        .map(|s| evaluate_candidate(model, sets, &s.candidate, filter, false, seed))
        .collect::<Result<Vec<_>>>()?;
    let scan = |v: Vec<CandidateStats>| -> Result<Vec<ScannedCandidate>> {
        v.into_iter()
            .map(|s| scan_candidate(model, sets, s, params, seed))
            .collect()
    };
    Ok(ModelScan {
        params: params.to_vec(),
        survivors: scan(surv)?,
        near_misses: scan(rest)?,
        pool_size: pool.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectMode {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictCandidate {
    pub candidate: PerturbationCandidate,
    pub stats: CandidateStats,
    pub features: FeatureVector,
    pub hijacking_heads: Vec<HeadId>,
    /// Hijack count (unsupervised) or discriminator score (supervised).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub mode: DetectMode,
    pub is_trojan: bool,
    /// Maximum candidate score; 0 without survivors.
    pub score: f64,
    pub survivors: Vec<VerdictCandidate>,
    pub filter: FilterParams,
    pub hijack: HijackParams,
}

fn verdict(scan: &ModelScan, idx: usize, filter: &FilterParams, disc: Option<&Discriminator>) -> DetectionVerdict {
    let survivors: Vec<VerdictCandidate> = scan
        .survivors
        .iter()
        .map(|s| {
            let f = s.features[idx];
            VerdictCandidate {
                candidate: s.stats.candidate.clone(),
                stats: s.stats.clone(),
                features: f,
                hijacking_heads: s.flagged[idx].clone(),
                score: disc.map_or(f.num_hijacking_heads, |d| d.score(&f)),
            }
        })
        .collect();
    let score = survivors.iter().map(|c| c.score).fold(0.0, f64::max);
    let is_trojan = match disc {
        None => survivors.iter().any(|c| c.features.num_hijacking_heads >= 1.0),
        Some(d) => survivors.iter().any(|c| d.is_trojan(&c.features)),
    };
    DetectionVerdict {
        mode: if disc.is_some() {
            DetectMode::Supervised
        } else {
            DetectMode::Unsupervised
        },
        is_trojan,
        score,
        survivors,
        filter: *filter,
        hijack: scan.params[idx],
    }
}

/// Trojan iff some survivor has at least one hijacking head.
pub fn unsupervised_verdict(scan: &ModelScan, idx: usize, filter: &FilterParams) -> DetectionVerdict {
    verdict(scan, idx, filter, None)
}

/// Trojan iff some survivor scores above the discriminator threshold.
pub fn supervised_verdict(
    scan: &ModelScan,
    idx: usize,
    filter: &FilterParams,
    disc: &Discriminator,
) -> DetectionVerdict {
    verdict(scan, idx, filter, Some(disc))
}

pub fn detect_unsupervised(
    model: &TransformerModel,
    sets: &ClassSets,
    pool: &[PerturbationCandidate],
    config: &DetectorConfig,
) -> Result<DetectionVerdict> {
    config.validate()?;
    let scan = scan_model(model, sets, pool, &config.filter, &[config.hijack], 0, config.seed)?;
    Ok(unsupervised_verdict(&scan, 0, &config.filter))
}

pub fn detect_supervised(
    model: &TransformerModel,
    sets: &ClassSets,
    pool: &[PerturbationCandidate],
    disc: &Discriminator,
    config: &DetectorConfig,
) -> Result<DetectionVerdict> {
    config.validate()?;
    let scan = scan_model(model, sets, pool, &config.filter, &[config.hijack], 0, config.seed)?;
    Ok(supervised_verdict(&scan, 0, &config.filter, disc))
}

/// Scan of one zoo model plus, for Trojan models, the features of its
/// true trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooScan {
    pub id: String,
    pub label: ModelLabel,
    pub scan: ModelScan,
    pub trigger: Option<ScannedCandidate>,
    /// Survivor indices whose perturbation overlaps the trigger.
    pub overlapping: Vec<usize>,
}

pub fn scan_entry(
    zoo: &Zoo,
    entry: &ZooEntry,
    sets: &ClassSets,
    pool: &[PerturbationCandidate],
    config: &DetectorConfig,
    params: &[HijackParams],
) -> Result<ZooScan> {
    let model = zoo.load_model(entry)?;
    let scan = scan_model(&model, sets, pool, &config.filter, params, HARD_NEGATIVES, config.seed)?;
    let (trigger, overlapping) = match &entry.poison {
        Some(spec) => {
            let candidate = PerturbationCandidate {
                id: usize::MAX,
                perturbation: spec.trigger.clone(),
            };
            let stats = evaluate_candidate(&model, sets, &candidate, &config.filter, false, config.seed)?;
            let overlapping = scan
                .survivors
                .iter()
                .enumerate()
                .filter(|(_, s)| overlaps_trigger(&s.stats.candidate.perturbation, &spec.trigger))
                .map(|(i, _)| i)
                .collect();
            (
                Some(scan_candidate(&model, sets, stats, params, config.seed)?),
                overlapping,
            )
        }
        None => (None, vec![]),
    };
    Ok(ZooScan {
        id: entry.id.clone(),
        label: entry.label,
        scan,
        trigger,
        overlapping,
    })
}

/// Scans every healthy entry, in manifest order.
pub fn scan_zoo(zoo: &Zoo, config: &DetectorConfig, params: &[HijackParams]) -> Result<Vec<ZooScan>> {
    config.validate()?;
    for p in params {
        p.validate(config.per_class)?;
    }
    let task = zoo.manifest.task();
    let sets = detector_clean_sets(task, config.per_class, config.seed)?;
    let pool = candidate_pool(task, config.pool_seed);
    let entries: Vec<&ZooEntry> = zoo.manifest.healthy().collect();
    if entries.is_empty() {
        return Err(Error::EmptyZoo);
    }
    entries
        .par_iter()
        .map(|e| scan_entry(zoo, e, &sets, &pool, config, params))
        .collect()
}

/// Labelled discriminator examples: each Trojan's true trigger is positive;
/// survivors on clean models, non-overlapping survivors on Trojan models
/// and the near misses on clean models are negative.
pub fn training_examples(scans: &[&ZooScan], idx: usize) -> (Vec<FeatureVector>, Vec<bool>) {
    let mut x = vec![];
    let mut y = vec![];
    for s in scans {
        if let Some(t) = &s.trigger {
            x.push(t.features[idx]);
            y.push(true);
        }
        for (i, c) in s.scan.survivors.iter().enumerate() {
            if !s.overlapping.contains(&i) {
                x.push(c.features[idx]);
                y.push(false);
            }
        }
        if s.label == ModelLabel::Clean {
            for c in &s.scan.near_misses {
                x.push(c.features[idx]);
                y.push(false);
            }
        }
    }
    (x, y)
}

/// Trains on a set of zoo scans. Needs at least four models of each label.
pub fn train_discriminator(scans: &[&ZooScan], idx: usize, hyper: &DiscriminatorHyper) -> Result<Discriminator> {
    for label in [ModelLabel::Trojan, ModelLabel::Clean] {
        let n = scans.iter().filter(|s| s.label == label).count();
        if n < 4 {
            return Err(Error::InsufficientTrainingData(format!(
                "{n} {label:?} models; need at least 4"
            )));
        }
    }
    let (x, y) = training_examples(scans, idx);
    let mut disc = fit_discriminator(&x, &y, hyper)?;
    // Verdicts take the best survivor per model, so the cut is calibrated on
    // that maximum rather than on single candidates.
    let best: Vec<f64> = scans
        .iter()
        .map(|s| {
            s.scan
                .survivors
                .iter()
                .map(|c| disc.score(&c.features[idx]))
                .fold(0.0, f64::max)
        })
        .collect();
    let truth: Vec<bool> = scans.iter().map(|s| s.label == ModelLabel::Trojan).collect();
    disc.threshold = pick_threshold(&best, &truth).max(0.0);
    Ok(disc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub accuracy: f64,
    pub auc: f64,
}

/// Accuracy of `predicted` and Mann-Whitney AUC of `scores` against
/// `truth` (`true` = Trojan). Ties count one half.
pub fn evaluate_detector(truth: &[bool], predicted: &[bool], scores: &[f64]) -> Result<DetectorMetrics> {
    if truth.len() != predicted.len() || truth.len() != scores.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch("verdicts must cover every model".into()));
    }
    let correct = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    let pos: Vec<f64> = (0..truth.len()).filter(|&i| truth[i]).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..truth.len()).filter(|&i| !truth[i]).map(|i| scores[i]).collect();
    let auc = if pos.is_empty() || neg.is_empty() {
        0.5
    } else {
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    };
    Ok(DetectorMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: usize,
    pub unsupervised: DetectorMetrics,
    pub supervised: DetectorMetrics,
    /// Per model, in scan order: (unsupervised verdict, supervised verdict).
    pub verdicts: Vec<(String, bool, bool)>,
}

/// Stratified k-fold evaluation. The discriminator for each fold trains on
/// the other folds only; the unsupervised rule needs no training.
pub fn cross_validate(
    scans: &[ZooScan],
    idx: usize,
    folds: usize,
    filter: &FilterParams,
    hyper: &DiscriminatorHyper,
    seed: u64,
) -> Result<CrossValidation> {
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least two folds".into()));
    }
    let mut fold_of = vec![0; scans.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in [ModelLabel::Trojan, ModelLabel::Clean] {
        let mut idxs: Vec<usize> = (0..scans.len()).filter(|&i| scans[i].label == label).collect();
        idxs.shuffle(&mut rng);
        for (k, i) in idxs.into_iter().enumerate() {
            fold_of[i] = k % folds;
        }
    }
    let mut unsup = vec![(false, 0.0); scans.len()];
    let mut sup = vec![(false, 0.0); scans.len()];
    for f in 0..folds {
        let train: Vec<&ZooScan> = (0..scans.len())
            .filter(|&i| fold_of[i] != f)
            .map(|i| &scans[i])
            .collect();
        let disc = train_discriminator(
            &train,
            idx,
            &DiscriminatorHyper {
                seed: derive_seed(hyper.seed, "fold", f as u64),
                ..*hyper
            },
        )?;
        for i in (0..scans.len()).filter(|&i| fold_of[i] == f) {
            let u = unsupervised_verdict(&scans[i].scan, idx, filter);
            let s = supervised_verdict(&scans[i].scan, idx, filter, &disc);
            unsup[i] = (u.is_trojan, u.score);
            sup[i] = (s.is_trojan, s.score);
        }
    }
    let truth: Vec<bool> = scans.iter().map(|s| s.label == ModelLabel::Trojan).collect();
    let metrics = |v: &[(bool, f64)]| {
        evaluate_detector(
            &truth,
            &v.iter().map(|x| x.0).collect::<Vec<_>>(),
            &v.iter().map(|x| x.1).collect::<Vec<_>>(),
        )
    };
    Ok(CrossValidation {
        folds,
        unsupervised: metrics(&unsup)?,
        supervised: metrics(&sup)?,
        verdicts: scans
            .iter()
            .zip(unsup.iter().zip(&sup))
            .map(|(s, (u, p))| (s.id.clone(), u.0, p.0))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_verdicts() {
        let m = evaluate_detector(&[true, false, true], &[true, false, true], &[0.9, 0.1, 0.8]).unwrap();
        assert_eq!((m.accuracy, m.auc), (1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_half_auc() {
        let m = evaluate_detector(&[true, false, true, false], &[true; 4], &[0.3; 4]).unwrap();
        assert_eq!(m.auc, 0.5);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn hand_computed_auc() {
        // positives 0.8, 0.4; negatives 0.6, 0.4
        // pairs: (0.8>0.6)=1, (0.8>0.4)=1, (0.4<0.6)=0, (0.4=0.4)=0.5 -> 2.5/4
        let m = evaluate_detector(
            &[true, false, true, false],
            &[true, true, false, false],
            &[0.8, 0.6, 0.4, 0.4],
        )
        .unwrap();
        assert_eq!(m.auc, 0.625);
        assert_eq!(m.accuracy, 0.5);
    }
}
