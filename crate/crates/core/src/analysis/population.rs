use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cka::{cka_profile, functionality_drop, CkaProfile, FunctionalityDrop};
use super::distance::{distance_profile, DistanceProfile};
use super::hijack::{dev_fingerprint, report_from_traces, DevSample, HijackParams, HijackReport};
use crate::datasets::{matched_set, spurious_perturbation, MatchedSet, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::io_util::derive_seed;
use crate::transformer::{Input, TransformerModel};
use crate::zoo::{ModelLabel, Zoo, ZooEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub params: HijackParams,
    /// Perturbed development samples per model.
    pub dev_size: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            params: HijackParams::default(),
            dev_size: 40,
            seed: 0,
        }
    }
}

/// Matched development sets for one model: the probe perturbation (the
/// trigger, for Trojan models) and a spurious perturbation that is never the
/// trigger, both applied to the same clean samples outside the probe's
/// target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSets {
    pub poisoned: MatchedSet,
    pub spurious: MatchedSet,
}

impl ProbeSets {
    pub fn dev(&self) -> Vec<DevSample> {
        dev_samples(&self.poisoned)
    }
}

pub fn dev_samples(set: &MatchedSet) -> Vec<DevSample> {
    set.perturbed
        .iter()
        .zip(&set.anchors)
        .map(|(s, a)| DevSample {
            input: s.input.clone(),
            anchors: a.clone(),
        })
        .collect()
}

/// Clean development base for a zoo; disjoint in seed from training and
/// evaluation data.
pub fn dev_base(task: &TaskSpec, dev_size: usize, seed: u64) -> Vec<Sample> {
    // enough headroom to drop the target class
    let n = dev_size * task.num_classes() / (task.num_classes() - 1).max(1) + dev_size;
    task.generate(n, derive_seed(seed, "dev", 0)).samples
}

pub fn probe_sets(task: &TaskSpec, entry: &ZooEntry, base: &[Sample], dev_size: usize, seed: u64) -> Result<ProbeSets> {
    let probe = &entry.probe;
    let s = derive_seed(seed, &format!("probe/{}", entry.id), 0);
    let poisoned = matched_set(
        base,
        task,
        &probe.trigger,
        Some(probe.target_class),
        Some(probe.target_class),
        s,
    )?
    .take(dev_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, "spurious", 0));
    let perturbation = spurious_perturbation(task, Some(&probe.trigger), &mut rng);
    let spurious = matched_set(
        &poisoned.clean,
        task,
        &perturbation,
        None,
        None,
        derive_seed(s, "spurious", 1),
    )?;
    Ok(ProbeSets { poisoned, spurious })
}

/// Every per-model analysis for one zoo entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnalysis {
    pub id: String,
    pub label: ModelLabel,
    pub hijack: HijackReport,
    pub distance: DistanceProfile,
    pub cka: CkaProfile,
    pub drop: FunctionalityDrop,
}

fn inputs(samples: &[Sample]) -> Vec<Input> {
    samples.iter().map(|s| s.input.clone()).collect()
}

/// Hijacking reports for several parameter settings from one forward pass.
pub fn hijack_sweep(model: &TransformerModel, dev: &[DevSample], params: &[HijackParams]) -> Result<Vec<HijackReport>> {
    let traces = model.forward(&dev.iter().map(|d| d.input.clone()).collect::<Vec<_>>(), true)?;
    let anchors: Vec<&[usize]> = dev.iter().map(|d| d.anchors.as_slice()).collect();
    let fp = dev_fingerprint(dev);
    params
        .iter()
        .map(|p| report_from_traces(&traces, &anchors, p, fp.clone()))
        .collect()
}

pub fn analyze_model(zoo: &Zoo, entry: &ZooEntry, config: &AnalysisConfig, base: &[Sample]) -> Result<ModelAnalysis> {
    let task = zoo.manifest.task();
    let model = zoo.load_model(entry)?;
    let sets = probe_sets(task, entry, base, config.dev_size, config.seed)?;
    let hijack = hijack_sweep(&model, &sets.dev(), &[config.params])?.remove(0);
    let heads = hijack.flagged();
    let clean = inputs(&sets.poisoned.clean);
    let distance = distance_profile(
        &model,
        &clean,
        &inputs(&sets.poisoned.perturbed),
        &inputs(&sets.spurious.perturbed),
    )?;
    let cka = cka_profile(&model, &clean, &inputs(&sets.poisoned.perturbed), &heads)?;
    let eval = zoo.eval_sets(entry)?;
    let drop = functionality_drop(&model, &zoo.eval_base(), &eval.perturbed, &heads)?;
    Ok(ModelAnalysis {
        id: entry.id.clone(),
        label: entry.label,
        hijack,
        distance,
        cka,
        drop,
    })
}

/// Runs [`analyze_model`] on every healthy entry, in manifest order.
pub fn analyze_zoo(zoo: &Zoo, config: &AnalysisConfig) -> Result<Vec<ModelAnalysis>> {
    let entries: Vec<&ZooEntry> = zoo.manifest.healthy().collect();
    if entries.is_empty() {
        return Err(Error::EmptyZoo);
    }
    let base = dev_base(zoo.manifest.task(), config.dev_size, config.seed);
    entries
        .par_iter()
        .map(|e| analyze_model(zoo, e, config, &base))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub models: usize,
    pub with_hijacking: usize,
    /// Fraction of models with at least one hijacking head.
    pub fraction: f64,
    pub mean_heads: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub trojan: LabelStats,
    pub clean: LabelStats,
}

impl PopulationStats {
    pub fn gap(&self) -> f64 {
        self.trojan.fraction - self.clean.fraction
    }
}

fn label_stats<'a>(reports: impl Iterator<Item = &'a HijackReport>) -> LabelStats {
    let counts: Vec<usize> = reports.map(HijackReport::count).collect();
    let models = counts.len();
    let with_hijacking = counts.iter().filter(|&&c| c > 0).count();
    let denom = models.max(1) as f64;
    LabelStats {
        models,
        with_hijacking,
        fraction: with_hijacking as f64 / denom,
        mean_heads: counts.iter().sum::<usize>() as f64 / denom,
    }
}

pub fn population_stats(reports: &[(ModelLabel, &HijackReport)]) -> Result<PopulationStats> {
    if reports.is_empty() {
        return Err(Error::EmptyZoo);
    }
    let of = |label| reports.iter().filter(move |(l, _)| *l == label).map(|(_, r)| *r);
    Ok(PopulationStats {
        trojan: label_stats(of(ModelLabel::Trojan)),
        clean: label_stats(of(ModelLabel::Clean)),
    })
}

/// Mean hijacking heads per layer.
pub fn per_layer_counts(reports: &[&HijackReport]) -> Result<Vec<f64>> {
    let first = reports.first().ok_or(Error::EmptyZoo)?;
    let mut out = vec![0.0; first.num_layers];
    for r in reports {
        if r.num_layers != first.num_layers {
            return Err(Error::ShapeMismatch("reports from models of different depth".into()));
        }
        for (o, c) in out.iter_mut().zip(r.per_layer()) {
            *o += c as f64;
        }
    }
    for o in &mut out {
        *o /= reports.len() as f64;
    }
    Ok(out)
}
