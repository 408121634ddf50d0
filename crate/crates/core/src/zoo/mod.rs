//! Populations of labelled Trojan and clean models.
//!
//! A zoo directory holds `manifest.json` plus one model container per entry
//! under `models/`. Every random draw (datasets, trigger specs, training
//! order) is derived from the zoo seed, so a given configuration always
//! produces byte-identical files.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{matched_set, poison_dataset, MatchedSet, PoisonSpec, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::io_util::{derive_seed, write_atomic};
use crate::transformer::{train, Input, TrainHyper, TransformerModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelLabel {
    Trojan,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthFloors {
    pub clean_accuracy: f64,
    /// Applies to Trojan entries only.
    pub asr: f64,
}

impl Default for HealthFloors {
    fn default() -> Self {
        Self {
            clean_accuracy: 0.90,
            asr: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub task: TaskSpec,
    pub count_trojan: usize,
    pub count_clean: usize,
    /// The seed field is ignored; each model gets a derived one.
    pub hyper: TrainHyper,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub floors: HealthFloors,
    pub max_attempts: usize,
    /// Trigger length in sequence mode.
    pub phrase_len: usize,
}

impl ZooConfig {
    pub fn new(task: TaskSpec, count_trojan: usize, count_clean: usize, seed: u64) -> Self {
        Self {
            task,
            count_trojan,
            count_clean,
            hyper: TrainHyper::default(),
            train_size: 800,
            eval_size: 300,
            seed,
            floors: HealthFloors::default(),
            max_attempts: 3,
            phrase_len: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count_trojan == 0 || self.count_clean == 0 {
            return Err(Error::InvalidArgument("zoo needs at least one model per label".into()));
        }
        if self.train_size == 0 || self.eval_size == 0 || self.max_attempts == 0 {
            return Err(Error::InvalidArgument(
                "train_size, eval_size and max_attempts must be positive".into(),
            ));
        }
        for (name, v) in [("clean accuracy", self.floors.clean_accuracy), ("asr", self.floors.asr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} floor {v} outside [0, 1]")));
            }
        }
        if !(1..=3).contains(&self.phrase_len) {
            return Err(Error::InvalidArgument(format!(
                "phrase_len {} outside 1..=3",
                self.phrase_len
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        crate::io_util::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub clean_accuracy: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub id: String,
    /// Relative to the zoo directory.
    pub path: PathBuf,
    pub label: ModelLabel,
    /// Poisoning the model was trained with; `None` for clean models.
    pub poison: Option<PoisonSpec>,
    /// Spec used to probe the model: the trigger for Trojan models, a
    /// random unused spec for clean ones.
    pub probe: PoisonSpec,
    pub training_seed: u64,
    pub dataset_seed: u64,
    pub attempts: usize,
    pub healthy: bool,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub version: u32,
    pub task_fingerprint: String,
    pub config: ZooConfig,
    pub entries: Vec<ZooEntry>,
}

impl ZooManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let m: ZooManifest = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported manifest version {}", m.version),
            ));
        }
        for e in &m.entries {
            if (e.label == ModelLabel::Trojan) != e.poison.is_some() {
                return Err(Error::format(
                    origin,
                    format!("entry {}: poison spec does not match label", e.id),
                ));
            }
        }
        Ok(m)
    }

    pub fn healthy(&self) -> impl Iterator<Item = &ZooEntry> {
        self.entries.iter().filter(|e| e.healthy)
    }

    pub fn task(&self) -> &TaskSpec {
        &self.config.task
    }
}

/// A manifest bound to the directory its model paths are relative to.
#[derive(Debug, Clone)]
pub struct Zoo {
    pub root: PathBuf,
    pub manifest: ZooManifest,
}

impl Zoo {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: ZooManifest::from_json(&text, &path)?,
        })
    }

    pub fn load_model(&self, entry: &ZooEntry) -> Result<TransformerModel> {
        TransformerModel::load(&self.root.join(&entry.path))
    }

    /// Held-out clean samples shared by every entry's evaluation.
    pub fn eval_base(&self) -> Vec<Sample> {
        eval_base(&self.manifest.config)
    }

    /// Clean evaluation samples and their probe-perturbed copies.
    pub fn eval_sets(&self, entry: &ZooEntry) -> Result<MatchedSet> {
        eval_sets(&self.manifest.config, entry, &self.eval_base())
    }
}

fn eval_base(config: &ZooConfig) -> Vec<Sample> {
    config
        .task
        .generate(config.eval_size, derive_seed(config.seed, "eval", 0))
        .samples
}

/// Poisoned evaluation set for an entry. For Trojan models it skips the
/// target class, so ASR measures flips; for clean models the probe covers
/// every class, so ASR sits near chance.
fn eval_sets(config: &ZooConfig, entry: &ZooEntry, base: &[Sample]) -> Result<MatchedSet> {
    let skip = (entry.label == ModelLabel::Trojan).then_some(entry.probe.target_class);
    matched_set(
        base,
        &config.task,
        &entry.probe.trigger,
        Some(entry.probe.target_class),
        skip,
        derive_seed(config.seed, &format!("eval-probe/{}", entry.id), 0),
    )
}

/// Clean accuracy on `clean` and the fraction of `poisoned` predicted as
/// each sample's (target) label.
pub fn eval_model(model: &TransformerModel, clean: &[Sample], poisoned: &[Sample]) -> Result<Metrics> {
    Ok(Metrics {
        clean_accuracy: accuracy(model, clean)?,
        asr: accuracy(model, poisoned)?,
    })
}

/// Fraction of samples predicted as their label; 0 for an empty set.
pub fn accuracy(model: &TransformerModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<Input> = samples.iter().map(|s| s.input.clone()).collect();
    let logits = model.logits(&inputs)?;
    let hits = logits
        .iter()
        .zip(samples)
        .filter(|(l, s)| crate::transformer::argmax(l) == s.label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

struct Built {
    entry: ZooEntry,
    model: TransformerModel,
}

fn build_entry(config: &ZooConfig, label: ModelLabel, index: usize, base: &[Sample]) -> Result<Built> {
    let (prefix, stream) = match label {
        ModelLabel::Trojan => ("trojan", 0u64),
        ModelLabel::Clean => ("clean", 1u64 << 32),
    };
    let id = format!("{prefix}-{index:03}");
    let key = stream + index as u64;
    let model_config = config.task.model_config();
    let mut last = None;
    for attempt in 0..config.max_attempts {
        let attempt_key = key * 16 + attempt as u64;
        let dataset_seed = derive_seed(config.seed, "dataset", attempt_key);
        let training_seed = derive_seed(config.seed, "train", attempt_key);
        let mut spec_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "spec", attempt_key));
        let probe = PoisonSpec::random(&config.task, config.phrase_len, &mut spec_rng);
        let clean_data = config.task.generate(config.train_size, dataset_seed);
        let data = match label {
            ModelLabel::Trojan => poison_dataset(&clean_data, &probe, derive_seed(dataset_seed, "poison", 0))?,
            ModelLabel::Clean => clean_data,
        };
        let hyper = TrainHyper {
            seed: training_seed,
            accuracy_floor: None,
            ..config.hyper.clone()
        };
        let model = match train(&model_config, &data, &hyper) {
            Ok(m) => m,
            Err(Error::DivergedTraining { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut entry = ZooEntry {
            id: id.clone(),
            path: PathBuf::from("models").join(format!("{id}.model")),
            label,
            poison: (label == ModelLabel::Trojan).then(|| probe.clone()),
            probe,
            training_seed,
            dataset_seed,
            attempts: attempt + 1,
            healthy: false,
            metrics: Metrics {
                clean_accuracy: 0.0,
                asr: 0.0,
            },
        };
        let sets = eval_sets(config, &entry, base)?;
        entry.metrics = eval_model(&model, base, &sets.perturbed)?;
        entry.healthy = entry.metrics.clean_accuracy >= config.floors.clean_accuracy
            && (label == ModelLabel::Clean || entry.metrics.asr >= config.floors.asr);
        let done = entry.healthy;
        last = Some(Built { entry, model });
        if done {
            break;
        }
    }
    last.ok_or(Error::DivergedTraining { epoch: 0, step: 0 })
}

/// Trains the zoo in memory on up to `jobs` threads and returns the manifest
/// and models in entry order.
pub fn train_zoo(config: &ZooConfig, jobs: usize) -> Result<(ZooManifest, Vec<TransformerModel>)> {
    config.validate()?;
    let base = eval_base(config);
    let plan: Vec<(ModelLabel, usize)> = (0..config.count_trojan)
        .map(|i| (ModelLabel::Trojan, i))
        .chain((0..config.count_clean).map(|i| (ModelLabel::Clean, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let built: Vec<Built> = pool.install(|| {
        plan.par_iter()
            .map(|&(label, i)| build_entry(config, label, i, &base))
            .collect::<Result<_>>()
    })?;
    let failed = built.iter().filter(|b| !b.entry.healthy).count();
    if failed * 5 > built.len() {
        return Err(Error::ZooBuildFailure {
            failed,
            total: built.len(),
        });
    }
    let (entries, models) = built.into_iter().map(|b| (b.entry, b.model)).unzip();
    let manifest = ZooManifest {
        version: MANIFEST_VERSION,
        task_fingerprint: config.task.fingerprint(),
        config: config.clone(),
        entries,
    };
    Ok((manifest, models))
}

/// Builds the zoo and writes it under `root`. Nothing is written unless the
/// whole build meets the failure budget; the manifest is written last.
pub fn build_zoo(config: &ZooConfig, root: &Path, jobs: usize) -> Result<Zoo> {
    let (manifest, models) = train_zoo(config, jobs)?;
    for (entry, model) in manifest.entries.iter().zip(&models) {
        model.save(&root.join(&entry.path))?;
    }
    write_atomic(&root.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(Zoo {
        root: root.to_path_buf(),
        manifest,
    })
}

/// Reloads every model and recomputes its metrics.
pub fn reevaluate(zoo: &Zoo) -> Result<Vec<Metrics>> {
    let base = zoo.eval_base();
    zoo.manifest
        .entries
        .iter()
        .map(|e| {
            let model = zoo.load_model(e)?;
            let sets = eval_sets(&zoo.manifest.config, e, &base)?;
            eval_model(&model, &base, &sets.perturbed)
        })
        .collect()
}
