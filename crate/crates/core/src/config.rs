//! Run configuration: a TOML file merged under command-line flags.
//!
//! ```toml
//! seed = 7
//! jobs = 4
//! out = "zoo-seq"
//!
//! [task]
//! mode = "sequence"   # or "grid"
//! classes = 4
//!
//! [zoo]
//! trojan = 20
//! clean = 20
//! train_size = 800
//! eval_size = 300
//! epochs = 14
//! batch_size = 16
//! learning_rate = 0.1
//! phrase_len = 1
//! max_attempts = 3
//! min_clean_accuracy = 0.9
//! min_asr = 0.95
//! frozen = []      # tensor-name prefixes kept at their initial values
//!
//! [hijack]
//! alpha = 0.3
//! beta = 5
//! criterion = "anchored"   # "any-token" | "constant-token"
//! dev_size = 40
//!
//! [detector]
//! gamma = 0.9      # defaults depend on the task mode
//! epsilon = 0.05
//! per_class = 20
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;

use attn_hijack::analysis::{AnalysisConfig, HijackParams, TokenCriterion};
use attn_hijack::datasets::{GridTask, SequenceTask, TaskSpec};
use attn_hijack::detector::{DetectorConfig, FilterParams};
use attn_hijack::transformer::TrainHyper;
use attn_hijack::zoo::ZooConfig;
use attn_hijack::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    Sequence,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    AnyToken,
    ConstantToken,
    Anchored,
}

impl From<Criterion> for TokenCriterion {
    fn from(c: Criterion) -> Self {
        match c {
            Criterion::AnyToken => TokenCriterion::AnyToken,
            Criterion::ConstantToken => TokenCriterion::ConstantToken,
            Criterion::Anchored => TokenCriterion::Anchored,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    #[serde(default)]
    task: TaskSection,
    #[serde(default)]
    zoo: ZooSection,
    #[serde(default)]
    hijack: HijackSection,
    #[serde(default)]
    detector: DetectorSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSection {
    mode: Option<TaskMode>,
    classes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZooSection {
    trojan: Option<usize>,
    clean: Option<usize>,
    train_size: Option<usize>,
    eval_size: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f32>,
    phrase_len: Option<usize>,
    max_attempts: Option<usize>,
    min_clean_accuracy: Option<f64>,
    min_asr: Option<f64>,
    frozen: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HijackSection {
    alpha: Option<f64>,
    beta: Option<usize>,
    criterion: Option<Criterion>,
    dev_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorSection {
    gamma: Option<f64>,
    epsilon: Option<f64>,
    per_class: Option<usize>,
}

/// Flags that override config-file values.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true, value_enum)]
    mode: Option<TaskMode>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    /// Trojan models in the zoo.
    #[arg(long, global = true)]
    trojan: Option<usize>,
    /// Clean models in the zoo.
    #[arg(long, global = true)]
    clean: Option<usize>,
    #[arg(long, global = true)]
    train_size: Option<usize>,
    #[arg(long, global = true)]
    eval_size: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f32>,
    /// Trigger length in sequence mode (1-3).
    #[arg(long, global = true)]
    phrase_len: Option<usize>,
    #[arg(long, global = true)]
    max_attempts: Option<usize>,
    /// Health floor on clean accuracy.
    #[arg(long, global = true)]
    min_clean_accuracy: Option<f64>,
    /// Health floor on Trojan ASR.
    #[arg(long, global = true)]
    min_asr: Option<f64>,
    /// Comma-separated tensor-name prefixes kept at their initial values.
    #[arg(long, global = true, value_delimiter = ',')]
    frozen: Option<Vec<String>>,
    /// Row-fraction threshold for hijacking heads.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Heads are hijacking when more than this many samples qualify.
    #[arg(long, global = true)]
    beta: Option<usize>,
    #[arg(long, global = true, value_enum)]
    criterion: Option<Criterion>,
    #[arg(long, global = true)]
    dev_size: Option<usize>,
    /// Outlier-filter MCR threshold.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Outlier-filter true-label confidence ceiling.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    per_class: Option<usize>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub task: TaskSpec,
    pub zoo: ZooConfig,
    pub hijack: HijackParams,
    pub dev_size: usize,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub per_class: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn merge(self, seed: Option<u64>, jobs: Option<usize>, o: &Overrides) -> Resolved {
        let seed = seed.or(self.seed).unwrap_or(0);
        let classes = o.classes.or(self.task.classes).unwrap_or(4);
        let task = match o.mode.or(self.task.mode).unwrap_or(TaskMode::Sequence) {
            TaskMode::Sequence => TaskSpec::Sequence(SequenceTask::new(classes)),
            TaskMode::Grid => TaskSpec::Grid(GridTask::new(classes)),
        };
        let z = &self.zoo;
        let mut zoo = ZooConfig::new(
            task.clone(),
            o.trojan.or(z.trojan).unwrap_or(20),
            o.clean.or(z.clean).unwrap_or(20),
            seed,
        );
        let d = TrainHyper::default();
        zoo.hyper = TrainHyper {
            epochs: o.epochs.or(z.epochs).unwrap_or(d.epochs),
            batch_size: o.batch_size.or(z.batch_size).unwrap_or(d.batch_size),
            learning_rate: o.learning_rate.or(z.learning_rate).unwrap_or(d.learning_rate),
            frozen: o.frozen.clone().or(z.frozen.clone()).unwrap_or(d.frozen.clone()),
            ..d
        };
        zoo.train_size = o.train_size.or(z.train_size).unwrap_or(zoo.train_size);
        zoo.eval_size = o.eval_size.or(z.eval_size).unwrap_or(zoo.eval_size);
        zoo.phrase_len = o.phrase_len.or(z.phrase_len).unwrap_or(zoo.phrase_len);
        zoo.max_attempts = o.max_attempts.or(z.max_attempts).unwrap_or(zoo.max_attempts);
        zoo.floors.clean_accuracy = o
            .min_clean_accuracy
            .or(z.min_clean_accuracy)
            .unwrap_or(zoo.floors.clean_accuracy);
        zoo.floors.asr = o.min_asr.or(z.min_asr).unwrap_or(zoo.floors.asr);
        let h = &self.hijack;
        let dh = HijackParams::default();
        Resolved {
            seed,
            jobs: jobs.or(self.jobs).unwrap_or(1),
            out: self.out,
            task,
            zoo,
            hijack: HijackParams {
                alpha: o.alpha.or(h.alpha).unwrap_or(dh.alpha),
                beta: o.beta.or(h.beta).unwrap_or(dh.beta),
                criterion: o.criterion.or(h.criterion).map_or(dh.criterion, Into::into),
            },
            dev_size: o.dev_size.or(h.dev_size).unwrap_or(AnalysisConfig::default().dev_size),
            gamma: o.gamma.or(self.detector.gamma),
            epsilon: o.epsilon.or(self.detector.epsilon),
            per_class: o.per_class.or(self.detector.per_class).unwrap_or(20),
        }
    }
}

impl Resolved {
    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::InvalidArgument("jobs must be at least 1".into()));
        }
        if self.task.num_classes() < 2 {
            return Err(Error::InvalidArgument("tasks need at least two classes".into()));
        }
        self.zoo.validate()?;
        self.hijack.validate(self.dev_size)?;
        self.detector_config(&self.task).validate()
    }

    pub fn zoo_config(&self) -> ZooConfig {
        self.zoo.clone()
    }

    pub fn analysis_config(&self) -> AnalysisConfig {
        AnalysisConfig {
            params: self.hijack,
            dev_size: self.dev_size,
            seed: self.seed,
        }
    }

    /// Detector settings for `task`; filter defaults follow its mode.
    pub fn detector_config(&self, task: &TaskSpec) -> DetectorConfig {
        let mut d = DetectorConfig::for_task(task, self.seed);
        let f = FilterParams::for_mode(task.mode());
        d.filter = FilterParams {
            gamma: self.gamma.unwrap_or(f.gamma),
            epsilon: self.epsilon.unwrap_or(f.epsilon),
        };
        d.hijack = self.hijack;
        d.per_class = self.per_class;
        d
    }
}
