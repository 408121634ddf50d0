//! Synthetic classification tasks and BadNets-style poisoning.
//!
//! Sequence tasks draw tokens from a partitioned vocabulary: class-indicative
//! content tokens, shared content tokens, neutral filler tokens that appear
//! uniformly in every class, and a reserved neutral pool that never appears
//! in generated text. Triggers, spurious perturbations and detector
//! candidates all come from the reserved pool.
//!
//! Grid tasks render one noisy stroke shape per class on a square image that
//! the model cuts into patches. Triggers are 3x3 binary stencils stamped at
//! the top-left corner of one patch.

mod grid;
mod io;
mod poison;
mod sequence;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use grid::{gen_grid_task, GridTask, NamedPattern, Stencil};
pub use poison::{
    inject_trigger, insert_tokens, make_spurious, matched_set, poison_dataset, spurious_perturbation, InsertPolicy,
    MatchedSet, Perturbation, PoisonSpec, SourcePolicy,
};
pub use sequence::{gen_sequence_task, SequenceTask, VocabPartition};

use crate::transformer::{Input, Mode, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Clean,
    Poisoned,
    Spurious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Input,
    pub label: usize,
    pub provenance: Provenance,
}

/// Task family and generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TaskSpec {
    Sequence(SequenceTask),
    Grid(GridTask),
}

impl TaskSpec {
    pub fn mode(&self) -> Mode {
        match self {
            TaskSpec::Sequence(_) => Mode::Sequence,
            TaskSpec::Grid(_) => Mode::Grid,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TaskSpec::Sequence(t) => t.vocab.num_classes,
            TaskSpec::Grid(t) => t.num_classes,
        }
    }

    /// Desk-scale model configuration for this task.
    pub fn model_config(&self) -> ModelConfig {
        match self {
            TaskSpec::Sequence(t) => {
                let mut c = ModelConfig::sequence(t.vocab.vocab_size(), t.vocab.num_classes);
                c.max_tokens = t.max_tokens + 1;
                c
            }
            TaskSpec::Grid(t) => ModelConfig::grid(t.grid_side, t.patch_size, t.num_classes),
        }
    }

    pub fn generate(&self, num_samples: usize, seed: u64) -> LabeledDataset {
        match self {
            TaskSpec::Sequence(t) => sequence::generate(t, num_samples, seed),
            TaskSpec::Grid(t) => grid::generate(t, num_samples, seed),
        }
    }

    pub fn fingerprint(&self) -> String {
        crate::io_util::sha256_hex(&serde_json::to_vec(self).expect("task serialises"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: TaskSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
    /// Present once the dataset has been poisoned.
    pub poison: Option<PoisonSpec>,
}

impl LabeledDataset {
    pub fn mode(&self) -> Mode {
        self.task.mode()
    }

    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<Input> {
        self.samples.iter().map(|s| s.input.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.samples.iter().filter(|s| s.provenance == provenance).count()
    }

    /// Subset with the given label, keeping order.
    pub fn with_label(&self, label: usize) -> LabeledDataset {
        self.filtered(|s| s.label == label)
    }

    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> LabeledDataset {
        LabeledDataset {
            task: self.task.clone(),
            seed: self.seed,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            poison: self.poison.clone(),
        }
    }

    pub fn take(&self, n: usize) -> LabeledDataset {
        LabeledDataset {
            task: self.task.clone(),
            seed: self.seed,
            samples: self.samples.iter().take(n).cloned().collect(),
            poison: self.poison.clone(),
        }
    }

    /// SHA-256 over the task, seed and every sample record.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.task).expect("task serialises"));
        h.update(self.seed.to_le_bytes());
        for s in &self.samples {
            h.update(io::record_bytes(s));
        }
        hex::encode(h.finalize())
    }
}
