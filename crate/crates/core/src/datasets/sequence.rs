use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance, Sample, TaskSpec};
use crate::transformer::Input;

/// Vocabulary layout, in id order: `num_classes * class_tokens` indicative
/// tokens, `shared` content tokens, `filler` neutral tokens, `reserved`
/// neutral tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPartition {
    pub num_classes: usize,
    pub class_tokens: usize,
    pub shared: usize,
    pub filler: usize,
    pub reserved: usize,
}

impl VocabPartition {
    pub fn class_range(&self, class: usize) -> Range<u32> {
        let k = self.class_tokens as u32;
        class as u32 * k..(class as u32 + 1) * k
    }

    pub fn shared_range(&self) -> Range<u32> {
        let start = (self.num_classes * self.class_tokens) as u32;
        start..start + self.shared as u32
    }

    /// Neutral tokens that occur in generated text.
    pub fn filler_range(&self) -> Range<u32> {
        let start = self.shared_range().end;
        start..start + self.filler as u32
    }

    /// Neutral tokens that never occur in generated text; triggers and
    /// detector candidates are drawn from here.
    pub fn reserved_range(&self) -> Range<u32> {
        let start = self.filler_range().end;
        start..start + self.reserved as u32
    }

    pub fn content_range(&self) -> Range<u32> {
        0..self.shared_range().end
    }

    pub fn neutral_range(&self) -> Range<u32> {
        self.filler_range().start..self.reserved_range().end
    }

    pub fn vocab_size(&self) -> usize {
        self.reserved_range().end as usize
    }

    pub fn is_reserved(&self, token: u32) -> bool {
        self.reserved_range().contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTask {
    pub vocab: VocabPartition,
    /// Generated content length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Hard cap after trigger insertion (model tokens minus the class token).
    pub max_tokens: usize,
    /// Probability that a token is indicative of the sample's own class.
    pub p_own: f64,
    /// Probability that a token is indicative of some other class.
    pub p_other: f64,
    /// Probability that a token is a neutral filler.
    pub p_filler: f64,
}

impl SequenceTask {
    pub fn new(num_classes: usize) -> Self {
        Self {
            vocab: VocabPartition {
                num_classes,
                class_tokens: 16,
                shared: 16,
                filler: 32,
                reserved: 200,
            },
            min_len: 24,
            max_len: 30,
            max_tokens: 31,
            p_own: 0.4,
            p_other: 0.08,
            p_filler: 0.3,
        }
    }
}

/// Desk-scale stand-in for a sentiment corpus; see [`SequenceTask::new`].
pub fn gen_sequence_task(num_classes: usize, num_samples: usize, seed: u64) -> LabeledDataset {
    generate(&SequenceTask::new(num_classes.max(2)), num_samples, seed)
}

pub(crate) fn generate(task: &SequenceTask, num_samples: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = &task.vocab;
    let classes = v.num_classes;
    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|label| {
            let len = rng.gen_range(task.min_len..=task.max_len);
            let tokens = (0..len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let range = if u < task.p_own {
                        v.class_range(label)
                    } else if u < task.p_own + task.p_other {
                        let mut other = rng.gen_range(0..classes - 1);
                        if other >= label {
                            other += 1;
                        }
                        v.class_range(other)
                    } else if u < task.p_own + task.p_other + task.p_filler {
                        v.filler_range()
                    } else {
                        v.shared_range()
                    };
                    rng.gen_range(range)
                })
                .collect();
            Sample {
                input: Input::Tokens(tokens),
                label,
                provenance: Provenance::Clean,
            }
        })
        .collect();
    LabeledDataset {
        task: TaskSpec::Sequence(task.clone()),
        seed,
        samples,
        poison: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(gen_sequence_task(2, 300, 7), gen_sequence_task(2, 300, 7));
        assert_ne!(
            gen_sequence_task(2, 300, 7).samples,
            gen_sequence_task(2, 300, 8).samples
        );
    }

    #[test]
    fn reserved_tokens_never_generated() {
        let ds = gen_sequence_task(3, 1000, 1);
        let TaskSpec::Sequence(task) = &ds.task else {
            unreachable!()
        };
        for s in &ds.samples {
            let Input::Tokens(t) = &s.input else { unreachable!() };
            assert!(t.len() >= task.min_len && t.len() <= task.max_len);
            assert!(t.iter().all(|&x| !task.vocab.is_reserved(x)));
        }
    }

    #[test]
    fn partition_is_contiguous() {
        let v = SequenceTask::new(2).vocab;
        assert_eq!(v.class_range(1).end, v.shared_range().start);
        assert_eq!(v.neutral_range().end as usize, v.vocab_size());
        assert_eq!(v.vocab_size(), 2 * 16 + 16 + 32 + 200);
    }
}
