use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{NamedPattern, Stencil};
use super::{LabeledDataset, Provenance, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::transformer::Input;

/// A perturbation that can be added to a clean input: a trigger, a spurious
/// control or a detector candidate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    /// One neutral token or a 2-3 token phrase, inserted contiguously.
    Tokens(Vec<u32>),
    /// A 3x3 stencil stamped into patch `location = (row, col)`.
    Patch { stencil: Stencil, location: (usize, usize) },
}

impl Perturbation {
    /// Whether `input` already carries this perturbation.
    pub fn present_in(&self, input: &Input, task: &TaskSpec) -> bool {
        match (self, input, task) {
            (Perturbation::Tokens(p), Input::Tokens(t), _) => {
                !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
            }
            (Perturbation::Patch { stencil, location }, Input::Image(px), TaskSpec::Grid(g)) => {
                stencil.present(px, g.image_side(), g.patch_size, *location)
            }
            _ => false,
        }
    }

    /// Adds the perturbation to `input`. Token perturbations are inserted at
    /// the policy position and the result is truncated to the task cap,
    /// never cutting the inserted tokens.
    pub fn apply(&self, input: &Input, task: &TaskSpec, insert: InsertPolicy, rng: &mut impl Rng) -> Result<Input> {
        self.apply_located(input, task, insert, rng).map(|(x, _)| x)
    }

    /// [`Perturbation::apply`] that also returns the token positions the
    /// perturbation occupies (inserted tokens, or the stamped patch index),
    /// counted before any class token.
    pub fn apply_located(
        &self,
        input: &Input,
        task: &TaskSpec,
        insert: InsertPolicy,
        rng: &mut impl Rng,
    ) -> Result<(Input, Vec<usize>)> {
        if self.present_in(input, task) {
            return Err(Error::TriggerCollision);
        }
        match (self, input, task) {
            (Perturbation::Tokens(p), Input::Tokens(t), TaskSpec::Sequence(seq)) => {
                let cap = seq.max_tokens;
                if p.is_empty() || p.len() > cap {
                    return Err(Error::InvalidArgument(format!("phrase of {} tokens", p.len())));
                }
                let last = t.len().min(cap - p.len());
                let pos = match insert {
                    InsertPolicy::Fixed(i) => i.min(last),
                    InsertPolicy::Random => rng.gen_range(0..=last),
                };
                Ok((
                    Input::Tokens(insert_tokens(t, p, pos, cap)),
                    (pos..pos + p.len()).collect(),
                ))
            }
            (Perturbation::Patch { stencil, location }, Input::Image(px), TaskSpec::Grid(g)) => {
                if location.0 >= g.grid_side || location.1 >= g.grid_side || g.patch_size < Stencil::SIZE {
                    return Err(Error::IndexOutOfRange(format!("patch {location:?}")));
                }
                let mut out = px.clone();
                stencil.stamp(&mut out, g.image_side(), g.patch_size, *location);
                Ok((Input::Image(out), vec![location.0 * g.grid_side + location.1]))
            }
            _ => Err(Error::ShapeMismatch(
                "perturbation does not match the input mode".into(),
            )),
        }
    }

    /// The inserted token ids; empty for patch perturbations.
    pub fn tokens(&self) -> &[u32] {
        match self {
            Perturbation::Tokens(t) => t,
            Perturbation::Patch { .. } => &[],
        }
    }

    pub fn label(&self) -> String {
        match self {
            Perturbation::Tokens(t) => t.iter().map(u32::to_string).collect::<Vec<_>>().join("+"),
            Perturbation::Patch { stencil, location } => format!("{stencil}@{},{}", location.0, location.1),
        }
    }
}

/// `tokens` with `insert` spliced in at `pos`, truncated to `cap`.
pub fn insert_tokens(tokens: &[u32], insert: &[u32], pos: usize, cap: usize) -> Vec<u32> {
    let pos = pos.min(tokens.len());
    let mut out = Vec::with_capacity(tokens.len() + insert.len());
    out.extend_from_slice(&tokens[..pos]);
    out.extend_from_slice(insert);
    out.extend_from_slice(&tokens[pos..]);
    out.truncate(cap);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertPolicy {
    Fixed(usize),
    /// Uniform over every position that keeps the whole phrase.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourcePolicy {
    AllToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub trigger: Perturbation,
    pub insert: InsertPolicy,
    pub target_class: usize,
    pub source_policy: SourcePolicy,
    pub poison_rate: f64,
}

pub const MIN_POISON_RATE: f64 = 0.10;
pub const MAX_POISON_RATE: f64 = 0.20;

impl PoisonSpec {
    /// Random trigger identity, location and target class. `phrase_len`
    /// above one draws a multi-token phrase in sequence mode.
    pub fn random(task: &TaskSpec, phrase_len: usize, rng: &mut impl Rng) -> Self {
        let trigger = match task {
            TaskSpec::Sequence(seq) => Perturbation::Tokens(
                seq.vocab
                    .reserved_range()
                    .choose_multiple(rng, phrase_len.clamp(1, 3))
                    .into_iter()
                    .collect(),
            ),
            TaskSpec::Grid(g) => Perturbation::Patch {
                stencil: NamedPattern::ALL.choose(rng).expect("non-empty").stencil(),
                location: *g.trigger_locations().choose(rng).expect("non-empty"),
            },
        };
        Self {
            trigger,
            insert: InsertPolicy::Random,
            target_class: rng.gen_range(0..task.num_classes()),
            source_policy: SourcePolicy::AllToOne,
            poison_rate: rng.gen_range(MIN_POISON_RATE..=MAX_POISON_RATE),
        }
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        if !(MIN_POISON_RATE..=MAX_POISON_RATE).contains(&self.poison_rate) {
            return Err(Error::RateOutOfRange(self.poison_rate));
        }
        if self.target_class >= task.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "target class {} outside {} classes",
                self.target_class,
                task.num_classes()
            )));
        }
        match (&self.trigger, task) {
            (Perturbation::Tokens(t), TaskSpec::Sequence(seq)) => {
                if t.is_empty() || t.len() > 3 || t.iter().any(|&x| !seq.vocab.is_reserved(x)) {
                    return Err(Error::InvalidArgument(
                        "sequence triggers are 1-3 reserved neutral tokens".into(),
                    ));
                }
            }
            (Perturbation::Patch { location, .. }, TaskSpec::Grid(g)) => {
                if location.0 >= g.grid_side || location.1 >= g.grid_side {
                    return Err(Error::IndexOutOfRange(format!("patch {location:?}")));
                }
            }
            _ => return Err(Error::InvalidArgument("trigger does not match task mode".into())),
        }
        Ok(())
    }
}

/// Adds the trigger to a clean sample; the label is left alone.
pub fn inject_trigger(sample: &Sample, task: &TaskSpec, spec: &PoisonSpec, rng: &mut impl Rng) -> Result<Sample> {
    Ok(Sample {
        input: spec.trigger.apply(&sample.input, task, spec.insert, rng)?,
        label: sample.label,
        provenance: sample.provenance,
    })
}

/// Poisons exactly `floor(rate * |D|)` samples drawn uniformly from the
/// non-target classes: trigger injected, label set to the target.
pub fn poison_dataset(dataset: &LabeledDataset, spec: &PoisonSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate(&dataset.task)?;
    if dataset.samples.iter().any(|s| s.provenance != Provenance::Clean) {
        return Err(Error::InvalidArgument("only clean datasets can be poisoned".into()));
    }
    let count = (spec.poison_rate * dataset.len() as f64 + 1e-9).floor() as usize;
    let mut eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].label != spec.target_class)
        .collect();
    if eligible.len() < count {
        return Err(Error::InvalidArgument(format!(
            "{count} poisoned samples requested, only {} non-target samples",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut chosen = eligible[..count].to_vec();
    chosen.sort_unstable();
    let mut out = dataset.clone();
    for i in chosen {
        let s = &mut out.samples[i];
        s.input = spec.trigger.apply(&s.input, &dataset.task, spec.insert, &mut rng)?;
        s.label = spec.target_class;
        s.provenance = Provenance::Poisoned;
    }
    out.poison = Some(spec.clone());
    Ok(out)
}

/// A random perturbation guaranteed to differ from `exclude`: a reserved
/// token outside the trigger (sequence) or a non-empty stencil differing
/// from the trigger's in at least one pixel at a random corner (grid).
pub fn spurious_perturbation(task: &TaskSpec, exclude: Option<&Perturbation>, rng: &mut impl Rng) -> Perturbation {
    match task {
        TaskSpec::Sequence(seq) => {
            let banned: &[u32] = exclude.map_or(&[], |p| p.tokens());
            let token = seq
                .vocab
                .reserved_range()
                .filter(|t| !banned.contains(t))
                .choose(rng)
                .expect("reserved pool larger than any trigger");
            Perturbation::Tokens(vec![token])
        }
        TaskSpec::Grid(g) => {
            let banned = match exclude {
                Some(Perturbation::Patch { stencil, .. }) => Some(*stencil),
                _ => None,
            };
            let stencil = loop {
                let s = Stencil::from_bits(rng.gen_range(1..512));
                if Some(s) != banned {
                    break s;
                }
            };
            Perturbation::Patch {
                stencil,
                location: *g.trigger_locations().choose(rng).expect("non-empty"),
            }
        }
    }
}

/// A clean sample with a random non-trigger perturbation, seeded.
pub fn make_spurious(sample: &Sample, task: &TaskSpec, exclude: Option<&Perturbation>, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spurious_perturbation(task, exclude, &mut rng);
    Ok(Sample {
        input: p.apply(&sample.input, task, InsertPolicy::Random, &mut rng)?,
        label: sample.label,
        provenance: Provenance::Spurious,
    })
}

/// Clean samples paired one-to-one with perturbed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub clean: Vec<Sample>,
    pub perturbed: Vec<Sample>,
    /// Content positions the perturbation occupies in each perturbed input.
    pub anchors: Vec<Vec<usize>>,
}

impl MatchedSet {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn take(&self, n: usize) -> MatchedSet {
        MatchedSet {
            clean: self.clean.iter().take(n).cloned().collect(),
            perturbed: self.perturbed.iter().take(n).cloned().collect(),
            anchors: self.anchors.iter().take(n).cloned().collect(),
        }
    }
}

/// Applies `perturbation` to every sample of `base` not labelled
/// `skip_label`. Samples that already contain the perturbation are dropped.
/// With `relabel` the copies take that label and count as poisoned,
/// otherwise they keep their label and count as spurious.
pub fn matched_set(
    base: &[Sample],
    task: &TaskSpec,
    perturbation: &Perturbation,
    relabel: Option<usize>,
    skip_label: Option<usize>,
    seed: u64,
) -> Result<MatchedSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MatchedSet {
        clean: vec![],
        perturbed: vec![],
        anchors: vec![],
    };
    for s in base.iter().filter(|s| Some(s.label) != skip_label) {
        let (input, anchors) = match perturbation.apply_located(&s.input, task, InsertPolicy::Random, &mut rng) {
            Ok(v) => v,
            Err(Error::TriggerCollision) => continue,
            Err(e) => return Err(e),
        };
        out.clean.push(s.clone());
        out.perturbed.push(Sample {
            input,
            label: relabel.unwrap_or(s.label),
            provenance: if relabel.is_some() {
                Provenance::Poisoned
            } else {
                Provenance::Spurious
            },
        });
        out.anchors.push(anchors);
    }
    Ok(out)
}
