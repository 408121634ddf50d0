use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{NamedPattern, Perturbation, Stencil, TaskSpec};

pub const SEQUENCE_PHRASES: usize = 100;
pub const GRID_STENCILS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationCandidate {
    /// Stable within a pool; seeds every random draw tied to the candidate.
    pub id: usize,
    pub perturbation: Perturbation,
}

/// Fixed candidate pool for a task.
///
/// Sequence mode: every reserved neutral token, then random two-token
/// phrases over the same pool. Grid mode: the named stencils plus random
/// non-empty 3x3 stencils, each at every trigger location.
pub fn candidate_pool(task: &TaskSpec, seed: u64) -> Vec<PerturbationCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbations: Vec<Perturbation> = match task {
        TaskSpec::Sequence(seq) => {
            let reserved: Vec<u32> = seq.vocab.reserved_range().collect();
            let mut out: Vec<Perturbation> = reserved.iter().map(|&t| Perturbation::Tokens(vec![t])).collect();
            let mut seen = BTreeSet::new();
            while seen.len() < SEQUENCE_PHRASES.min(reserved.len() * reserved.len().saturating_sub(1)) {
                let pair: Vec<u32> = reserved.choose_multiple(&mut rng, 2).copied().collect();
                if seen.insert(pair.clone()) {
                    out.push(Perturbation::Tokens(pair));
                }
            }
            out
        }
        TaskSpec::Grid(g) => {
            let mut stencils: Vec<Stencil> = NamedPattern::ALL.iter().map(|p| p.stencil()).collect();
            while stencils.len() < GRID_STENCILS {
                let s = Stencil::from_bits(rng.gen_range(1..512));
                if !stencils.contains(&s) {
                    stencils.push(s);
                }
            }
            stencils
                .iter()
                .flat_map(|&stencil| {
                    g.trigger_locations()
                        .into_iter()
                        .map(move |location| Perturbation::Patch { stencil, location })
                })
                .collect()
        }
    };
    perturbations
        .into_iter()
        .enumerate()
        .map(|(id, perturbation)| PerturbationCandidate { id, perturbation })
        .collect()
}

/// Whether `candidate` contains the trigger or shares its stencil, so that
/// it may well fire the backdoor itself.
pub fn overlaps_trigger(candidate: &Perturbation, trigger: &Perturbation) -> bool {
    match (candidate, trigger) {
        (Perturbation::Tokens(c), Perturbation::Tokens(t)) => t.iter().any(|x| c.contains(x)),
        (Perturbation::Patch { stencil: a, .. }, Perturbation::Patch { stencil: b, .. }) => a == b,
        _ => false,
    }
}
