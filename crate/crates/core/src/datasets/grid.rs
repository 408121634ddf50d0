use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{LabeledDataset, Provenance, Sample, TaskSpec};
use crate::transformer::Input;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTask {
    pub num_classes: usize,
    /// Patches per image side.
    pub grid_side: usize,
    /// Pixels per patch side; must be at least 3 to hold a stencil.
    pub patch_size: usize,
    /// Maximum background intensity.
    pub noise: f64,
    /// Maximum shape offset in pixels.
    pub jitter: usize,
    /// Probability that a trigger location carries a random mark. Mark
    /// pixels lie in [0.75, 1), so a mark never equals a stamped stencil.
    pub clutter: f64,
}

impl GridTask {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            grid_side: 4,
            patch_size: 4,
            noise: 0.25,
            jitter: 2,
            clutter: 0.75,
        }
    }

    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_size
    }

    /// Patch coordinates eligible for triggers and candidates: the corners.
    pub fn trigger_locations(&self) -> Vec<(usize, usize)> {
        let e = self.grid_side - 1;
        vec![(0, 0), (0, e), (e, 0), (e, e)]
    }
}

/// A 3x3 binary pixel pattern; bit `r * 3 + c` is pixel `(r, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stencil(u16);

impl Stencil {
    pub const SIZE: usize = 3;

    pub fn from_bits(bits: u16) -> Self {
        Self(bits & 0x1ff)
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn get(self, r: usize, c: usize) -> bool {
        self.0 >> (r * 3 + c) & 1 == 1
    }

    /// Number of pixels in which two stencils differ.
    pub fn hamming(self, other: Stencil) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Overwrites the 3x3 block at the top-left of patch `(pr, pc)`.
    pub fn stamp(self, pixels: &mut [f32], side: usize, patch_size: usize, (pr, pc): (usize, usize)) {
        let (r0, c0) = (pr * patch_size, pc * patch_size);
        for r in 0..3 {
            for c in 0..3 {
                pixels[(r0 + r) * side + c0 + c] = if self.get(r, c) { 1.0 } else { 0.0 };
            }
        }
    }

    /// Whether the block at patch `(pr, pc)` already shows this stencil.
    pub fn present(self, pixels: &[f32], side: usize, patch_size: usize, (pr, pc): (usize, usize)) -> bool {
        let (r0, c0) = (pr * patch_size, pc * patch_size);
        (0..3).all(|r| {
            (0..3).all(|c| {
                let want = if self.get(r, c) { 1.0 } else { 0.0 };
                pixels[(r0 + r) * side + c0 + c] == want
            })
        })
    }
}

impl fmt::Display for Stencil {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..3 {
            if r > 0 {
                f.write_str("/")?;
            }
            for c in 0..3 {
                f.write_str(if self.get(r, c) { "1" } else { "0" })?;
            }
        }
        Ok(())
    }
}

impl FromStr for Stencil {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits: Vec<char> = s.chars().filter(|c| *c != '/').collect();
        if digits.len() != 9 {
            return Err(format!("stencil needs 9 pixels, got {s:?}"));
        }
        let mut bits = 0u16;
        for (i, ch) in digits.into_iter().enumerate() {
            match ch {
                '1' => bits |= 1 << i,
                '0' => {}
                _ => return Err(format!("bad stencil pixel {ch:?}")),
            }
        }
        Ok(Stencil(bits))
    }
}

impl Serialize for Stencil {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Stencil {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// The six trigger shapes. The pixel layouts are this crate's own choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedPattern {
    Summation,
    Lambda,
    Multiplication,
    Cube,
    Polygon,
    Star,
}

impl NamedPattern {
    pub const ALL: [NamedPattern; 6] = [
        NamedPattern::Summation,
        NamedPattern::Lambda,
        NamedPattern::Multiplication,
        NamedPattern::Cube,
        NamedPattern::Polygon,
        NamedPattern::Star,
    ];

    pub fn stencil(self) -> Stencil {
        let s = match self {
            NamedPattern::Summation => "111/010/111",
            NamedPattern::Lambda => "010/010/101",
            NamedPattern::Multiplication => "101/010/101",
            NamedPattern::Cube => "111/101/111",
            NamedPattern::Polygon => "010/101/010",
            NamedPattern::Star => "010/111/101",
        };
        s.parse().expect("valid literal")
    }
}

fn render(task: &GridTask, label: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let side = task.image_side() as i64;
    let j = task.jitter as i64;
    let shift = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
    let mid = side / 2;
    let (ps, last) = (task.patch_size as i64, task.grid_side as i64 - 1);
    let on = |r: i64, c: i64| -> bool {
        let inner = (1..side - 1).contains(&r) && (1..side - 1).contains(&c);
        // Trigger locations stay background, as the margins of a digit image do.
        let (pr, pc) = (r / ps, c / ps);
        if (pr == 0 || pr == last) && (pc == 0 || pc == last) {
            return false;
        }
        match label % 6 {
            0 => inner && (r - (mid + shift)).abs() <= 1 && c >= 2 && c < side - 2,
            1 => inner && (c - (mid + shift)).abs() <= 1 && r >= 2 && r < side - 2,
            2 => inner && (r - c - shift).abs() <= 1,
            3 => inner && (r + c - (side - 1) - shift).abs() <= 1,
            4 => {
                let rad = side / 3 + shift.signum();
                let (dr, dc) = ((r - mid).abs(), (c - mid).abs());
                dr.max(dc) == rad || dr.max(dc) == rad - 1
            }
            _ => {
                let (dr, dc) = (r - mid - shift / 2, c - mid + shift / 2);
                dr * dr + dc * dc <= 9
            }
        }
    };
    let mut px = Vec::with_capacity((side * side) as usize);
    for r in 0..side {
        for c in 0..side {
            let v = if on(r, c) {
                0.75 + 0.25 * rng.gen::<f64>()
            } else {
                task.noise * rng.gen::<f64>()
            };
            px.push(v as f32);
        }
    }
    let s = side as usize;
    for (pr, pc) in task.trigger_locations() {
        if rng.gen::<f64>() < task.clutter {
            let mark = Stencil::from_bits(rng.gen());
            let (r0, c0) = (pr * task.patch_size, pc * task.patch_size);
            for r in 0..3 {
                for c in 0..3 {
                    if mark.get(r, c) {
                        px[(r0 + r) * s + c0 + c] = (0.75 + 0.25 * rng.gen::<f64>()) as f32;
                    }
                }
            }
        }
    }
    px
}

/// Desk-scale stand-in for a digit corpus: one stroke shape per class.
pub fn gen_grid_task(num_classes: usize, num_samples: usize, grid_side: usize, seed: u64) -> LabeledDataset {
    let mut task = GridTask::new(num_classes.max(2));
    task.grid_side = grid_side.max(1);
    generate(&task, num_samples, seed)
}

pub(crate) fn generate(task: &GridTask, num_samples: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % task.num_classes).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|label| Sample {
            input: Input::Image(render(task, label, &mut rng)),
            label,
            provenance: Provenance::Clean,
        })
        .collect();
    LabeledDataset {
        task: TaskSpec::Grid(task.clone()),
        seed,
        samples,
        poison: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_text_round_trip() {
        for p in NamedPattern::ALL {
            let s = p.stencil();
            assert_eq!(s.to_string().parse::<Stencil>().unwrap(), s);
        }
        assert!("1110".parse::<Stencil>().is_err());
    }

    #[test]
    fn named_patterns_distinct() {
        let all: Vec<_> = NamedPattern::ALL.iter().map(|p| p.stencil()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].hamming(all[j]) >= 1);
            }
        }
    }

    #[test]
    fn class_balance_exact_and_deterministic() {
        let ds = gen_grid_task(4, 400, 4, 3);
        for c in 0..4 {
            assert_eq!(ds.samples.iter().filter(|s| s.label == c).count(), 100);
        }
        assert_eq!(ds, gen_grid_task(4, 400, 4, 3));
        for s in &ds.samples {
            let Input::Image(px) = &s.input else { unreachable!() };
            assert_eq!(px.len(), 256);
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
