//! Pain-relevant action units and the PSPI score built from them.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The six action units in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionUnit {
    /// Brow lowerer.
    Au4,
    /// Cheek raiser.
    Au6,
    /// Lid tightener.
    Au7,
    /// Nose wrinkler.
    Au9,
    /// Upper lip raiser.
    Au10,
    /// Eyes closed (binary).
    Au43,
}

impl ActionUnit {
    pub const ALL: [ActionUnit; 6] = [
        ActionUnit::Au4,
        ActionUnit::Au6,
        ActionUnit::Au7,
        ActionUnit::Au9,
        ActionUnit::Au10,
        ActionUnit::Au43,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Largest admissible intensity: 5 for graded units, 1 for AU43.
    pub fn max_intensity(self) -> f64 {
        match self {
            ActionUnit::Au43 => 1.0,
            _ => 5.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionUnit::Au4 => "AU4",
            ActionUnit::Au6 => "AU6",
            ActionUnit::Au7 => "AU7",
            ActionUnit::Au9 => "AU9",
            ActionUnit::Au10 => "AU10",
            ActionUnit::Au43 => "AU43",
        }
    }
}

pub const NUM_AUS: usize = 6;
/// PSPI ranges over 0..=16.
pub const NUM_PSPI_CLASSES: usize = 17;
pub const MAX_PSPI: u8 = 16;

/// Intensities of AU4, AU6, AU7, AU9, AU10 in `[0, 5]` and AU43 in `{0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct AuVector([f64; NUM_AUS]);

impl TryFrom<[f64; 6]> for AuVector {
    type Error = Error;
    fn try_from(v: [f64; 6]) -> Result<Self> {
        AuVector::new(v)
    }
}

impl From<AuVector> for [f64; 6] {
    fn from(a: AuVector) -> Self {
        a.0
    }
}

impl AuVector {
    pub fn new(values: [f64; NUM_AUS]) -> Result<Self> {
        for (au, &v) in ActionUnit::ALL.iter().zip(&values) {
            let ok = match au {
                ActionUnit::Au43 => v == 0.0 || v == 1.0,
                _ => (0.0..=au.max_intensity()).contains(&v),
            };
            if !ok {
                return Err(Error::Parameter(format!(
                    "{} intensity {v} out of range",
                    au.name()
                )));
            }
        }
        Ok(AuVector(values))
    }

    pub fn zero() -> Self {
        AuVector([0.0; NUM_AUS])
    }

    pub fn values(&self) -> &[f64; NUM_AUS] {
        &self.0
    }

    pub fn get(&self, au: ActionUnit) -> f64 {
        self.0[au.index()]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// `AU4 + max(AU6, AU7) + max(AU9, AU10) + AU43` on rounded intensities.
pub fn pspi_score(au: &AuVector) -> u8 {
    let r = |a: ActionUnit| au.get(a).round() as u8;
    r(ActionUnit::Au4)
        + r(ActionUnit::Au6).max(r(ActionUnit::Au7))
        + r(ActionUnit::Au9).max(r(ActionUnit::Au10))
        + r(ActionUnit::Au43)
}

/// Every integer configuration, grouped by PSPI score.
fn configs_by_score() -> &'static [Vec<[u8; NUM_AUS]>; NUM_PSPI_CLASSES] {
    static TABLE: OnceLock<[Vec<[u8; NUM_AUS]>; NUM_PSPI_CLASSES]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table: [Vec<[u8; NUM_AUS]>; NUM_PSPI_CLASSES] = Default::default();
        for cfg in integer_configurations() {
            let au = AuVector(cfg.map(f64::from));
            table[pspi_score(&au) as usize].push(cfg);
        }
        table
    })
}

/// All `6⁵ · 2 = 15,552` integer AU configurations in lexicographic order.
pub fn integer_configurations() -> impl Iterator<Item = [u8; NUM_AUS]> {
    (0..6u8).flat_map(|a| {
        (0..6u8).flat_map(move |b| {
            (0..6u8).flat_map(move |c| {
                (0..6u8).flat_map(move |d| {
                    (0..6u8).flat_map(move |e| (0..2u8).map(move |f| [a, b, c, d, e, f]))
                })
            })
        })
    })
}

/// Uniform draw among integer configurations whose PSPI equals `target`.
pub fn sample_au_config_with<R: Rng>(target: u8, rng: &mut R) -> Result<AuVector> {
    if target > MAX_PSPI {
        return Err(Error::Parameter(format!(
            "target PSPI {target} exceeds {MAX_PSPI}"
        )));
    }
    let pool = &configs_by_score()[target as usize];
    let cfg = pool[rng.gen_range(0..pool.len())];
    Ok(AuVector(cfg.map(f64::from)))
}

pub fn sample_au_config(target: u8, seed: u64) -> Result<AuVector> {
    sample_au_config_with(target, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(pspi_score(&AuVector::zero()), 0);
        let a = AuVector::new([2.0, 3.0, 1.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(pspi_score(&a), 8);
        let a = AuVector::new([5.0, 5.0, 5.0, 5.0, 5.0, 1.0]).unwrap();
        assert_eq!(pspi_score(&a), 16);
    }

    #[test]
    fn rounds_continuous_intensities() {
        let a = AuVector::new([1.6, 0.4, 2.2, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(pspi_score(&a), 2 + 2);
    }

    #[test]
    fn range_checks() {
        assert!(AuVector::new([5.1, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(AuVector::new([0.0, -0.1, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(AuVector::new([0.0, 0.0, 0.0, 0.0, 0.0, 0.5]).is_err());
        assert!(serde_json::from_str::<AuVector>("[0,0,0,0,0,2]").is_err());
    }

    #[test]
    fn extreme_targets() {
        for seed in 0..20 {
            assert!(sample_au_config(0, seed).unwrap().is_zero());
            let a = sample_au_config(16, seed).unwrap();
            assert_eq!(a.get(ActionUnit::Au4), 5.0);
            assert_eq!(a.get(ActionUnit::Au43), 1.0);
            assert_eq!(a.get(ActionUnit::Au6).max(a.get(ActionUnit::Au7)), 5.0);
            assert_eq!(a.get(ActionUnit::Au9).max(a.get(ActionUnit::Au10)), 5.0);
        }
        assert!(sample_au_config(17, 0).is_err());
    }

    #[test]
    fn every_target_reachable() {
        let table = configs_by_score();
        assert!(table.iter().all(|pool| !pool.is_empty()));
        assert_eq!(table.iter().map(Vec::len).sum::<usize>(), 15_552);
        assert_eq!(table[0].len(), 1);
    }
}
