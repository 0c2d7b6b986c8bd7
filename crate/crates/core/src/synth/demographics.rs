//! Demographic categories and marginal-exact identity sampling.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::mix_seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Young,
    Elderly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ethnicity {
    Latino,
    White,
    #[serde(rename = "South Asian")]
    SouthAsian,
    Black,
    #[serde(rename = "Middle Eastern")]
    MiddleEastern,
    #[serde(rename = "East Asian")]
    EastAsian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Man,
    Woman,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 2] = [AgeGroup::Young, AgeGroup::Elderly];
    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Young => "Young",
            AgeGroup::Elderly => "Elderly",
        }
    }
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 6] = [
        Ethnicity::Latino,
        Ethnicity::White,
        Ethnicity::SouthAsian,
        Ethnicity::Black,
        Ethnicity::MiddleEastern,
        Ethnicity::EastAsian,
    ];
    pub fn label(self) -> &'static str {
        match self {
            Ethnicity::Latino => "Latino",
            Ethnicity::White => "White",
            Ethnicity::SouthAsian => "South Asian",
            Ethnicity::Black => "Black",
            Ethnicity::MiddleEastern => "Middle Eastern",
            Ethnicity::EastAsian => "East Asian",
        }
    }
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Man, Gender::Woman];
    pub fn label(self) -> &'static str {
        match self {
            Gender::Man => "Man",
            Gender::Woman => "Woman",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DemographicProfile {
    pub age_group: AgeGroup,
    pub ethnicity: Ethnicity,
    pub gender: Gender,
    pub identity_seed: u64,
}

/// Marginal counts per category. Each of the three marginals must sum to the
/// same total.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicConfig {
    pub age: [usize; 2],
    pub ethnicity: [usize; 6],
    pub gender: [usize; 2],
}

impl DemographicConfig {
    /// The 2,500-identity reference distribution.
    pub fn reference() -> Self {
        DemographicConfig {
            age: [1563, 937],
            ethnicity: [646, 460, 469, 82, 585, 258],
            gender: [1723, 777],
        }
    }

    /// The reference proportions rescaled to `total` by largest remainder.
    pub fn reference_scaled(total: usize) -> Self {
        let r = Self::reference();
        DemographicConfig {
            age: scale_counts(&r.age, total).try_into().unwrap(),
            ethnicity: scale_counts(&r.ethnicity, total).try_into().unwrap(),
            gender: scale_counts(&r.gender, total).try_into().unwrap(),
        }
    }

    pub fn total(&self) -> Result<usize> {
        let (a, e, g) = (
            self.age.iter().sum::<usize>(),
            self.ethnicity.iter().sum::<usize>(),
            self.gender.iter().sum::<usize>(),
        );
        if a != e || a != g {
            return Err(Error::Config(format!(
                "demographic marginals disagree: age {a}, ethnicity {e}, gender {g}"
            )));
        }
        Ok(a)
    }
}

fn scale_counts(counts: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = counts.iter().sum();
    let mut out: Vec<usize> = counts.iter().map(|&c| c * total / sum).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // largest remainder first; ties go to the earlier category
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i] * total % sum), i));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn pool<T: Copy>(labels: &[T], counts: &[usize]) -> Vec<T> {
    labels
        .iter()
        .zip(counts)
        .flat_map(|(&l, &c)| std::iter::repeat(l).take(c))
        .collect()
}

/// Profiles whose per-category marginals equal `config` exactly; the joint
/// assignment comes from independently shuffled per-category pools.
pub fn sample_demographics(
    config: &DemographicConfig,
    seed: u64,
) -> Result<Vec<DemographicProfile>> {
    let total = config.total()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ages = pool(&AgeGroup::ALL, &config.age);
    let mut eths = pool(&Ethnicity::ALL, &config.ethnicity);
    let mut genders = pool(&Gender::ALL, &config.gender);
    ages.shuffle(&mut rng);
    eths.shuffle(&mut rng);
    genders.shuffle(&mut rng);
    Ok((0..total)
        .map(|i| DemographicProfile {
            age_group: ages[i],
            ethnicity: eths[i],
            gender: genders[i],
            identity_seed: mix_seed(&[seed, 0x1D, i as u64]),
        })
        .collect())
}

/// Marginal counts of a set of profiles, in config layout.
pub fn marginals(profiles: &[DemographicProfile]) -> DemographicConfig {
    let mut c = DemographicConfig {
        age: [0; 2],
        ethnicity: [0; 6],
        gender: [0; 2],
    };
    for p in profiles {
        c.age[AgeGroup::ALL
            .iter()
            .position(|&a| a == p.age_group)
            .unwrap()] += 1;
        c.ethnicity[Ethnicity::ALL
            .iter()
            .position(|&e| e == p.ethnicity)
            .unwrap()] += 1;
        c.gender[Gender::ALL.iter().position(|&g| g == p.gender).unwrap()] += 1;
    }
    c
}
