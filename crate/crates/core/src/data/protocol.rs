use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Train on one scanner domain, test on another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionSpec {
    pub train_domain: u32,
    pub test_domain: u32,
}

impl fmt::Display for SessionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}->{}", self.train_domain, self.test_domain)
    }
}

/// All ordered pairs of distinct domains, row-major.
pub fn eds_sessions(domains: &[u32]) -> Result<Vec<SessionSpec>> {
    let mut sorted = domains.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::Config(format!(
            "cross-domain sessions need at least two distinct domains, got {domains:?}"
        )));
    }
    let mut out = Vec::new();
    for &i in &sorted {
        for &j in &sorted {
            if i != j {
                out.push(SessionSpec {
                    train_domain: i,
                    test_domain: j,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Easy,
    Hard,
    Hidden,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Easy, Subset::Hard, Subset::Hidden];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Easy => "easy",
            Subset::Hard => "hard",
            Subset::Hidden => "hidden",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Subset::Easy),
            "hard" => Ok(Subset::Hard),
            "hidden" => Ok(Subset::Hidden),
            other => Err(Error::Data(format!("unknown test subset {other:?}"))),
        }
    }
}

/// The three test subsets. Their union is the original test set.
#[derive(Debug, Clone)]
pub struct PidraySplits {
    pub easy: Dataset,
    pub hard: Dataset,
    pub hidden: Dataset,
}

impl PidraySplits {
    pub fn get(&self, subset: Subset) -> &Dataset {
        match subset {
            Subset::Easy => &self.easy,
            Subset::Hard => &self.hard,
            Subset::Hidden => &self.hidden,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.easy.len(), self.hard.len(), self.hidden.len()]
    }
}

/// Partition a test set by per-image subset labels.
pub fn pidray_eval_splits(dataset: &Dataset, labels: &BTreeMap<u64, Subset>) -> Result<PidraySplits> {
    if let Some(img) = dataset.images.iter().find(|i| !labels.contains_key(&i.id)) {
        return Err(Error::Data(format!(
            "test image {} ({}) has no subset label",
            img.id, img.file_name
        )));
    }
    let pick = |s: Subset| dataset.filter(|i| labels[&i.id] == s);
    Ok(PidraySplits {
        easy: pick(Subset::Easy),
        hard: pick(Subset::Hard),
        hidden: pick(Subset::Hidden),
    })
}

/// Seeded random split into `(first, rest)` with `round(fraction * n)` images first.
pub fn random_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * dataset.len() as f64).round() as usize;
    let mut first: Vec<usize> = order[..cut].to_vec();
    let mut rest: Vec<usize> = order[cut..].to_vec();
    first.sort_unstable();
    rest.sort_unstable();
    let take = |idx: &[usize]| Dataset {
        taxonomy: dataset.taxonomy.clone(),
        images: idx.iter().map(|&i| dataset.images[i].clone()).collect(),
    };
    Ok((take(&first), take(&rest)))
}
