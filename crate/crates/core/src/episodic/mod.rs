//! Category splits, support/query episodes and k-shot subsets.

mod kshot;
mod task;

pub use kshot::{build_kshot_subset, KShotSubset};
pub use task::{sample_task, FewShotTask, SupportEntry, TaskSampler};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::voc::{CategoryId, CategoryRegistry, VocError};

#[derive(Debug, Error)]
pub enum EpisodicError {
    #[error("registry has {0} categories; a split needs at least 2")]
    RegistryTooSmall(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("category `{0}` has no usable instances")]
    NoInstances(String),
    #[error("no query images left after choosing support images")]
    NoQuery,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("not enough boxes for {k}-shot subset: {}", format_deficits(.deficits))]
    Insufficient { k: usize, deficits: Vec<(String, usize)> },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Voc(#[from] VocError),
}

fn format_deficits(deficits: &[(String, usize)]) -> String {
    deficits
        .iter()
        .map(|(name, have)| format!("{name} has {have}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Base and novel categories; disjoint and jointly covering the registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategorySplit {
    pub base: Vec<CategoryId>,
    pub novel: Vec<CategoryId>,
}

impl CategorySplit {
    /// Base followed by novel.
    pub fn all(&self) -> Vec<CategoryId> {
        self.base.iter().chain(&self.novel).copied().collect()
    }

    pub fn is_novel(&self, c: CategoryId) -> bool {
        self.novel.contains(&c)
    }

    pub fn names(&self, registry: &CategoryRegistry) -> (Vec<String>, Vec<String>) {
        let f = |ids: &[CategoryId]| ids.iter().map(|&c| registry.name(c).to_string()).collect();
        (f(&self.base), f(&self.novel))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// The published split of the VOC + cucumber registry.
    Fixed,
    /// A quarter of the categories (at least one) chosen as novel.
    Seeded,
    /// Named novel categories.
    Novel(Vec<String>),
}

pub const FIXED_NOVEL: [&str; 5] = ["bird", "bus", "cow", "motobike", "cucumber"];

pub fn make_split(registry: &CategoryRegistry, mode: &SplitMode, seed: u64) -> Result<CategorySplit, EpisodicError> {
    let n = registry.len();
    if n < 2 {
        return Err(EpisodicError::RegistryTooSmall(n));
    }
    let mut novel: Vec<CategoryId> = match mode {
        SplitMode::Fixed => {
            if registry.names() != CategoryRegistry::voc_cucumber().names() {
                return Err(EpisodicError::InvalidSplit(
                    "fixed split is only defined for the VOC + cucumber registry".into(),
                ));
            }
            FIXED_NOVEL
                .iter()
                .map(|name| registry.require(name))
                .collect::<Result<_, _>>()?
        }
        SplitMode::Seeded => {
            let count = ((n as f64 / 4.0).round() as usize).clamp(1, n - 1);
            let mut ids: Vec<CategoryId> = registry.ids().collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            ids.truncate(count);
            ids
        }
        SplitMode::Novel(names) => names
            .iter()
            .map(|name| registry.require(name))
            .collect::<Result<_, _>>()?,
    };
    novel.sort();
    novel.dedup();
    if novel.is_empty() || novel.len() == n {
        return Err(EpisodicError::InvalidSplit(format!(
            "{} novel of {n} categories; both sides must be nonempty",
            novel.len()
        )));
    }
    let base = registry.ids().filter(|c| !novel.contains(c)).collect();
    Ok(CategorySplit { base, novel })
}

pub(crate) fn require_name(name: &str, line: usize) -> Result<&str, EpisodicError> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(EpisodicError::Manifest {
            line,
            reason: format!("category name `{name}` cannot be written to a manifest"),
        });
    }
    Ok(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_split_matches_table() {
        let reg = CategoryRegistry::voc_cucumber();
        let split = make_split(&reg, &SplitMode::Fixed, 0).unwrap();
        let (base, novel) = split.names(&reg);
        assert_eq!(novel, FIXED_NOVEL);
        assert_eq!(base, &VOC_BASE[..]);
    }

    const VOC_BASE: [&str; 15] = [
        "aeroplane",
        "bicycle",
        "boat",
        "bottle",
        "car",
        "cat",
        "chair",
        "dining-table",
        "dog",
        "horse",
        "person",
        "potted-plant",
        "sheep",
        "train",
        "tv-monitor",
    ];

    #[test]
    fn two_category_split() {
        let reg = CategoryRegistry::new(["a", "b"]).unwrap();
        let s = make_split(&reg, &SplitMode::Seeded, 3).unwrap();
        assert_eq!(s.base.len() + s.novel.len(), 2);
        assert_eq!(s.novel.len(), 1);
        let s = make_split(&reg, &SplitMode::Novel(vec!["b".into()]), 0).unwrap();
        assert_eq!((s.base, s.novel), (vec![CategoryId(0)], vec![CategoryId(1)]));
    }

    #[test]
    fn seeded_is_deterministic_and_partitions() {
        let reg = CategoryRegistry::voc_cucumber();
        for seed in 0..10 {
            let a = make_split(&reg, &SplitMode::Seeded, seed).unwrap();
            assert_eq!(a, make_split(&reg, &SplitMode::Seeded, seed).unwrap());
            assert_eq!(a.novel.len(), 5);
            let mut all = a.all();
            all.sort();
            assert_eq!(all, reg.ids().collect::<Vec<_>>());
        }
    }

    #[test]
    fn bad_splits() {
        let one = CategoryRegistry::new(["a"]).unwrap();
        assert!(matches!(
            make_split(&one, &SplitMode::Seeded, 0),
            Err(EpisodicError::RegistryTooSmall(1))
        ));
        let reg = CategoryRegistry::new(["a", "b"]).unwrap();
        assert!(make_split(&reg, &SplitMode::Fixed, 0).is_err());
        assert!(make_split(&reg, &SplitMode::Novel(vec!["a".into(), "b".into()]), 0).is_err());
        assert!(make_split(&reg, &SplitMode::Novel(vec!["zebra".into()]), 0).is_err());
    }
}
