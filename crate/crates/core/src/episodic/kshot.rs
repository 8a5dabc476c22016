use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::voc::{CategoryId, DatasetIndex, ImageRecord, Provenance};

use super::{require_name, EpisodicError};

/// Selected records with boxes beyond the k-th per category marked ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct KShotSubset {
    pub k: usize,
    pub categories: Vec<CategoryId>,
    /// Modified copies, ordered by id.
    pub records: Vec<Arc<ImageRecord>>,
    /// Usable (non-ignored) boxes per category.
    pub usable: BTreeMap<CategoryId, usize>,
}

fn usable_counts(records: &[Arc<ImageRecord>], categories: &[CategoryId]) -> BTreeMap<CategoryId, usize> {
    let mut usable: BTreeMap<CategoryId, usize> = categories.iter().map(|&c| (c, 0)).collect();
    for a in records.iter().flat_map(|r| &r.annotations).filter(|a| !a.ignored) {
        *usable.entry(a.category).or_default() += 1;
    }
    usable
}

/// Greedy seeded selection: for each category in order, shuffled images
/// holding it are added until its usable count reaches `k`. Every box of an
/// added image stays usable only while its category is below `k`; boxes of
/// categories outside `categories` are ignored.
pub fn build_kshot_subset(
    dataset: &DatasetIndex,
    categories: &[CategoryId],
    k: usize,
    seed: u64,
) -> Result<KShotSubset, EpisodicError> {
    if k == 0 {
        return Err(EpisodicError::InvalidParameter("k must be positive".into()));
    }
    let available = dataset.box_counts();
    let deficits: Vec<(String, usize)> = categories
        .iter()
        .filter(|c| available[c.0] < k)
        .map(|&c| (dataset.categories().name(c).to_string(), available[c.0]))
        .collect();
    if !deficits.is_empty() {
        return Err(EpisodicError::Insufficient { k, deficits });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = vec![0usize; dataset.categories().len()];
    let mut chosen: BTreeMap<usize, ImageRecord> = BTreeMap::new();
    for &c in categories {
        let mut candidates: Vec<usize> = dataset
            .records()
            .iter()
            .enumerate()
            .filter(|(i, r)| !chosen.contains_key(i) && r.has_category(c))
            .map(|(i, _)| i)
            .collect();
        candidates.shuffle(&mut rng);
        for i in candidates {
            if count[c.0] >= k {
                break;
            }
            let mut rec = (*dataset.records()[i]).clone();
            for a in rec.annotations.iter_mut().filter(|a| !a.ignored) {
                if categories.contains(&a.category) && count[a.category.0] < k {
                    count[a.category.0] += 1;
                } else {
                    a.ignored = true;
                }
            }
            chosen.insert(i, rec);
        }
    }
    let records: Vec<Arc<ImageRecord>> = chosen.into_values().map(Arc::new).collect();
    let usable = usable_counts(&records, categories);
    Ok(KShotSubset {
        k,
        categories: categories.to_vec(),
        records,
        usable,
    })
}

impl KShotSubset {
    pub fn is_exact(&self) -> bool {
        self.categories.iter().all(|c| self.usable.get(c) == Some(&self.k))
            && self.usable.iter().all(|(c, &n)| n == 0 || self.categories.contains(c))
    }

    pub fn to_dataset(&self, source: &DatasetIndex) -> Result<DatasetIndex, EpisodicError> {
        Ok(DatasetIndex::new(
            self.records.clone(),
            source.categories().clone(),
            Provenance::Derived(format!("kshot(k={},{})", self.k, source.provenance)),
        )?)
    }

    /// `kshot <k>`, a `categories` line, then one `record <id> <flags>` line
    /// per record where flags hold `u` (usable) or `i` (ignored) per box.
    pub fn manifest(&self, dataset: &DatasetIndex) -> Result<String, EpisodicError> {
        let mut out = String::new();
        writeln!(out, "kshot {}", self.k).unwrap();
        out.push_str("categories");
        for &c in &self.categories {
            write!(out, " {}", require_name(dataset.categories().name(c), 2)?).unwrap();
        }
        out.push('\n');
        for r in &self.records {
            let flags: String = r
                .annotations
                .iter()
                .map(|a| if a.ignored { 'i' } else { 'u' })
                .collect();
            writeln!(out, "record {} {}", r.id, if flags.is_empty() { "-" } else { &flags }).unwrap();
        }
        Ok(out)
    }

    /// Rebuilds a subset from a manifest over the dataset it was drawn from.
    pub fn from_manifest(text: &str, dataset: &DatasetIndex) -> Result<Self, EpisodicError> {
        let err = |line: usize, reason: String| EpisodicError::Manifest { line, reason };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let k = match lines.next() {
            Some((n, l)) => l
                .strip_prefix("kshot ")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| err(n, format!("expected `kshot <k>`, found `{l}`")))?,
            None => return Err(err(1, "empty manifest".into())),
        };
        let categories = match lines.next() {
            Some((n, l)) => {
                let mut words = l.split_whitespace();
                if words.next() != Some("categories") {
                    return Err(err(n, format!("expected `categories ...`, found `{l}`")));
                }
                words
                    .map(|w| {
                        dataset
                            .categories()
                            .lookup(w)
                            .ok_or_else(|| err(n, format!("unknown category `{w}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => return Err(err(2, "missing categories line".into())),
        };
        let mut records = Vec::new();
        for (n, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            let words: Vec<&str> = l.split_whitespace().collect();
            let [kw, id, flags] = words[..] else {
                return Err(err(n, format!("expected `record <id> <flags>`, found `{l}`")));
            };
            if kw != "record" {
                return Err(err(n, format!("unknown directive `{kw}`")));
            }
            let src = dataset
                .get(id)
                .ok_or_else(|| err(n, format!("record `{id}` not in dataset")))?;
            let flags = if flags == "-" { "" } else { flags };
            if flags.len() != src.annotations.len() {
                return Err(err(
                    n,
                    format!("{} flags for {} annotations", flags.len(), src.annotations.len()),
                ));
            }
            let mut rec = (**src).clone();
            for (a, f) in rec.annotations.iter_mut().zip(flags.chars()) {
                a.ignored = match f {
                    'u' => false,
                    'i' => true,
                    other => return Err(err(n, format!("bad flag `{other}`"))),
                };
            }
            records.push(Arc::new(rec));
        }
        let usable = usable_counts(&records, &categories);
        Ok(Self {
            k,
            categories,
            records,
            usable,
        })
    }
}
