use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::voc::{CategoryId, DatasetIndex, ImageRecord};

use super::{require_name, EpisodicError};

/// One exemplar: a record and the index of its designated box.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportEntry {
    pub category: CategoryId,
    pub record: Arc<ImageRecord>,
    pub box_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub task_id: u64,
    /// Task categories in ascending id order; `support[i]` belongs to
    /// `categories[i]`.
    pub categories: Vec<CategoryId>,
    pub support: Vec<SupportEntry>,
    pub query: Vec<Arc<ImageRecord>>,
}

impl FewShotTask {
    /// Plain-text manifest: category names, support ids with box indices,
    /// then query ids.
    pub fn manifest(&self, dataset: &DatasetIndex) -> Result<String, EpisodicError> {
        let mut out = String::new();
        writeln!(out, "task {}", self.task_id).unwrap();
        for s in &self.support {
            let name = require_name(dataset.categories().name(s.category), 0)?;
            writeln!(out, "support {name} {} {}", s.record.id, s.box_index).unwrap();
        }
        for q in &self.query {
            writeln!(out, "query {}", q.id).unwrap();
        }
        Ok(out)
    }
}

/// Per-category candidate lists, built once and reused across tasks.
#[derive(Clone, Debug)]
pub struct TaskSampler<'a> {
    dataset: &'a DatasetIndex,
    pool: Vec<CategoryId>,
    /// Record indices holding a usable box of `pool[i]`.
    holders: Vec<Vec<usize>>,
}

impl<'a> TaskSampler<'a> {
    pub fn new(dataset: &'a DatasetIndex, pool: &[CategoryId]) -> Result<Self, EpisodicError> {
        if pool.is_empty() {
            return Err(EpisodicError::InvalidParameter("empty category pool".into()));
        }
        let mut pool = pool.to_vec();
        pool.sort();
        pool.dedup();
        let mut holders = Vec::with_capacity(pool.len());
        for &c in &pool {
            let h: Vec<usize> = dataset
                .records()
                .iter()
                .enumerate()
                .filter(|(_, r)| r.has_category(c))
                .map(|(i, _)| i)
                .collect();
            if h.is_empty() {
                return Err(EpisodicError::NoInstances(dataset.categories().name(c).to_string()));
            }
            holders.push(h);
        }
        Ok(Self { dataset, pool, holders })
    }

    pub fn pool(&self) -> &[CategoryId] {
        &self.pool
    }

    /// Samples an N-way task with one support entry per category and up to
    /// `query_size` query images disjoint from the support images.
    pub fn sample(
        &self,
        categories_per_task: usize,
        query_size: usize,
        seed: u64,
    ) -> Result<FewShotTask, EpisodicError> {
        if categories_per_task == 0 || categories_per_task > self.pool.len() {
            return Err(EpisodicError::InvalidParameter(format!(
                "{categories_per_task} categories per task from a pool of {}",
                self.pool.len()
            )));
        }
        if query_size == 0 {
            return Err(EpisodicError::InvalidParameter("query size 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots: Vec<usize> = (0..self.pool.len()).collect();
        slots.shuffle(&mut rng);
        slots.truncate(categories_per_task);
        slots.sort();

        let records = self.dataset.records();
        let mut used = BTreeSet::new();
        let mut support = Vec::with_capacity(slots.len());
        for &slot in &slots {
            let c = self.pool[slot];
            let fresh: Vec<usize> = self.holders[slot]
                .iter()
                .copied()
                .filter(|i| !used.contains(i))
                .collect();
            let pick = match fresh.choose(&mut rng) {
                Some(&i) => i,
                None => *self.holders[slot].choose(&mut rng).expect("holders are nonempty"),
            };
            used.insert(pick);
            let record = &records[pick];
            let boxes: Vec<usize> = record
                .annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.category == c && !a.ignored)
                .map(|(j, _)| j)
                .collect();
            support.push(SupportEntry {
                category: c,
                record: Arc::clone(record),
                box_index: boxes[rng.gen_range(0..boxes.len())],
            });
        }

        let categories: Vec<CategoryId> = slots.iter().map(|&s| self.pool[s]).collect();
        let (mut positives, mut others): (Vec<usize>, Vec<usize>) = (0..records.len())
            .filter(|i| !used.contains(i))
            .partition(|&i| categories.iter().any(|&c| records[i].has_category(c)));
        positives.shuffle(&mut rng);
        others.shuffle(&mut rng);
        let query: Vec<Arc<ImageRecord>> = positives
            .into_iter()
            .chain(others)
            .take(query_size)
            .map(|i| Arc::clone(&records[i]))
            .collect();
        if query.is_empty() {
            return Err(EpisodicError::NoQuery);
        }
        Ok(FewShotTask {
            task_id: seed,
            categories,
            support,
            query,
        })
    }
}

pub fn sample_task(
    dataset: &DatasetIndex,
    categories: &[CategoryId],
    categories_per_task: usize,
    query_size: usize,
    seed: u64,
) -> Result<FewShotTask, EpisodicError> {
    TaskSampler::new(dataset, categories)?.sample(categories_per_task, query_size, seed)
}
