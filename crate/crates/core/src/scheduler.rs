//! Scale-aware adaptive batch scheduling for variable-length token sequences.
//!
//! The scheduler treats batch construction as a partitioning problem: minimize
//! total zero-padding (the sum over batches of `batch_max - len` per member)
//! while keeping the mix of source datasets inside each batch diverse. The
//! two-phase strategy first sorts the pool by token length and slices it into
//! contiguous buckets, then per epoch shuffles within buckets, splits each
//! bucket into mini-batches, and shuffles the batch order globally. Sorted
//! contiguous grouping is provably optimal for the padding objective at fixed
//! group count (rearrangement argument); [`oracle_min_padding`] provides the
//! brute-force check at small sizes.
//!
//! Three reference strategies (sequential, alternating, global) mirror the
//! standard training paradigms and exist for comparison studies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::{derive_stream, domain, CounterRng};

#[derive(Debug)]
pub enum SchedulerError {
    EmptyPool,
    EmptyBatch,
    DuplicateSample(u64),
    UnknownSample(u64),
    ZeroLength(u64),
    BucketCountOutOfRange { buckets: usize, pool: usize },
    InvalidBatchSize(usize),
    InvalidPaddedLen { sample_id: u64, len: usize, padded: usize },
    BaselineStrategyRequired(Strategy),
    OracleIndivisible { n: usize, batch_size: usize },
    OracleTooLarge { n: usize, max: usize },
}

impl fmt::Display for SchedulerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyPool => write!(f, "sample pool is empty"),
            Self::EmptyBatch => write!(f, "batch has no members"),
            Self::DuplicateSample(id) => write!(f, "duplicate sample id {id}"),
            Self::UnknownSample(id) => write!(f, "unknown sample id {id}"),
            Self::ZeroLength(id) => write!(f, "sample {id} has zero token length"),
            Self::BucketCountOutOfRange { buckets, pool } => {
                write!(f, "bucket count {buckets} out of range for pool of {pool}")
            }
            Self::InvalidBatchSize(n) => write!(f, "batch size {n} must be >= 1"),
            Self::InvalidPaddedLen { sample_id, len, padded } => write!(
                f,
                "sample {sample_id} has length {len} above its batch's padded length {padded}"
            ),
            Self::BaselineStrategyRequired(s) => {
                write!(f, "strategy '{s}' is not a baseline; use build_plan")
            }
            Self::OracleIndivisible { n, batch_size } => {
                write!(f, "batch size {batch_size} does not divide {n} samples")
            }
            Self::OracleTooLarge { n, max } => {
                write!(f, "oracle instance of {n} samples exceeds the {max}-sample guard")
            }
        }
    }
}

impl std::error::Error for SchedulerError {}

/// Pool-wide sample id combining dataset and in-dataset ids.
pub fn pool_id(dataset_id: u32, sample_id: u32) -> u64 {
    (dataset_id as u64) << 32 | sample_id as u64
}

/// One schedulable sample: its pool id, source dataset, and token length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub sample_id: u64,
    pub dataset_id: u32,
    pub token_len: usize,
}

/// The global collection of samples available to an epoch.
#[derive(Debug, Clone)]
pub struct SamplePool {
    entries: Vec<PoolEntry>,
}

impl SamplePool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self, SchedulerError> {
        if entries.is_empty() {
            return Err(SchedulerError::EmptyPool);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.token_len == 0 {
                return Err(SchedulerError::ZeroLength(e.sample_id));
            }
            if !seen.insert(e.sample_id) {
                return Err(SchedulerError::DuplicateSample(e.sample_id));
            }
        }
        Ok(SamplePool { entries })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct token lengths present in the pool.
    pub fn distinct_lengths(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.token_len)
            .collect::<BTreeSet<_>>()
            .len()
    }

    fn index(&self) -> BTreeMap<u64, &PoolEntry> {
        self.entries.iter().map(|e| (e.sample_id, e)).collect()
    }
}

/// A contiguous slice of the length-sorted pool.
#[derive(Debug, Clone)]
pub struct Bucket {
    pub index: usize,
    pub members: Vec<PoolEntry>,
}

/// Batch construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Two-phase bucketed scheduling.
    Proposed,
    /// Datasets one after another in id order.
    Sequential,
    /// Round-robin over datasets, no cross-dataset mixing.
    Alternating,
    /// Uniform shuffle of the whole pool.
    Global,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Proposed => "proposed",
            Self::Sequential => "sequential",
            Self::Alternating => "alternating",
            Self::Global => "global",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" => Ok(Self::Proposed),
            "sequential" => Ok(Self::Sequential),
            "alternating" => Ok(Self::Alternating),
            "global" => Ok(Self::Global),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

/// One mini-batch: member sample ids and the padded length all members get.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub members: Vec<u64>,
    pub padded_len: usize,
}

/// An epoch's ordered list of mini-batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub strategy: Strategy,
    pub seed: u64,
    /// Sizes of the buckets the plan was drawn from; empty for baselines.
    pub bucket_sizes: Vec<usize>,
    pub batches: Vec<MiniBatch>,
}

impl BatchPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }
}

/// Total padding overhead of a plan: sum over batches of
/// `padded_len - token_len` per member.
pub fn compute_jpad(plan: &BatchPlan, pool: &SamplePool) -> Result<u64, SchedulerError> {
    let index = pool.index();
    let mut total = 0u64;
    for batch in &plan.batches {
        if batch.members.is_empty() {
            return Err(SchedulerError::EmptyBatch);
        }
        for &id in &batch.members {
            let entry = index.get(&id).ok_or(SchedulerError::UnknownSample(id))?;
            let pad = batch.padded_len.checked_sub(entry.token_len).ok_or(
                SchedulerError::InvalidPaddedLen {
                    sample_id: id,
                    len: entry.token_len,
                    padded: batch.padded_len,
                },
            )?;
            total += pad as u64;
        }
    }
    Ok(total)
}

/// Shannon entropy (nats) of the empirical dataset-id distribution.
pub fn source_entropy(dataset_ids: &[u32]) -> Result<f64, SchedulerError> {
    if dataset_ids.is_empty() {
        return Err(SchedulerError::EmptyBatch);
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &d in dataset_ids {
        *counts.entry(d).or_default() += 1;
    }
    let n = dataset_ids.len() as f64;
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / n;
        h -= p * p.ln();
    }
    Ok(h)
}

fn sorted_entries(pool: &SamplePool) -> Vec<PoolEntry> {
    let mut entries = pool.entries.clone();
    // Deterministic tie-break beyond length: dataset id, then sample id.
    entries.sort_by_key(|e| (e.token_len, e.dataset_id, e.sample_id));
    entries
}

/// Phase 1: sort the pool by token length and slice it into `buckets`
/// contiguous buckets of capacity `ceil(n / buckets)`.
///
/// The final bucket may be smaller; if the capacity rounding leaves trailing
/// buckets with no samples, those are dropped, so fewer than `buckets`
/// buckets can be returned.
pub fn partition_buckets(pool: &SamplePool, buckets: usize) -> Result<Vec<Bucket>, SchedulerError> {
    if buckets == 0 || buckets > pool.len() {
        return Err(SchedulerError::BucketCountOutOfRange {
            buckets,
            pool: pool.len(),
        });
    }
    let sorted = sorted_entries(pool);
    let capacity = pool.len().div_ceil(buckets);
    let out: Vec<Bucket> = sorted
        .chunks(capacity)
        .enumerate()
        .map(|(index, members)| Bucket {
            index,
            members: members.to_vec(),
        })
        .collect();
    Ok(out)
}

/// The bucket-level padding objective: the overhead that results from
/// padding every member of each bucket to its bucket maximum.
///
/// Splitting a bucket can only lower this, so it is monotone under
/// refinement of bucket boundaries.
pub fn bucket_potential_padding(buckets: &[Bucket]) -> u64 {
    buckets
        .iter()
        .map(|b| {
            let max = b.members.iter().map(|e| e.token_len).max().unwrap_or(0);
            b.members
                .iter()
                .map(|e| (max - e.token_len) as u64)
                .sum::<u64>()
        })
        .sum()
}

/// Exhaustively minimizes the sum of batch maxima over every partition of
/// `lengths` into equal-size batches. Returns the optimum and one witness
/// (as index groups into `lengths`).
///
/// Enumeration anchors each group on its lowest-index remaining element, so
/// each set partition is visited exactly once. Guarded to 12 samples.
pub fn oracle_min_padding(
    lengths: &[usize],
    batch_size: usize,
) -> Result<(u64, Vec<Vec<usize>>), SchedulerError> {
    const MAX_N: usize = 12;
    let n = lengths.len();
    if batch_size == 0 {
        return Err(SchedulerError::InvalidBatchSize(batch_size));
    }
    if n == 0 || !n.is_multiple_of(batch_size) {
        return Err(SchedulerError::OracleIndivisible { n, batch_size });
    }
    if n > MAX_N {
        return Err(SchedulerError::OracleTooLarge { n, max: MAX_N });
    }

    struct Search<'a> {
        lengths: &'a [usize],
        batch_size: usize,
        used: Vec<bool>,
        current: Vec<Vec<usize>>,
        best: u64,
        witness: Vec<Vec<usize>>,
    }

    impl Search<'_> {
        fn run(&mut self, remaining: usize, sum_h: u64) {
            if sum_h >= self.best {
                return; // cannot improve
            }
            if remaining == 0 {
                self.best = sum_h;
                self.witness = self.current.clone();
                return;
            }
            let anchor = self.used.iter().position(|&u| !u).unwrap();
            self.used[anchor] = true;
            let mut group = vec![anchor];
            self.extend_group(anchor, &mut group, remaining, sum_h);
            self.used[anchor] = false;
        }

        fn extend_group(&mut self, min_idx: usize, group: &mut Vec<usize>, remaining: usize, sum_h: u64) {
            if group.len() == self.batch_size {
                let h = group.iter().map(|&i| self.lengths[i]).max().unwrap() as u64;
                self.current.push(group.clone());
                self.run(remaining - self.batch_size, sum_h + h);
                self.current.pop();
                return;
            }
            for i in min_idx + 1..self.lengths.len() {
                if !self.used[i] {
                    self.used[i] = true;
                    group.push(i);
                    self.extend_group(i, group, remaining, sum_h);
                    group.pop();
                    self.used[i] = false;
                }
            }
        }
    }

    let mut search = Search {
        lengths,
        batch_size,
        used: vec![false; n],
        current: Vec::new(),
        best: u64::MAX,
        witness: Vec::new(),
    };
    search.run(n, 0);
    Ok((search.best, search.witness))
}

fn batch_from(entries: &[PoolEntry]) -> MiniBatch {
    MiniBatch {
        members: entries.iter().map(|e| e.sample_id).collect(),
        padded_len: entries.iter().map(|e| e.token_len).max().unwrap_or(0),
    }
}

/// Phase 2: seeded shuffle inside each bucket, split each bucket into
/// consecutive mini-batches (batches never cross buckets; the trailing batch
/// of a bucket may be smaller), then shuffle the batch order globally.
pub fn schedule_epoch(
    buckets: &[Bucket],
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan, SchedulerError> {
    if batch_size == 0 {
        return Err(SchedulerError::InvalidBatchSize(batch_size));
    }
    if buckets.iter().all(|b| b.members.is_empty()) {
        return Err(SchedulerError::EmptyPool);
    }
    let mut batches = Vec::new();
    for bucket in buckets {
        let mut members = bucket.members.clone();
        let mut rng = CounterRng::new(seed, derive_stream(&[domain::SHUFFLE, bucket.index as u64]));
        rng.shuffle(&mut members);
        for chunk in members.chunks(batch_size) {
            batches.push(batch_from(chunk));
        }
    }
    let mut rng = CounterRng::new(seed, derive_stream(&[domain::SHUFFLE, u64::MAX]));
    rng.shuffle(&mut batches);
    Ok(BatchPlan {
        strategy: Strategy::Proposed,
        seed,
        bucket_sizes: buckets.iter().map(|b| b.members.len()).collect(),
        batches,
    })
}

fn group_by_dataset(pool: &SamplePool) -> BTreeMap<u32, Vec<PoolEntry>> {
    let mut groups: BTreeMap<u32, Vec<PoolEntry>> = BTreeMap::new();
    for e in pool.entries() {
        groups.entry(e.dataset_id).or_default().push(*e);
    }
    groups
}

/// Builds one epoch of a reference strategy.
///
/// * sequential: datasets in id order, shuffled and batched within each.
/// * alternating: one batch from each dataset in round-robin, never mixing.
/// * global: uniform shuffle of the whole pool, consecutive batches.
pub fn build_baseline_plan(
    pool: &SamplePool,
    strategy: Strategy,
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan, SchedulerError> {
    if batch_size == 0 {
        return Err(SchedulerError::InvalidBatchSize(batch_size));
    }
    let batches = match strategy {
        Strategy::Proposed => {
            return Err(SchedulerError::BaselineStrategyRequired(strategy));
        }
        Strategy::Sequential => {
            let mut batches = Vec::new();
            for (dataset_id, mut members) in group_by_dataset(pool) {
                let mut rng =
                    CounterRng::new(seed, derive_stream(&[domain::SHUFFLE, dataset_id as u64]));
                rng.shuffle(&mut members);
                for chunk in members.chunks(batch_size) {
                    batches.push(batch_from(chunk));
                }
            }
            batches
        }
        Strategy::Alternating => {
            let mut per_dataset: Vec<Vec<MiniBatch>> = Vec::new();
            for (dataset_id, mut members) in group_by_dataset(pool) {
                let mut rng =
                    CounterRng::new(seed, derive_stream(&[domain::SHUFFLE, dataset_id as u64]));
                rng.shuffle(&mut members);
                per_dataset.push(members.chunks(batch_size).map(batch_from).collect());
            }
            let rounds = per_dataset.iter().map(|b| b.len()).max().unwrap_or(0);
            let mut batches = Vec::new();
            for round in 0..rounds {
                for dataset_batches in &per_dataset {
                    if let Some(b) = dataset_batches.get(round) {
                        batches.push(b.clone());
                    }
                }
            }
            batches
        }
        Strategy::Global => {
            let mut members = pool.entries().to_vec();
            let mut rng = CounterRng::new(seed, derive_stream(&[domain::SHUFFLE, 0]));
            rng.shuffle(&mut members);
            members.chunks(batch_size).map(batch_from).collect()
        }
    };
    Ok(BatchPlan {
        strategy,
        seed,
        bucket_sizes: Vec::new(),
        batches,
    })
}

/// Builds one epoch for any strategy; `buckets` only applies to `Proposed`.
pub fn build_plan(
    pool: &SamplePool,
    strategy: Strategy,
    buckets: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan, SchedulerError> {
    match strategy {
        Strategy::Proposed => {
            let parts = partition_buckets(pool, buckets)?;
            schedule_epoch(&parts, batch_size, seed)
        }
        other => build_baseline_plan(pool, other, batch_size, seed),
    }
}

/// Per-batch source diversity of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_batch_entropy: Vec<f64>,
    pub threshold: f64,
    pub violations: usize,
}

/// Measures per-batch source entropy against a threshold. Never fails on
/// violations; enforcement is the caller's decision.
pub fn diversity_report(
    plan: &BatchPlan,
    pool: &SamplePool,
    threshold: f64,
) -> Result<DiversityReport, SchedulerError> {
    let index = pool.index();
    let mut per_batch_entropy = Vec::with_capacity(plan.batches.len());
    for batch in &plan.batches {
        let ids: Vec<u32> = batch
            .members
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|e| e.dataset_id)
                    .ok_or(SchedulerError::UnknownSample(*id))
            })
            .collect::<Result<_, _>>()?;
        per_batch_entropy.push(source_entropy(&ids)?);
    }
    let violations = per_batch_entropy.iter().filter(|&&h| h < threshold).count();
    Ok(DiversityReport {
        per_batch_entropy,
        threshold,
        violations,
    })
}
