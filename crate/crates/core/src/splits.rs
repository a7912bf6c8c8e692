//! Fitness-extrapolation splits and the nine-trial protocol.
//!
//! Every split returns record indices into the dataset. `train` and `val`
//! together hold exactly `N` records and never intersect `test`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DmsDataset;
use crate::error::{Error, Result};
use crate::probe::{Correlation, FeatureKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTask {
    Random,
    Mutation,
    Position,
    Regime,
    Score,
}

impl SplitTask {
    pub const ALL: [SplitTask; 5] = [
        SplitTask::Random,
        SplitTask::Mutation,
        SplitTask::Position,
        SplitTask::Regime,
        SplitTask::Score,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTask::Random => "random",
            SplitTask::Mutation => "mutation",
            SplitTask::Position => "position",
            SplitTask::Regime => "regime",
            SplitTask::Score => "score",
        }
    }

    /// Validation share of N: 20% for regime, 10% otherwise.
    pub fn default_val_fraction(self) -> f64 {
        match self {
            SplitTask::Regime => 0.2,
            _ => 0.1,
        }
    }

    /// Whether the test set depends on `seed_test`.
    pub fn has_random_test_set(self) -> bool {
        matches!(self, SplitTask::Random | SplitTask::Mutation | SplitTask::Position)
    }
}

impl std::fmt::Display for SplitTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split task `{s}`")))
    }
}

/// Training-set sizes matching standard plate formats.
pub const LOW_N_SIZES: [usize; 4] = [8, 24, 96, 384];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub task: SplitTask,
    pub n: usize,
    pub seed_test: u64,
    pub seed_sample: u64,
    pub val_fraction: f64,
}

impl SplitSpec {
    pub fn new(task: SplitTask, n: usize, seed_test: u64, seed_sample: u64) -> Self {
        SplitSpec {
            task,
            n,
            seed_test,
            seed_sample,
            val_fraction: task.default_val_fraction(),
        }
    }

    /// Validation count: `ceil(val_fraction · N)`, at least 1.
    pub fn val_count(&self) -> usize {
        ((self.val_fraction * self.n as f64).ceil() as usize).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("N = {} must be at least 2", self.n)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitMetadata {
    Random { test_fraction: f64 },
    Mutation { held_out: Vec<(usize, char)> },
    Position { held_out: Vec<usize> },
    Regime { max_train_count: usize, low_singles: bool },
    Score { wt_threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub metadata: SplitMetadata,
}

/// Draw `spec.n` indices from `pool` with `seed_sample` and split them into
/// train and validation.
fn sample_train_val(
    mut pool: Vec<usize>,
    spec: &SplitSpec,
    test: Vec<usize>,
    metadata: SplitMetadata,
) -> Result<SplitResult> {
    if pool.len() < spec.n {
        return Err(Error::Split(format!(
            "{} split needs {} eligible training records, found {}",
            spec.task,
            spec.n,
            pool.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Split(format!("{} split produced an empty test set", spec.task)));
    }
    pool.sort_unstable();
    let mut rng = rng::seeded(spec.seed_sample);
    pool.shuffle(&mut rng);
    pool.truncate(spec.n);
    let val = pool.split_off(spec.n - spec.val_count().min(spec.n - 1));
    let mut test = test;
    test.sort_unstable();
    Ok(SplitResult {
        train: pool,
        val,
        test,
        metadata,
    })
}

/// 80/20 partition of a universe (75/25 when it has at most four items);
/// returns the held-out items.
fn hold_out<T: Clone + Ord>(universe: &BTreeSet<T>, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut items: Vec<T> = universe.iter().cloned().collect();
    let frac = if items.len() <= 4 { 0.75 } else { 0.8 };
    let n_train = ((frac * items.len() as f64).round() as usize).clamp(1, items.len() - 1);
    let mut rng = rng::seeded(seed);
    items.shuffle(&mut rng);
    let held = items.split_off(n_train);
    (items, held)
}

pub fn split_random(ds: &DmsDataset, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let n_test = (0.1 * ds.len() as f64).ceil() as usize;
    if ds.len() < spec.n + n_test {
        return Err(Error::Split(format!(
            "random split needs {} records, dataset has {}",
            spec.n + n_test,
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::seeded(spec.seed_test));
    let rest = idx.split_off(n_test);
    sample_train_val(rest, spec, idx, SplitMetadata::Random { test_fraction: 0.1 })
}

pub fn split_mutation(ds: &DmsDataset, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let universe: BTreeSet<(usize, u8)> = ds
        .records
        .iter()
        .flat_map(|r| r.mutations.iter().map(|m| (m.position, m.to)))
        .collect();
    if universe.len() < 2 {
        return Err(Error::Split("mutation split needs at least two distinct mutations".into()));
    }
    let (_, held) = hold_out(&universe, spec.seed_test);
    let held_set: HashSet<(usize, u8)> = held.iter().copied().collect();
    let (mut pool, mut test) = (Vec::new(), Vec::new());
    for (i, r) in ds.records.iter().enumerate() {
        if r.mutations.iter().any(|m| held_set.contains(&(m.position, m.to))) {
            test.push(i);
        } else {
            pool.push(i);
        }
    }
    let mut held_out: Vec<(usize, char)> = held.into_iter().map(|(p, a)| (p, a as char)).collect();
    held_out.sort_unstable();
    sample_train_val(pool, spec, test, SplitMetadata::Mutation { held_out })
}

pub fn split_position(ds: &DmsDataset, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let universe: BTreeSet<usize> = ds.mutated_positions().into_iter().collect();
    if universe.len() < 2 {
        return Err(Error::Split("position split needs at least two mutated positions".into()));
    }
    let (_, held) = hold_out(&universe, spec.seed_test);
    let held_set: HashSet<usize> = held.iter().copied().collect();
    let (mut pool, mut test) = (Vec::new(), Vec::new());
    for (i, r) in ds.records.iter().enumerate() {
        if r.mutations.iter().any(|m| held_set.contains(&m.position)) {
            test.push(i);
        } else {
            pool.push(i);
        }
    }
    let mut held_out = held;
    held_out.sort_unstable();
    sample_train_val(pool, spec, test, SplitMetadata::Position { held_out })
}

/// Train on low mutation counts, test on everything above the boundary.
///
/// With at most double mutants: train on singles, test on doubles. With
/// higher orders: train on singles and doubles, test on the rest; when that
/// pool is smaller than N the boundary moves up to triples.
pub fn split_regime(ds: &DmsDataset, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let max_count = ds.records.iter().map(|r| r.mutation_count()).max().unwrap_or(0);
    if max_count < 2 {
        return Err(Error::Split("regime split needs records with at least two mutations".into()));
    }
    let by_boundary = |b: usize| {
        let pool: Vec<usize> = (0..ds.len())
            .filter(|&i| (1..=b).contains(&ds.records[i].mutation_count()))
            .collect();
        let test: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.records[i].mutation_count() > b)
            .collect();
        (pool, test)
    };
    let (boundary, low_singles) = if max_count == 2 {
        (1, false)
    } else {
        let (pool, _) = by_boundary(2);
        if pool.len() < spec.n && max_count > 3 {
            (3, true)
        } else {
            (2, false)
        }
    };
    let (pool, test) = by_boundary(boundary);
    sample_train_val(
        pool,
        spec,
        test,
        SplitMetadata::Regime {
            max_train_count: boundary,
            low_singles,
        },
    )
}

/// Train below the wildtype score, test above it; ties are dropped.
pub fn split_score(ds: &DmsDataset, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let wt = ds.wildtype_fitness;
    let pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].fitness < wt).collect();
    let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].fitness > wt).collect();
    sample_train_val(pool, spec, test, SplitMetadata::Score { wt_threshold: wt })
}

pub fn make_split(ds: &DmsDataset, spec: &SplitSpec) -> Result<SplitResult> {
    match spec.task {
        SplitTask::Random => split_random(ds, spec),
        SplitTask::Mutation => split_mutation(ds, spec),
        SplitTask::Position => split_position(ds, spec),
        SplitTask::Regime => split_regime(ds, spec),
        SplitTask::Score => split_score(ds, spec),
    }
}

/// The nine (seed_test, seed_sample) pairs for a task.
pub fn trial_seeds(task: SplitTask) -> Vec<(u64, u64)> {
    if task.has_random_test_set() {
        (0..3).flat_map(|t| (0..3).map(move |s| (t, s))).collect()
    } else {
        (0..9).map(|s| (0, s)).collect()
    }
}

/// What a pipeline reports for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub lambda: f64,
    pub spearman: Correlation,
}

/// A model-fitting procedure evaluated on one split.
pub trait TrialPipeline: Sync {
    fn feature_kind(&self) -> FeatureKind;

    fn run(&self, ds: &DmsDataset, split: &SplitResult) -> Result<TrialOutcome>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub task: SplitTask,
    pub n: usize,
    pub seed_test: u64,
    pub seed_sample: u64,
    pub feature_kind: FeatureKind,
    pub lambda: Option<f64>,
    pub spearman_abs: Option<f64>,
    pub degenerate: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub task: SplitTask,
    pub n: usize,
    pub feature_kind: FeatureKind,
    pub rows: Vec<TrialRow>,
    /// Mean of |Spearman| over successful trials.
    pub mean: Option<f64>,
    /// Population standard deviation of |Spearman| over successful trials.
    pub std: Option<f64>,
}

impl TrialReport {
    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.task,
                    r.n,
                    r.seed_test,
                    r.seed_sample,
                    r.feature_kind,
                    r.lambda.map(|v| format!("{v:?}")).unwrap_or_default(),
                    r.spearman_abs.map(|v| format!("{v:?}")).unwrap_or_default(),
                )
            })
            .collect()
    }

    pub const CSV_HEADER: &'static str =
        "task,N,seed_test,seed_sample,feature_kind,lambda,spearman_abs";

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.spearman_abs).collect()
    }
}

/// Run the nine-trial protocol for one task, N and pipeline. Trials run in
/// parallel; rows come back in seed order.
pub fn run_trials(
    ds: &DmsDataset,
    task: SplitTask,
    n: usize,
    pipeline: &dyn TrialPipeline,
) -> TrialReport {
    let kind = pipeline.feature_kind();
    let rows: Vec<TrialRow> = trial_seeds(task)
        .into_par_iter()
        .map(|(seed_test, seed_sample)| {
            let spec = SplitSpec::new(task, n, seed_test, seed_sample);
            let outcome = make_split(ds, &spec).and_then(|s| pipeline.run(ds, &s));
            let mut row = TrialRow {
                task,
                n,
                seed_test,
                seed_sample,
                feature_kind: kind,
                lambda: None,
                spearman_abs: None,
                degenerate: false,
                error: None,
            };
            match outcome {
                Ok(o) => {
                    row.lambda = Some(o.lambda);
                    row.spearman_abs = Some(o.spearman.rho.abs());
                    row.degenerate = o.spearman.degenerate;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.spearman_abs).collect();
    let (mean, std) = mean_std(&vals);
    TrialReport {
        task,
        n,
        feature_kind: kind,
        rows,
        mean,
        std,
    }
}

pub fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Count how often each mutation count occurs (diagnostics for regime splits).
pub fn mutation_count_histogram(ds: &DmsDataset) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for r in &ds.records {
        *h.entry(r.mutation_count()).or_insert(0) += 1;
    }
    h
}

/// Check every split invariant; returns a description of the first violation.
pub fn check_invariants(ds: &DmsDataset, spec: &SplitSpec, s: &SplitResult) -> Result<()> {
    let fail = |msg: String| Err(Error::Split(format!("{} invariant violated: {msg}", spec.task)));
    let train: HashSet<usize> = s.train.iter().copied().collect();
    let val: HashSet<usize> = s.val.iter().copied().collect();
    let test: HashSet<usize> = s.test.iter().copied().collect();
    if train.len() != s.train.len() || val.len() != s.val.len() || test.len() != s.test.len() {
        return fail("duplicate indices".into());
    }
    if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
        return fail("sets overlap".into());
    }
    if s.train.len() + s.val.len() != spec.n {
        return fail(format!("|train|+|val| = {} != N", s.train.len() + s.val.len()));
    }
    if s.test.is_empty() || s.val.is_empty() {
        return fail("empty test or validation set".into());
    }
    let fit: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
    match &s.metadata {
        SplitMetadata::Random { .. } => {}
        SplitMetadata::Mutation { held_out } => {
            let held: HashSet<(usize, u8)> = held_out.iter().map(|&(p, a)| (p, a as u8)).collect();
            for &i in &fit {
                if ds.records[i].mutations.iter().any(|m| held.contains(&(m.position, m.to))) {
                    return fail(format!("training record {i} carries a held-out mutation"));
                }
            }
            for &i in &s.test {
                if !ds.records[i].mutations.iter().any(|m| held.contains(&(m.position, m.to))) {
                    return fail(format!("test record {i} has no held-out mutation"));
                }
            }
        }
        SplitMetadata::Position { held_out } => {
            let held: HashSet<usize> = held_out.iter().copied().collect();
            for &i in &fit {
                if ds.records[i].mutations.iter().any(|m| held.contains(&m.position)) {
                    return fail(format!("training record {i} touches a held-out position"));
                }
            }
            for &i in &s.test {
                if !ds.records[i].mutations.iter().any(|m| held.contains(&m.position)) {
                    return fail(format!("test record {i} touches no held-out position"));
                }
            }
        }
        SplitMetadata::Regime { .. } => {
            let max_train = fit.iter().map(|&i| ds.records[i].mutation_count()).max().unwrap_or(0);
            let min_test = s.test.iter().map(|&i| ds.records[i].mutation_count()).min().unwrap_or(0);
            if min_test <= max_train {
                return fail(format!("test count {min_test} <= train count {max_train}"));
            }
        }
        SplitMetadata::Score { wt_threshold } => {
            let max_train = fit.iter().map(|&i| ds.records[i].fitness).fold(f64::NEG_INFINITY, f64::max);
            let min_test = s.test.iter().map(|&i| ds.records[i].fitness).fold(f64::INFINITY, f64::min);
            if !(max_train < *wt_threshold && *wt_threshold < min_test) {
                return fail(format!("{max_train} < {wt_threshold} < {min_test} does not hold"));
            }
        }
    }
    Ok(())
}
