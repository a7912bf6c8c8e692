//! In-silico fitness evaluation.
//!
//! [`MlpModel`] is a `[L·20, 128, 64, 1]` ReLU network over flattened one-hot
//! sequences, trained full-batch with AdamW on MSE and early stopping on a
//! held-out split. [`LookupTable`] and the planted model's ground truth are
//! the alternatives for fully enumerated landscapes. [`evaluate_designs`]
//! reduces a scored design pool to mean, max, top-10% and top-20% means.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{encode_indices, DmsDataset, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::landscape::SyntheticModel;
use crate::rng;
use crate::steering::DesignCandidate;

pub const HIDDEN: [usize; 2] = [128, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub train_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            lr: 1e-3,
            max_epochs: 1000,
            patience: Some(10),
            train_fraction: 0.8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub length: usize,
    /// `(L·20) × 128`, row `p·20 + a` is the input weight of residue `a` at `p`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array1<f64>,
    pub b3: f64,
}

struct Activations {
    h1: Array2<f64>,
    a1: Array2<f64>,
    h2: Array2<f64>,
    a2: Array2<f64>,
    out: Array1<f64>,
}

impl MlpModel {
    pub fn init(length: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let input = length * VOCAB_SIZE;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let w1 = uniform(input, HIDDEN[0], input);
        let w2 = uniform(HIDDEN[0], HIDDEN[1], HIDDEN[0]);
        let w3 = uniform(HIDDEN[1], 1, HIDDEN[1]).column(0).to_owned();
        MlpModel {
            length,
            w1,
            b1: Array1::zeros(HIDDEN[0]),
            w2,
            b2: Array1::zeros(HIDDEN[1]),
            w3,
            b3: 0.0,
        }
    }

    fn indices(&self, sequences: &[&str]) -> Result<Vec<Vec<usize>>> {
        sequences
            .iter()
            .map(|s| {
                if s.len() != self.length {
                    return Err(Error::Shape(format!(
                        "sequence length {} != oracle length {}",
                        s.len(),
                        self.length
                    )));
                }
                Ok(encode_indices(s)?
                    .into_iter()
                    .enumerate()
                    .map(|(p, a)| p * VOCAB_SIZE + a)
                    .collect())
            })
            .collect()
    }

    fn forward(&self, idx: &[Vec<usize>]) -> Activations {
        let mut h1 = Array2::zeros((idx.len(), HIDDEN[0]));
        for (mut row, cols) in h1.rows_mut().into_iter().zip(idx) {
            row.assign(&self.b1);
            for &c in cols {
                row += &self.w1.row(c);
            }
        }
        let a1 = h1.mapv(|v: f64| v.max(0.0));
        let h2 = a1.dot(&self.w2) + &self.b2;
        let a2 = h2.mapv(|v: f64| v.max(0.0));
        let out = a2.dot(&self.w3) + self.b3;
        Activations { h1, a1, h2, a2, out }
    }

    pub fn predict(&self, sequences: &[&str]) -> Result<Vec<f64>> {
        let idx = self.indices(sequences)?;
        Ok(self.forward(&idx).out.to_vec())
    }

    fn params(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.b3),
        ]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b3),
        ]
    }

    /// MSE and its gradient (same layout as the parameters).
    fn loss_and_grad(&self, idx: &[Vec<usize>], y: &[f64]) -> (f64, MlpModel) {
        let n = idx.len() as f64;
        let act = self.forward(idx);
        let resid = &act.out - &Array1::from(y.to_vec());
        let loss = resid.dot(&resid) / n;
        let g_out = resid * (2.0 / n);
        let mut g = MlpModel {
            length: self.length,
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(HIDDEN[0]),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(HIDDEN[1]),
            w3: act.a2.t().dot(&g_out),
            b3: g_out.sum(),
        };
        let mut g_h2 = g_out.view().insert_axis(Axis(1)).dot(&self.w3.view().insert_axis(Axis(0)));
        g_h2.zip_mut_with(&act.h2, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        g.w2 = act.a1.t().dot(&g_h2).as_standard_layout().into_owned();
        g.b2 = g_h2.sum_axis(Axis(0));
        let mut g_h1 = g_h2.dot(&self.w2.t());
        g_h1.zip_mut_with(&act.h1, |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        g.b1 = g_h1.sum_axis(Axis(0));
        for (grow, cols) in g_h1.rows().into_iter().zip(idx) {
            for &c in cols {
                let mut target = g.w1.row_mut(c);
                target += &grow;
            }
        }
        (loss, g)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "mlp",
            "length": self.length,
            "b3": self.b3,
        }));
        ck.put_matrix("w1", self.w1.clone())?;
        ck.put_vector("b1", &self.b1)?;
        ck.put_matrix("w2", self.w2.clone())?;
        ck.put_vector("b2", &self.b2)?;
        ck.put_vector("w3", &self.w3)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let length = ck
            .header
            .get("length")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("mlp checkpoint lacks `length`".into()))? as usize;
        let b3 = ck
            .header
            .get("b3")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format("mlp checkpoint lacks `b3`".into()))?;
        let m = MlpModel {
            length,
            w1: ck.matrix("w1")?.as_standard_layout().into_owned(),
            b1: ck.vector("b1")?,
            w2: ck.matrix("w2")?.as_standard_layout().into_owned(),
            b2: ck.vector("b2")?,
            w3: ck.vector("w3")?,
            b3,
        };
        if m.w1.dim() != (length * VOCAB_SIZE, HIDDEN[0]) || m.w2.dim() != (HIDDEN[0], HIDDEN[1]) || m.w3.len() != HIDDEN[1] {
            return Err(Error::Format("mlp checkpoint has wrong layer shapes".into()));
        }
        Ok(m)
    }
}

/// What [`EarlyStopper::observe`] decided about an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    bad_epochs: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        let epoch = self.epoch;
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTraining {
    pub model: MlpModel,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    /// RMSE of the returned model on the validation split (training split
    /// when there is none).
    pub val_rmse: f64,
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &MlpModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut MlpModel, grad: &MlpModel, lr: f64, decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (p, g)) in model.params_mut().into_iter().zip(grad.params()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                p[i] -= lr * (update + decay * p[i]);
            }
        }
    }
}

/// Train the oracle on a dataset (including its wildtype row if present).
pub fn train_mlp(ds: &DmsDataset, cfg: &MlpConfig) -> Result<MlpTraining> {
    if ds.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "oracle training needs at least 10 records, got {}",
            ds.len()
        )));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) || !(cfg.lr > 0.0) {
        return Err(Error::Config("oracle needs lr > 0 and train_fraction in (0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::seeded(rng::derive(cfg.seed, 1)));
    let n_train = if cfg.train_fraction >= 1.0 {
        ds.len()
    } else {
        ((cfg.train_fraction * ds.len() as f64).round() as usize).clamp(1, ds.len() - 1)
    };
    let seqs: Vec<&str> = ds.records.iter().map(|r| r.sequence.as_str()).collect();
    let mut model = MlpModel::init(ds.wildtype.len(), cfg.seed);
    let all_idx = model.indices(&seqs)?;
    let pick = |ids: &[usize]| -> (Vec<Vec<usize>>, Vec<f64>) {
        (
            ids.iter().map(|&i| all_idx[i].clone()).collect(),
            ids.iter().map(|&i| ds.records[i].fitness).collect(),
        )
    };
    let (tr_x, tr_y) = pick(&order[..n_train]);
    let (va_x, va_y) = pick(&order[n_train..]);
    let has_val = !va_x.is_empty();

    let mut opt = AdamW::new(&model);
    let mut stopper = cfg.patience.map(EarlyStopper::new);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.max_epochs {
        let (loss, grad) = model.loss_and_grad(&tr_x, &tr_y);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("oracle loss became {loss} at epoch {epoch}")));
        }
        opt.step(&mut model, &grad, cfg.lr, cfg.weight_decay);
        train_loss.push(mse(&model, &tr_x, &tr_y));
        let monitored = if has_val { mse(&model, &va_x, &va_y) } else { *train_loss.last().unwrap() };
        val_loss.push(monitored);
        match stopper.as_mut().map(|s| s.observe(monitored)) {
            Some(StopDecision::Improved) => {
                best = model.clone();
                best_epoch = epoch;
            }
            Some(StopDecision::Stop) => break,
            Some(StopDecision::Continue) => {}
            None => {
                best = model.clone();
                best_epoch = epoch;
            }
        }
    }
    let val_rmse = if has_val { mse(&best, &va_x, &va_y) } else { mse(&best, &tr_x, &tr_y) }.sqrt();
    Ok(MlpTraining {
        model: best,
        train_loss,
        val_loss,
        best_epoch,
        val_rmse,
    })
}

fn mse(model: &MlpModel, x: &[Vec<usize>], y: &[f64]) -> f64 {
    let out = model.forward(x).out;
    out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// Anything that assigns a fitness to a sequence.
pub trait FitnessScorer: Sync {
    fn score(&self, sequence: &str) -> Result<f64>;
}

impl FitnessScorer for MlpModel {
    fn score(&self, sequence: &str) -> Result<f64> {
        Ok(self.predict(&[sequence])?[0])
    }
}

impl FitnessScorer for SyntheticModel {
    fn score(&self, sequence: &str) -> Result<f64> {
        self.true_fitness(sequence)
    }
}

/// Measured fitness by exact sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LookupTable(pub HashMap<String, f64>);

impl LookupTable {
    pub fn from_dataset(ds: &DmsDataset) -> Self {
        let mut t: HashMap<String, f64> = ds.records.iter().map(|r| (r.sequence.clone(), r.fitness)).collect();
        t.entry(ds.wildtype.clone()).or_insert(ds.wildtype_fitness);
        LookupTable(t)
    }
}

impl FitnessScorer for LookupTable {
    fn score(&self, sequence: &str) -> Result<f64> {
        self.0
            .get(sequence)
            .copied()
            .ok_or_else(|| Error::LookupMiss(sequence.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignStats {
    pub n: usize,
    pub mean: f64,
    pub max: f64,
    pub top10pct_mean: f64,
    pub top20pct_mean: f64,
}

/// Mean of the `ceil(fraction · n)` largest scores.
pub fn top_fraction_mean(scores: &[f64], fraction: f64) -> f64 {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

pub fn pool_statistics(scores: &[f64]) -> Result<DesignStats> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize an empty design pool".into()));
    }
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite design score {x}")));
    }
    // Summation rounding can nudge a longer prefix mean above a shorter one
    // on tied scores; the exact values are ordered, so clamp.
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top10pct_mean = top_fraction_mean(scores, 0.1).min(max);
    let top20pct_mean = top_fraction_mean(scores, 0.2).min(top10pct_mean);
    let mean = (scores.iter().sum::<f64>() / scores.len() as f64).min(top20pct_mean);
    Ok(DesignStats {
        n: scores.len(),
        mean,
        max,
        top10pct_mean,
        top20pct_mean,
    })
}

pub fn score_designs(scorer: &dyn FitnessScorer, designs: &[DesignCandidate]) -> Result<Vec<f64>> {
    designs.iter().map(|d| scorer.score(&d.sequence)).collect()
}

pub fn evaluate_designs(scorer: &dyn FitnessScorer, designs: &[DesignCandidate]) -> Result<DesignStats> {
    pool_statistics(&score_designs(scorer, designs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_survives_rounding_on_ties() {
        let s = pool_statistics(&[0.1; 3]).unwrap();
        assert!(s.max >= s.top10pct_mean && s.top10pct_mean >= s.top20pct_mean && s.top20pct_mean >= s.mean);
        assert!((s.mean - 0.1).abs() < 1e-15);
    }
    use crate::landscape::{sample_dataset, DatasetConfig, SyntheticConfig};

    #[test]
    fn top_fractions_use_ceiling() {
        let scores: Vec<f64> = (1..=50).map(f64::from).collect();
        let s = pool_statistics(&scores).unwrap();
        assert_eq!(s.top10pct_mean, (46..=50).sum::<i32>() as f64 / 5.0);
        assert_eq!(s.top20pct_mean, (41..=50).sum::<i32>() as f64 / 10.0);
        assert_eq!(s.max, 50.0);
        assert_eq!(s.mean, 25.5);
        let one = pool_statistics(&[0.7]).unwrap();
        assert!(one.mean == 0.7 && one.max == 0.7 && one.top10pct_mean == 0.7 && one.top20pct_mean == 0.7);
        assert!(pool_statistics(&[]).is_err());
        assert_eq!(top_fraction_mean(&[1.0, 2.0, 3.0], 0.1), 3.0);
    }

    #[test]
    fn patience_stops_ten_after_last_improvement() {
        let mut s = EarlyStopper::new(10);
        let trace = [3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let stop = trace.iter().position(|&l| s.observe(l) == StopDecision::Stop).unwrap();
        assert_eq!(s.best_epoch, Some(1));
        assert_eq!(stop, 11);
    }

    fn small_dataset(n: usize, seed: u64) -> (SyntheticModel, DmsDataset) {
        let m = SyntheticModel::new(SyntheticConfig { length: 12, d_model: 16, n_motifs: 3, seed, epistasis: true }).unwrap();
        let ds = sample_dataset(&m, &DatasetConfig { n_variants: n, seed, ..DatasetConfig::default() }).unwrap();
        (m, ds)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, ds) = small_dataset(12, 1);
        let model = MlpModel::init(12, 3);
        let seqs: Vec<&str> = ds.records.iter().map(|r| r.sequence.as_str()).collect();
        let idx = model.indices(&seqs).unwrap();
        let y = ds.fitness();
        let (_, g) = model.loss_and_grad(&idx, &y);
        let eps = 1e-6;
        let gp = g.params();
        for k in 0..6 {
            let len = model.params()[k].len();
            for &i in &[0, len / 3, len - 1] {
                let mut plus = model.clone();
                plus.params_mut()[k][i] += eps;
                let mut minus = model.clone();
                minus.params_mut()[k][i] -= eps;
                let num = (mse(&plus, &idx, &y) - mse(&minus, &idx, &y)) / (2.0 * eps);
                let ana = gp[k][i];
                assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "param {k}[{i}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn memorizes_twenty_records() {
        let (_, ds) = small_dataset(19, 0);
        let cfg = MlpConfig { patience: None, train_fraction: 1.0, ..MlpConfig::default() };
        let t = train_mlp(&ds, &cfg).unwrap();
        assert_eq!(ds.len(), 20);
        assert!(*t.train_loss.last().unwrap() < 1e-3, "{:?}", t.train_loss.last());
    }

    #[test]
    fn training_is_deterministic_and_returns_best() {
        let (_, ds) = small_dataset(80, 2);
        let cfg = MlpConfig { max_epochs: 200, ..MlpConfig::default() };
        let a = train_mlp(&ds, &cfg).unwrap();
        let b = train_mlp(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let best = a.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.val_loss[a.best_epoch], best);
        assert!((a.val_rmse - best.sqrt()).abs() < 1e-12);
        let seqs: Vec<&str> = ds.records.iter().map(|r| r.sequence.as_str()).collect();
        assert_eq!(a.model.predict(&seqs).unwrap(), a.model.predict(&seqs).unwrap());
        assert!(train_mlp(&small_dataset(5, 0).1, &cfg).is_err());
    }

    #[test]
    fn mlp_checkpoint_round_trip() {
        let m = MlpModel::init(5, 1);
        let back = MlpModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.w2.dim(), m.w2.dim());
        assert!((back.w2[[3, 4]] - m.w2[[3, 4]]).abs() < 1e-6);
    }

    #[test]
    fn lookup_mode() {
        let (model, ds) = small_dataset(30, 4);
        let table = LookupTable::from_dataset(&ds);
        let d = |s: &str| DesignCandidate {
            sequence: s.into(),
            source_latent: None,
            multiplier: None,
            predicted_fitness: 0.0,
            mutation_count: 0,
        };
        let designs: Vec<DesignCandidate> = ds.records.iter().take(10).map(|r| d(&r.sequence)).collect();
        let s = evaluate_designs(&table, &designs).unwrap();
        assert!(s.max >= s.mean);
        let truth = evaluate_designs(&model, &designs).unwrap();
        assert_eq!(truth.n, 10);
        let err = evaluate_designs(&table, &[d(&"W".repeat(12))]).unwrap_err();
        assert!(matches!(err, Error::LookupMiss(ref s) if s == &"W".repeat(12)));
    }
}
