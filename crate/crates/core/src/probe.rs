//! Mean-pooled ridge probes.
//!
//! A probe predicts fitness as `w · mean_pool(features) + b` where the
//! features are SAE latents, raw layer embeddings or logits. The intercept
//! is not penalised. Lambda is chosen on a validation split by Spearman
//! correlation and the chosen model is refit on train ∪ val.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::landscape::SequenceModel;
use crate::linalg;
use crate::sae::SaeParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    SaeLatents,
    LayerEmbedding,
    Logits,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [
        FeatureKind::SaeLatents,
        FeatureKind::LayerEmbedding,
        FeatureKind::Logits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::SaeLatents => "sae_latents",
            FeatureKind::LayerEmbedding => "layer_embedding",
            FeatureKind::Logits => "logits",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature kind `{s}`")))
    }
}

/// Lambda grid used when none is configured: 1e-3, 1e-2, ..., 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

/// Column means of an `L × d` matrix.
pub fn mean_pool(m: &Array2<f64>) -> Result<Array1<f64>> {
    m.mean_axis(Axis(0))
        .filter(|_| m.nrows() > 0)
        .ok_or_else(|| Error::InvalidArgument("cannot pool an empty matrix".into()))
}

/// Pooled features of one sequence from its embedding (and logits).
pub fn pooled_features(
    kind: FeatureKind,
    embedding: &Array2<f64>,
    logits: Option<&Array2<f64>>,
    sae: Option<&SaeParams>,
) -> Result<Array1<f64>> {
    match kind {
        FeatureKind::LayerEmbedding => mean_pool(embedding),
        FeatureKind::Logits => mean_pool(
            logits.ok_or_else(|| Error::InvalidArgument("logit features need logits".into()))?,
        ),
        FeatureKind::SaeLatents => {
            let sae = sae.ok_or_else(|| Error::InvalidArgument("SAE features need an SAE".into()))?;
            mean_pool(&sae.encode(embedding)?)
        }
    }
}

/// Pooled features computed directly from a sequence model.
pub fn sequence_features(
    kind: FeatureKind,
    model: &dyn SequenceModel,
    sae: Option<&SaeParams>,
    sequence: &str,
) -> Result<Array1<f64>> {
    let e = model.embed(sequence)?;
    let logits = match kind {
        FeatureKind::Logits => Some(model.logits_from_embedding(&e)?),
        _ => None,
    };
    pooled_features(kind, &e, logits.as_ref(), sae)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_kind: FeatureKind,
}

impl ProbeModel {
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "feature length {} != probe dimension {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.intercept)
    }

    pub fn predict_rows(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        x.rows().into_iter().map(|r| self.predict(r)).collect()
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "probe",
            "feature_kind": self.feature_kind,
            "lambda": self.lambda,
            "intercept": self.intercept,
        }));
        ck.put_vector("weights", &Array1::from(self.weights.clone()))?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("probe header lacks `{k}`")))
        };
        let feature_kind: FeatureKind = serde_json::from_value(get("feature_kind")?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .as_f64()
                .ok_or_else(|| Error::Format(format!("`{k}` is not a number")))
        };
        Ok(ProbeModel {
            weights: ck.vector("weights")?.to_vec(),
            intercept: num("intercept")?,
            lambda: num("lambda")?,
            feature_kind,
        })
    }
}

fn check_finite(x: &Array2<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} targets", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("ridge needs at least one sample".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite ridge input".into()));
    }
    Ok(())
}

struct Centered {
    x: Array2<f64>,
    y: Array1<f64>,
    x_mean: Array1<f64>,
    y_mean: f64,
}

fn center(x: &Array2<f64>, y: &[f64]) -> Centered {
    let x_mean = x.mean_axis(Axis(0)).expect("nonempty");
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    Centered {
        x: x - &x_mean,
        y: Array1::from_iter(y.iter().map(|v| v - y_mean)),
        x_mean,
        y_mean,
    }
}

fn finish(c: &Centered, w: Array1<f64>, lambda: f64, kind: FeatureKind) -> ProbeModel {
    let intercept = c.y_mean - c.x_mean.dot(&w);
    ProbeModel {
        weights: w.to_vec(),
        intercept,
        lambda,
        feature_kind: kind,
    }
}

fn min_norm_least_squares(c: &Centered) -> Result<Array1<f64>> {
    let y = c.y.clone().insert_axis(Axis(1));
    Ok(linalg::lstsq(&c.x, &y)?.column(0).to_owned())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be finite and >= 0")));
    }
    Ok(())
}

/// Ridge via the `d × d` normal equations `(XᵀX + λI) w = Xᵀy` on centred data.
pub fn ridge_primal(x: &Array2<f64>, y: &[f64], lambda: f64, kind: FeatureKind) -> Result<ProbeModel> {
    check_finite(x, y)?;
    check_lambda(lambda)?;
    let c = center(x, y);
    let w = if lambda == 0.0 {
        min_norm_least_squares(&c)?
    } else {
        let mut a = c.x.t().dot(&c.x);
        a.diag_mut().mapv_inplace(|v| v + lambda);
        linalg::solve_spd(&a, &c.x.t().dot(&c.y))?
    };
    Ok(finish(&c, w, lambda, kind))
}

/// Ridge via the `n × n` dual system: `w = Xᵀ (XXᵀ + λI)⁻¹ y` on centred data.
pub fn ridge_dual(x: &Array2<f64>, y: &[f64], lambda: f64, kind: FeatureKind) -> Result<ProbeModel> {
    check_finite(x, y)?;
    check_lambda(lambda)?;
    let c = center(x, y);
    let w = if lambda == 0.0 {
        min_norm_least_squares(&c)?
    } else {
        let mut k = c.x.dot(&c.x.t());
        k.diag_mut().mapv_inplace(|v| v + lambda);
        let alpha = linalg::solve_spd(&k, &c.y)?;
        c.x.t().dot(&alpha)
    };
    Ok(finish(&c, w, lambda, kind))
}

/// Ridge with an unpenalised intercept; picks the dual form when `n < d`.
pub fn ridge_fit(x: &Array2<f64>, y: &[f64], lambda: f64, kind: FeatureKind) -> Result<ProbeModel> {
    if x.nrows() < x.ncols() {
        ridge_dual(x, y, lambda, kind)
    } else {
        ridge_primal(x, y, lambda, kind)
    }
}

/// Ridge on standardised columns, mapped back to raw-feature weights.
/// Constant columns get zero weight.
pub fn ridge_fit_standardized(
    x: &Array2<f64>,
    y: &[f64],
    lambda: f64,
    kind: FeatureKind,
) -> Result<ProbeModel> {
    check_finite(x, y)?;
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let sd = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { f64::INFINITY });
    let z = (x - &mean) / &sd;
    let fit = ridge_fit(&z, y, lambda, kind)?;
    let w: Array1<f64> = Array1::from(fit.weights) / &sd;
    let intercept = fit.intercept - mean.dot(&w);
    Ok(ProbeModel {
        weights: w.to_vec(),
        intercept,
        lambda,
        feature_kind: kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Set when either input is constant; `rho` is then 0.
    pub degenerate: bool,
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Correlation {
            rho: 0.0,
            degenerate: true,
        };
    }
    Correlation {
        rho: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Spearman correlation: Pearson correlation of average-tie ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("spearman inputs differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two points".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSelection {
    /// Refit on train ∪ val with the selected lambda.
    pub model: ProbeModel,
    /// Validation Spearman per grid entry.
    pub val_scores: Vec<Correlation>,
    /// Every validation score was degenerate; the largest lambda was used.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub standardize: bool,
}

fn fit_with(
    opts: ProbeOptions,
    x: &Array2<f64>,
    y: &[f64],
    lambda: f64,
    kind: FeatureKind,
) -> Result<ProbeModel> {
    if opts.standardize {
        ridge_fit_standardized(x, y, lambda, kind)
    } else {
        ridge_fit(x, y, lambda, kind)
    }
}

/// Grid search over `grid` on the validation split, ties to the larger
/// lambda, then refit on train ∪ val.
pub fn fit_probe_with_validation(
    train: (&Array2<f64>, &[f64]),
    val: (&Array2<f64>, &[f64]),
    grid: &[f64],
    kind: FeatureKind,
    opts: ProbeOptions,
) -> Result<ProbeSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if train.0.nrows() == 0 || val.0.nrows() == 0 {
        return Err(Error::InvalidArgument("train and validation sets must be nonempty".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let m = fit_with(opts, train.0, train.1, lambda, kind)?;
        let pred = m.predict_rows(val.0)?;
        let c = if pred.len() < 2 {
            Correlation {
                rho: 0.0,
                degenerate: true,
            }
        } else {
            spearman(&pred, val.1)?
        };
        scores.push(c);
    }
    let degenerate = scores.iter().all(|c| c.degenerate);
    let best = if degenerate {
        (0..grid.len())
            .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
            .expect("nonempty grid")
    } else {
        (0..grid.len())
            .filter(|&i| !scores[i].degenerate)
            .max_by(|&a, &b| {
                scores[a]
                    .rho
                    .total_cmp(&scores[b].rho)
                    .then(grid[a].total_cmp(&grid[b]))
            })
            .expect("some score is not degenerate")
    };
    let x_all = ndarray::concatenate(Axis(0), &[train.0.view(), val.0.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let y_all: Vec<f64> = train.1.iter().chain(val.1).copied().collect();
    let model = fit_with(opts, &x_all, &y_all, grid[best], kind)?;
    Ok(ProbeSelection {
        model,
        val_scores: scores,
        degenerate,
    })
}
