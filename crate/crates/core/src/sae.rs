//! TopK sparse autoencoder.
//!
//! Embeddings are stored position-major (`L × d_model`), so the encoder is
//!
//! ```text
//! z = TopK((x - b_pre) · W_encᵀ)        L × d_sae
//! x̂ = z · W_decᵀ + b_pre                L × d_model
//! ```
//!
//! with TopK applied per row (per sequence position). `b_pre` is one
//! `d_model` vector broadcast over positions.
//!
//! Training minimises `mse + alpha · aux`, both normalised per element. The
//! auxiliary term reconstructs the residual `e = x - x̂` from the top
//! `k_aux` pre-activations of currently dead latents. Gradients are derived
//! by hand and verified against central differences in [`grad_check`].

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::EmbeddingStore;
use crate::error::{Error, Result};
use crate::rng;

/// `L × d_sae` latent activations with at most `k` nonzeros per row.
pub type LatentMatrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// d_sae × d_model
    pub w_enc: Array2<f64>,
    /// d_model × d_sae
    pub w_dec: Array2<f64>,
    /// d_model
    pub b_pre: Array1<f64>,
    pub k: usize,
    pub k_aux: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeLosses {
    pub mse: f64,
    pub aux: f64,
    pub total: f64,
}

/// Indices of the `k` largest entries, ties to the lowest index, in
/// descending order of value.
pub(crate) fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Keep the `k` largest values of every row verbatim and zero the rest.
pub fn topk_rows(pre: &Array2<f64>, k: usize) -> Result<LatentMatrix> {
    if k == 0 || k > pre.ncols() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            pre.ncols()
        )));
    }
    let mut out = Array2::zeros(pre.dim());
    for (r, row) in pre.rows().into_iter().enumerate() {
        let row = row.to_vec();
        for j in topk_indices(&row, k) {
            out[[r, j]] = row[j];
        }
    }
    Ok(out)
}

impl SaeParams {
    pub fn d_sae(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (s, d) = self.w_enc.dim();
        if self.w_dec.dim() != (d, s) || self.b_pre.len() != d {
            return Err(Error::Shape(format!(
                "inconsistent SAE shapes: w_enc {:?}, w_dec {:?}, b_pre {}",
                self.w_enc.dim(),
                self.w_dec.dim(),
                self.b_pre.len()
            )));
        }
        if self.k == 0 || self.k > s || self.k_aux > s {
            return Err(Error::InvalidArgument(format!(
                "k = {}, k_aux = {} must not exceed d_sae = {s}",
                self.k, self.k_aux
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.d_model() {
            return Err(Error::Shape(format!(
                "input has {} columns, SAE expects d_model = {}",
                x.ncols(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// `(x - b_pre) · W_encᵀ`
    pub fn pre_activations(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok((x - &self.b_pre).dot(&self.w_enc.t()))
    }

    pub fn encode(&self, x: &Array2<f64>) -> Result<LatentMatrix> {
        topk_rows(&self.pre_activations(x)?, self.k)
    }

    pub fn decode(&self, z: &LatentMatrix) -> Result<Array2<f64>> {
        if z.ncols() != self.d_sae() {
            return Err(Error::Shape(format!(
                "latents have {} columns, SAE has d_sae = {}",
                z.ncols(),
                self.d_sae()
            )));
        }
        Ok(z.dot(&self.w_dec.t()) + &self.b_pre)
    }

    pub fn reconstruct(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.decode(&self.encode(x)?)
    }

    /// Scale every decoder column to unit Euclidean norm.
    pub fn normalize_decoder(&mut self) {
        for mut col in self.w_dec.columns_mut() {
            let n = col.dot(&col).sqrt();
            if n > 0.0 {
                col.mapv_inplace(|v| v / n);
            }
        }
    }

    pub fn to_checkpoint(&self, header: serde_json::Value) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "sae",
            "k": self.k,
            "k_aux": self.k_aux,
            "alpha": self.alpha,
            "meta": header,
        }));
        ck.put_matrix("w_enc", self.w_enc.clone())?;
        ck.put_matrix("w_dec", self.w_dec.clone())?;
        ck.put_vector("b_pre", &self.b_pre)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ck.header
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{name}`")))
        };
        let as_usize = |v: serde_json::Value, name: &str| {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Format(format!("`{name}` is not an integer")))
        };
        let p = SaeParams {
            w_enc: ck.matrix("w_enc")?,
            w_dec: ck.matrix("w_dec")?,
            b_pre: ck.vector("b_pre")?,
            k: as_usize(field("k")?, "k")?,
            k_aux: as_usize(field("k_aux")?, "k_aux")?,
            alpha: field("alpha")?
                .as_f64()
                .ok_or_else(|| Error::Format("`alpha` is not a number".into()))?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Everything the backward pass needs from a forward pass over a batch.
struct Forward {
    centered: Array2<f64>,
    active: Vec<Vec<usize>>,
    aux_active: Vec<Vec<usize>>,
    z: Array2<f64>,
    z_aux: Array2<f64>,
    /// x̂ - x
    resid: Array2<f64>,
    /// ê - e = ê + (x̂ - x)
    aux_resid: Option<Array2<f64>>,
    losses: SaeLosses,
}

fn forward(p: &SaeParams, x: &Array2<f64>, dead: &[bool]) -> Result<Forward> {
    p.check_input(x)?;
    if dead.len() != p.d_sae() {
        return Err(Error::Shape(format!(
            "dead mask has length {}, expected d_sae = {}",
            dead.len(),
            p.d_sae()
        )));
    }
    let (rows, d) = x.dim();
    let s = p.d_sae();
    let centered = x - &p.b_pre;
    let pre = centered.dot(&p.w_enc.t());

    let mut z = Array2::zeros((rows, s));
    let mut active = Vec::with_capacity(rows);
    let dead_idx: Vec<usize> = (0..s).filter(|&j| dead[j]).collect();
    let k_aux = p.k_aux.min(dead_idx.len());
    let mut z_aux = Array2::zeros((rows, s));
    let mut aux_active = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = pre.row(r).to_vec();
        let idx = topk_indices(&row, p.k);
        for &j in &idx {
            z[[r, j]] = row[j];
        }
        active.push(idx);
        if k_aux > 0 {
            let dead_vals: Vec<f64> = dead_idx.iter().map(|&j| row[j]).collect();
            let idx: Vec<usize> = topk_indices(&dead_vals, k_aux)
                .into_iter()
                .map(|i| dead_idx[i])
                .collect();
            for &j in &idx {
                z_aux[[r, j]] = row[j];
            }
            aux_active.push(idx);
        } else {
            aux_active.push(Vec::new());
        }
    }

    let x_hat = z.dot(&p.w_dec.t()) + &p.b_pre;
    let resid = &x_hat - x;
    let n = (rows * d) as f64;
    let mse = resid.iter().map(|v| v * v).sum::<f64>() / n;
    let (aux, aux_resid) = if k_aux > 0 {
        let q = z_aux.dot(&p.w_dec.t()) + &resid;
        let aux = q.iter().map(|v| v * v).sum::<f64>() / n;
        (aux, Some(q))
    } else {
        (0.0, None)
    };
    Ok(Forward {
        centered,
        active,
        aux_active,
        z,
        z_aux,
        resid,
        aux_resid,
        losses: SaeLosses {
            mse,
            aux,
            total: mse + p.alpha * aux,
        },
    })
}

/// Losses for `x` given a dead-latent mask (`dead[j]` true ⇒ latent j is dead).
pub fn sae_losses(x: &Array2<f64>, p: &SaeParams, dead: &[bool]) -> Result<SaeLosses> {
    Ok(forward(p, x, dead)?.losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Array2<f64>,
    pub w_dec: Array2<f64>,
    pub b_pre: Array1<f64>,
}

impl SaeGrads {
    fn zeros_like(p: &SaeParams) -> Self {
        SaeGrads {
            w_enc: Array2::zeros(p.w_enc.dim()),
            w_dec: Array2::zeros(p.w_dec.dim()),
            b_pre: Array1::zeros(p.b_pre.len()),
        }
    }
}

fn backward(p: &SaeParams, f: &Forward) -> SaeGrads {
    let (rows, d) = f.resid.dim();
    let n = (rows * d) as f64;
    let mut g_r = f.resid.mapv(|v| 2.0 * v / n);
    let g_q = f.aux_resid.as_ref().map(|q| q.mapv(|v| 2.0 * p.alpha * v / n));
    if let Some(gq) = &g_q {
        g_r += gq;
    }

    let mut w_dec = g_r.t().dot(&f.z);
    let dz = g_r.dot(&p.w_dec);
    let mut d_pre = Array2::zeros(dz.dim());
    for (r, idx) in f.active.iter().enumerate() {
        for &j in idx {
            d_pre[[r, j]] += dz[[r, j]];
        }
    }
    if let Some(gq) = &g_q {
        w_dec += &gq.t().dot(&f.z_aux);
        let dza = gq.dot(&p.w_dec);
        for (r, idx) in f.aux_active.iter().enumerate() {
            for &j in idx {
                d_pre[[r, j]] += dza[[r, j]];
            }
        }
    }
    let w_enc = d_pre.t().dot(&f.centered);
    let d_centered = d_pre.dot(&p.w_enc);
    let b_pre = g_r.sum_axis(Axis(0)) - d_centered.sum_axis(Axis(0));
    SaeGrads { w_enc, w_dec, b_pre }
}

/// Loss and analytic gradient for a batch.
pub fn loss_and_grad(x: &Array2<f64>, p: &SaeParams, dead: &[bool]) -> Result<(SaeLosses, SaeGrads)> {
    let f = forward(p, x, dead)?;
    let g = backward(p, &f);
    Ok((f.losses, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a ±eps perturbation changed a TopK set.
    pub flagged: usize,
}

/// Compare analytic gradients to central differences over every parameter.
///
/// Coordinates whose perturbation moves any TopK (or aux TopK) boundary are
/// flagged and left out of `max_rel_err`.
pub fn grad_check(p: &SaeParams, x: &Array2<f64>, dead: &[bool], eps: f64) -> Result<GradCheck> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let base = forward(p, x, dead)?;
    let analytic = backward(p, &base);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        flagged: 0,
    };

    let mut probe = |set: &dyn Fn(&mut SaeParams, f64), a: f64| -> Result<()> {
        let mut plus = p.clone();
        set(&mut plus, eps);
        let mut minus = p.clone();
        set(&mut minus, -eps);
        let fp = forward(&plus, x, dead)?;
        let fm = forward(&minus, x, dead)?;
        let stable = [&fp, &fm]
            .iter()
            .all(|f| f.active == base.active && f.aux_active == base.aux_active);
        if !stable {
            out.flagged += 1;
            return Ok(());
        }
        let numeric = (fp.losses.total - fm.losses.total) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        out.max_rel_err = out.max_rel_err.max((a - numeric).abs() / denom);
        out.checked += 1;
        Ok(())
    };

    for ((i, j), &a) in analytic.w_enc.indexed_iter() {
        probe(&|q: &mut SaeParams, h| q.w_enc[[i, j]] += h, a)?;
    }
    for ((i, j), &a) in analytic.w_dec.indexed_iter() {
        probe(&|q: &mut SaeParams, h| q.w_dec[[i, j]] += h, a)?;
    }
    for (i, &a) in analytic.b_pre.iter().enumerate() {
        probe(&|q: &mut SaeParams, h| q.b_pre[i] += h, a)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub d_sae: usize,
    pub k: usize,
    pub alpha: f64,
    pub k_aux: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size in position-rows.
    pub batch: usize,
    pub seed: u64,
    /// Rows without activation after which a latent counts as dead.
    pub dead_threshold: u64,
}

impl Default for SaeConfig {
    /// Dictionary size and sparsity used for 650M-parameter pLM embeddings.
    fn default() -> Self {
        SaeConfig {
            d_sae: 4096,
            k: 128,
            alpha: 1.0 / 32.0,
            k_aux: 256,
            lr: 1e-4,
            epochs: epochs_for_sequences(0),
            batch: 128,
            seed: 0,
            dead_threshold: 256,
        }
    }
}

/// Epoch budget as a function of the number of training sequences.
pub fn epochs_for_sequences(n: usize) -> usize {
    match n {
        0..=499 => 1000,
        500..=999 => 500,
        1000..=4999 => 100,
        _ => 10,
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mse: f64,
    pub aux: f64,
    pub total: f64,
    pub dead_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeTrainState {
    pub params: SaeParams,
    pub first_moment: SaeGrads,
    pub second_moment: SaeGrads,
    pub step: u64,
    pub tokens_since_fired: Vec<u64>,
    pub seed: u64,
    pub trace: Vec<EpochLoss>,
}

impl SaeTrainState {
    pub fn dead_mask(&self, threshold: u64) -> Vec<bool> {
        self.tokens_since_fired.iter().map(|&c| c >= threshold).collect()
    }

    pub fn dead_fraction(&self, threshold: u64) -> f64 {
        let dead = self.dead_mask(threshold).iter().filter(|&&d| d).count();
        dead as f64 / self.tokens_since_fired.len() as f64
    }

    fn adam_step(&mut self, mut g: SaeGrads, lr: f64) {
        // Only the component of each decoder-column gradient orthogonal to
        // the (unit) column is applied.
        for (mut gc, wc) in g.w_dec.columns_mut().into_iter().zip(self.params.w_dec.columns()) {
            let par = gc.dot(&wc);
            gc.scaled_add(-par, &wc);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        ndarray::Zip::from(&mut self.params.w_enc)
            .and(&mut self.first_moment.w_enc)
            .and(&mut self.second_moment.w_enc)
            .and(&g.w_enc)
            .for_each(|w, m, v, &g| update(w, m, v, g));
        ndarray::Zip::from(&mut self.params.w_dec)
            .and(&mut self.first_moment.w_dec)
            .and(&mut self.second_moment.w_dec)
            .and(&g.w_dec)
            .for_each(|w, m, v, &g| update(w, m, v, g));
        ndarray::Zip::from(&mut self.params.b_pre)
            .and(&mut self.first_moment.b_pre)
            .and(&mut self.second_moment.b_pre)
            .and(&g.b_pre)
            .for_each(|w, m, v, &g| update(w, m, v, g));
        self.params.normalize_decoder();
    }
}

/// Initial parameters: Gaussian encoder rows scaled by `1/sqrt(d_model)`,
/// decoder tied to the encoder transpose with unit columns, `b_pre` at the
/// data mean.
pub fn init_params(rows: &Array2<f64>, cfg: &SaeConfig) -> Result<SaeParams> {
    let d = rows.ncols();
    if cfg.d_sae == 0 || d == 0 {
        return Err(Error::InvalidArgument("d_sae and d_model must be positive".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let scale = 1.0 / (d as f64).sqrt();
    let w_enc = Array2::from_shape_fn((cfg.d_sae, d), |_| {
        rng.sample::<f64, _>(StandardNormal) * scale
    });
    let b_pre = rows
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let mut p = SaeParams {
        w_dec: w_enc.t().to_owned(),
        w_enc,
        b_pre,
        k: cfg.k,
        k_aux: cfg.k_aux,
        alpha: cfg.alpha,
    };
    p.normalize_decoder();
    p.validate()?;
    Ok(p)
}

/// Stack every embedding row of a store (in id order).
pub fn store_rows(store: &EmbeddingStore) -> Result<Array2<f64>> {
    let d = store
        .d_model()
        .ok_or_else(|| Error::InvalidArgument("empty embedding store".into()))?;
    let mut values = Vec::new();
    let mut n = 0;
    for (_, e) in store.iter() {
        n += e.embedding.nrows();
        values.extend(e.embedding.iter().copied());
    }
    Array2::from_shape_vec((n, d), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn train_sae_store(store: &EmbeddingStore, cfg: &SaeConfig) -> Result<SaeTrainState> {
    train_sae(&store_rows(store)?, cfg)
}

/// Train on position-rows with shuffled minibatches and Adam.
pub fn train_sae(rows: &Array2<f64>, cfg: &SaeConfig) -> Result<SaeTrainState> {
    if rows.nrows() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let params = init_params(rows, cfg)?;
    let mut state = SaeTrainState {
        first_moment: SaeGrads::zeros_like(&params),
        second_moment: SaeGrads::zeros_like(&params),
        tokens_since_fired: vec![0; params.d_sae()],
        params,
        step: 0,
        seed: cfg.seed,
        trace: Vec::with_capacity(cfg.epochs),
    };
    // Shuffling draws from its own stream so that initialization does not
    // depend on the epoch count.
    let mut rng = rng::stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..rows.nrows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut mse, mut aux, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let batch = rows.select(Axis(0), chunk);
            let dead = state.dead_mask(cfg.dead_threshold);
            let f = forward(&state.params, &batch, &dead)?;
            if !f.losses.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite SAE loss at epoch {epoch}, step {} (mse {}, aux {})",
                    state.step, f.losses.mse, f.losses.aux
                )));
            }
            let w = chunk.len() as f64 / rows.nrows() as f64;
            mse += w * f.losses.mse;
            aux += w * f.losses.aux;
            total += w * f.losses.total;

            for c in state.tokens_since_fired.iter_mut() {
                *c += chunk.len() as u64;
            }
            for idx in &f.active {
                for &j in idx {
                    state.tokens_since_fired[j] = 0;
                }
            }
            let g = backward(&state.params, &f);
            state.adam_step(g, cfg.lr);
        }
        state.trace.push(EpochLoss {
            epoch,
            mse,
            aux,
            total,
            dead_fraction: state.dead_fraction(cfg.dead_threshold),
        });
    }
    Ok(state)
}

/// Mean-per-element reconstruction error over all rows.
pub fn reconstruction_mse(p: &SaeParams, rows: &Array2<f64>) -> Result<f64> {
    let r = p.reconstruct(rows)? - rows;
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// Loss trace as CSV (`epoch,mse,aux,total,dead_fraction`).
pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mse,aux,total,dead_fraction\n");
    for e in trace {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            e.epoch, e.mse, e.aux, e.total, e.dead_fraction
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_params(d_model: usize, d_sae: usize, k: usize, k_aux: usize, seed: u64) -> SaeParams {
        let mut rng = rng::seeded(seed);
        let mut g = |r, c| Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal));
        let w_enc = g(d_sae, d_model);
        let w_dec = g(d_model, d_sae);
        let b_pre = g(1, d_model).row(0).to_owned();
        SaeParams {
            w_enc,
            w_dec,
            b_pre,
            k,
            k_aux,
            alpha: 1.0 / 32.0,
        }
    }

    #[test]
    fn topk_examples() {
        let z = topk_rows(&array![[3.0, -1.0, 2.0, 0.0]], 2).unwrap();
        assert_eq!(z, array![[3.0, 0.0, 2.0, 0.0]]);
        let z = topk_rows(&array![[5.0, 5.0, 1.0]], 1).unwrap();
        assert_eq!(z, array![[5.0, 0.0, 0.0]]);
        let row = array![[0.3, -2.0, 7.0]];
        assert_eq!(topk_rows(&row, 3).unwrap(), row);
        assert!(topk_rows(&row, 4).is_err());
        assert!(topk_rows(&row, 0).is_err());
    }

    #[test]
    fn topk_keeps_negative_values_by_value() {
        let z = topk_rows(&array![[-3.0, -1.0, -2.0]], 2).unwrap();
        assert_eq!(z, array![[0.0, -1.0, -2.0]]);
    }

    #[test]
    fn encode_at_bias_gives_zero_latents() {
        let p = random_params(4, 6, 2, 0, 1);
        let x = Array2::from_shape_fn((3, 4), |(_, j)| p.b_pre[j]);
        let pre = p.pre_activations(&x).unwrap();
        assert!(pre.iter().all(|v| *v == 0.0));
        let z = p.encode(&x).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert_eq!(topk_indices(&pre.row(0).to_vec(), 2), vec![0, 1]);
    }

    #[test]
    fn identity_encoder_selects_largest_coordinates() {
        let mut p = random_params(4, 6, 2, 0, 2);
        p.w_enc = Array2::from_shape_fn((6, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        p.b_pre = Array1::zeros(4);
        let x = array![[0.1, 0.9, 0.5, 0.2]];
        let z = p.encode(&x).unwrap();
        assert_eq!(z.row(0).to_vec(), vec![0.0, 0.9, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decode_examples() {
        let p = random_params(3, 5, 2, 0, 3);
        let x0 = p.decode(&Array2::zeros((2, 5))).unwrap();
        for r in x0.rows() {
            assert_eq!(r, p.b_pre);
        }
        let mut z = Array2::zeros((1, 5));
        z[[0, 3]] = 1.0;
        let x1 = p.decode(&z).unwrap();
        assert_eq!(x1.row(0), &p.w_dec.column(3) + &p.b_pre);
        assert!(p.decode(&Array2::zeros((1, 4))).is_err());
        assert!(p.encode(&Array2::zeros((1, 4))).is_err());
    }

    #[test]
    fn tied_weights_reconstruct_rank_k_data() {
        // Orthonormal decoder columns; data in the span of the first k of them
        // with positive coefficients large enough to win the TopK.
        let (d, s, k) = (6, 6, 2);
        let mut basis = Array2::from_shape_fn((s, d), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        crate::linalg::orthonormalize_rows(&mut basis).unwrap();
        let p = SaeParams {
            w_enc: basis.clone(),
            w_dec: basis.t().to_owned(),
            b_pre: Array1::zeros(d),
            k,
            k_aux: 0,
            alpha: 0.0,
        };
        let x = array![[2.0, 3.0], [1.5, 0.5], [4.0, 1.0]].dot(&basis.slice(ndarray::s![..k, ..]));
        let mse = reconstruction_mse(&p, &x).unwrap();
        assert!(mse < 1e-10, "mse {mse}");
    }

    #[test]
    fn loss_examples() {
        // x̂ = 0 (b_pre = 0, latents decode to 0): mse of [1, 0] is 0.5
        let p = SaeParams {
            w_enc: Array2::zeros((2, 2)),
            w_dec: Array2::zeros((2, 2)),
            b_pre: Array1::zeros(2),
            k: 1,
            k_aux: 1,
            alpha: 0.5,
        };
        let l = sae_losses(&array![[1.0, 0.0]], &p, &[false, false]).unwrap();
        assert_eq!(l.mse, 0.5);
        assert_eq!(l.aux, 0.0);
        assert_eq!(l.total, 0.5);
        // perfect reconstruction with a dead latent: total = alpha * aux
        let x = Array2::from_shape_fn((1, 2), |(_, j)| p.b_pre[j]);
        let l = sae_losses(&x, &p, &[true, false]).unwrap();
        assert_eq!(l.mse, 0.0);
        assert_eq!(l.total, p.alpha * l.aux);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let p = random_params(6, 10, 3, 4, seed);
            let mut rng = rng::seeded(100 + seed);
            let x = Array2::from_shape_fn((2, 6), |_| rng.sample::<f64, _>(StandardNormal));
            let dead: Vec<bool> = (0..10).map(|j| j % 3 == 0).collect();
            let gc = grad_check(&p, &x, &dead, 1e-5).unwrap();
            assert!(gc.checked > 0);
            assert!(gc.max_rel_err < 1e-4, "seed {seed}: {gc:?}");
        }
    }

    #[test]
    fn zero_point_has_zero_gradients() {
        let p = SaeParams {
            w_enc: Array2::zeros((4, 3)),
            w_dec: Array2::zeros((3, 4)),
            b_pre: Array1::zeros(3),
            k: 2,
            k_aux: 2,
            alpha: 1.0 / 32.0,
        };
        let x = Array2::zeros((2, 3));
        let (_, g) = loss_and_grad(&x, &p, &[true, false, true, false]).unwrap();
        assert!(g.w_enc.iter().chain(g.w_dec.iter()).chain(g.b_pre.iter()).all(|v| *v == 0.0));
        let gc = grad_check(&p, &x, &[true, false, true, false], 1e-5).unwrap();
        assert_eq!(gc.max_rel_err, 0.0);
    }

    #[test]
    fn boundary_crossing_is_flagged() {
        // Two latents tied at the TopK boundary: any perturbation of their
        // encoder rows flips the selection.
        let p = SaeParams {
            w_enc: array![[1.0, 0.0], [1.0, 0.0]],
            w_dec: array![[1.0, 0.0], [0.0, 1.0]],
            b_pre: Array1::zeros(2),
            k: 1,
            k_aux: 0,
            alpha: 0.0,
        };
        let gc = grad_check(&p, &array![[1.0, 0.5]], &[false, false], 1e-5).unwrap();
        assert!(gc.flagged > 0);
        assert!(gc.max_rel_err < 1e-4);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let p = random_params(2, 3, 1, 0, 0);
        assert!(grad_check(&p, &Array2::zeros((1, 2)), &[false; 3], 1e-2).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let rows = Array2::from_shape_fn((20, 4), |(i, j)| ((i * 3 + j) % 5) as f64);
        let cfg = SaeConfig {
            d_sae: 8,
            k: 2,
            k_aux: 4,
            epochs: 0,
            ..SaeConfig::default()
        };
        let st = train_sae(&rows, &cfg).unwrap();
        assert_eq!(st.params, init_params(&rows, &cfg).unwrap());
        assert!(st.trace.is_empty());
    }

    #[test]
    fn training_keeps_unit_decoder_columns_and_finite_losses() {
        let mut rng = rng::seeded(5);
        let rows = Array2::from_shape_fn((64, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let cfg = SaeConfig {
            d_sae: 12,
            k: 3,
            k_aux: 6,
            lr: 1e-2,
            epochs: 5,
            batch: 16,
            dead_threshold: 32,
            ..SaeConfig::default()
        };
        let st = train_sae(&rows, &cfg).unwrap();
        for c in st.params.w_dec.columns() {
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(st.trace.iter().all(|e| e.total.is_finite()));
        assert_eq!(st.step, 5 * 4);
        assert_eq!(train_sae(&rows, &cfg).unwrap(), st);
    }

    #[test]
    fn default_hyperparameters() {
        let c = SaeConfig::default();
        assert_eq!((c.d_sae, c.k, c.k_aux), (4096, 128, 256));
        assert_eq!(c.alpha, 1.0 / 32.0);
        assert_eq!(
            [10, 600, 2000, 9000].map(epochs_for_sequences),
            [1000, 500, 100, 10]
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_params(3, 5, 2, 1, 9);
        let ck = p.to_checkpoint(serde_json::json!({"step": 3})).unwrap();
        let back = SaeParams::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.k, 2);
        for (a, b) in back.w_enc.iter().zip(p.w_enc.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
