//! Probe weight sparsity and latent activation-difference attribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::SequenceModel;
use crate::probe::{FeatureKind, ProbeModel};
use crate::sae::SaeParams;

/// Share of the total squared deviation carried by the `ceil(fraction · d)`
/// largest-magnitude weights. Zero when the weights have no variance.
pub fn top_fraction_variance(w: &[f64], fraction: f64) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let total: f64 = w.iter().map(|x| (x - mean).powi(2)).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let k = ((fraction * w.len() as f64).ceil() as usize).clamp(1, w.len());
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    let top: f64 = idx[..k].iter().map(|&i| (w[i] - mean).powi(2)).sum();
    Ok(top / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHistogram {
    /// `bins + 1` edges spanning `[-clip, clip]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Weights with `|w| > clip`, left out of the counts.
    pub clipped: usize,
}

pub fn weight_histogram(w: &[f64], bins: usize, clip: f64) -> Result<WeightHistogram> {
    if bins == 0 || !(clip > 0.0) {
        return Err(Error::InvalidArgument("histogram needs bins >= 1 and clip > 0".into()));
    }
    let width = 2.0 * clip / bins as f64;
    let edges = (0..=bins).map(|i| -clip + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    let mut clipped = 0;
    for &x in w {
        if !(x.abs() <= clip) {
            clipped += 1;
            continue;
        }
        let b = (((x + clip) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(WeightHistogram { edges, counts, clipped })
}

impl WeightHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:?},{:?},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        out.push_str(&format!("# clipped,{}\n", self.clipped));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub latent: usize,
    pub position: usize,
    pub abs_diff: f64,
}

/// Latents with the `per_sign` most positive and `per_sign` most negative
/// probe weights among those active on either sequence, and per-position
/// `|z_variant − z_wildtype|` for each, sorted descending.
pub fn activation_diff(
    sae: &SaeParams,
    seqmodel: &dyn SequenceModel,
    wildtype: &str,
    variant: &str,
    probe: &ProbeModel,
    per_sign: usize,
) -> Result<Vec<Attribution>> {
    if wildtype.len() != variant.len() {
        return Err(Error::Shape(format!(
            "sequence lengths differ: {} vs {}",
            wildtype.len(),
            variant.len()
        )));
    }
    if probe.feature_kind != FeatureKind::SaeLatents || probe.weights.len() != sae.d_sae() {
        return Err(Error::InvalidArgument("attribution needs a probe over this SAE's latents".into()));
    }
    let zw = sae.encode(&seqmodel.embed(wildtype)?)?;
    let zv = sae.encode(&seqmodel.embed(variant)?)?;
    let active = |j: usize| zw.column(j).iter().chain(zv.column(j)).any(|&v| v != 0.0);
    let w = &probe.weights;
    let mut pos: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0 && active(j)).collect();
    pos.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    pos.truncate(per_sign);
    let mut neg: Vec<usize> = (0..w.len()).filter(|&j| w[j] < 0.0 && active(j)).collect();
    neg.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    neg.truncate(per_sign);

    let mut out: Vec<Attribution> = pos
        .into_iter()
        .chain(neg)
        .flat_map(|j| {
            (0..zw.nrows()).map(move |p| (j, p))
        })
        .map(|(latent, position)| Attribution {
            latent,
            position,
            abs_diff: (zv[[position, latent]] - zw[[position, latent]]).abs(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.abs_diff
            .total_cmp(&a.abs_diff)
            .then(a.latent.cmp(&b.latent))
            .then(a.position.cmp(&b.position))
    });
    Ok(out)
}

pub fn attribution_csv(rows: &[Attribution]) -> String {
    let mut out = String::from("latent,position,abs_diff\n");
    for r in rows {
        out.push_str(&format!("{},{},{:?}\n", r.latent, r.position + 1, r.abs_diff));
    }
    out
}
