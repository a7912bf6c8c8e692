//! Latent feature steering.
//!
//! The wildtype is embedded and encoded into SAE latents. One predictive
//! latent at a time is scaled by a multiplier, the latents are decoded back
//! to an embedding, and the sequence model reads logits out of it. Positions
//! whose logit profile moved enough (cosine similarity below a threshold)
//! are opened for mutation, the argmax residues there are realized into a
//! sequence, and that sequence is re-embedded and scored by the probe.
//!
//! The reference logits for the cosine gate come from the SAE
//! reconstruction of the wildtype, so a multiplier of 1 is an exact no-op.

use std::collections::{BTreeSet, HashSet};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, diff_mutations, format_mutant, ALPHABET};
use crate::error::{Error, Result};
use crate::landscape::SequenceModel;
use crate::linalg;
use crate::probe::{sequence_features, FeatureKind, ProbeModel};
use crate::sae::{LatentMatrix, SaeParams};

/// Multipliers -3.0, -2.8, ..., 3.0.
pub fn default_multipliers() -> Vec<f64> {
    (0..31).map(|i| (i as f64 - 15.0) / 5.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub n_latents: usize,
    pub multipliers: Vec<f64>,
    pub cosine_threshold: f64,
    pub max_mutations: usize,
    pub budget: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            n_latents: 10,
            multipliers: default_multipliers(),
            cosine_threshold: 0.98,
            max_mutations: 5,
            budget: 50,
        }
    }
}

impl SteeringConfig {
    /// Mutation radius for an assay: 4 when it covers exactly four
    /// positions, 5 otherwise.
    pub fn max_mutations_for(n_positions: usize) -> usize {
        if n_positions == 4 {
            4
        } else {
            5
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("steering multipliers must be nonempty and finite".into()));
        }
        if !(self.cosine_threshold > 0.0 && self.cosine_threshold < 1.0) {
            return Err(Error::Config(format!(
                "cosine_threshold {} outside (0, 1)",
                self.cosine_threshold
            )));
        }
        if self.budget == 0 || self.n_latents == 0 || self.max_mutations == 0 {
            return Err(Error::Config("budget, n_latents and max_mutations must be >= 1".into()));
        }
        Ok(())
    }
}

/// The wildtype and the positions an assay covers; designs may only mutate
/// these positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignTarget {
    pub wildtype: String,
    pub positions: Vec<usize>,
}

impl DesignTarget {
    pub fn new(wildtype: impl Into<String>, positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        let wildtype = wildtype.into();
        data::check_sequence(&wildtype)?;
        let positions: Vec<usize> = positions.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if positions.is_empty() {
            return Err(Error::InvalidArgument("design needs at least one assay position".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= wildtype.len()) {
            return Err(Error::InvalidArgument(format!(
                "assay position {} beyond wildtype length {}",
                p + 1,
                wildtype.len()
            )));
        }
        Ok(DesignTarget { wildtype, positions })
    }

    /// Whether `sequence` only differs from the wildtype at assay positions
    /// and by at most `max_mutations` substitutions.
    pub fn admits(&self, sequence: &str, max_mutations: usize) -> bool {
        let Ok(muts) = diff_mutations(&self.wildtype, sequence) else {
            return false;
        };
        muts.len() <= max_mutations && muts.iter().all(|m| self.positions.binary_search(&m.position).is_ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCandidate {
    pub sequence: String,
    pub source_latent: Option<usize>,
    pub multiplier: Option<f64>,
    pub predicted_fitness: f64,
    pub mutation_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutput {
    pub candidates: Vec<DesignCandidate>,
    /// Fewer unique sequences than the budget were available.
    pub shortfall: bool,
}

/// Indices of the `m` largest-magnitude probe weights, descending; ties go
/// to the lower index.
pub fn top_latents(probe: &ProbeModel, m: usize) -> Result<Vec<usize>> {
    if probe.feature_kind != FeatureKind::SaeLatents {
        return Err(Error::InvalidArgument(format!(
            "steering needs an sae_latents probe, got {}",
            probe.feature_kind
        )));
    }
    if m > probe.weights.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {m} latents from a probe over {}",
            probe.weights.len()
        )));
    }
    let w = &probe.weights;
    if w.iter().all(|&x| x == 0.0) {
        log::warn!("probe weights are all zero; latent ranking is arbitrary");
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}

/// Copy of `z` with column `latent` scaled by `multiplier`.
pub fn steer_latent(z: &LatentMatrix, latent: usize, multiplier: f64) -> Result<LatentMatrix> {
    if latent >= z.ncols() {
        return Err(Error::InvalidArgument(format!(
            "latent {latent} out of range for d_sae {}",
            z.ncols()
        )));
    }
    let mut out = z.clone();
    out.column_mut(latent).mapv_inplace(|v| v * multiplier);
    Ok(out)
}

/// `mask[p]` is true iff the cosine similarity of the two logit rows at `p`
/// is below `threshold`. Rows with zero norm stay closed.
pub fn gate_positions(logits_mut: &Array2<f64>, logits_wt: &Array2<f64>, threshold: f64) -> Result<Vec<bool>> {
    if logits_mut.dim() != logits_wt.dim() {
        return Err(Error::Shape(format!(
            "logit shapes differ: {:?} vs {:?}",
            logits_mut.dim(),
            logits_wt.dim()
        )));
    }
    Ok(logits_mut
        .rows()
        .into_iter()
        .zip(logits_wt.rows())
        .map(|(a, b)| {
            let a = a.to_vec();
            let b = b.to_vec();
            linalg::cosine(&a, &b).is_some_and(|c| c < threshold)
        })
        .collect())
}

/// Turn steered logits into a sequence.
///
/// Open positions inside the assay set take their argmax residue. When more
/// than `max_mutations` positions change, the changes with the largest margin
/// (argmax logit minus wildtype-residue logit) are kept.
pub fn realize_sequence(
    logits_mut: &Array2<f64>,
    mask: &[bool],
    target: &DesignTarget,
    max_mutations: usize,
) -> Result<String> {
    let wt = target.wildtype.as_bytes();
    if logits_mut.nrows() != wt.len() || mask.len() != wt.len() || logits_mut.ncols() != ALPHABET.len() {
        return Err(Error::Shape(format!(
            "logits {:?} and mask {} do not fit a length-{} wildtype",
            logits_mut.dim(),
            mask.len(),
            wt.len()
        )));
    }
    let mut changes: Vec<(f64, usize, u8)> = Vec::new();
    for &p in &target.positions {
        if !mask[p] {
            continue;
        }
        let row = logits_mut.row(p);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("nonempty vocabulary");
        if ALPHABET[best] == wt[p] {
            continue;
        }
        let wt_idx = data::aa_index(wt[p]).expect("validated wildtype");
        changes.push((row[best] - row[wt_idx], p, ALPHABET[best]));
    }
    changes.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    changes.truncate(max_mutations);
    let mut seq = wt.to_vec();
    for (_, p, a) in changes {
        seq[p] = a;
    }
    Ok(String::from_utf8(seq).expect("ascii"))
}

/// Score a sequence with an SAE-latent probe on its re-embedded latents.
pub fn score_sequence(
    seqmodel: &dyn SequenceModel,
    sae: &SaeParams,
    probe: &ProbeModel,
    sequence: &str,
) -> Result<f64> {
    let x = sequence_features(FeatureKind::SaeLatents, seqmodel, Some(sae), sequence)?;
    probe.predict(x.view())
}

/// Evaluate every (latent, multiplier) pair; candidates are returned in grid
/// order without de-duplication.
pub fn steering_grid(
    seqmodel: &dyn SequenceModel,
    sae: &SaeParams,
    probe: &ProbeModel,
    target: &DesignTarget,
    cfg: &SteeringConfig,
) -> Result<Vec<DesignCandidate>> {
    cfg.validate()?;
    if probe.weights.len() != sae.d_sae() {
        return Err(Error::Shape(format!(
            "probe dimension {} != SAE width {}",
            probe.weights.len(),
            sae.d_sae()
        )));
    }
    let latents = top_latents(probe, cfg.n_latents.min(sae.d_sae()))?;
    let z = sae.encode(&seqmodel.embed(&target.wildtype)?)?;
    let base_logits = seqmodel.logits_from_embedding(&sae.decode(&z)?)?;
    let grid: Vec<(usize, f64)> = latents
        .iter()
        .flat_map(|&l| cfg.multipliers.iter().map(move |&m| (l, m)))
        .collect();
    grid.into_par_iter()
        .map(|(latent, multiplier)| {
            let steered = steer_latent(&z, latent, multiplier)?;
            let logits = seqmodel.logits_from_embedding(&sae.decode(&steered)?)?;
            let mask = gate_positions(&logits, &base_logits, cfg.cosine_threshold)?;
            let sequence = realize_sequence(&logits, &mask, target, cfg.max_mutations)?;
            let predicted_fitness = score_sequence(seqmodel, sae, probe, &sequence)?;
            let mutation_count = diff_mutations(&target.wildtype, &sequence)?.len();
            Ok(DesignCandidate {
                sequence,
                source_latent: Some(latent),
                multiplier: Some(multiplier),
                predicted_fitness,
                mutation_count,
            })
        })
        .collect()
}

/// Sort by (predicted fitness desc, latent asc, multiplier asc), keep the
/// first occurrence of every sequence and cut at `budget`.
pub fn select_unique(mut candidates: Vec<DesignCandidate>, budget: usize) -> DesignOutput {
    candidates.sort_by(|a, b| {
        b.predicted_fitness
            .total_cmp(&a.predicted_fitness)
            .then(a.source_latent.cmp(&b.source_latent))
            .then(a.multiplier.unwrap_or(0.0).total_cmp(&b.multiplier.unwrap_or(0.0)))
    });
    let mut seen = HashSet::new();
    let candidates: Vec<DesignCandidate> = candidates
        .into_iter()
        .filter(|c| seen.insert(c.sequence.clone()))
        .take(budget)
        .collect();
    let shortfall = candidates.len() < budget;
    if shortfall {
        log::warn!("only {} unique designs for a budget of {budget}", candidates.len());
    }
    DesignOutput { candidates, shortfall }
}

pub fn design(
    seqmodel: &dyn SequenceModel,
    sae: &SaeParams,
    probe: &ProbeModel,
    target: &DesignTarget,
    cfg: &SteeringConfig,
) -> Result<DesignOutput> {
    let grid = steering_grid(seqmodel, sae, probe, target, cfg)?;
    Ok(select_unique(grid, cfg.budget))
}

pub const DESIGN_CSV_HEADER: &str = "sequence,mutations,source_latent,multiplier,predicted_fitness";

pub fn designs_to_csv(wildtype: &str, candidates: &[DesignCandidate]) -> Result<String> {
    let mut out = String::from(DESIGN_CSV_HEADER);
    out.push('\n');
    for c in candidates {
        let muts = diff_mutations(wildtype, &c.sequence)?;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.sequence,
            format_mutant(&muts),
            c.source_latent.map(|l| l.to_string()).unwrap_or_default(),
            c.multiplier.map(|m| format!("{m:?}")).unwrap_or_default(),
            data::format_score(c.predicted_fitness),
        ));
    }
    Ok(out)
}

pub fn designs_from_csv(text: &str, wildtype: &str) -> Result<Vec<DesignCandidate>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("design CSV lacks column `{name}`")))
    };
    let (cs, cl, cm, cp) = (col("sequence")?, col("source_latent")?, col("multiplier")?, col("predicted_fitness")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let sequence = rec[cs].to_string();
        let mutation_count = diff_mutations(wildtype, &sequence)?.len();
        let source_latent = Some(&rec[cl]).filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>())
            .transpose()
            .map_err(|e| Error::Csv(format!("source_latent: {e}")))?;
        let multiplier = Some(&rec[cm]).filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .transpose()
            .map_err(|e| Error::Csv(format!("multiplier: {e}")))?;
        let predicted_fitness = rec[cp]
            .parse::<f64>()
            .map_err(|e| Error::Csv(format!("predicted_fitness: {e}")))?;
        out.push(DesignCandidate {
            sequence,
            source_latent,
            multiplier,
            predicted_fitness,
            mutation_count,
        });
    }
    Ok(out)
}
