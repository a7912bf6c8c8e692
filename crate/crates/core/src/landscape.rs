//! Planted synthetic sequence model.
//!
//! A [`SyntheticModel`] stands in for a protein language model. Each of its
//! `m` motifs is a set of sites plus a preferred residue; the motif occupancy
//! `g_i(s)` is the fraction of sites carrying that residue. Ground-truth
//! fitness is
//!
//! ```text
//! f(s) = Σ_i w_i g_i(s) + Σ_(i,j,c) c · g_i(s) g_j(s)
//! ```
//!
//! and the embedding at position `p` is
//!
//! ```text
//! embed(s)[p] = token[s_p] + Σ_{i : p ∈ sites_i} g_i(s) · dir_i
//! ```
//!
//! with orthonormal motif directions `dir_i`. Logits are a fixed linear
//! readout of the embedding that maps tokens onto a residue-similarity
//! profile and each motif direction onto a boost of its preferred residue.

use std::collections::HashSet;

use ndarray::{s, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, apply_mutations, encode_indices, DmsDataset, DmsRecord, EmbeddingStore, Mutation,
    ALPHABET, VOCAB_SIZE,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Anything that can embed sequences and read logits out of embeddings.
pub trait SequenceModel: Sync {
    fn d_model(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// L × d_model embedding.
    fn embed(&self, sequence: &str) -> Result<Array2<f64>>;

    /// L × V logits for an arbitrary L × d_model input.
    fn logits_from_embedding(&self, embedding: &Array2<f64>) -> Result<Array2<f64>>;

    fn logits(&self, sequence: &str) -> Result<Array2<f64>> {
        self.logits_from_embedding(&self.embed(sequence)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub length: usize,
    pub d_model: usize,
    pub n_motifs: usize,
    pub seed: u64,
    pub epistasis: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            length: 40,
            d_model: 24,
            n_motifs: 6,
            seed: 0,
            epistasis: true,
        }
    }
}

/// Logit gain of a fully occupied motif on its preferred residue.
const MOTIF_LOGIT_GAIN: f64 = 1.5;
/// Largest off-diagonal entry of the residue-similarity profile.
const MAX_SIMILARITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Motif {
    pub sites: Vec<usize>,
    pub residue: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub config: SyntheticConfig,
    pub wildtype: String,
    pub motifs: Vec<Motif>,
    /// m × d_model, orthonormal rows.
    pub motif_directions: Array2<f64>,
    /// (motif_i, motif_j, coupling)
    pub epistasis_pairs: Vec<(usize, usize, f64)>,
    /// 20 × d_model
    pub token_embeddings: Array2<f64>,
    /// d_model × 20
    pub readout: Array2<f64>,
}

impl SyntheticModel {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let SyntheticConfig {
            length: l,
            d_model: d,
            n_motifs: m,
            seed,
            epistasis,
        } = config;
        if l < 4 || d < 8 || m < 1 || m > d / 2 || m > l {
            return Err(Error::InvalidArgument(format!(
                "invalid synthetic dims: L={l} (>=4), d_model={d} (>=8), m={m} (1..=min(d_model/2, L))"
            )));
        }
        let mut rng = rng::seeded(seed);
        let site_count = (l / (2 * m)).clamp(1, 4);

        let mut positions: Vec<usize> = (0..l).collect();
        positions.shuffle(&mut rng);
        let mut wt: Vec<u8> = (0..l).map(|_| ALPHABET[rng.random_range(0..20)]).collect();

        let mut motifs = Vec::with_capacity(m);
        for i in 0..m {
            let mut sites = positions[i * site_count..(i + 1) * site_count].to_vec();
            sites.sort_unstable();
            let residue = ALPHABET[rng.random_range(0..20)];
            let magnitude = rng.random_range(0.5..1.5);
            let weight = if i == 0 || rng.random_bool(0.5) {
                magnitude
            } else {
                -magnitude
            };
            // The wildtype carries positive motifs at their first site only.
            for (k, &p) in sites.iter().enumerate() {
                if k == 0 && site_count > 1 && weight > 0.0 {
                    wt[p] = residue;
                } else {
                    while wt[p] == residue {
                        wt[p] = ALPHABET[rng.random_range(0..20)];
                    }
                }
            }
            motifs.push(Motif {
                sites,
                residue,
                weight,
            });
        }

        let mut motif_directions =
            Array2::from_shape_fn((m, d), |_| rng.sample::<f64, _>(StandardNormal));
        linalg::orthonormalize_rows(&mut motif_directions)?;

        let scale = 1.0 / (d as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("valid sd");
        let token_embeddings = Array2::from_shape_fn((VOCAB_SIZE, d), |_| normal.sample(&mut rng));

        let epistasis_pairs = if epistasis {
            (0..m.saturating_sub(1))
                .step_by(2)
                .map(|i| {
                    let c: f64 = rng.random_range(0.5..1.5);
                    let c = if rng.random_bool(0.5) { c } else { -c };
                    (i, i + 1, c)
                })
                .collect()
        } else {
            Vec::new()
        };

        // Residue-similarity profile: 1 on the diagonal, [0, MAX_SIMILARITY) elsewhere.
        let similarity = Array2::from_shape_fn((VOCAB_SIZE, VOCAB_SIZE), |(a, b)| {
            if a == b {
                1.0
            } else {
                rng.random_range(0.0..MAX_SIMILARITY)
            }
        });
        let mut design = Array2::zeros((VOCAB_SIZE + m, d));
        design.slice_mut(s![..VOCAB_SIZE, ..]).assign(&token_embeddings);
        design.slice_mut(s![VOCAB_SIZE.., ..]).assign(&motif_directions);
        let mut targets = Array2::zeros((VOCAB_SIZE + m, VOCAB_SIZE));
        targets.slice_mut(s![..VOCAB_SIZE, ..]).assign(&similarity);
        for (i, motif) in motifs.iter().enumerate() {
            let r = data::aa_index(motif.residue).expect("alphabet residue");
            targets[[VOCAB_SIZE + i, r]] = MOTIF_LOGIT_GAIN;
        }
        let readout = linalg::lstsq(&design, &targets)?;

        Ok(SyntheticModel {
            config,
            wildtype: String::from_utf8(wt).expect("ascii"),
            motifs,
            motif_directions,
            epistasis_pairs,
            token_embeddings,
            readout,
        })
    }

    pub fn length(&self) -> usize {
        self.config.length
    }

    fn check_len(&self, sequence: &str) -> Result<()> {
        if sequence.len() != self.length() {
            return Err(Error::Shape(format!(
                "sequence length {} != model length {}",
                sequence.len(),
                self.length()
            )));
        }
        Ok(())
    }

    /// Motif occupancies `g_i(s)`.
    pub fn occupancy(&self, sequence: &str) -> Result<Vec<f64>> {
        self.check_len(sequence)?;
        let s = sequence.as_bytes();
        Ok(self
            .motifs
            .iter()
            .map(|mo| {
                let hit = mo.sites.iter().filter(|&&p| s[p] == mo.residue).count();
                hit as f64 / mo.sites.len() as f64
            })
            .collect())
    }

    /// The additive part `Σ w_i g_i(s)`.
    pub fn motif_term(&self, sequence: &str) -> Result<f64> {
        let g = self.occupancy(sequence)?;
        Ok(self.motifs.iter().zip(&g).map(|(m, g)| m.weight * g).sum())
    }

    pub fn true_fitness(&self, sequence: &str) -> Result<f64> {
        let g = self.occupancy(sequence)?;
        let additive: f64 = self.motifs.iter().zip(&g).map(|(m, g)| m.weight * g).sum();
        let pairwise: f64 = self
            .epistasis_pairs
            .iter()
            .map(|&(i, j, c)| c * g[i] * g[j])
            .sum();
        Ok(additive + pairwise)
    }

    /// Positions that belong to some motif.
    pub fn motif_positions(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.motifs.iter().flat_map(|m| m.sites.clone()).collect();
        v.sort_unstable();
        v
    }

    /// The wildtype with every site of `motif` set to its preferred residue.
    pub fn complete_motif(&self, sequence: &str, motif: usize) -> Result<String> {
        self.check_len(sequence)?;
        let mo = self
            .motifs
            .get(motif)
            .ok_or_else(|| Error::InvalidArgument(format!("motif {motif} out of range")))?;
        let mut s = sequence.as_bytes().to_vec();
        for &p in &mo.sites {
            s[p] = mo.residue;
        }
        Ok(String::from_utf8(s).expect("ascii"))
    }

    /// Embed every record of `ds` (with logits) under its mutant label.
    pub fn export_store(&self, ds: &DmsDataset) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new();
        for r in &ds.records {
            let e = self.embed(&r.sequence)?;
            let lg = self.logits_from_embedding(&e)?;
            store.insert(r.mutant(), e, Some(lg))?;
        }
        Ok(store)
    }
}

impl SequenceModel for SyntheticModel {
    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn embed(&self, sequence: &str) -> Result<Array2<f64>> {
        self.check_len(sequence)?;
        let idx = encode_indices(sequence)?;
        let g = self.occupancy(sequence)?;
        let mut out = Array2::zeros((self.length(), self.config.d_model));
        for (p, &a) in idx.iter().enumerate() {
            out.row_mut(p).assign(&self.token_embeddings.row(a));
        }
        for (i, mo) in self.motifs.iter().enumerate() {
            if g[i] == 0.0 {
                continue;
            }
            let dir = self.motif_directions.row(i);
            for &p in &mo.sites {
                out.row_mut(p).scaled_add(g[i], &dir);
            }
        }
        Ok(out)
    }

    fn logits_from_embedding(&self, embedding: &Array2<f64>) -> Result<Array2<f64>> {
        if embedding.ncols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "embedding has {} columns, model d_model is {}",
                embedding.ncols(),
                self.config.d_model
            )));
        }
        Ok(embedding.dot(&self.readout))
    }
}

/// Settings for sampling a DMS-style assay from a planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of mutated variants (the wildtype row is added on top).
    pub n_variants: usize,
    pub max_mutations: usize,
    /// Non-motif positions added to the assay's mutable set.
    pub extra_positions: usize,
    /// Probability that a mutation at a motif site installs the motif residue.
    pub motif_bias: f64,
    /// Gaussian measurement noise added to the true fitness.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_variants: 600,
            max_mutations: 4,
            extra_positions: 8,
            motif_bias: 0.5,
            noise_sd: 0.05,
            seed: 0,
        }
    }
}

/// Sample a DMS assay: the wildtype plus `n_variants` unique variants.
pub fn sample_dataset(model: &SyntheticModel, cfg: &DatasetConfig) -> Result<DmsDataset> {
    let mut rng = rng::seeded(cfg.seed);
    let mut positions = model.motif_positions();
    let mut others: Vec<usize> = (0..model.length())
        .filter(|p| !positions.contains(p))
        .collect();
    others.shuffle(&mut rng);
    positions.extend(others.into_iter().take(cfg.extra_positions));
    positions.sort_unstable();
    let max_mut = cfg.max_mutations.clamp(1, positions.len());
    let noise = Normal::new(0.0, cfg.noise_sd.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let motif_of = |p: usize| model.motifs.iter().find(|m| m.sites.contains(&p));
    let wt = model.wildtype.as_bytes();
    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(model.wildtype.clone());
    let mut records = vec![DmsRecord {
        sequence: model.wildtype.clone(),
        mutations: Vec::new(),
        fitness: model.true_fitness(&model.wildtype)?,
    }];

    let mut attempts = 0usize;
    while records.len() < cfg.n_variants + 1 {
        attempts += 1;
        if attempts > 1000 * (cfg.n_variants + 1) {
            return Err(Error::InvalidArgument(
                "could not sample enough unique variants".into(),
            ));
        }
        let count = rng.random_range(1..=max_mut);
        let mut chosen: Vec<usize> = positions.choose_multiple(&mut rng, count).copied().collect();
        chosen.sort_unstable();
        let mut muts = Vec::with_capacity(count);
        for p in chosen {
            let from = wt[p];
            let to = match motif_of(p) {
                Some(mo) if mo.residue != from && rng.random_bool(cfg.motif_bias) => mo.residue,
                _ => loop {
                    let c = ALPHABET[rng.random_range(0..20)];
                    if c != from {
                        break c;
                    }
                },
            };
            muts.push(Mutation {
                position: p,
                from,
                to,
            });
        }
        let sequence = apply_mutations(&model.wildtype, &muts);
        if !seen.insert(sequence.clone()) {
            continue;
        }
        let fitness = model.true_fitness(&sequence)? + noise.sample(&mut rng);
        records.push(DmsRecord {
            sequence,
            mutations: muts,
            fitness,
        });
    }
    let wt_fitness = records[0].fitness;
    DmsDataset::new(model.wildtype.clone(), records, wt_fitness)
}

/// Uniformly random sequences of the model's length.
pub fn random_sequences(model: &SyntheticModel, n: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|_| {
            (0..model.length())
                .map(|_| ALPHABET[rng.random_range(0..20)] as char)
                .collect()
        })
        .collect()
}

/// Row-stack embeddings of many sequences (training rows for an SAE).
pub fn embedding_rows(model: &dyn SequenceModel, sequences: &[String]) -> Result<Array2<f64>> {
    let mut rows = Vec::new();
    let mut n = 0;
    for s in sequences {
        let e = model.embed(s)?;
        n += e.nrows();
        rows.extend(e.iter().copied());
    }
    Array2::from_shape_vec((n, model.d_model()), rows).map_err(|e| Error::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(m: usize, epistasis: bool) -> SyntheticModel {
        SyntheticModel::new(SyntheticConfig {
            length: 24,
            d_model: 16,
            n_motifs: m,
            seed: 7,
            epistasis,
        })
        .unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(model(3, true), model(3, true));
        let a = model(3, true);
        for (x, y) in a.readout.iter().zip(model(3, true).readout.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn invalid_dims() {
        let bad = |length, d_model, n_motifs| {
            SyntheticModel::new(SyntheticConfig {
                length,
                d_model,
                n_motifs,
                seed: 0,
                epistasis: false,
            })
            .is_err()
        };
        assert!(bad(3, 16, 1));
        assert!(bad(10, 7, 1));
        assert!(bad(10, 16, 9));
        assert!(bad(10, 16, 0));
    }

    #[test]
    fn directions_are_orthonormal() {
        let m = model(4, false);
        let g = m.motif_directions.dot(&m.motif_directions.t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_single_motif_scores_its_weight() {
        let m = model(1, false);
        let full = m.complete_motif(&m.wildtype, 0).unwrap();
        assert_eq!(m.occupancy(&full).unwrap(), vec![1.0]);
        assert_eq!(m.true_fitness(&full).unwrap(), m.motifs[0].weight);
    }

    #[test]
    fn non_motif_substitution_leaves_fitness() {
        let m = model(3, true);
        let motif_pos = m.motif_positions();
        let p = (0..m.length()).find(|p| !motif_pos.contains(p)).unwrap();
        let mut s = m.wildtype.clone().into_bytes();
        s[p] = if s[p] == b'A' { b'C' } else { b'A' };
        let s = String::from_utf8(s).unwrap();
        assert_eq!(m.true_fitness(&s).unwrap(), m.true_fitness(&m.wildtype).unwrap());
        // only the token row changes
        let (a, b) = (m.embed(&m.wildtype).unwrap(), m.embed(&s).unwrap());
        let changed = (0..m.length()).filter(|&r| a.row(r) != b.row(r)).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn epistasis_interaction_contrast() {
        let m = model(2, true);
        let (i, j, c) = m.epistasis_pairs[0];
        assert_eq!((i, j), (0, 1));
        // strip the wildtype's partial occupancy so "neither" has g = 0
        let mut neither = m.wildtype.clone().into_bytes();
        for mo in &m.motifs {
            for &p in &mo.sites {
                if neither[p] == mo.residue {
                    neither[p] = if mo.residue == b'A' { b'C' } else { b'A' };
                }
            }
        }
        let neither = String::from_utf8(neither).unwrap();
        let one = m.complete_motif(&neither, 0).unwrap();
        let two = m.complete_motif(&neither, 1).unwrap();
        let both = m.complete_motif(&one, 1).unwrap();
        let f = |s: &str| m.true_fitness(s).unwrap();
        let contrast = f(&both) - f(&one) - f(&two) + f(&neither);
        assert!((contrast - c).abs() < 1e-12);
    }

    #[test]
    fn embedding_delta_lies_in_token_and_motif_span() {
        let m = model(3, true);
        let s = m.complete_motif(&m.wildtype, 1).unwrap();
        let delta = m.embed(&s).unwrap() - m.embed(&m.wildtype).unwrap();
        // basis: token deltas plus motif directions
        let mut basis: Vec<ndarray::Array1<f64>> = (1..20)
            .map(|a| &m.token_embeddings.row(a) - &m.token_embeddings.row(0))
            .collect();
        basis.extend(m.motif_directions.rows().into_iter().map(|r| r.to_owned()));
        let b = Array2::from_shape_fn((basis.len(), m.d_model()), |(i, j)| basis[i][j]);
        let coef = linalg::lstsq(&b.t().to_owned(), &delta.t().to_owned()).unwrap();
        let resid = b.t().dot(&coef) - delta.t();
        assert!(resid.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn sampled_pool_has_fitness_variance() {
        let m = SyntheticModel::new(SyntheticConfig::default()).unwrap();
        let pool = random_sequences(&m, 200, 3);
        let f: Vec<f64> = pool.iter().map(|s| m.true_fitness(s).unwrap()).collect();
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f.len() as f64;
        assert!(var > 0.0);
    }

    #[test]
    fn readout_prefers_the_token_on_plain_rows() {
        let m = SyntheticModel::new(SyntheticConfig::default()).unwrap();
        for a in 0..20 {
            let row = m.token_embeddings.row(a).to_owned().insert_axis(ndarray::Axis(0));
            let lg = m.logits_from_embedding(&row).unwrap();
            let best = (0..20).max_by(|&x, &y| lg[[0, x]].total_cmp(&lg[[0, y]])).unwrap();
            assert_eq!(best, a);
        }
    }

    #[test]
    fn sampled_dataset_is_valid() {
        let m = SyntheticModel::new(SyntheticConfig::default()).unwrap();
        let ds = sample_dataset(&m, &DatasetConfig { n_variants: 120, ..Default::default() }).unwrap();
        assert_eq!(ds.len(), 121);
        assert!(ds.records.iter().all(|r| r.mutation_count() <= 4));
        assert_eq!(ds.records[0].mutations.len(), 0);
    }
}
