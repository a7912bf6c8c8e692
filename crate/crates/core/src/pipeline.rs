//! Config-driven orchestration behind the `latentforge` CLI.
//!
//! A [`PipelineConfig`] fixes every knob and a single top-level seed from
//! which each stage's seed is derived. Stages read and write files in one
//! output directory:
//!
//! | stage        | reads                                   | writes |
//! |--------------|-----------------------------------------|--------|
//! | `synth`      | (config only)                           | `dataset.csv`, `embeddings.emb1`, `landscape.json` |
//! | `train-sae`  | `embeddings.emb1`                       | `sae.ckpt`, `sae_loss.csv` |
//! | `probe`      | `dataset.csv`, `embeddings.emb1`, `sae.ckpt` | `probe_<kind>_<task>_n<N>.csv/.json` |
//! | `extrapolate`| same as `probe`                         | `extrapolate_trials.csv`, `extrapolate_<task>.csv` |
//! | `design`     | `dataset.csv`, `sae.ckpt`               | `designs_<method>.csv/.json` |
//! | `evaluate`   | `dataset.csv`, `designs_*.csv`          | `evaluation.csv/.json` (`oracle.ckpt` in MLP mode) |
//! | `analyze`    | `dataset.csv`, `sae.ckpt`, `designs_steer.csv` | `sparsity.csv`, `weight_histogram_<kind>.csv`, `attribution.csv` |
//!
//! Every CSV starts with a `#` provenance line carrying the config hash and
//! seed, JSON outputs carry a `provenance` object, and each stage writes
//! `manifest_<stage>.json` with the SHA-256 of every file it produced
//! (which also covers binary outputs).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{activation_diff, attribution_csv, top_fraction_variance, weight_histogram};
use crate::baselines::{anneal_design, eval_parity_steps, random_design, AnnealConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{parse_dms, read_store, write_store, DmsDataset, EmbeddingStore};
use crate::error::{Error, Result};
use crate::landscape::{sample_dataset, DatasetConfig, SequenceModel, SyntheticConfig, SyntheticModel};
use crate::oracle::{evaluate_designs, train_mlp, DesignStats, FitnessScorer, LookupTable, MlpConfig};
use crate::probe::{
    default_lambda_grid, fit_probe_with_validation, pooled_features, spearman, FeatureKind,
    ProbeModel, ProbeOptions, ProbeSelection,
};
use crate::rng;
use crate::sae::{store_rows, trace_csv, train_sae, SaeConfig, SaeParams};
use crate::splits::{
    make_split, run_trials, SplitResult, SplitSpec, SplitTask, TrialOutcome, TrialPipeline,
    TrialReport,
};
use crate::steering::{
    default_multipliers, design, designs_from_csv, designs_to_csv, DesignCandidate, DesignTarget,
    SteeringConfig,
};

// ---------------------------------------------------------------------------
// Features and trials
// ---------------------------------------------------------------------------

/// Pooled features for every record of a dataset, row `i` for record `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub kind: FeatureKind,
    pub features: Array2<f64>,
}

fn stack(kind: FeatureKind, rows: Vec<ndarray::Array1<f64>>) -> Result<FeatureTable> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureTable { kind, features })
}

impl FeatureTable {
    /// Features computed by running every record through `seqmodel`.
    pub fn build(
        kind: FeatureKind,
        ds: &DmsDataset,
        seqmodel: &dyn SequenceModel,
        sae: Option<&SaeParams>,
    ) -> Result<Self> {
        let rows = ds
            .records
            .iter()
            .map(|r| {
                let e = seqmodel.embed(&r.sequence)?;
                let logits = match kind {
                    FeatureKind::Logits => Some(seqmodel.logits_from_embedding(&e)?),
                    _ => None,
                };
                pooled_features(kind, &e, logits.as_ref(), sae)
            })
            .collect::<Result<_>>()?;
        stack(kind, rows)
    }

    /// Features from precomputed embeddings keyed by mutant label (`WT` for
    /// the wildtype row).
    pub fn from_store(
        kind: FeatureKind,
        ds: &DmsDataset,
        store: &EmbeddingStore,
        sae: Option<&SaeParams>,
    ) -> Result<Self> {
        let rows = ds
            .records
            .iter()
            .map(|r| {
                let id = r.mutant();
                let entry = store
                    .get(&id)
                    .ok_or_else(|| Error::InvalidArgument(format!("embedding store lacks `{id}`")))?;
                pooled_features(kind, &entry.embedding, entry.logits.as_ref(), sae)
            })
            .collect::<Result<_>>()?;
        stack(kind, rows)
    }

    fn pick(&self, y: &[f64], idx: &[usize]) -> (Array2<f64>, Vec<f64>) {
        (
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| y[i]).collect(),
        )
    }

    /// Fit a probe on the split's train set with lambda chosen on its
    /// validation set.
    pub fn fit(
        &self,
        ds: &DmsDataset,
        split: &SplitResult,
        grid: &[f64],
        options: ProbeOptions,
    ) -> Result<ProbeSelection> {
        let y = ds.fitness();
        let (tx, ty) = self.pick(&y, &split.train);
        let (vx, vy) = self.pick(&y, &split.val);
        fit_probe_with_validation((&tx, &ty), (&vx, &vy), grid, self.kind, options)
    }
}

/// Ridge probe with validation-selected lambda, scored by Spearman on the
/// test split.
#[derive(Debug, Clone)]
pub struct ProbeTrial {
    pub table: FeatureTable,
    pub grid: Vec<f64>,
    pub options: ProbeOptions,
}

impl ProbeTrial {
    pub fn new(table: FeatureTable) -> Self {
        ProbeTrial {
            table,
            grid: default_lambda_grid(),
            options: ProbeOptions::default(),
        }
    }
}

impl TrialPipeline for ProbeTrial {
    fn feature_kind(&self) -> FeatureKind {
        self.table.kind
    }

    fn run(&self, ds: &DmsDataset, split: &SplitResult) -> Result<TrialOutcome> {
        let sel = self.table.fit(ds, split, &self.grid, self.options)?;
        let (sx, sy) = self.table.pick(&ds.fitness(), &split.test);
        let pred = sel.model.predict_rows(&sx)?;
        Ok(TrialOutcome {
            lambda: sel.model.lambda,
            spearman: spearman(&pred, &sy)?,
        })
    }
}

/// The probe used for design and analysis: random split, first trial seeds.
pub fn design_probe(table: &FeatureTable, ds: &DmsDataset, n: usize, options: ProbeOptions) -> Result<ProbeModel> {
    let split = make_split(ds, &SplitSpec::new(SplitTask::Random, n, 0, 0))?;
    Ok(table.fit(ds, &split, &default_lambda_grid(), options)?.model)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    pub length: usize,
    pub d_model: usize,
    pub n_motifs: usize,
    pub epistasis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_variants: usize,
    pub max_mutations: usize,
    pub extra_positions: usize,
    pub motif_bias: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    pub d_sae: usize,
    pub k: usize,
    pub alpha: f64,
    pub k_aux: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub dead_threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub feature_kind: FeatureKind,
    pub task: SplitTask,
    pub n: usize,
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolateSection {
    pub tasks: Vec<SplitTask>,
    pub sizes: Vec<usize>,
    pub feature_kinds: Vec<FeatureKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMethod {
    Steer,
    Anneal,
    Random,
}

impl DesignMethod {
    pub const ALL: [DesignMethod; 3] = [DesignMethod::Steer, DesignMethod::Anneal, DesignMethod::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            DesignMethod::Steer => "steer",
            DesignMethod::Anneal => "anneal",
            DesignMethod::Random => "random",
        }
    }
}

impl std::str::FromStr for DesignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DesignMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown design method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub methods: Vec<DesignMethod>,
    pub n_latents: usize,
    pub cosine_threshold: f64,
    pub budget: usize,
    /// Training-set size of the probes that guide design.
    pub probe_n: usize,
    pub anneal_feature_kind: FeatureKind,
    /// `null` matches the steering grid's evaluation count.
    pub anneal_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Ground-truth fitness of the planted landscape.
    Truth,
    /// Measured scores from the dataset; designs outside it are an error.
    Lookup,
    /// MLP trained on the dataset.
    Mlp,
}

impl std::str::FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(OracleMode::Truth),
            "lookup" => Ok(OracleMode::Lookup),
            "mlp" => Ok(OracleMode::Mlp),
            _ => Err(Error::Config(format!("unknown oracle mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub mode: OracleMode,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: Option<usize>,
    pub train_fraction: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub fraction: f64,
    pub bins: usize,
    pub clip: f64,
    pub per_sign: usize,
}

/// Every setting of a pipeline run. All keys are required in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub landscape: LandscapeSection,
    pub dataset: DatasetSection,
    pub sae: SaeSection,
    pub probe: ProbeSection,
    pub extrapolate: ExtrapolateSection,
    pub design: DesignSection,
    pub oracle: OracleSection,
    pub analyze: AnalyzeSection,
}

impl Default for PipelineConfig {
    /// Desk-scale settings for the planted landscape.
    fn default() -> Self {
        let land = SyntheticConfig::default();
        let data = DatasetConfig::default();
        let mlp = MlpConfig::default();
        PipelineConfig {
            seed: 0,
            landscape: LandscapeSection {
                length: land.length,
                d_model: land.d_model,
                n_motifs: land.n_motifs,
                epistasis: land.epistasis,
            },
            dataset: DatasetSection {
                n_variants: data.n_variants,
                max_mutations: data.max_mutations,
                extra_positions: data.extra_positions,
                motif_bias: data.motif_bias,
                noise_sd: data.noise_sd,
            },
            sae: SaeSection {
                d_sae: 64,
                k: 4,
                alpha: 1.0 / 32.0,
                k_aux: 16,
                lr: 1e-3,
                epochs: 100,
                batch: 128,
                dead_threshold: 256,
            },
            probe: ProbeSection {
                feature_kind: FeatureKind::SaeLatents,
                task: SplitTask::Random,
                n: 24,
                standardize: false,
            },
            extrapolate: ExtrapolateSection {
                tasks: SplitTask::ALL.to_vec(),
                sizes: crate::splits::LOW_N_SIZES.to_vec(),
                feature_kinds: FeatureKind::ALL.to_vec(),
            },
            design: DesignSection {
                methods: DesignMethod::ALL.to_vec(),
                n_latents: 32,
                cosine_threshold: 0.98,
                budget: 50,
                probe_n: 24,
                anneal_feature_kind: FeatureKind::LayerEmbedding,
                anneal_steps: None,
            },
            oracle: OracleSection {
                mode: OracleMode::Truth,
                lr: mlp.lr,
                max_epochs: mlp.max_epochs,
                patience: mlp.patience,
                train_fraction: mlp.train_fraction,
                weight_decay: mlp.weight_decay,
            },
            analyze: AnalyzeSection {
                fraction: 0.05,
                bins: 60,
                clip: 3.0,
                per_sign: 5,
            },
        }
    }
}

/// Seeds of every stage, derived from the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub seed: u64,
    pub landscape: u64,
    pub dataset: u64,
    pub sae: u64,
    pub design: u64,
    pub oracle: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            seed: self.seed,
            landscape: self.seed,
            dataset: self.seed,
            sae: rng::derive(self.seed, 1),
            design: rng::derive(self.seed, 2),
            oracle: rng::derive(self.seed, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.probe.n < 2 || self.design.probe_n < 2 {
            return bad("probe sizes must be at least 2");
        }
        if self.extrapolate.tasks.is_empty()
            || self.extrapolate.sizes.is_empty()
            || self.extrapolate.feature_kinds.is_empty()
        {
            return bad("extrapolate needs at least one task, size and feature kind");
        }
        if self.design.methods.is_empty() {
            return bad("design.methods is empty");
        }
        if self.design.anneal_feature_kind == FeatureKind::SaeLatents {
            return bad("design.anneal_feature_kind must be layer_embedding or logits");
        }
        if self.design.anneal_steps == Some(0) {
            return bad("design.anneal_steps must be positive");
        }
        if !(self.analyze.fraction > 0.0 && self.analyze.fraction <= 1.0) {
            return bad("analyze.fraction must lie in (0, 1]");
        }
        if self.analyze.bins == 0 || !(self.analyze.clip > 0.0) {
            return bad("analyze.bins and analyze.clip must be positive");
        }
        if !(self.oracle.train_fraction > 0.0 && self.oracle.train_fraction <= 1.0) {
            return bad("oracle.train_fraction must lie in (0, 1]");
        }
        self.steering_config(5).validate()
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            length: self.landscape.length,
            d_model: self.landscape.d_model,
            n_motifs: self.landscape.n_motifs,
            seed: self.seeds().landscape,
            epistasis: self.landscape.epistasis,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_variants: self.dataset.n_variants,
            max_mutations: self.dataset.max_mutations,
            extra_positions: self.dataset.extra_positions,
            motif_bias: self.dataset.motif_bias,
            noise_sd: self.dataset.noise_sd,
            seed: self.seeds().dataset,
        }
    }

    pub fn sae_config(&self) -> SaeConfig {
        let s = &self.sae;
        SaeConfig {
            d_sae: s.d_sae,
            k: s.k,
            alpha: s.alpha,
            k_aux: s.k_aux,
            lr: s.lr,
            epochs: s.epochs,
            batch: s.batch,
            seed: self.seeds().sae,
            dead_threshold: s.dead_threshold,
        }
    }

    pub fn steering_config(&self, max_mutations: usize) -> SteeringConfig {
        SteeringConfig {
            n_latents: self.design.n_latents,
            multipliers: default_multipliers(),
            cosine_threshold: self.design.cosine_threshold,
            max_mutations,
            budget: self.design.budget,
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        let o = &self.oracle;
        MlpConfig {
            lr: o.lr,
            max_epochs: o.max_epochs,
            patience: o.patience,
            train_fraction: o.train_fraction,
            weight_decay: o.weight_decay,
            seed: self.seeds().oracle,
        }
    }
}

/// Cap rayon's global pool at `LATENTFORGE_THREADS` when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("LATENTFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LATENTFORGE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// Output bookkeeping
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const DATASET_FILE: &str = "dataset.csv";
pub const STORE_FILE: &str = "embeddings.emb1";
pub const SAE_FILE: &str = "sae.ckpt";

/// Files written by one stage, with provenance attached.
struct Outputs<'a> {
    dir: &'a Path,
    stage: &'static str,
    hash: String,
    seeds: StageSeeds,
    files: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path, stage: &'static str, cfg: &PipelineConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir,
            stage,
            hash: cfg.hash(),
            seeds: cfg.seeds(),
            files: BTreeMap::new(),
        })
    }

    fn provenance(&self) -> serde_json::Value {
        json!({ "stage": self.stage, "config_sha256": self.hash, "seeds": self.seeds })
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!(
            "# stage={} config_sha256={} seed={}\n{body}",
            self.stage, self.hash, self.seeds.seed
        );
        self.bytes(name, text.as_bytes())
    }

    fn json(&mut self, name: &str, mut value: serde_json::Value) -> Result<()> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("provenance".into(), self.provenance());
        }
        let text = serde_json::to_string_pretty(&value).expect("json serializes") + "\n";
        self.bytes(name, text.as_bytes())
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        self.bytes(name, &ck.to_bytes())
    }

    fn finish(mut self) -> Result<Vec<PathBuf>> {
        let manifest = json!({ "files": self.files });
        let name = format!("manifest_{}.json", self.stage.replace('-', "_"));
        self.json(&name, manifest)?;
        Ok(self.files.keys().map(|f| self.dir.join(f)).collect())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_dataset(dir: &Path, model: &SyntheticModel) -> Result<DmsDataset> {
    parse_dms(&read_text(&dir.join(DATASET_FILE))?, &model.wildtype)
}

fn load_sae(dir: &Path) -> Result<SaeParams> {
    SaeParams::from_checkpoint(&Checkpoint::load(dir.join(SAE_FILE))?)
}

fn needs_sae(kind: FeatureKind, dir: &Path) -> Result<Option<SaeParams>> {
    match kind {
        FeatureKind::SaeLatents => load_sae(dir).map(Some),
        _ => Ok(None),
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    TrainSae,
    Probe,
    Extrapolate,
    Design,
    Evaluate,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::TrainSae,
        Stage::Probe,
        Stage::Extrapolate,
        Stage::Design,
        Stage::Evaluate,
        Stage::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainSae => "train-sae",
            Stage::Probe => "probe",
            Stage::Extrapolate => "extrapolate",
            Stage::Design => "design",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
        }
    }
}

/// Run one stage, returning the paths it wrote.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    log::info!("stage {} (config {})", stage.as_str(), &cfg.hash()[..12]);
    match stage {
        Stage::Synth => synth(cfg, out),
        Stage::TrainSae => train(cfg, out),
        Stage::Probe => probe(cfg, out),
        Stage::Extrapolate => extrapolate(cfg, out),
        Stage::Design => design_stage(cfg, out),
        Stage::Evaluate => evaluate(cfg, out),
        Stage::Analyze => analyze(cfg, out),
    }
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for stage in Stage::ALL {
        files.extend(run_stage(stage, cfg, out)?);
    }
    Ok(files)
}

fn synth(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = SyntheticModel::new(cfg.synthetic_config())?;
    let ds = sample_dataset(&model, &cfg.dataset_config())?;
    let store = model.export_store(&ds)?;
    let mut out = Outputs::new(dir, "synth", cfg)?;
    out.csv(DATASET_FILE, &ds.to_csv()?)?;
    let store_path = dir.join(STORE_FILE);
    write_store(&store, &store_path)?;
    let bytes = fs::read(&store_path).map_err(|e| Error::io(&store_path, e))?;
    out.files.insert(STORE_FILE.to_string(), sha256_hex(&bytes));
    let motifs: Vec<_> = model
        .motifs
        .iter()
        .map(|m| {
            json!({
                "sites": m.sites.iter().map(|p| p + 1).collect::<Vec<_>>(),
                "residue": (m.residue as char).to_string(),
                "weight": m.weight,
            })
        })
        .collect();
    out.json(
        "landscape.json",
        json!({
            "wildtype": model.wildtype,
            "wildtype_fitness": model.true_fitness(&model.wildtype)?,
            "motifs": motifs,
            "epistasis_pairs": model.epistasis_pairs,
            "n_records": ds.len(),
            "mutated_positions": ds.mutated_positions().iter().map(|p| p + 1).collect::<Vec<_>>(),
        }),
    )?;
    out.finish()
}

fn train(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let store = read_store(dir.join(STORE_FILE))?;
    let rows = store_rows(&store)?;
    let sae_cfg = cfg.sae_config();
    let state = train_sae(&rows, &sae_cfg)?;
    if let Some(last) = state.trace.last() {
        log::info!(
            "sae trained on {} rows: mse {:.3e}, dead fraction {:.3}",
            rows.nrows(),
            last.mse,
            last.dead_fraction
        );
    }
    let mut out = Outputs::new(dir, "train-sae", cfg)?;
    let meta = json!({ "config": sae_cfg, "provenance": out.provenance() });
    out.checkpoint(SAE_FILE, &state.params.to_checkpoint(meta)?)?;
    out.csv("sae_loss.csv", &trace_csv(&state.trace))?;
    out.finish()
}

fn trial_table(cfg: &PipelineConfig, dir: &Path, kind: FeatureKind, ds: &DmsDataset) -> Result<ProbeTrial> {
    let store = read_store(dir.join(STORE_FILE))?;
    let sae = needs_sae(kind, dir)?;
    let mut trial = ProbeTrial::new(FeatureTable::from_store(kind, ds, &store, sae.as_ref())?);
    trial.options.standardize = cfg.probe.standardize;
    Ok(trial)
}

fn report_csv(reports: &[TrialReport]) -> String {
    let mut body = format!("{},degenerate,error\n", TrialReport::CSV_HEADER);
    for r in reports {
        for (line, row) in r.csv_rows().into_iter().zip(&r.rows) {
            let err = row.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            body.push_str(&format!("{line},{},{err}\n", row.degenerate));
        }
    }
    body
}

fn probe(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = SyntheticModel::new(cfg.synthetic_config())?;
    let ds = load_dataset(dir, &model)?;
    let p = &cfg.probe;
    let trial = trial_table(cfg, dir, p.feature_kind, &ds)?;
    let report = run_trials(&ds, p.task, p.n, &trial);
    log::info!(
        "probe {} {} N={}: mean |rho| {:?}, std {:?}",
        p.feature_kind,
        p.task,
        p.n,
        report.mean,
        report.std
    );
    let stem = format!("probe_{}_{}_n{}", p.feature_kind, p.task, p.n);
    let mut out = Outputs::new(dir, "probe", cfg)?;
    out.csv(&format!("{stem}.csv"), &report_csv(std::slice::from_ref(&report)))?;
    out.json(&format!("{stem}.json"), serde_json::to_value(&report).expect("report serializes"))?;
    out.finish()
}

fn extrapolate(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = SyntheticModel::new(cfg.synthetic_config())?;
    let ds = load_dataset(dir, &model)?;
    let e = &cfg.extrapolate;
    let trials: Vec<ProbeTrial> = e
        .feature_kinds
        .iter()
        .map(|&k| trial_table(cfg, dir, k, &ds))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut out = Outputs::new(dir, "extrapolate", cfg)?;
    for &task in &e.tasks {
        let mut table = String::from("feature_kind");
        for n in &e.sizes {
            table.push_str(&format!(",n{n}_mean,n{n}_std"));
        }
        table.push('\n');
        for trial in &trials {
            table.push_str(trial.table.kind.as_str());
            for &n in &e.sizes {
                let r = run_trials(&ds, task, n, trial);
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
                table.push_str(&format!(",{},{}", fmt(r.mean), fmt(r.std)));
                reports.push(r);
            }
            table.push('\n');
        }
        out.csv(&format!("extrapolate_{task}.csv"), &table)?;
    }
    out.csv("extrapolate_trials.csv", &report_csv(&reports))?;
    out.finish()
}

fn design_target(ds: &DmsDataset) -> Result<(DesignTarget, usize)> {
    let target = DesignTarget::new(ds.wildtype.clone(), ds.mutated_positions())?;
    let max = SteeringConfig::max_mutations_for(target.positions.len());
    Ok((target, max))
}

fn design_stage(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = SyntheticModel::new(cfg.synthetic_config())?;
    let ds = load_dataset(dir, &model)?;
    let (target, max_mutations) = design_target(&ds)?;
    let d = &cfg.design;
    let options = ProbeOptions { standardize: cfg.probe.standardize };
    let mut out = Outputs::new(dir, "design", cfg)?;
    for &method in &d.methods {
        let mut summary = json!({ "method": method.as_str(), "max_mutations": max_mutations });
        let candidates: Vec<DesignCandidate> = match method {
            DesignMethod::Steer => {
                let sae = load_sae(dir)?;
                let table = FeatureTable::build(FeatureKind::SaeLatents, &ds, &model, Some(&sae))?;
                let probe = design_probe(&table, &ds, d.probe_n, options)?;
                let result = design(&model, &sae, &probe, &target, &cfg.steering_config(max_mutations))?;
                if result.shortfall {
                    log::warn!("steering produced only {} unique designs", result.candidates.len());
                }
                summary["shortfall"] = json!(result.shortfall);
                summary["probe_lambda"] = json!(probe.lambda);
                out.checkpoint("design_probe_sae_latents.ckpt", &probe.to_checkpoint()?)?;
                result.candidates
            }
            DesignMethod::Anneal => {
                let kind = d.anneal_feature_kind;
                let table = FeatureTable::build(kind, &ds, &model, None)?;
                let probe = design_probe(&table, &ds, d.probe_n, options)?;
                let steps = d
                    .anneal_steps
                    .unwrap_or_else(|| eval_parity_steps(d.n_latents, default_multipliers().len(), d.budget));
                let acfg = AnnealConfig::with_steps(steps, cfg.seeds().design, max_mutations, d.budget);
                let result = anneal_design(&target, &probe, &model, &acfg)?;
                summary["anneal_steps"] = json!(steps);
                summary["shortfall"] = json!(result.shortfall);
                summary["probe_lambda"] = json!(probe.lambda);
                out.checkpoint(&format!("design_probe_{kind}.ckpt"), &probe.to_checkpoint()?)?;
                result.candidates
            }
            DesignMethod::Random => random_design(&target, cfg.seeds().design, d.budget, max_mutations)?,
        };
        summary["n"] = json!(candidates.len());
        let name = method.as_str();
        out.csv(&format!("designs_{name}.csv"), &designs_to_csv(&ds.wildtype, &candidates)?)?;
        out.json(&format!("designs_{name}.json"), summary)?;
    }
    out.finish()
}

fn evaluate(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = SyntheticModel::new(cfg.synthetic_config())?;
    let ds = load_dataset(dir, &model)?;
    let mut pools = Vec::new();
    for method in DesignMethod::ALL {
        let path = dir.join(format!("designs_{}.csv", method.as_str()));
        if path.exists() {
            pools.push((method, designs_from_csv(&read_text(&path)?, &ds.wildtype)?));
        }
    }
    if pools.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no designs_*.csv in {}; run `design` first",
            dir.display()
        )));
    }
    let mut out = Outputs::new(dir, "evaluate", cfg)?;
    let mut extra = json!({ "mode": cfg.oracle.mode });
    let scorer: Box<dyn FitnessScorer> = match cfg.oracle.mode {
        OracleMode::Truth => Box::new(model.clone()),
        OracleMode::Lookup => Box::new(LookupTable::from_dataset(&ds)),
        OracleMode::Mlp => {
            let t = train_mlp(&ds, &cfg.mlp_config())?;
            extra["val_rmse"] = json!(t.val_rmse);
            extra["best_epoch"] = json!(t.best_epoch);
            out.checkpoint("oracle.ckpt", &t.model.to_checkpoint()?)?;
            Box::new(t.model)
        }
    };
    let mut body = String::from("method,n,mean,max,top10pct_mean,top20pct_mean\n");
    let mut stats = BTreeMap::new();
    for (method, designs) in &pools {
        let s: DesignStats = evaluate_designs(scorer.as_ref(), designs)?;
        body.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?}\n",
            method.as_str(),
            s.n,
            s.mean,
            s.max,
            s.top10pct_mean,
            s.top20pct_mean
        ));
        stats.insert(method.as_str(), s);
    }
    out.csv("evaluation.csv", &body)?;
    extra["statistics"] = serde_json::to_value(&stats).expect("stats serialize");
    out.json("evaluation.json", extra)?;
    out.finish()
}

fn analyze(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let model = SyntheticModel::new(cfg.synthetic_config())?;
    let ds = load_dataset(dir, &model)?;
    let sae = load_sae(dir)?;
    let a = &cfg.analyze;
    let options = ProbeOptions { standardize: cfg.probe.standardize };
    let mut out = Outputs::new(dir, "analyze", cfg)?;
    let mut sparsity = String::from("feature_kind,d,fraction,top_fraction_variance\n");
    let mut sae_probe = None;
    for kind in [FeatureKind::SaeLatents, FeatureKind::LayerEmbedding] {
        let sae_ref = (kind == FeatureKind::SaeLatents).then_some(&sae);
        let table = FeatureTable::build(kind, &ds, &model, sae_ref)?;
        let probe = design_probe(&table, &ds, cfg.design.probe_n, options)?;
        let ratio = top_fraction_variance(&probe.weights, a.fraction)?;
        sparsity.push_str(&format!("{kind},{},{:?},{ratio:?}\n", probe.weights.len(), a.fraction));
        let hist = weight_histogram(&probe.weights, a.bins, a.clip)?;
        out.csv(&format!("weight_histogram_{kind}.csv"), &hist.to_csv())?;
        if kind == FeatureKind::SaeLatents {
            sae_probe = Some(probe);
        }
    }
    out.csv("sparsity.csv", &sparsity)?;
    let steer_path = dir.join("designs_steer.csv");
    if steer_path.exists() {
        let designs = designs_from_csv(&read_text(&steer_path)?, &ds.wildtype)?;
        if let (Some(top), Some(probe)) = (designs.first(), sae_probe.as_ref()) {
            let rows = activation_diff(&sae, &model, &ds.wildtype, &top.sequence, probe, a.per_sign)?;
            out.csv("attribution.csv", &attribution_csv(&rows))?;
        }
    } else {
        log::warn!("no designs_steer.csv; skipping attribution");
    }
    out.finish()
}
