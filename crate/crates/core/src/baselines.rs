//! Baseline designers: random mutagenesis and simulated annealing over a
//! probe on raw embeddings or logits.
//!
//! Both draw a mutation count from `min(Pois(2) + 1, max_mutations)` and only
//! mutate assay positions.

use std::collections::HashSet;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ALPHABET;
use crate::error::{Error, Result};
use crate::landscape::SequenceModel;
use crate::probe::{sequence_features, FeatureKind, ProbeModel};
use crate::rng::{self, Rng};
use crate::steering::{select_unique, DesignCandidate, DesignOutput, DesignTarget};

pub const POISSON_RATE: f64 = 2.0;
pub const FINAL_TEMPERATURE: f64 = 1e-3;
const SUBSTITUTION_PROBABILITY: f64 = 0.8;

/// Draw a mutation count from the truncated law.
pub fn sample_mutation_count(rng: &mut Rng, max_mutations: usize) -> usize {
    let pois = Poisson::new(POISSON_RATE).expect("positive rate");
    let k = pois.sample(rng) as usize;
    (k + 1).min(max_mutations)
}

/// `E[min(Pois(2) + 1, max_mutations)]` by direct summation.
pub fn truncated_count_mean(max_mutations: usize) -> f64 {
    let mut p = (-POISSON_RATE).exp();
    let mut below = 0.0;
    let mut mass = 0.0;
    for k in 0..max_mutations.saturating_sub(1) {
        below += p * (k + 1) as f64;
        mass += p;
        p *= POISSON_RATE / (k + 1) as f64;
    }
    below + (1.0 - mass) * max_mutations as f64
}

fn random_residue_except(rng: &mut Rng, avoid: &[u8]) -> u8 {
    loop {
        let a = *ALPHABET.choose(rng).expect("nonempty alphabet");
        if !avoid.contains(&a) {
            return a;
        }
    }
}

fn check_positions(target: &DesignTarget, max_mutations: usize) -> Result<()> {
    if max_mutations == 0 {
        return Err(Error::InvalidArgument("max_mutations must be >= 1".into()));
    }
    if target.positions.len() < max_mutations {
        return Err(Error::InvalidArgument(format!(
            "{} assay positions cannot hold {max_mutations} mutations",
            target.positions.len()
        )));
    }
    Ok(())
}

/// A random variant with `count` substitutions at distinct assay positions.
fn random_variant(rng: &mut Rng, target: &DesignTarget, count: usize) -> Vec<u8> {
    let mut seq = target.wildtype.as_bytes().to_vec();
    for &p in target.positions.choose_multiple(rng, count) {
        seq[p] = random_residue_except(rng, &[seq[p]]);
    }
    seq
}

/// `budget` unique random variants. `predicted_fitness` is 0; callers
/// rescore with whatever model they evaluate against.
pub fn random_design(
    target: &DesignTarget,
    seed: u64,
    budget: usize,
    max_mutations: usize,
) -> Result<Vec<DesignCandidate>> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be >= 1".into()));
    }
    check_positions(target, max_mutations)?;
    let mut rng = rng::seeded(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(budget);
    let max_attempts = 1000 * budget;
    for _ in 0..max_attempts {
        if out.len() == budget {
            break;
        }
        let count = sample_mutation_count(&mut rng, max_mutations);
        let seq = String::from_utf8(random_variant(&mut rng, target, count)).expect("ascii");
        if seen.insert(seq.clone()) {
            out.push(DesignCandidate {
                sequence: seq,
                source_latent: None,
                multiplier: None,
                predicted_fitness: 0.0,
                mutation_count: count,
            });
        }
    }
    if out.len() < budget {
        return Err(Error::InvalidArgument(format!(
            "could not draw {budget} unique variants (got {})",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub steps: usize,
    pub t0: f64,
    pub cooling: f64,
    pub seed: u64,
    pub max_mutations: usize,
    /// Number of independent chains (one candidate each).
    pub budget: usize,
}

impl AnnealConfig {
    /// Geometric schedule from `T0 = 1` down to [`FINAL_TEMPERATURE`] at
    /// the last step.
    pub fn with_steps(steps: usize, seed: u64, max_mutations: usize, budget: usize) -> Self {
        AnnealConfig {
            steps,
            t0: 1.0,
            cooling: cooling_for(1.0, steps),
            seed,
            max_mutations,
            budget,
        }
    }

    pub fn temperature(&self, step: usize) -> f64 {
        self.t0 * self.cooling.powi(step as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.budget == 0 {
            return Err(Error::Config("anneal steps and budget must be >= 1".into()));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::Config(format!("anneal T0 {} must be positive", self.t0)));
        }
        if !(self.cooling > 0.0 && self.cooling <= 1.0) {
            return Err(Error::Config(format!("cooling {} outside (0, 1]", self.cooling)));
        }
        Ok(())
    }
}

/// Cooling factor that takes `t0` to [`FINAL_TEMPERATURE`] at step `steps - 1`.
pub fn cooling_for(t0: f64, steps: usize) -> f64 {
    if steps <= 1 {
        return 1.0;
    }
    (FINAL_TEMPERATURE / t0).powf(1.0 / (steps - 1) as f64)
}

/// Metropolis acceptance probability `min(1, exp(delta / T))` for a
/// maximization problem.
pub fn metropolis_acceptance(delta: f64, temperature: f64) -> f64 {
    if delta >= 0.0 {
        1.0
    } else {
        (delta / temperature).exp()
    }
}

/// Annealing step count that matches a measured steering wall time, given
/// the cost of one probe evaluation. The derivation is logged.
pub fn parity_steps(steering_wall: Duration, seconds_per_eval: f64, chains: usize) -> usize {
    let total = steering_wall.as_secs_f64();
    let evals = if seconds_per_eval > 0.0 { total / seconds_per_eval } else { 0.0 };
    let steps = ((evals / chains.max(1) as f64).floor() as usize).max(1);
    log::info!(
        "anneal parity: steering took {total:.4}s, one evaluation {seconds_per_eval:.3e}s, \
         {evals:.0} evaluations over {chains} chains -> {steps} steps per chain"
    );
    steps
}

/// Annealing step count that matches the number of probe evaluations a
/// steering grid spends. The derivation is logged.
pub fn eval_parity_steps(n_latents: usize, n_multipliers: usize, chains: usize) -> usize {
    let evals = n_latents * n_multipliers;
    let steps = (evals / chains.max(1)).max(1);
    log::info!(
        "anneal parity: steering scores {n_latents} x {n_multipliers} = {evals} sequences, \
         spread over {chains} chains -> {steps} steps per chain"
    );
    steps
}

/// Probe score of a sequence from raw-embedding or logit features.
pub fn probe_score(seqmodel: &dyn SequenceModel, probe: &ProbeModel, sequence: &str) -> Result<f64> {
    let x = sequence_features(probe.feature_kind, seqmodel, None, sequence)?;
    probe.predict(x.view())
}

/// One annealing chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub best_sequence: String,
    pub best_score: f64,
    /// Score of the current state after every step.
    pub trace: Vec<f64>,
}

fn propose(rng: &mut Rng, target: &DesignTarget, current: &[u8]) -> Vec<u8> {
    let wt = target.wildtype.as_bytes();
    let held: Vec<usize> = target.positions.iter().copied().filter(|&p| current[p] != wt[p]).collect();
    let free: Vec<usize> = target.positions.iter().copied().filter(|&p| current[p] == wt[p]).collect();
    let mut next = current.to_vec();
    let &p = held.choose(rng).expect("chains hold at least one mutation");
    if free.is_empty() || rng.random_bool(SUBSTITUTION_PROBABILITY) {
        next[p] = random_residue_except(rng, &[wt[p], current[p]]);
    } else {
        let &q = free.choose(rng).expect("nonempty");
        next[p] = wt[p];
        next[q] = random_residue_except(rng, &[wt[q]]);
    }
    next
}

pub fn anneal_chain(
    score: &(dyn Fn(&str) -> Result<f64> + Sync),
    target: &DesignTarget,
    cfg: &AnnealConfig,
    chain: u64,
) -> Result<ChainResult> {
    let mut rng = rng::stream(cfg.seed, chain);
    let count = sample_mutation_count(&mut rng, cfg.max_mutations);
    let mut current = random_variant(&mut rng, target, count);
    let as_str = |s: &[u8]| String::from_utf8(s.to_vec()).expect("ascii");
    let mut current_score = score(&as_str(&current))?;
    let (mut best, mut best_score) = (current.clone(), current_score);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let next = propose(&mut rng, target, &current);
        let next_score = score(&as_str(&next))?;
        let accept = metropolis_acceptance(next_score - current_score, cfg.temperature(step));
        if accept >= 1.0 || rng.random::<f64>() < accept {
            current = next;
            current_score = next_score;
            if current_score > best_score {
                best = current.clone();
                best_score = current_score;
            }
        }
        trace.push(current_score);
    }
    Ok(ChainResult {
        best_sequence: as_str(&best),
        best_score,
        trace,
    })
}

/// Run `cfg.budget` chains against a probe on layer embeddings or logits and
/// return their best sequences, de-duplicated and ranked.
pub fn anneal_design(
    target: &DesignTarget,
    probe: &ProbeModel,
    seqmodel: &dyn SequenceModel,
    cfg: &AnnealConfig,
) -> Result<DesignOutput> {
    if probe.feature_kind == FeatureKind::SaeLatents {
        return Err(Error::InvalidArgument(
            "annealing uses layer_embedding or logits probes".into(),
        ));
    }
    let score = |s: &str| probe_score(seqmodel, probe, s);
    anneal_with(&score, target, cfg)
}

/// Annealing against an arbitrary scoring function.
pub fn anneal_with(
    score: &(dyn Fn(&str) -> Result<f64> + Sync),
    target: &DesignTarget,
    cfg: &AnnealConfig,
) -> Result<DesignOutput> {
    cfg.validate()?;
    check_positions(target, cfg.max_mutations)?;
    let chains: Vec<ChainResult> = (0..cfg.budget as u64)
        .into_par_iter()
        .map(|c| anneal_chain(score, target, cfg, c))
        .collect::<Result<_>>()?;
    let wt = target.wildtype.as_bytes();
    let candidates = chains
        .into_iter()
        .map(|c| DesignCandidate {
            mutation_count: c.best_sequence.bytes().zip(wt).filter(|(a, b)| a != *b).count(),
            sequence: c.best_sequence,
            source_latent: None,
            multiplier: None,
            predicted_fitness: c.best_score,
        })
        .collect();
    Ok(select_unique(candidates, cfg.budget))
}
