//! Acceptance suite. Every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line; the test fails if any criterion fails.
//!
//! Run with `cargo test -p latentforge-cli --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::Rng;

use latentforge::analysis::top_fraction_variance;
use latentforge::baselines::{anneal_design, eval_parity_steps, random_design, AnnealConfig};
use latentforge::data::diff_mutations;
use latentforge::landscape::{embedding_rows, sample_dataset, DatasetConfig};
use latentforge::oracle::{evaluate_designs, pool_statistics, DesignStats};
use latentforge::pipeline::{design_probe, FeatureTable, PipelineConfig, ProbeTrial};
use latentforge::probe::{ridge_dual, ridge_primal, spearman, ProbeOptions};
use latentforge::rng;
use latentforge::sae::{grad_check, init_params, reconstruction_mse, topk_rows, train_sae};
use latentforge::splits::{check_invariants, make_split, run_trials, trial_seeds, SplitSpec, SplitTask, LOW_N_SIZES};
use latentforge::steering::{default_multipliers, design, DesignCandidate, DesignTarget};
use latentforge::{
    DmsDataset, Error, FeatureKind, SaeConfig, SaeParams, SteeringConfig, SyntheticConfig,
    SyntheticModel,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn normal(r: &mut impl Rng) -> f64 {
    // Box-Muller keeps the suite free of extra distributions crates.
    let u: f64 = r.random_range(f64::EPSILON..1.0);
    let v: f64 = r.random_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(r))
}

/// Desk-scale SAE used by the low-N and steering criteria.
fn desk_sae(seed: u64) -> SaeConfig {
    SaeConfig {
        d_sae: 64,
        k: 4,
        alpha: 1.0 / 32.0,
        k_aux: 16,
        lr: 1e-3,
        epochs: 100,
        batch: 128,
        seed,
        dead_threshold: 256,
    }
}

struct Planted {
    model: SyntheticModel,
    ds: DmsDataset,
    sae: SaeParams,
}

fn planted(seed: u64, d_model: usize, sae_cfg: &SaeConfig) -> Planted {
    let model = SyntheticModel::new(SyntheticConfig {
        seed,
        d_model,
        ..Default::default()
    })
    .unwrap();
    let ds = sample_dataset(&model, &DatasetConfig { seed, ..Default::default() }).unwrap();
    let seqs: Vec<String> = ds.records.iter().map(|r| r.sequence.clone()).collect();
    let rows = embedding_rows(&model, &seqs).unwrap();
    let sae = train_sae(&rows, sae_cfg).unwrap().params;
    Planted { model, ds, sae }
}

// ---------------------------------------------------------------------------

fn topk_contract() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(1);
    let d = 64;
    let ks = [1, 2, 3, 5, 8, 16, 32, 63, 64];
    let mut mismatches = 0;
    let mut rows_checked = 0;
    for (b, &k) in ks.iter().cycle().take(100).enumerate() {
        // Every fourth block is quantized so ties occur.
        let mut pre = random_matrix(&mut r, 100, d);
        if b % 4 == 0 {
            pre.mapv_inplace(|v| (v * 2.0).round() / 2.0);
        }
        let z = topk_rows(&pre, k).unwrap();
        for (row, zrow) in pre.rows().into_iter().zip(z.rows()) {
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let keep: HashSet<usize> = order[..k].iter().copied().collect();
            let expect: Vec<f64> = (0..d).map(|j| if keep.contains(&j) { row[j] } else { 0.0 }).collect();
            let nonzero = zrow.iter().filter(|v| **v != 0.0).count();
            if zrow.to_vec() != expect || nonzero > k {
                mismatches += 1;
            }
            rows_checked += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        mismatches == 0 && rows_checked == 10_000 && within(el, 5),
        format!("{rows_checked} rows, {mismatches} mismatches, {el:.2?}"),
    )
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for i in 0..25u64 {
        let mut r = rng::seeded(1000 + i);
        let d = r.random_range(3..8);
        let s = r.random_range(d..2 * d + 4);
        let k = r.random_range(1..s / 2 + 1);
        let k_aux = r.random_range(1..s - k + 1);
        let p = SaeParams {
            w_enc: random_matrix(&mut r, s, d),
            w_dec: random_matrix(&mut r, d, s),
            b_pre: Array1::from_shape_fn(d, |_| normal(&mut r)),
            k,
            k_aux,
            alpha: 1.0 / 32.0,
        };
        let rows = r.random_range(1..5);
        let x = random_matrix(&mut r, rows, d);
        let dead: Vec<bool> = (0..s).map(|_| r.random_bool(0.3)).collect();
        let gc = grad_check(&p, &x, &dead, 1e-5).unwrap();
        if gc.checked == 0 {
            bad += 1;
        }
        worst = worst.max(gc.max_rel_err);
    }
    outcome(
        worst < 1e-4 && bad == 0,
        format!("25 instances, max relative error {worst:.2e}"),
    )
}

fn rank_k_reconstruction() -> Outcome {
    let t = Instant::now();
    let mut r = rng::seeded(0);
    let (d, k) = (16, 4);
    let mut basis = random_matrix(&mut r, k, d);
    for i in 0..k {
        for j in 0..i {
            let dot = basis.row(i).dot(&basis.row(j));
            let bj = basis.row(j).to_owned();
            basis.row_mut(i).scaled_add(-dot, &bj);
        }
        let n = basis.row(i).dot(&basis.row(i)).sqrt();
        basis.row_mut(i).mapv_inplace(|v| v / n);
    }
    let x = random_matrix(&mut r, 256, k).dot(&basis);
    let cfg = SaeConfig {
        d_sae: 32,
        k,
        alpha: 1.0 / 32.0,
        k_aux: 8,
        lr: 1e-3,
        epochs: 2000,
        batch: 128,
        seed: 0,
        dead_threshold: 256,
    };
    let initial = reconstruction_mse(&init_params(&x, &cfg).unwrap(), &x).unwrap();
    let state = train_sae(&x, &cfg).unwrap();
    let last = reconstruction_mse(&state.params, &x).unwrap();
    let el = t.elapsed();
    outcome(
        last < 1e-3 * initial && within(el, 60),
        format!("mse {initial:.3e} -> {last:.3e} (ratio {:.2e}), {el:.2?}", last / initial),
    )
}

fn planted_recovery() -> Outcome {
    let t = Instant::now();
    let cfg = |seed| SaeConfig {
        k: 8,
        ..desk_sae(seed)
    };
    let mut good_seeds = 0;
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let p = planted(seed, 32, &cfg(seed));
        let dec = &p.sae.w_dec;
        let recovered = (0..p.model.motifs.len())
            .filter(|&i| {
                let dir = p.model.motif_directions.row(i);
                (0..dec.ncols()).any(|j| {
                    let c = dec.column(j);
                    c.dot(&dir).abs() / c.dot(&c).sqrt() >= 0.8
                })
            })
            .count();
        per_seed.push(recovered);
        if recovered >= 5 {
            good_seeds += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        good_seeds >= 4 && within(el, 300),
        format!("motifs recovered per seed {per_seed:?} (of 6), {good_seeds}/5 seeds, {el:.2?}"),
    )
}

/// Accelerated gradient descent on `||y − Xw − b||² + λ||w||²`.
fn ridge_gd(x: &Array2<f64>, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let (n, d) = x.dim();
    let y = Array1::from(y.to_vec());
    // Lipschitz bound of the gradient: 2 (||[X 1]||_F² + λ).
    let l = 2.0 * (x.iter().map(|v| v * v).sum::<f64>() + n as f64 + lambda);
    let grad = |w: &Array1<f64>, b: f64| {
        let resid = &y - &x.dot(w) - b;
        (-2.0 * x.t().dot(&resid) + 2.0 * lambda * w, -2.0 * resid.sum())
    };
    let (mut w, mut b) = (Array1::<f64>::zeros(d), 0.0);
    let (mut vw, mut vb) = (w.clone(), b);
    let mut tk: f64 = 1.0;
    for _ in 0..2_000_000 {
        let (gw, gb) = grad(&vw, vb);
        let nw = &vw - &(&gw / l);
        let nb = vb - gb / l;
        let tn = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        let mom = (tk - 1.0) / tn;
        // Restart momentum when the step opposes the gradient.
        let restart = gw.dot(&(&nw - &w)) + gb * (nb - b) > 0.0;
        if restart {
            vw = nw.clone();
            vb = nb;
            tk = 1.0;
        } else {
            vw = &nw + &((&nw - &w) * mom);
            vb = nb + (nb - b) * mom;
            tk = tn;
        }
        let step = (&nw - &w).iter().map(|v| v * v).sum::<f64>() + (nb - b).powi(2);
        w = nw;
        b = nb;
        if step < 1e-34 {
            break;
        }
    }
    (w.to_vec(), b)
}

fn rel_diff(a: (&[f64], f64), b: (&[f64], f64)) -> f64 {
    let num: f64 = a.0.iter().zip(b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>() + (a.1 - b.1).powi(2);
    let den: f64 = b.0.iter().map(|y| y * y).sum::<f64>() + b.1 * b.1;
    (num / den.max(1e-300)).sqrt()
}

fn brute_force_spearman(a: &[f64], b: &[f64]) -> (f64, bool) {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return (0.0, true);
    }
    ((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), false)
}

fn ridge_and_spearman() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut r = rng::seeded(2000 + i);
        let n = r.random_range(5..40);
        let d = r.random_range(2..40);
        let lambda = 10f64.powi(r.random_range(-3..=3));
        let x = random_matrix(&mut r, n, d);
        let y: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let p = ridge_primal(&x, &y, lambda, FeatureKind::LayerEmbedding).unwrap();
        let q = ridge_dual(&x, &y, lambda, FeatureKind::LayerEmbedding).unwrap();
        let (gw, gb) = ridge_gd(&x, &y, lambda);
        worst = worst
            .max(rel_diff((&p.weights, p.intercept), (&q.weights, q.intercept)))
            .max(rel_diff((&p.weights, p.intercept), (&gw, gb)))
            .max(rel_diff((&q.weights, q.intercept), (&gw, gb)));
    }
    let mut spearman_mismatch = 0;
    for i in 0..1000u64 {
        let mut r = rng::seeded(3000 + i);
        let n = r.random_range(2..30);
        // Small integer ranges force ties.
        let levels = r.random_range(1..8);
        let draw = |r: &mut rng::Rng| -> Vec<f64> {
            (0..n).map(|_| if i % 2 == 0 { r.random_range(0..levels) as f64 } else { normal(r) }).collect()
        };
        let a = draw(&mut r);
        let b = draw(&mut r);
        let got = spearman(&a, &b).unwrap();
        let (rho, degenerate) = brute_force_spearman(&a, &b);
        if got.rho != rho || got.degenerate != degenerate {
            spearman_mismatch += 1;
        }
    }
    outcome(
        worst < 1e-6 && spearman_mismatch == 0,
        format!("100 ridge problems, max relative gap {worst:.2e}; Spearman mismatches {spearman_mismatch}/1000"),
    )
}

fn split_invariants() -> Outcome {
    let mut violations = 0;
    let mut checked = 0;
    let mut infeasible = 0;
    for i in 0..200u64 {
        let mut r = rng::seeded(4000 + i);
        let length = r.random_range(12..41);
        let n_motifs = r.random_range(2..7);
        let model = SyntheticModel::new(SyntheticConfig {
            length,
            d_model: 16,
            n_motifs,
            seed: i,
            epistasis: r.random_bool(0.5),
        })
        .unwrap();
        let mut dcfg = DatasetConfig {
            n_variants: r.random_range(60..400),
            max_mutations: r.random_range(1..6),
            extra_positions: r.random_range(0..6),
            seed: i,
            ..Default::default()
        };
        // Small position sets cannot host every requested variant.
        let ds = loop {
            match sample_dataset(&model, &dcfg) {
                Ok(ds) => break ds,
                Err(_) => dcfg.n_variants /= 2,
            }
        };
        for task in SplitTask::ALL {
            for &n in LOW_N_SIZES.iter().filter(|&&n| n < ds.len()) {
                for (seed_test, seed_sample) in trial_seeds(task) {
                    let spec = SplitSpec::new(task, n, seed_test, seed_sample);
                    match make_split(&ds, &spec) {
                        Ok(s) => {
                            checked += 1;
                            if check_invariants(&ds, &spec, &s).is_err() {
                                violations += 1;
                            }
                        }
                        Err(Error::Split(_)) => infeasible += 1,
                        Err(_) => violations += 1,
                    }
                }
            }
        }
    }
    outcome(
        violations == 0 && checked > 0,
        format!("{checked} splits checked, {violations} violations, {infeasible} reported infeasible"),
    )
}

fn low_n_advantage() -> Outcome {
    let t = Instant::now();
    let p = planted(0, 24, &desk_sae(0));
    let sae_t = ProbeTrial::new(FeatureTable::build(FeatureKind::SaeLatents, &p.ds, &p.model, Some(&p.sae)).unwrap());
    let raw_t = ProbeTrial::new(FeatureTable::build(FeatureKind::LayerEmbedding, &p.ds, &p.model, None).unwrap());
    let a = run_trials(&p.ds, SplitTask::Random, 24, &sae_t);
    let b = run_trials(&p.ds, SplitTask::Random, 24, &raw_t);
    let wins = a
        .rows
        .iter()
        .zip(&b.rows)
        .filter(|(x, y)| matches!((x.spearman_abs, y.spearman_abs), (Some(u), Some(v)) if u > v))
        .count();
    let el = t.elapsed();
    outcome(
        wins >= 6 && within(el, 600),
        format!(
            "SAE beats raw in {wins}/9 trials (mean |rho| {:.3} vs {:.3}), {el:.2?}",
            a.mean.unwrap_or(f64::NAN),
            b.mean.unwrap_or(f64::NAN)
        ),
    )
}

struct DesignRun {
    target: DesignTarget,
    max_mutations: usize,
    pools: BTreeMap<&'static str, (Vec<DesignCandidate>, bool)>,
    stats: BTreeMap<&'static str, DesignStats>,
}

const N_LATENTS: usize = 32;

fn design_run(seed: u64) -> DesignRun {
    let p = planted(seed, 24, &desk_sae(seed));
    let target = DesignTarget::new(p.ds.wildtype.clone(), p.ds.mutated_positions()).unwrap();
    let max_mutations = SteeringConfig::max_mutations_for(target.positions.len());
    let options = ProbeOptions::default();
    let sae_table = FeatureTable::build(FeatureKind::SaeLatents, &p.ds, &p.model, Some(&p.sae)).unwrap();
    let raw_table = FeatureTable::build(FeatureKind::LayerEmbedding, &p.ds, &p.model, None).unwrap();
    let sae_probe = design_probe(&sae_table, &p.ds, 24, options).unwrap();
    let raw_probe = design_probe(&raw_table, &p.ds, 24, options).unwrap();
    let cfg = SteeringConfig {
        n_latents: N_LATENTS,
        max_mutations,
        ..Default::default()
    };
    let steer = design(&p.model, &p.sae, &sae_probe, &target, &cfg).unwrap();
    let steps = eval_parity_steps(N_LATENTS, default_multipliers().len(), cfg.budget);
    let anneal = anneal_design(
        &target,
        &raw_probe,
        &p.model,
        &AnnealConfig::with_steps(steps, seed, max_mutations, cfg.budget),
    )
    .unwrap();
    let random = random_design(&target, seed, cfg.budget, max_mutations).unwrap();
    let mut pools = BTreeMap::new();
    pools.insert("steer", (steer.candidates, steer.shortfall));
    pools.insert("anneal", (anneal.candidates, anneal.shortfall));
    pools.insert("random", (random, false));
    let stats = pools
        .iter()
        .map(|(k, (c, _))| (*k, evaluate_designs(&p.model, c).unwrap()))
        .collect();
    DesignRun {
        target,
        max_mutations,
        pools,
        stats,
    }
}

fn steering_efficacy(runs: &[DesignRun], el: Duration) -> Outcome {
    let stat = |s: &DesignStats| [s.mean, s.max, s.top10pct_mean, s.top20pct_mean];
    let mut per_stat = [0usize; 4];
    let mut beat_anneal = 0;
    for run in runs {
        let (s, r, a) = (&run.stats["steer"], &run.stats["random"], &run.stats["anneal"]);
        for (i, (x, y)) in stat(s).iter().zip(stat(r)).enumerate() {
            if *x >= y {
                per_stat[i] += 1;
            }
        }
        if s.max >= a.max {
            beat_anneal += 1;
        }
    }
    outcome(
        per_stat.iter().all(|&c| c >= 9) && beat_anneal >= 6 && within(el, 900),
        format!(
            "steer >= random in {per_stat:?}/10 seeds (mean, max, top10, top20); \
             max >= anneal in {beat_anneal}/10; {el:.2?}"
        ),
    )
}

fn check_pool(target: &DesignTarget, max: usize, pool: &[DesignCandidate], shortfall: bool, budget: usize) -> (usize, bool) {
    let allowed: HashSet<usize> = target.positions.iter().copied().collect();
    let bad = pool
        .iter()
        .filter(|c| {
            let muts = diff_mutations(&target.wildtype, &c.sequence).unwrap();
            muts.len() > max || muts.len() != c.mutation_count || muts.iter().any(|m| !allowed.contains(&m.position))
        })
        .count();
    let unique = pool.iter().map(|c| c.sequence.as_str()).collect::<HashSet<_>>().len() == pool.len();
    let sized = if shortfall { pool.len() <= budget } else { pool.len() == budget };
    (bad, unique && sized)
}

fn design_constraints(runs: &[DesignRun]) -> Outcome {
    let mut designs = 0;
    let mut bad = 0;
    let mut size_failures = 0;
    let mut shortfalls = 0;
    for run in runs {
        for (pool, shortfall) in run.pools.values() {
            let (b, ok) = check_pool(&run.target, run.max_mutations, pool, *shortfall, 50);
            designs += pool.len();
            bad += b;
            size_failures += usize::from(!ok);
            shortfalls += usize::from(*shortfall);
        }
    }
    // Four-site mode: a target covering exactly four positions.
    let p = planted(0, 24, &desk_sae(0));
    let positions: Vec<usize> = p.ds.mutated_positions().into_iter().take(4).collect();
    let target = DesignTarget::new(p.ds.wildtype.clone(), positions).unwrap();
    let max = SteeringConfig::max_mutations_for(target.positions.len());
    let table = FeatureTable::build(FeatureKind::SaeLatents, &p.ds, &p.model, Some(&p.sae)).unwrap();
    let probe = design_probe(&table, &p.ds, 24, ProbeOptions::default()).unwrap();
    let cfg = SteeringConfig {
        n_latents: N_LATENTS,
        max_mutations: max,
        ..Default::default()
    };
    let steer = design(&p.model, &p.sae, &probe, &target, &cfg).unwrap();
    let random = random_design(&target, 0, 50, max).unwrap();
    for (pool, shortfall) in [(&steer.candidates, steer.shortfall), (&random, false)] {
        let (b, ok) = check_pool(&target, max, pool, shortfall, 50);
        designs += pool.len();
        bad += b;
        size_failures += usize::from(!ok);
    }
    outcome(
        bad == 0 && size_failures == 0 && max == 4,
        format!(
            "{designs} designs, {bad} violate radius/positions, {size_failures} pools not unique or \
             mis-sized ({shortfalls} flagged shortfalls)"
        ),
    )
}

fn statistics_ordering() -> Outcome {
    let mut violations = 0;
    for i in 0..10_000u64 {
        let mut r = rng::seeded(5000 + i);
        let n = r.random_range(1..120);
        let tied = i % 3 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if tied { r.random_range(0..4) as f64 * 0.1 } else { normal(&mut r) })
            .collect();
        let s = pool_statistics(&scores).unwrap();
        if !(s.max >= s.top10pct_mean && s.top10pct_mean >= s.top20pct_mean && s.top20pct_mean >= s.mean) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 score sets, {violations} ordering violations"))
}

fn metric_definitions() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let mut r = rng::seeded(6000 + i);
        let d = r.random_range(1..200);
        let fraction = r.random_range(0.01..1.0);
        let w: Vec<f64> = (0..d).map(|_| normal(&mut r) * 2.0).collect();
        let mean = w.iter().sum::<f64>() / d as f64;
        let k = (fraction * d as f64).ceil() as usize;
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap().then(a.cmp(&b)));
        let total: f64 = w.iter().map(|x| (x - mean) * (x - mean)).sum();
        let top: f64 = order[..k].iter().map(|&j| (w[j] - mean) * (w[j] - mean)).sum();
        let expect = if total == 0.0 { 0.0 } else { top / total };
        worst = worst.max((top_fraction_variance(&w, fraction).unwrap() - expect).abs());
    }
    let degenerate = top_fraction_variance(&[1.5; 40], 0.05).unwrap();
    outcome(
        worst <= 1e-12 && degenerate == 0.0,
        format!("1000 vectors, max gap {worst:.1e}; all-equal case {degenerate}"),
    )
}

fn cli_determinism() -> Outcome {
    let t = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.landscape.length = 24;
    cfg.landscape.n_motifs = 4;
    cfg.dataset.n_variants = 250;
    cfg.sae.epochs = 15;
    cfg.design.n_latents = 8;
    cfg.oracle.mode = latentforge::pipeline::OracleMode::Mlp;
    cfg.oracle.max_epochs = 60;
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let run = |name: &str, threads: &str| {
        let out = root.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_latentforge"))
            .args(["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "run"])
            .env("LATENTFORGE_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "2");
    let files = |dir: &Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect()
    };
    let (fa, fb) = (files(&a), files(&b));
    let csvs = fa.keys().filter(|k| k.ends_with(".csv")).count();
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let el = t.elapsed();
    outcome(
        differing.is_empty() && fa.len() == fb.len() && csvs >= 10,
        format!("{} files ({csvs} CSV) compared across two runs, differing: {differing:?}, {el:.2?}", fa.len()),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("TopK contract", topk_contract()),
        ("SAE gradient check", gradient_check()),
        ("SAE rank-k reconstruction", rank_k_reconstruction()),
        ("Planted-motif recovery", planted_recovery()),
        ("Ridge oracle equivalence", ridge_and_spearman()),
        ("Split invariants", split_invariants()),
        ("Low-N advantage", low_n_advantage()),
    ];
    let t = Instant::now();
    let runs: Vec<DesignRun> = (0..10).map(design_run).collect();
    let el = t.elapsed();
    results.push(("Steering efficacy", steering_efficacy(&runs, el)));
    results.push(("Design constraints", design_constraints(&runs)));
    results.push(("Statistics ordering", statistics_ordering()));
    results.push(("Metric definitions", metric_definitions()));
    results.push(("Determinism", cli_determinism()));

    println!();
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
