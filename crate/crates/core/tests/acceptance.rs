//! Acceptance suite. Each test prints one `criterion N [PASS|FAIL]` line to
//! stderr (bypassing the test harness capture) and then asserts.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng as _;

use dimorl::analysis::{detect_degenerate_rewards, fit_pca, pool_sampling_schedule};
use dimorl::config::RunConfig;
use dimorl::datasets::{MultiDemoDataset, SplitSpec, TransitionRecord};
use dimorl::envmodel::{
    domain_risks, evaluate_model, heteroskedastic_dataset, member_loss_and_grad, population_variance, train_ensemble,
    train_ensemble_with, vrex_combine, EnsembleConfig, GaussianEnsemble, GaussianMember, ModelBatch, Objective,
    RexTrainConfig, SyntheticDomain,
};
use dimorl::envs::EnvSpec;
use dimorl::nn::Matrix;
use dimorl::pipeline::{CellFilter, Pipeline};
use dimorl::rollout::{generate_rollouts, penalized_reward, sample_starts, RolloutConfig, UniformPolicy};
use dimorl::seeding::rng_from;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {id:>2} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn repo_root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn synthetic_task(seed: u64, records: usize) -> MultiDemoDataset {
    let domains = [
        SyntheticDomain { id: 1, noise_var: 0.01, records },
        SyntheticDomain { id: 2, noise_var: 0.09, records },
        SyntheticDomain { id: 3, noise_var: 0.81, records },
    ];
    heteroskedastic_dataset(&domains, SplitSpec::Holdout { fraction: 0.1, seed }, seed).unwrap()
}

fn member_loss(member: &GaussianMember, batch: &ModelBatch, obj: Objective, wd: f64, vb: f64) -> f64 {
    member_loss_and_grad(member, batch, obj, wd, vb).unwrap().0.total
}

/// Fourth-order central difference along one coordinate.
fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

#[test]
fn criterion_01_gradient_integrity() {
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut max_params = 0usize;
    for (trial, (hidden, obj)) in [
        (vec![8, 8], Objective::Erm),
        (vec![8, 8], Objective::VRex { beta: 0.0 }),
        (vec![8, 8], Objective::VRex { beta: 20.0 }),
        (vec![12, 12], Objective::VRex { beta: 5.0 }),
        (vec![16], Objective::VRex { beta: 50.0 }),
    ]
    .into_iter()
    .enumerate()
    {
        let ds = synthetic_task(10 + trial as u64, 30);
        let cfg = EnsembleConfig { members: 1, elites: 1, hidden, ..EnsembleConfig::default() };
        let mut ens = GaussianEnsemble::init("synthetic", 1, 1, ds.norm().clone(), &cfg, 40 + trial as u64).unwrap();
        // Spread the bounds away from their initial values so both soft
        // bounds carry curvature.
        let mut rng = rng_from(77, &[trial as u64]);
        let m0 = &mut ens.members[0];
        for (hi, lo) in m0.max_logvar.iter_mut().zip(m0.min_logvar.iter_mut()) {
            *hi = rng.random_range(-0.5..0.5);
            *lo = rng.random_range(-4.0..-2.0);
        }
        let parts: Vec<(u32, Vec<&TransitionRecord>)> =
            ds.demonstrators().into_iter().map(|e| (e, ds.train_records(e).take(8).collect())).collect();
        let batch = ModelBatch::from_records(&ens, &parts);
        let (wd, vb) = (1e-3, 0.01);
        let member = &ens.members[0];
        let analytic = member_loss_and_grad(member, &batch, obj, wd, vb).unwrap().1.flatten();
        let n_net = member.net.param_count();
        let d = member.max_logvar.len();
        max_params = max_params.max(n_net + 2 * d);
        assert_eq!(analytic.len(), n_net + 2 * d);
        assert!(analytic.len() <= 500);
        for (k, &a) in analytic.iter().enumerate() {
            let f = |delta: f64| {
                let mut m = member.clone();
                if k < n_net {
                    m.net.as_mut_slice()[k] += delta;
                } else if k < n_net + d {
                    m.max_logvar[k - n_net] += delta;
                } else {
                    m.min_logvar[k - n_net - d] += delta;
                }
                member_loss(&m, &batch, obj, wd, vb)
            };
            let numeric = five_point(f, 1e-4);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient integrity",
        worst <= 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} over {checked} coordinates (≤ {max_params} params per model), {secs:.1}s"),
    );
}

#[test]
fn criterion_02_reduction_identities() {
    let ds = synthetic_task(5, 200);
    let cfg = RexTrainConfig {
        ensemble: EnsembleConfig { members: 3, elites: 2, hidden: vec![16, 16], ..EnsembleConfig::default() },
        beta: 0.0,
        per_domain_batch: 32,
        max_epochs: 15,
        seed: 9,
        ..RexTrainConfig::default()
    };
    let (rex, rex_log) = train_ensemble(&ds, &cfg).unwrap();
    let (erm, erm_log) = train_ensemble_with(&ds, &cfg, Objective::Erm).unwrap();
    let bits = |e: &GaussianEnsemble| -> Vec<u64> {
        e.members
            .iter()
            .flat_map(|m| m.net.as_slice().iter().chain(&m.max_logvar).chain(&m.min_logvar).map(|x| x.to_bits()))
            .collect()
    };
    let log_bits = |l: &dimorl::envmodel::TrainLog| -> Vec<u64> {
        l.epochs
            .iter()
            .flat_map(|e| {
                e.heldout_nll.iter().map(|x| x.to_bits()).chain(e.domain_risks.iter().flatten().map(|(_, r)| r.to_bits()))
            })
            .collect()
    };
    let models_equal = bits(&rex) == bits(&erm) && rex.elites == erm.elites && log_bits(&rex_log) == log_bits(&erm_log);

    let env = EnvSpec::point_mass_2d();
    let mut env_ds = dimorl::envs::generate_multi_demo_dataset(
        &env,
        &dimorl::envs::builtin_roster(dimorl::envs::EnvKind::PointMass2d, dimorl::envs::RosterKind::Mixed),
        150,
        3,
    )
    .unwrap();
    env_ds = env_ds.resplit(SplitSpec::Holdout { fraction: 0.1, seed: 3 }).unwrap();
    let env_cfg = RexTrainConfig {
        ensemble: EnsembleConfig { members: 3, elites: 2, hidden: vec![16], ..EnsembleConfig::default() },
        max_epochs: 3,
        ..RexTrainConfig::default()
    };
    let (env_model, _) = train_ensemble(&env_ds, &env_cfg).unwrap();
    let starts = sample_starts(&env_ds, 50, 0.1, &mut rng_from(1, &[])).unwrap();
    let policy = UniformPolicy { low: env.action_low.clone(), high: env.action_high.clone() };
    let rcfg = RolloutConfig { horizon: 10, lambda: 0.0, batch: 50, ..RolloutConfig::default() };
    let (ts, _) = generate_rollouts(&env_model, &env, &policy, &starts, &rcfg, 2).unwrap();
    let penalties_nonzero = ts.iter().filter(|t| t.penalty > 0.0).count();
    let rewards_equal = !ts.is_empty() && ts.iter().all(|t| t.transition.reward.to_bits() == t.raw_reward.to_bits());
    verdict(
        2,
        "reduction identities",
        models_equal && rewards_equal,
        format!(
            "β=0 vs ERM ensembles+logs bitwise equal: {models_equal} ({} + {} epochs); λ=0 rewards bitwise raw: {rewards_equal} ({} transitions, {penalties_nonzero} with u > 0)",
            rex_log.erm_epochs,
            rex_log.rex_epochs,
            ts.len()
        ),
    );
}

fn synthetic_model(seed: u64, beta: f64) -> (GaussianEnsemble, MultiDemoDataset) {
    let ds = synthetic_task(seed, 1000);
    let cfg = RexTrainConfig {
        ensemble: EnsembleConfig { members: 5, elites: 3, hidden: vec![32, 32], ..EnsembleConfig::default() },
        beta,
        seed,
        ..RexTrainConfig::default()
    };
    (train_ensemble(&ds, &cfg).unwrap().0, ds)
}

fn risk_std(ens: &GaussianEnsemble, ds: &MultiDemoDataset) -> f64 {
    let r: Vec<f64> = domain_risks(ens, ds).unwrap().into_iter().map(|x| x.1).collect();
    population_variance(&r).sqrt()
}

#[test]
fn criterion_03_risk_variance_reduction() {
    let start = std::time::Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 1..=3 {
        let (e0, ds) = synthetic_model(seed, 0.0);
        let (e20, _) = synthetic_model(seed, 20.0);
        let (s0, s20) = (risk_std(&e0, &ds), risk_std(&e20, &ds));
        if s20 <= 0.5 * s0 {
            wins += 1;
        }
        detail.push(format!("seed {seed}: {s20:.3}/{s0:.3}={:.2}", s20 / s0));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "risk-variance reduction",
        wins >= 2 && secs < 600.0,
        format!("std(β=20)/std(β=0) ≤ 0.5 in {wins}/3 seeds [{}], {secs:.1}s", detail.join(", ")),
    );
}

#[test]
fn criterion_04_worst_case_ood() {
    let start = std::time::Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 1..=3 {
        let ood = |id: u32, noise_var: f64| {
            heteroskedastic_dataset(&[SyntheticDomain { id, noise_var, records: 1000 }], SplitSpec::None, seed).unwrap()
        };
        let (a, b) = (ood(101, 0.65), ood(102, 1.2));
        let sets = [("0.65".to_string(), &a), ("1.2".to_string(), &b)];
        let (e0, _) = synthetic_model(seed, 0.0);
        let (e20, _) = synthetic_model(seed, 20.0);
        let r0 = evaluate_model(&e0, &sets, None).unwrap();
        let r20 = evaluate_model(&e20, &sets, None).unwrap();
        if r20.average_ll >= r0.average_ll && r20.worst_ll >= r0.worst_ll {
            wins += 1;
        }
        detail.push(format!(
            "seed {seed}: avg {:.3} vs {:.3}, worst {:.3} vs {:.3}",
            r20.average_ll, r0.average_ll, r20.worst_ll, r0.worst_ll
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "worst-case OOD improvement",
        wins >= 2 && secs < 900.0,
        format!("β=20 ≥ β=0 on average and worst LL in {wins}/3 seeds [{}], {secs:.1}s", detail.join("; ")),
    );
}

#[test]
fn criterion_05_penalty_law() {
    let strategy = (1usize..6, 1usize..8)
        .prop_flat_map(|(dim, members)| {
            (
                -1e3f64..1e3,
                prop::collection::vec(prop::collection::vec(0.0f64..1e3, dim), members),
                0.0f64..20.0,
                0.0f64..20.0,
                any::<bool>(),
            )
        });
    let mut runner = TestRunner::new(PropConfig { cases: 10_000, failure_persistence: None, ..PropConfig::default() });
    let result = runner.run(&strategy, |(raw, vars, l1, l2, _)| {
        let rows: Vec<&[f64]> = vars.iter().map(Vec::as_slice).collect();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let a = penalized_reward(raw, &rows, lo).unwrap();
        let b = penalized_reward(raw, &rows, hi).unwrap();
        prop_assert!(b <= a, "λ {lo} → {a}, λ {hi} → {b}");
        prop_assert_eq!(penalized_reward(raw, &rows, 0.0).unwrap().to_bits(), raw.to_bits());
        Ok(())
    });
    let example = vrex_combine(&[1.0, 2.0, 3.0], 3.0, 0.0, 0.0).unwrap();
    verdict(
        5,
        "penalty law",
        result.is_ok() && example == 8.0,
        format!(
            "monotone in λ over 10^4 trials: {}; risks {{1,2,3}}, β=3 → {example}",
            match &result {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            }
        ),
    );
}

#[test]
fn criterion_06_offline_policy_quality() {
    let start = std::time::Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse_file(&repo_root().join("configs/novice.toml")).unwrap();
    let p = Pipeline::new(cfg)
        .with_out(out.path().to_path_buf())
        .with_filter("β=20,λ=1,h=5,σ=0".parse::<CellFilter>().unwrap());
    p.run_all().unwrap();
    let report = dimorl::analysis::load_report(&p.report_dir().join("report.json")).unwrap();
    let (best_id, best) =
        report.demonstrators.iter().map(|(k, v)| (*k, *v)).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let cell = &report.policy_cells[0];
    let per_seed: Vec<String> =
        report.policy_eval.iter().map(|r| format!("{:.2}", r.mean_return.unwrap_or(f64::NAN))).collect();
    let mean = cell.mean.unwrap_or(f64::NEG_INFINITY);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "offline policy quality",
        cell.completed == 3 && mean > best && secs < 1800.0,
        format!(
            "mean return {mean:.2} over seeds [{}] vs best demonstrator {best_id} at {best:.2}, {secs:.0}s",
            per_seed.join(", ")
        ),
    );
}

#[test]
fn criterion_07_noisy_start_sweep() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse_file(&repo_root().join("configs/smoke.toml")).unwrap();
    cfg.grid.beta = vec![0.0, 20.0];
    cfg.grid.sigma = vec![0.0, 0.01, 0.05, 0.10];
    cfg.seeds = vec![1, 2, 3];
    let p = Pipeline::new(cfg).with_out(out.path().to_path_buf());
    let summaries = p.run_all().unwrap();
    let failed: usize = summaries.iter().map(|s| s.failed()).sum();
    let report = dimorl::analysis::load_report(&p.report_dir().join("report.json")).unwrap();
    let cells = &report.policy_cells;
    let sigmas = [0.0, 0.01, 0.05, 0.10];
    let mut ok = cells.len() == 8 && failed == 0;
    for (b, beta) in [0.0, 20.0].iter().enumerate() {
        for (k, sigma) in sigmas.iter().enumerate() {
            let c = &cells[b * 4 + k];
            ok &= c.beta == *beta && c.sigma == *sigma && c.completed == 3 && c.mean.is_some();
        }
    }
    let csv = std::fs::read_to_string(p.report_dir().join("policy_eval.csv")).unwrap();
    ok &= csv.lines().count() == 9;
    let table: Vec<String> =
        cells.iter().map(|c| format!("β={} σ={}: {}", c.beta, c.sigma, c.cell)).collect();
    verdict(7, "noisy-start sweep", ok, format!("{} cells, {failed} failed jobs [{}]", cells.len(), table.join("; ")));
}

#[test]
fn criterion_08_pca_correctness() {
    let mut rng = rng_from(8, &[]);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let d = 2 + trial % 5;
        let n = 40 + trial;
        // Correlated data: random mixing of independent columns with distinct scales.
        let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64).collect();
                (0..d).map(|i| (0..d).map(|j| mix[i * d + j] * z[j]).sum()).collect()
            })
            .collect();
        let m = Matrix::from_rows(&rows);
        let pca = fit_pca(&m, d).unwrap();

        let data = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = data.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        for (k, &idx) in order.iter().enumerate() {
            let ratio = eig.eigenvalues[idx].max(0.0) / total;
            worst = worst.max((ratio - pca.explained_variance_ratio[k]).abs());
            worst = worst.max((eig.eigenvalues[idx] - pca.explained_variance[k]).abs());
            let v = eig.eigenvectors.column(idx);
            let dot: f64 = (0..d).map(|j| v[j] * pca.components[k][j]).sum();
            let sign = dot.signum();
            for j in 0..d {
                worst = worst.max((sign * v[j] - pca.components[k][j]).abs());
            }
        }
    }

    let mut dominance = true;
    for trial in 0..10 {
        let d = 2 + trial % 3;
        let rows: Vec<Vec<f64>> =
            (0..60).map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64 * 0.7)).collect()).collect();
        let m = Matrix::from_rows(&rows);
        let pca = fit_pca(&m, 1).unwrap();
        let captured = |u: &[f64]| {
            let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 60.0).collect();
            rows.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) * u[j]).sum::<f64>().powi(2)).sum::<f64>() / 60.0
        };
        let best = captured(&pca.components[0]);
        for _ in 0..1000 {
            let mut u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            dominance &= captured(&u) <= best + 1e-12;
        }
    }

    let steps = |s: Vec<(usize, usize)>| s.into_iter().map(|x| x.0).collect::<Vec<_>>();
    let full = steps(pool_sampling_schedule(1_000_000, 100_000, 1000));
    let desk = steps(pool_sampling_schedule(50_000, 10_000, 1000));
    let schedule_ok = full == (1..10).map(|k| k * 100_000).collect::<Vec<_>>() && desk == vec![10_000, 20_000, 30_000, 40_000];
    verdict(
        8,
        "PCA correctness",
        worst <= 1e-8 && dominance && schedule_ok,
        format!("max deviation from eigen-oracle {worst:.1e}; k=1 dominance over 10^3 directions: {dominance}; schedules {full:?} and {desk:?}"),
    );
}

#[test]
fn criterion_09_degenerate_reward_detector() {
    let mut rng = rng_from(9, &[]);
    let threshold = 1e6;
    let marks = [5usize, 10];
    let mut trajectories = Vec::new();
    // (spike step, spike exceeds) planned per trajectory.
    let mut plan: Vec<Option<(usize, bool)>> = Vec::new();
    let spikes = [2e6, -3.5e7, 1e6, -1e6, 1e6 + 1.0, 999_999.0, f64::INFINITY];
    for i in 0..300 {
        let len = rng.random_range(1..=15);
        let mut t: Vec<f64> = (0..len).map(|_| rng.random_range(-500.0..500.0)).collect();
        if i % 3 == 0 {
            plan.push(None);
        } else {
            let at = rng.random_range(0..len);
            let v = spikes[rng.random_range(0..spikes.len())];
            t[at] = v;
            plan.push(Some((at, v.abs() > threshold)));
        }
        trajectories.push(t);
    }
    // The worked example: a 2e6 spike at step 7 shows up by mark 10 but not mark 5.
    let mut example = vec![1.0; 12];
    example[6] = 2e6;
    trajectories.push(example);
    plan.push(Some((6, true)));

    let report = detect_degenerate_rewards(&trajectories, threshold, &marks);
    let mut ok = report.trajectories.len() == trajectories.len();
    let mut expect_within = [0usize; 2];
    let mut expect_total = 0;
    for (t, p) in report.trajectories.iter().zip(&plan) {
        let exceeds = matches!(p, Some((_, true)));
        ok &= t.exceeds == exceeds;
        expect_total += usize::from(exceeds);
        for (k, &m) in marks.iter().enumerate() {
            let within = matches!(p, Some((at, true)) if *at < m);
            ok &= (t.max_abs_within[k].1 > threshold) == within;
            expect_within[k] += usize::from(within);
        }
    }
    let last = report.trajectories.last().unwrap();
    let example_ok = last.exceeds && last.max_abs_within[0].1 <= threshold && last.max_abs_within[1].1 > threshold;
    let largest_clean = trajectories
        .iter()
        .zip(&plan)
        .filter(|(_, p)| !matches!(p, Some((_, true))))
        .flat_map(|(t, _)| t.iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    ok &= report.exceed_count == expect_total
        && report.exceed_within == vec![(5, expect_within[0]), (10, expect_within[1])]
        && report.largest_clean == Some(largest_clean)
        && example_ok;
    let zeros = detect_degenerate_rewards(&[vec![0.0; 10]], threshold, &marks);
    ok &= zeros.exceed_count == 0 && zeros.largest_clean == Some(0.0);
    verdict(
        9,
        "degenerate-reward detector",
        ok,
        format!(
            "{} trajectories, {} exceed (by step 5: {}, by step 10: {}), largest clean {largest_clean}; step-7 example flagged at mark 10 only: {example_ok}",
            trajectories.len(),
            report.exceed_count,
            report.exceed_within[0].1,
            report.exceed_within[1].1
        ),
    );
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let start = std::time::Instant::now();
    let config = repo_root().join("configs/smoke.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut codes = Vec::new();
    for d in &dirs {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_dimorl"))
            .arg("run-all")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(d.path())
            .output()
            .unwrap();
        codes.push(out.status.code());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report/report.json")).unwrap();
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    let secs = start.elapsed().as_secs_f64();
    let digest = dimorl::pipeline::sha256_hex(&a);
    verdict(
        10,
        "end-to-end determinism",
        a == b && codes.iter().all(|c| matches!(c, Some(0) | Some(5))) && secs < 1800.0,
        format!("report.json identical across runs: {} ({} bytes, sha256 {}…), exit codes {codes:?}, {secs:.1}s", a == b, a.len(), &digest[..12]),
    );
}
