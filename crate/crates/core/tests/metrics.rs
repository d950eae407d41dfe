mod common;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sdedit_core::metrics::{bound_samples, summarize_bound, PolynomialKernel};
use sdedit_core::{
    check_prop1, mmd_kid, prop1_bound, tradeoff_sweep, AnalyticGmmScore, BoundReference, GmmComponent, GmmSpec,
    Guide, NoiseSchedule, SdeditConfig, SweepConfig, VeSchedule, ZeroScore,
};

fn ve(sigma_max: f64) -> NoiseSchedule {
    NoiseSchedule::Ve(VeSchedule::new(0.01, sigma_max).unwrap())
}

fn testbed() -> GmmSpec {
    GmmSpec::new(vec![
        GmmComponent { weight: 0.5, mean: vec![-2.0, 0.0], std: 0.4 },
        GmmComponent { weight: 0.3, mean: vec![2.0, 0.0], std: 0.3 },
        GmmComponent { weight: 0.2, mean: vec![0.0, 2.5], std: 0.5 },
    ])
    .unwrap()
}

/// MMD^2 of the split `idx[..m]` vs `idx[m..]` from a precomputed kernel
/// matrix, using the same estimator as `mmd_kid` for equal sizes.
fn split_mmd(k: &[f64], n: usize, idx: &[usize], m: usize) -> f64 {
    let (a, b) = idx.split_at(m);
    let mf = m as f64;
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                aa += k[a[i] * n + a[j]];
                bb += k[b[i] * n + b[j]];
                ab += k[a[i] * n + b[j]];
            }
        }
    }
    (aa + bb - 2.0 * ab) / (mf * (mf - 1.0))
}

#[test]
fn mmd_same_distribution_passes_permutation_test() {
    let gmm = testbed();
    let kernel = PolynomialKernel::default();
    let (m, trials, perms) = (500, 100, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut accepted = 0;
    for _ in 0..trials {
        let a = gmm.sample(&mut rng, m);
        let b = gmm.sample(&mut rng, m);
        let pooled: Vec<&Vec<f64>> = a.iter().chain(&b).collect();
        let n = pooled.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = kernel.eval(pooled[i], pooled[j]);
            }
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let observed = split_mmd(&k, n, &idx, m);
        assert!((observed - mmd_kid(&a, &b).unwrap().value).abs() < 1e-9 * (1.0 + observed.abs()));
        let mut null: Vec<f64> = (0..perms)
            .map(|_| {
                idx.shuffle(&mut rng);
                split_mmd(&k, n, &idx, m).abs()
            })
            .collect();
        null.sort_by(f64::total_cmp);
        let threshold = null[(0.95 * perms as f64) as usize];
        if observed.abs() <= threshold {
            accepted += 1;
        }
    }
    assert!(accepted >= 93, "{accepted}/{trials}");
}

#[test]
fn prop1_quantile_under_bound() {
    let q = common::chi_squared_quantile(2, 0.95);
    assert!((q - 5.991).abs() < 1e-3);
    assert!(q <= prop1_bound(0.0, 2, 0.05, 1.0).unwrap());
}

#[test]
fn zero_score_violations_within_binomial_band() {
    let n = 10_000;
    for d in [2, 16] {
        let guide = Guide::flat(vec![0.5; d]).unwrap();
        let schedule = ve(25.0);
        let cfg = SdeditConfig::new(0.4, 20).with_seed(d as u64);
        let samples = bound_samples(&guide, &ZeroScore::new(d), &schedule, &cfg, n).unwrap();
        for delta in [0.5, 0.05, 0.01] {
            let r = summarize_bound(&samples, d, Some(0.0), delta, BoundReference::Perturbed).unwrap();
            let slack = 3.0 * (delta * (1.0 - delta) / n as f64).sqrt();
            assert!(r.violation_fraction <= delta + slack, "d {d} delta {delta}: {r:?}");
        }
        let trivial = summarize_bound(&samples, d, Some(0.0), 0.999, BoundReference::Perturbed).unwrap();
        assert!(trivial.violation_fraction <= 0.999);
    }
}

#[test]
fn guide_reference_doubles_the_variance() {
    // output - guide = (x(t0) - guide) + (output - x(t0)): two independent sigma^2 chi^2_d parts.
    let d = 2;
    let guide = Guide::flat(vec![0.0; d]).unwrap();
    let schedule = ve(25.0);
    let cfg = SdeditConfig::new(0.5, 10).with_seed(3);
    let s = bound_samples(&guide, &ZeroScore::new(d), &schedule, &cfg, 20_000).unwrap();
    let s2 = s.sigma_t0 * s.sigma_t0;
    let scaled: Vec<f64> = s.to_guide.iter().map(|v| v / (2.0 * s2)).collect();
    assert!(common::ks_chi_squared(&scaled, d) < 0.015);
    let r = summarize_bound(&s, d, Some(0.0), 0.01, BoundReference::Guide).unwrap();
    assert!(r.violation_fraction > 0.01, "{r:?}");
}

#[test]
fn measured_constant_single_gaussian() {
    let schedule = ve(25.0);
    let gmm = GmmSpec::new(vec![GmmComponent { weight: 1.0, mean: vec![0.0, 0.0], std: 0.5 }]).unwrap();
    let score = AnalyticGmmScore::new(gmm, schedule);
    let guide = Guide::flat(vec![1.0, -1.0]).unwrap();
    let cfg = SdeditConfig::new(0.4, 50).with_seed(8);
    let r = check_prop1(&guide, &score, &schedule, &cfg, None, 0.05, 10_000, BoundReference::default()).unwrap();
    assert!(r.c_measured && r.c > 0.0);
    assert!(r.violation_fraction <= 0.05, "{r:?}");
    assert!((0.0..=1.0).contains(&r.violation_fraction));
}

fn small_sweep(grid: Vec<f64>, seed: u64) -> sdedit_core::TradeoffReport {
    let schedule = ve(25.0);
    let gmm = testbed();
    let score = AnalyticGmmScore::new(gmm.clone(), schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reference = gmm.sample(&mut rng, 100);
    let guides = vec![Guide::flat(vec![0.0, -2.0]).unwrap(), Guide::flat(vec![3.0, 3.0]).unwrap()];
    let config = SweepConfig { t0_grid: grid, runs_per_point: 20, n_steps: 50, seed, mmd_folds: 4 };
    tradeoff_sweep(&guides, &score, &schedule, &reference, &config).unwrap()
}

#[test]
fn sweep_at_zero_is_exactly_faithful() {
    let r = small_sweep(vec![0.0], 1);
    assert_eq!(r.points.len(), 1);
    assert_eq!(r.points[0].l2sq_mean, 0.0);
    assert_eq!(r.points[0].n_runs, 20);
}

#[test]
fn sweep_is_byte_for_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let json = dir.path().join(format!("r{i}.json"));
        let csv = dir.path().join(format!("r{i}.csv"));
        small_sweep(vec![0.2, 0.5, 0.8], 9).write(&json, Some(&csv)).unwrap();
        files.push((std::fs::read(json).unwrap(), std::fs::read(csv).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let csv = String::from_utf8(files[0].1.clone()).unwrap();
    assert!(csv.starts_with("t0,l2sq_mean,l2sq_stderr,mmd_mean,mmd_stderr\n"));
    assert_eq!(csv.lines().count(), 4);
    assert_ne!(small_sweep(vec![0.5], 10).points, small_sweep(vec![0.5], 9).points);
}

#[test]
fn sweep_rejects_bad_grids() {
    let schedule = ve(25.0);
    let score = ZeroScore::new(2);
    let guides = vec![Guide::flat(vec![0.0, 0.0]).unwrap()];
    let reference = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    for grid in [vec![], vec![0.5, 0.5], vec![0.6, 0.4]] {
        let config = SweepConfig { t0_grid: grid, runs_per_point: 4, n_steps: 5, seed: 0, mmd_folds: 2 };
        assert!(tradeoff_sweep(&guides, &score, &schedule, &reference, &config).is_err());
    }
}
