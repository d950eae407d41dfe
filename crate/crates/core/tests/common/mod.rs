//! Statistical oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Kolmogorov–Smirnov distance between an empirical sample and a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        worst = worst.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    worst
}

pub fn ks_chi_squared(samples: &[f64], dof: usize) -> f64 {
    let chi = ChiSquared::new(dof as f64).unwrap();
    ks_statistic(samples, |x| chi.cdf(x))
}

pub fn chi_squared_quantile(dof: usize, p: f64) -> f64 {
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(p)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two-sample energy-distance permutation test. Returns `(statistic, p)`.
pub fn energy_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> (f64, f64) {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pooled.len();
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(pooled[i], pooled[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let m = a.len();
    let stat = |labels: &[bool]| -> f64 {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let row = &d[i * n..(i + 1) * n];
            for j in 0..n {
                match (labels[i], labels[j]) {
                    (true, true) => xx += row[j],
                    (false, false) => yy += row[j],
                    _ => xy += row[j],
                }
            }
        }
        let (m, k) = (m as f64, (n - m) as f64);
        xy / (m * k) - xx / (m * m) - yy / (k * k)
    };
    let mut labels: Vec<bool> = (0..n).map(|i| i < m).collect();
    let observed = stat(&labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0;
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if stat(&labels) >= observed {
            at_least += 1;
        }
    }
    (observed, (at_least + 1) as f64 / (permutations + 1) as f64)
}

/// Prints the single-line verdict used by the acceptance report.
pub fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
