//! Isotropic Gaussian mixtures and their exact noise-perturbed scores.
//!
//! Convolving `N(mu_k, s_k^2 I)` with the forward kernel
//! `x(t) = m(t) x(0) + std(t) z` gives `N(m mu_k, (m^2 s_k^2 + std^2) I)`,
//! so the perturbed density stays a mixture with the same weights.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassifierGradient, ScoreModel};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GmmComponent>", into = "Vec<GmmComponent>")]
pub struct GmmSpec {
    components: Vec<GmmComponent>,
}

impl TryFrom<Vec<GmmComponent>> for GmmSpec {
    type Error = Error;

    fn try_from(components: Vec<GmmComponent>) -> Result<Self> {
        GmmSpec::new(components)
    }
}

impl From<GmmSpec> for Vec<GmmComponent> {
    fn from(spec: GmmSpec) -> Self {
        spec.components
    }
}

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be >= 1".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::shape(
                    format!("component mean of dim {dim}"),
                    format!("component {k} with dim {}", c.mean.len()),
                ));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "component {k} weight {} not in (0, 1]",
                    c.weight
                )));
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "component {k} std {} must be positive",
                    c.std
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidParameter(format!("component {k} mean not finite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    /// Equal-weight mixture with a shared standard deviation.
    pub fn uniform(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .map(|mean| GmmComponent { weight: w, mean, std })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Draws one sample and reports which component produced it.
    pub fn sample_with_label<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let x = c
            .mean
            .iter()
            .map(|m| m + c.std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (k, x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_with_label(rng).1).collect()
    }

    /// Index of the component with the highest unperturbed posterior at `x`.
    pub fn basin(&self, x: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, c) in self.components.iter().enumerate() {
            let v = c.std * c.std;
            let lp = c.weight.ln() - 0.5 * x.len() as f64 * v.ln() - sq_dist(x, &c.mean) / (2.0 * v);
            if lp > best.0 {
                best = (lp, k);
            }
        }
        best.1
    }

    /// Distance from `x` to the closest component mean, and that component.
    pub fn nearest_mean(&self, x: &[f64]) -> (usize, f64) {
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| (k, sq_dist(x, &c.mean).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty mixture")
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact score of a Gaussian mixture pushed through a noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGmmScore {
    pub gmm: GmmSpec,
    pub schedule: NoiseSchedule,
}

struct Perturbed {
    mean_scale: f64,
    vars: Vec<f64>,
}

impl AnalyticGmmScore {
    pub fn new(gmm: GmmSpec, schedule: NoiseSchedule) -> Self {
        Self { gmm, schedule }
    }

    fn perturbed(&self, t: f64) -> Perturbed {
        let m = self.schedule.marginal_unchecked(t.clamp(0.0, 1.0));
        let vars = self
            .gmm
            .components
            .iter()
            .map(|c| m.mean_scale * m.mean_scale * c.std * c.std + m.std * m.std)
            .collect();
        Perturbed {
            mean_scale: m.mean_scale,
            vars,
        }
    }

    /// Per-component log joint terms `log w_k + log N(x; m mu_k, v_k I)`.
    fn log_terms(&self, p: &Perturbed, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        self.gmm
            .components
            .iter()
            .zip(&p.vars)
            .map(|(c, &v)| {
                let dist: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xi, mi)| {
                        let r = xi - p.mean_scale * mi;
                        r * r
                    })
                    .sum();
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - dist / (2.0 * v)
            })
            .collect()
    }

    /// `log p_t(x)` of the perturbed mixture.
    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let p = self.perturbed(t);
        log_sum_exp(&self.log_terms(&p, x))
    }

    /// Perturbed-mixture component posteriors `p_t(k | x)`.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Vec<f64> {
        let p = self.perturbed(t);
        softmax(&self.log_terms(&p, x))
    }

    /// `log p_t(y | x)`.
    pub fn log_posterior(&self, x: &[f64], t: f64, label: usize) -> f64 {
        let p = self.perturbed(t);
        let terms = self.log_terms(&p, x);
        terms[label] - log_sum_exp(&terms)
    }

    /// Score of component `label`'s perturbed Gaussian alone.
    pub fn component_score_into(&self, x: &[f64], t: f64, label: usize, out: &mut [f64]) {
        let p = self.perturbed(t);
        let c = &self.gmm.components[label];
        let v = p.vars[label];
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
            *o = -(xi - p.mean_scale * mi) / v;
        }
    }

    pub fn class_posterior_grad(&self, x: &[f64], t: f64, label: usize) -> Result<Vec<f64>> {
        if label >= self.gmm.len() {
            return Err(Error::InvalidParameter(format!(
                "label {label} out of range for {} components",
                self.gmm.len()
            )));
        }
        let mut out = vec![0.0; x.len()];
        self.grad_log_posterior_into(x, t, label, &mut out);
        Ok(out)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl ScoreModel for AnalyticGmmScore {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let p = self.perturbed(t);
        let r = softmax(&self.log_terms(&p, x));
        out.fill(0.0);
        for ((c, &v), &rk) in self.gmm.components.iter().zip(&p.vars).zip(&r) {
            if rk == 0.0 {
                continue;
            }
            let coef = rk / v;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o -= coef * (xi - p.mean_scale * mi);
            }
        }
    }
}

impl ClassifierGradient for AnalyticGmmScore {
    fn num_classes(&self) -> usize {
        self.gmm.len()
    }

    /// `grad log p_t(y|x)` = component-`y` score minus the mixture score.
    fn grad_log_posterior_into(&self, x: &[f64], t: f64, label: usize, out: &mut [f64]) {
        let mut mix = vec![0.0; x.len()];
        self.score_into(x, t, &mut mix);
        self.component_score_into(x, t, label, out);
        for (o, m) in out.iter_mut().zip(&mix) {
            *o -= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{VeSchedule, VpSchedule};

    fn ve() -> NoiseSchedule {
        NoiseSchedule::Ve(VeSchedule::new(0.01, 25.0).unwrap())
    }

    fn vp() -> NoiseSchedule {
        NoiseSchedule::Vp(VpSchedule::new(0.1, 20.0).unwrap())
    }

    fn three_component() -> GmmSpec {
        GmmSpec::new(vec![
            GmmComponent { weight: 0.5, mean: vec![-1.0, 0.0], std: 0.3 },
            GmmComponent { weight: 0.3, mean: vec![1.0, 0.5], std: 0.5 },
            GmmComponent { weight: 0.2, mean: vec![0.0, -1.5], std: 0.4 },
        ])
        .unwrap()
    }

    // Explicit perturbed density, written independently of the score code path.
    fn explicit_log_density(gmm: &GmmSpec, schedule: &NoiseSchedule, x: &[f64], t: f64) -> f64 {
        let m = schedule.marginal(t).unwrap();
        let mut total = 0.0;
        for c in gmm.components() {
            let v = m.mean_scale.powi(2) * c.std.powi(2) + m.std.powi(2);
            let mut dist = 0.0;
            for i in 0..x.len() {
                dist += (x[i] - m.mean_scale * c.mean[i]).powi(2);
            }
            total += c.weight * (2.0 * std::f64::consts::PI * v).powf(-(x.len() as f64) / 2.0)
                * (-dist / (2.0 * v)).exp();
        }
        total.ln()
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn weights_must_sum_to_one() {
        let bad = GmmSpec::new(vec![
            GmmComponent { weight: 0.5, mean: vec![0.0], std: 1.0 },
            GmmComponent { weight: 0.4, mean: vec![1.0], std: 1.0 },
        ]);
        assert!(bad.is_err());
        let bad = GmmSpec::new(vec![GmmComponent { weight: 1.0, mean: vec![0.0], std: 0.0 }]);
        assert!(bad.is_err());
        let bad = GmmSpec::new(vec![
            GmmComponent { weight: 0.5, mean: vec![0.0], std: 1.0 },
            GmmComponent { weight: 0.5, mean: vec![1.0, 2.0], std: 1.0 },
        ]);
        assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_component_closed_form() {
        let mu = vec![0.7, -0.2];
        let gmm = GmmSpec::uniform(vec![mu.clone()], 0.4).unwrap();
        let score = AnalyticGmmScore::new(gmm, ve());
        for t in [0.0, 0.3, 1.0] {
            let sigma = ve().marginal(t).unwrap().std;
            let x = [1.5, 0.4];
            let s = score.score(&x, t);
            for i in 0..2 {
                let expected = -(x[i] - mu[i]) / (0.16 + sigma * sigma);
                assert!((s[i] - expected).abs() < 1e-12);
            }
            assert_eq!(score.score(&mu, t), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn symmetric_pair_zero_at_midpoint() {
        let gmm = GmmSpec::uniform(vec![vec![1.0, 2.0], vec![-1.0, -2.0]], 0.5).unwrap();
        for schedule in [ve(), vp()] {
            let score = AnalyticGmmScore::new(gmm.clone(), schedule);
            for t in [0.05, 0.5, 0.9] {
                let s = score.score(&[0.0, 0.0], t);
                assert!(s.iter().all(|v| v.abs() < 1e-12), "{s:?}");
            }
        }
    }

    #[test]
    fn matches_finite_differences_at_reference_point() {
        let gmm = three_component();
        for schedule in [ve(), vp()] {
            let score = AnalyticGmmScore::new(gmm.clone(), schedule);
            let x = [0.3, -1.2];
            let fd = fd_grad(|y| explicit_log_density(&gmm, &schedule, y, 0.4), &x, 1e-5);
            let s = score.score(&x, 0.4);
            for i in 0..2 {
                assert!((s[i] - fd[i]).abs() <= 1e-6, "{s:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn log_density_agrees_with_explicit_form() {
        let gmm = three_component();
        let score = AnalyticGmmScore::new(gmm.clone(), vp());
        let x = [0.1, 0.9];
        let a = score.log_density(&x, 0.25);
        let b = explicit_log_density(&gmm, &vp(), &x, 0.25);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn class_gradient_cases() {
        let single = AnalyticGmmScore::new(GmmSpec::uniform(vec![vec![0.3, 0.3]], 0.5).unwrap(), ve());
        let g = single.class_posterior_grad(&[2.0, -1.0], 0.6, 0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));

        let pair = AnalyticGmmScore::new(
            GmmSpec::uniform(vec![vec![2.0, 0.0], vec![-2.0, 0.0]], 0.3).unwrap(),
            ve(),
        );
        let g = pair.class_posterior_grad(&[0.0, 0.0], 0.4, 0).unwrap();
        assert!(g[0] > 0.0);
        let g = pair.class_posterior_grad(&[0.0, 0.0], 0.4, 1).unwrap();
        assert!(g[0] < 0.0);
        assert!(pair.class_posterior_grad(&[0.0, 0.0], 0.4, 2).is_err());
    }

    #[test]
    fn class_gradient_matches_finite_differences() {
        let gmm = three_component();
        let score = AnalyticGmmScore::new(gmm, ve());
        let x = [0.5, 0.5];
        let g = score.class_posterior_grad(&x, 0.3, 1).unwrap();
        let fd = fd_grad(|y| score.log_posterior(y, 0.3, 1), &x, 1e-5);
        for i in 0..2 {
            assert!((g[i] - fd[i]).abs() <= 1e-6, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn serde_validates() {
        let text = serde_json::to_string(&three_component()).unwrap();
        let back: GmmSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, three_component());
        assert!(serde_json::from_str::<GmmSpec>(
            r#"[{"weight":0.3,"mean":[0.0],"std":1.0}]"#
        )
        .is_err());
    }
}
