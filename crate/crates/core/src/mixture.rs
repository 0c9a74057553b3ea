//! Diagonal-covariance Gaussian mixtures and their forward-process marginals.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::Validation(format!(
                "mixture has {} weights, {} means and {} variance rows",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("weights must sum to 1 (got {total})")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Validation("mixture dimension must be positive".into()));
        }
        for (k, (mu, var)) in means.iter().zip(&variances).enumerate() {
            if mu.len() != dim || var.len() != dim {
                return Err(Error::Validation(format!(
                    "component {k} does not share dimension {dim}"
                )));
            }
            if mu.iter().any(|m| !m.is_finite()) {
                return Err(Error::Validation(format!("component {k} has a non-finite mean")));
            }
            if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Validation(format!(
                    "component {k} variances must be positive"
                )));
            }
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single isotropic Gaussian `N(mean, variance·I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(vec![1.0], vec![mean], vec![vec![variance; dim]])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// `p_t = Σ w_k N(α μ_k, α² v_k + σ²)`, the marginal of `α x + σ ε`.
    pub fn marginal(&self, alpha: f64, sigma: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|mu| mu.iter().map(|m| alpha * m).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|var| var.iter().map(|v| alpha * alpha * v + sigma * sigma).collect())
                .collect(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("log_density point", self.dim(), x.len())?;
        let mut terms = Vec::with_capacity(self.components());
        self.log_terms(x, 1.0, 0.0, &mut terms);
        Ok(log_sum_exp(&terms))
    }

    /// Per-component `log w_k + log N(x; α μ_k, α² v_k + σ²)`.
    fn log_terms(&self, x: &[f64], alpha: f64, sigma: f64, out: &mut Vec<f64>) {
        out.clear();
        let s2 = sigma * sigma;
        let a2 = alpha * alpha;
        for ((w, mu), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            if *w == 0.0 {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            let mut acc = w.ln();
            for ((xv, m), v) in x.iter().zip(mu).zip(var) {
                let tv = a2 * v + s2;
                let d = xv - alpha * m;
                acc -= 0.5 * (d * d / tv + tv.ln() + LN_2PI);
            }
            out.push(acc);
        }
    }

    /// Posterior component probabilities under the marginal at `(α, σ)`.
    pub fn responsibilities_at(&self, z: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let mut terms = Vec::with_capacity(self.components());
        self.log_terms(z, alpha, sigma, &mut terms);
        normalize_log_weights(&terms)
    }

    /// `∇_z log p_t(z)` in closed form.
    pub fn score_at(&self, z: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let resp = self.responsibilities_at(z, alpha, sigma);
        let s2 = sigma * sigma;
        let a2 = alpha * alpha;
        let mut score = vec![0.0; z.len()];
        for ((r, mu), var) in resp.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            for (d, g) in score.iter_mut().enumerate() {
                *g -= r * (z[d] - alpha * mu[d]) / (a2 * var[d] + s2);
            }
        }
        score
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = if self.components() == 1 {
            0
        } else {
            // Weights were validated, so the index distribution always builds.
            WeightedIndex::new(&self.weights)
                .expect("validated weights")
                .sample(rng)
        };
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let e: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * e
            })
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        sample_mixture(self, n, seed)
    }
}

/// `log Σ w_k N(x; μ_k, diag v_k)`.
pub fn log_density(m: &GaussianMixture, x: &[f64]) -> Result<f64> {
    m.log_density(x)
}

/// `n` i.i.d. draws, reproducible for a fixed seed.
pub fn sample_mixture(m: &GaussianMixture, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| m.draw(&mut rng)).collect())
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn normalize_log_weights(terms: &[f64]) -> Vec<f64> {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|r| *r /= total);
    out
}
