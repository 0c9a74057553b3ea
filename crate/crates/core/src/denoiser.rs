//! Noise predictors. [`AnalyticDenoiser`] realizes `ε̂ = −σ_t ∇ log p_t(z)`
//! exactly for the scenario's Gaussian mixtures; [`fd_score_oracle`] is the
//! independent finite-difference route used to check it.

use std::ops::AddAssign;

use crate::error::{check_len, Error, Result};
use crate::scenario::{Condition, Conditioning, ModelVariant, Scenario};
use crate::schedule::NoiseSchedule;

/// Per-run tally of noise-prediction calls, keyed by conditioning.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallCounter {
    counts: [[u64; 4]; 2],
    total: u64,
}

fn slot(c: Conditioning) -> (usize, usize) {
    let v = match c.variant {
        ModelVariant::Tuned => 0,
        ModelVariant::Orig => 1,
    };
    let k = match c.condition {
        Condition::Null => 0,
        Condition::Concept => 1,
        Condition::Superclass => 2,
        Condition::ContextOnly => 3,
    };
    (v, k)
}

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, c: Conditioning) {
        let (v, k) = slot(c);
        self.counts[v][k] += 1;
        self.total += 1;
    }

    pub fn get(&self, c: Conditioning) -> u64 {
        let (v, k) = slot(c);
        self.counts[v][k]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Non-zero cells in a stable order.
    pub fn iter(&self) -> impl Iterator<Item = (Conditioning, u64)> + '_ {
        ModelVariant::ALL.into_iter().flat_map(move |v| {
            Condition::ALL.into_iter().filter_map(move |c| {
                let id = Conditioning::new(v, c);
                let n = self.get(id);
                (n > 0).then_some((id, n))
            })
        })
    }
}

impl AddAssign<&CallCounter> for CallCounter {
    fn add_assign(&mut self, rhs: &CallCounter) {
        for v in 0..2 {
            for k in 0..4 {
                self.counts[v][k] += rhs.counts[v][k];
            }
        }
        self.total += rhs.total;
    }
}

/// A conditional noise predictor `ε(z, t | variant, condition)`.
///
/// Implementations must be pure apart from recording exactly one call in
/// `counter` per prediction.
pub trait Denoiser: Sync {
    fn latent_len(&self) -> usize;

    /// Fails if the denoiser cannot serve `c`.
    fn supports(&self, c: Conditioning) -> Result<()>;

    /// Row-major concept region, if the latent has one.
    fn concept_region(&self) -> Option<&[bool]> {
        None
    }

    fn predict(
        &self,
        z: &[f64],
        timestep: usize,
        c: Conditioning,
        counter: &mut CallCounter,
    ) -> Result<Vec<f64>>;
}

/// Closed-form denoiser over a scenario's mixtures.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticDenoiser<'a> {
    pub scenario: &'a Scenario,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> AnalyticDenoiser<'a> {
    pub fn new(scenario: &'a Scenario, schedule: &'a NoiseSchedule) -> Self {
        Self { scenario, schedule }
    }
}

impl Denoiser for AnalyticDenoiser<'_> {
    fn latent_len(&self) -> usize {
        self.scenario.latent_len()
    }

    fn supports(&self, c: Conditioning) -> Result<()> {
        self.scenario.density(c).map(|_| ())
    }

    fn concept_region(&self) -> Option<&[bool]> {
        self.scenario.concept_region()
    }

    fn predict(
        &self,
        z: &[f64],
        timestep: usize,
        c: Conditioning,
        counter: &mut CallCounter,
    ) -> Result<Vec<f64>> {
        analytic_eps(self.scenario, self.schedule, z, timestep, c, counter)
    }
}

fn check_timestep(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t >= schedule.base_len() {
        return Err(Error::config(
            "timestep",
            format!("{t} is outside the {}-step base grid", schedule.base_len()),
        ));
    }
    Ok(())
}

/// `ε̂ = −σ_t ∇_z log p_t(z)` for the forward marginal of the `c` mixture.
pub fn analytic_eps(
    scenario: &Scenario,
    schedule: &NoiseSchedule,
    z: &[f64],
    t: usize,
    c: Conditioning,
    counter: &mut CallCounter,
) -> Result<Vec<f64>> {
    let density = scenario.density(c)?;
    check_len("denoiser input", density.dim(), z.len())?;
    check_timestep(schedule, t)?;
    let (alpha, sigma) = (schedule.alpha_t(t), schedule.sigma_t(t));
    counter.record(c);
    let mut eps = density.score_at(z, alpha, sigma);
    eps.iter_mut().for_each(|g| *g *= -sigma);
    Ok(eps)
}

/// Central-difference gradient of `log p_t` at `z`, step `h` per axis.
pub fn fd_score_oracle(
    scenario: &Scenario,
    schedule: &NoiseSchedule,
    z: &[f64],
    t: usize,
    c: Conditioning,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config("h", "finite-difference step must be positive"));
    }
    let density = scenario.density(c)?;
    check_len("oracle input", density.dim(), z.len())?;
    check_timestep(schedule, t)?;
    let marginal = density.marginal(schedule.alpha_t(t), schedule.sigma_t(t));
    let mut probe = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for d in 0..z.len() {
        probe[d] = z[d] + h;
        let up = marginal.log_density(&probe)?;
        probe[d] = z[d] - h;
        let down = marginal.log_density(&probe)?;
        probe[d] = z[d];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Posterior component probabilities of the `c` mixture under `p_t` at `z`;
/// one vector per independent factor of the density.
pub fn responsibility_map(
    scenario: &Scenario,
    schedule: &NoiseSchedule,
    z: &[f64],
    t: usize,
    c: Conditioning,
) -> Result<Vec<Vec<f64>>> {
    let density = scenario.density(c)?;
    check_len("responsibility input", density.dim(), z.len())?;
    check_timestep(schedule, t)?;
    Ok(density.responsibilities_at(z, schedule.alpha_t(t), schedule.sigma_t(t)))
}
