//! Variance-preserving noise schedule and the two primitive latent moves.
//!
//! Time indexing: the base grid has `T_base` training timesteps `0..T_base`.
//! Inference runs over `S` of them, `τ_1 < … < τ_S`, addressed here by the
//! inference index `i ∈ 1..=S` (so the usual `t = T…1` loop becomes
//! `i = S…1`). Index `0` is the clean end of the chain and carries
//! `α = 1, σ = 0`, which makes the final DDIM step return the predicted
//! clean latent.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Parameters of the linear-β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub base_len: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            base_len: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 50,
        }
    }
}

impl ScheduleParams {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.base_len, self.beta_start, self.beta_end, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    infer_steps: Vec<usize>,
}

/// Builds a linear-β schedule over `base_len` timesteps and picks `steps`
/// uniformly strided inference timesteps ending at `base_len - 1`.
pub fn build_schedule(
    base_len: usize,
    beta_start: f64,
    beta_end: f64,
    steps: usize,
) -> Result<NoiseSchedule> {
    if base_len < 2 {
        return Err(Error::config("base_len", "must be at least 2"));
    }
    if steps < 1 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    if steps > base_len {
        return Err(Error::config(
            "steps",
            format!("{steps} inference steps exceed the {base_len}-step base grid"),
        ));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config("beta_start", "must lie in (0, 1)"));
    }
    if !(beta_end >= beta_start && beta_end < 1.0) {
        return Err(Error::config("beta_end", "must lie in [beta_start, 1)"));
    }

    let span = (base_len - 1) as f64;
    let mut alpha_bar = Vec::with_capacity(base_len);
    let mut acc = 1.0;
    for i in 0..base_len {
        let beta = beta_start + (beta_end - beta_start) * i as f64 / span;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }

    // τ_k = floor(k·T/S) − 1 for k = 1..=S; strictly increasing since T ≥ S.
    let infer_steps = (1..=steps).map(|k| k * base_len / steps - 1).collect();

    Ok(NoiseSchedule {
        alpha_bar,
        infer_steps,
    })
}

impl NoiseSchedule {
    pub fn base_len(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Number of inference steps `S`.
    pub fn steps(&self) -> usize {
        self.infer_steps.len()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn infer_steps(&self) -> &[usize] {
        &self.infer_steps
    }

    /// Base timestep `τ_i` for inference index `i ∈ 1..=S`.
    pub fn timestep(&self, i: usize) -> usize {
        self.infer_steps[i - 1]
    }

    /// `α_t` on the base grid.
    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// `σ_t` on the base grid.
    pub fn sigma_t(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// `ᾱ` at inference index `i`; index 0 is the clean end (`ᾱ = 1`).
    pub fn alpha_bar_at(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar[self.timestep(i)]
        }
    }

    pub fn alpha_at(&self, i: usize) -> f64 {
        self.alpha_bar_at(i).sqrt()
    }

    pub fn sigma_at(&self, i: usize) -> f64 {
        (1.0 - self.alpha_bar_at(i)).sqrt()
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.steps() {
            return Err(Error::config(
                "inference index",
                format!("{i} is outside 1..={}", self.steps()),
            ));
        }
        Ok(())
    }
}

/// A latent at a given inference index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub values: Vec<f64>,
    pub index: usize,
}

impl LatentState {
    pub fn new(values: Vec<f64>, index: usize) -> Self {
        Self { values, index }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Deterministic (η = 0) DDIM move from `τ_i` to `τ_{i−1}`, no clipping.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    i: usize,
    z: &LatentState,
    eps_hat: &[f64],
) -> Result<LatentState> {
    schedule.check_index(i)?;
    if z.index != i {
        return Err(Error::config(
            "latent index",
            format!("latent lives at index {}, step expects {i}", z.index),
        ));
    }
    check_len("ddim_step noise prediction", z.values.len(), eps_hat.len())?;
    Ok(LatentState::new(
        ddim_values(schedule, i, &z.values, eps_hat),
        i - 1,
    ))
}

pub(crate) fn ddim_values(schedule: &NoiseSchedule, i: usize, z: &[f64], eps: &[f64]) -> Vec<f64> {
    let (a, s) = (schedule.alpha_at(i), schedule.sigma_at(i));
    let (a_prev, s_prev) = (schedule.alpha_at(i - 1), schedule.sigma_at(i - 1));
    z.iter()
        .zip(eps)
        .map(|(&zv, &e)| {
            let x0 = (zv - s * e) / a;
            a_prev * x0 + s_prev * e
        })
        .collect()
}

/// Re-noises a latent from `τ_{i−1}` up to `τ_i` with fresh standard-normal
/// noise, preserving the forward marginal.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    i: usize,
    z_prev: &LatentState,
    eps: &[f64],
) -> Result<LatentState> {
    schedule.check_index(i)?;
    if z_prev.index + 1 != i {
        return Err(Error::config(
            "latent index",
            format!(
                "forward step to {i} needs a latent at {}, got {}",
                i - 1,
                z_prev.index
            ),
        ));
    }
    check_len("forward_noise noise", z_prev.values.len(), eps.len())?;
    Ok(LatentState::new(
        forward_values(schedule, i, &z_prev.values, eps)?,
        i,
    ))
}

pub(crate) fn forward_values(
    schedule: &NoiseSchedule,
    i: usize,
    z_prev: &[f64],
    eps: &[f64],
) -> Result<Vec<f64>> {
    let ratio = schedule.alpha_at(i) / schedule.alpha_at(i - 1);
    // σ_i² − ratio²·σ_{i−1}² simplifies to 1 − ᾱ_i/ᾱ_{i−1}.
    let radicand = 1.0 - schedule.alpha_bar_at(i) / schedule.alpha_bar_at(i - 1);
    if radicand < 0.0 {
        return Err(Error::Invariant(format!(
            "negative forward-noise variance {radicand} at index {i}"
        )));
    }
    let scale = radicand.sqrt();
    Ok(z_prev
        .iter()
        .zip(eps)
        .map(|(&z, &e)| ratio * z + scale * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sd() -> NoiseSchedule {
        ScheduleParams::default().build().unwrap()
    }

    #[test]
    fn first_alpha_bar_is_single_factor() {
        let s = build_schedule(1000, 1e-4, 0.02, 1000).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0 - 1e-4);
    }

    #[test]
    fn last_alpha_bar_matches_direct_product() {
        // 40-digit product of the 1000 factors, computed offline.
        let s = build_schedule(1000, 1e-4, 0.02, 1000).unwrap();
        assert_relative_eq!(
            s.alpha_bar()[999],
            4.035_829_765_375_683e-5,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            s.alpha_bar()[9],
            0.998_105_204_785_834_6,
            max_relative = 1e-13
        );
    }

    #[test]
    fn more_inference_steps_than_base_grid_is_rejected() {
        let err = build_schedule(10, 1e-4, 0.02, 20).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "steps"));
    }

    #[test]
    fn bad_betas_name_the_field() {
        let err = build_schedule(100, 0.0, 0.02, 10).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "beta_start"));
        let err = build_schedule(100, 0.03, 0.02, 10).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "beta_end"));
    }

    #[test]
    fn schedule_invariants() {
        let s = sd();
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        for t in 0..s.base_len() {
            let (a, sg) = (s.alpha_t(t), s.sigma_t(t));
            assert_relative_eq!(a * a + sg * sg, 1.0, epsilon = 1e-15);
        }
        let steps = s.infer_steps();
        assert_eq!(steps.len(), 50);
        assert_eq!(*steps.last().unwrap(), 999);
        assert_eq!(steps[0], 19);
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn full_grid_inference_covers_every_timestep() {
        let s = build_schedule(10, 1e-4, 0.02, 10).unwrap();
        assert_eq!(s.infer_steps(), &(0..10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn ddim_with_exact_noise_moves_along_the_forward_path() {
        let s = sd();
        let z0 = [0.7, -1.3];
        let eps = [0.4, 2.1];
        for i in [1, 2, 25, 50] {
            let (a, sg) = (s.alpha_at(i), s.sigma_at(i));
            let z = LatentState::new(vec![a * z0[0] + sg * eps[0], a * z0[1] + sg * eps[1]], i);
            let out = ddim_step(&s, i, &z, &eps).unwrap();
            let (ap, sp) = (s.alpha_at(i - 1), s.sigma_at(i - 1));
            for d in 0..2 {
                assert_relative_eq!(out.values[d], ap * z0[d] + sp * eps[d], epsilon = 1e-12);
            }
            assert_eq!(out.index, i - 1);
        }
    }

    #[test]
    fn terminal_step_recovers_clean_latent() {
        let s = sd();
        assert_eq!(s.sigma_at(0), 0.0);
        let z0 = [1.5, -0.25];
        let eps = [0.3, -0.9];
        let (a, sg) = (s.alpha_at(1), s.sigma_at(1));
        let z = LatentState::new(z0.iter().zip(&eps).map(|(x, e)| a * x + sg * e).collect(), 1);
        let out = ddim_step(&s, 1, &z, &eps).unwrap();
        assert_relative_eq!(out.values[0], z0[0], epsilon = 1e-14);
        assert_relative_eq!(out.values[1], z0[1], epsilon = 1e-14);
    }

    #[test]
    fn ddim_matches_independent_recomputation() {
        let s = sd();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let i = rng.random_range(1..=50);
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let e: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let out = ddim_step(&s, i, &LatentState::new(z.clone(), i), &e).unwrap();
            // Written against ᾱ directly rather than the α/σ accessors.
            let ab = s.alpha_bar()[s.infer_steps()[i - 1]];
            let ab_prev = if i == 1 { 1.0 } else { s.alpha_bar()[s.infer_steps()[i - 2]] };
            for d in 0..2 {
                let x0 = (z[d] - (1.0 - ab).sqrt() * e[d]) / ab.sqrt();
                let want = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e[d];
                assert_relative_eq!(out.values[d], want, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn ddim_is_deterministic() {
        let s = sd();
        let z = LatentState::new(vec![0.123, -4.5], 30);
        let e = [0.9, 0.01];
        let a = ddim_step(&s, 30, &z, &e).unwrap();
        let b = ddim_step(&s, 30, &z, &e).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn ddim_rejects_shape_mismatch() {
        let s = sd();
        let err = ddim_step(&s, 3, &LatentState::new(vec![0.0; 2], 3), &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn forward_noise_without_noise_is_a_rescale() {
        let s = sd();
        let z = LatentState::new(vec![1.0, -2.0], 9);
        let out = forward_noise(&s, 10, &z, &[0.0, 0.0]).unwrap();
        let ratio = s.alpha_at(10) / s.alpha_at(9);
        assert_eq!(out.values, vec![ratio, -2.0 * ratio]);
        assert_eq!(out.index, 10);
    }

    #[test]
    fn forward_noise_rejects_shape_mismatch() {
        let s = sd();
        let err = forward_noise(&s, 2, &LatentState::new(vec![0.0; 2], 1), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn forward_noise_preserves_marginal_variance() {
        let s = sd();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in [1usize, 7, 30, 50] {
            // z_prev = α_{i-1}·z0 + σ_{i-1}·ε0 with z0 = 0 isolates the noise part.
            let n = 100_000;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..n {
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                let prev = LatentState::new(vec![s.sigma_at(i - 1) * e0], i - 1);
                let v = forward_noise(&s, i, &prev, &[e1]).unwrap().values[0];
                sum += v;
                sum2 += v * v;
            }
            let mean = sum / n as f64;
            let var = sum2 / n as f64 - mean * mean;
            let target = s.sigma_at(i).powi(2);
            assert!((var / target - 1.0).abs() < 0.02, "i={i} var={var} target={target}");
        }
    }

    #[test]
    fn noise_then_denoise_roundtrip() {
        let s = sd();
        let z0 = [2.0, -1.0];
        let eps = [0.5, 0.5];
        // Exact noising to τ_S then S DDIM steps with the true noise.
        let (a, sg) = (s.alpha_at(50), s.sigma_at(50));
        let mut z = LatentState::new(z0.iter().zip(&eps).map(|(x, e)| a * x + sg * e).collect(), 50);
        for i in (1..=50).rev() {
            z = ddim_step(&s, i, &z, &eps).unwrap();
        }
        assert_relative_eq!(z.values[0], z0[0], epsilon = 1e-9);
        assert_relative_eq!(z.values[1], z0[1], epsilon = 1e-9);
    }
}
