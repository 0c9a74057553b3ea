//! The S-step denoising loop from `z_T ~ N(0, I)` to `z_0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use web_time::Instant;

use crate::denoiser::{AnalyticDenoiser, CallCounter, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{profusion_step, step_prediction, Strategy, StrategyConfig};
use crate::scenario::Scenario;
use crate::schedule::{ddim_values, LatentState, NoiseSchedule, ScheduleParams};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleParams,
    pub strategy: StrategyConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl RunConfig {
    pub fn new(strategy: StrategyConfig, n_samples: usize, seed: u64) -> Self {
        Self {
            schedule: ScheduleParams::default(),
            strategy,
            n_samples,
            seed,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// One final latent per sample.
    pub finals: Vec<Vec<f64>>,
    /// Per sample, the latents at indices `S, S−1, …, 0`.
    pub trajectories: Option<Vec<Vec<Vec<f64>>>>,
    pub calls: CallCounter,
    pub seed: u64,
    pub wall_ms: f64,
}

impl RunResult {
    pub fn calls_per_sample(&self) -> f64 {
        self.calls.total() as f64 / self.finals.len() as f64
    }
}

/// Milliseconds since `start`, rounded to whole microseconds.
pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    (start.elapsed().as_secs_f64() * 1e6).round() / 1e3
}

/// The RNG stream owned by sample `j`; independent of how many samples run.
pub fn sample_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs `cfg` against the closed-form denoiser of `scenario`.
pub fn run_sampling(scenario: &Scenario, cfg: &RunConfig) -> Result<RunResult> {
    let schedule = cfg.schedule.build()?;
    run_with(&AnalyticDenoiser::new(scenario, &schedule), &schedule, cfg)
}

/// Runs `cfg` against any denoiser on a prebuilt schedule.
pub fn run_with<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
) -> Result<RunResult> {
    if cfg.n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    cfg.strategy.validate(schedule.steps(), denoiser)?;

    let start = Instant::now();
    let run_one = |j: usize| run_sample(denoiser, schedule, cfg, j);

    #[cfg(feature = "parallel")]
    let outcomes: Vec<_> = {
        use rayon::prelude::*;
        (0..cfg.n_samples).into_par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<_> = (0..cfg.n_samples).map(run_one).collect();

    let mut finals = Vec::with_capacity(cfg.n_samples);
    let mut trajectories = cfg.record_trajectory.then(Vec::new);
    let mut calls = CallCounter::new();
    for outcome in outcomes {
        let (last, path, counter) = outcome?;
        finals.push(last);
        if let (Some(all), Some(path)) = (trajectories.as_mut(), path) {
            all.push(path);
        }
        calls += &counter;
    }
    Ok(RunResult {
        finals,
        trajectories,
        calls,
        seed: cfg.seed,
        wall_ms: elapsed_ms(start),
    })
}

type SampleOutcome = (Vec<f64>, Option<Vec<Vec<f64>>>, CallCounter);

fn run_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
    j: usize,
) -> Result<SampleOutcome> {
    let steps = schedule.steps();
    let dim = denoiser.latent_len();
    let mut rng = sample_rng(cfg.seed, j);
    let mut counter = CallCounter::new();
    let mut z = LatentState::new(normals(&mut rng, dim), steps);
    let mut path = cfg.record_trajectory.then(|| {
        let mut p = Vec::with_capacity(steps + 1);
        p.push(z.values.clone());
        p
    });

    let strategy = &cfg.strategy;
    for i in (1..=steps).rev() {
        z = match strategy.strategy {
            Strategy::ProFusion { omega_c, omega_s, r } => {
                let fresh = normals(&mut rng, dim);
                profusion_step(
                    schedule,
                    i,
                    &z,
                    denoiser,
                    strategy.superclass_source,
                    omega_c,
                    omega_s,
                    r,
                    &fresh,
                    &mut counter,
                )?
            }
            _ => {
                let eps = step_prediction(strategy, schedule, i, &z.values, denoiser, &mut counter)?;
                LatentState::new(ddim_values(schedule, i, &z.values, &eps), i - 1)
            }
        };
        if !z.is_finite() {
            return Err(Error::NonFinite { sample: j, step: i });
        }
        if let Some(p) = path.as_mut() {
            p.push(z.values.clone());
        }
    }
    Ok((z.values, path, counter))
}
