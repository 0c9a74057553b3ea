//! Trajectory-combination sampling strategies for personalized diffusion
//! models, run against a closed-form Gaussian-mixture denoiser.
//!
//! The pieces, bottom up:
//!
//! - [`schedule`]: the variance-preserving noise schedule, DDIM steps and
//!   forward re-noising.
//! - [`mixture`] and [`scenario`]: the toy generative world.
//! - [`denoiser`]: the noise-prediction interface and its analytic form.
//! - [`guidance`]: per-step combination rules (Base, Superclass, Mixed,
//!   Switching, MultiStage, Masked, ProFusion) and masks.
//! - [`sampler`]: the full denoising loop.
//! - [`metrics`], [`sweep`] and [`report`]: evaluation.
//!
//! ```
//! use trajlab::{run_sampling, RunConfig, Scenario, Strategy, StrategyConfig};
//!
//! let scenario = Scenario::builtin("canonical-2d").unwrap();
//! let strategy = StrategyConfig::new(Strategy::Mixed { omega_c: 3.5, omega_s: 3.5 });
//! let result = run_sampling(&scenario, &RunConfig::new(strategy, 8, 0)).unwrap();
//! assert_eq!(result.finals.len(), 8);
//! assert_eq!(result.calls.total(), 3 * 50 * 8);
//! ```

pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod mixture;
pub mod report;
pub mod sampler;
pub mod scenario;
pub mod schedule;
pub mod sweep;

pub use denoiser::{analytic_eps, fd_score_oracle, responsibility_map, AnalyticDenoiser, CallCounter, Denoiser};
pub use error::{Error, Result};
pub use guidance::{
    binarize_mask, cfg_combine, fixed_region_mask, masked_combine, mixed_combine, multistage_combine,
    profusion_step, soft_mask_divergence, switching_combine, Mask, MaskProvider, Strategy, StrategyConfig,
    StrategyKind, StrategyParams,
};
pub use metrics::{pareto_front, pareto_indices, proxy_scores, MetricRecord, ParetoPoint};
pub use mixture::{log_density, sample_mixture, GaussianMixture};
pub use sampler::{run_sampling, run_with, RunConfig, RunResult};
pub use scenario::{load_scenario, parse_scenario, Condition, Conditioning, LatentShape, ModelVariant, Scenario};
pub use schedule::{build_schedule, ddim_step, forward_noise, LatentState, NoiseSchedule, ScheduleParams};
pub use sweep::{load_grid, parse_grid, preset_grid, preset_grids, run_sweep, SweepGrid, SweepRecord};
