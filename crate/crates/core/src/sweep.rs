//! Hyperparameter grid sweeps.
//!
//! A grid document names a strategy, fixed parameters, and a list of axes;
//! the cartesian product is enumerated with the first axis outermost:
//!
//! ```json
//! {
//!   "version": 1,
//!   "strategy": "mixed",
//!   "axes": [{ "name": "omega_s", "values": [0, 1.75, 3.5, 5.25, 7] }],
//!   "derive_omega_c_from_total": 7.0,
//!   "steps": 50,
//!   "n_samples": 4096,
//!   "seed": 0
//! }
//! ```

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use web_time::Instant;

use crate::error::{Error, Result};
use crate::guidance::{Strategy, StrategyConfig, StrategyKind, StrategyParams};
use crate::metrics::{proxy_scores, MetricRecord};
use crate::sampler::{elapsed_ms, run_sampling, RunConfig};
use crate::scenario::{Conditioning, Scenario};
use crate::schedule::ScheduleParams;

pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub strategy: StrategyKind,
    pub axes: Vec<Axis>,
    pub fixed: StrategyParams,
    /// When set, every point gets `omega_c = total − omega_s`.
    pub derive_omega_c_from_total: Option<f64>,
    /// Scenario name or path suggested by the grid; callers may override it.
    pub scenario: Option<String>,
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub superclass_source: Conditioning,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    version: u32,
    strategy: String,
    #[serde(default)]
    axes: Vec<Axis>,
    #[serde(default)]
    fixed: StrategyParams,
    #[serde(default)]
    derive_omega_c_from_total: Option<f64>,
    #[serde(default)]
    scenario: Option<String>,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_n")]
    n_samples: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    superclass_source: Option<String>,
}

fn default_steps() -> usize {
    50
}

fn default_n() -> usize {
    4096
}

pub fn parse_grid(text: &str) -> Result<SweepGrid> {
    let doc: GridDoc = serde_json::from_str(text)?;
    if doc.version != GRID_VERSION {
        return Err(Error::Validation(format!(
            "unsupported grid version {} (expected {GRID_VERSION})",
            doc.version
        )));
    }
    let invalid = |e: Error| match e {
        Error::Config { field, reason } => Error::Validation(format!("{field}: {reason}")),
        other => other,
    };
    let grid = SweepGrid {
        strategy: doc.strategy.parse().map_err(invalid)?,
        axes: doc.axes,
        fixed: doc.fixed,
        derive_omega_c_from_total: doc.derive_omega_c_from_total,
        scenario: doc.scenario,
        steps: doc.steps,
        n_samples: doc.n_samples,
        seed: doc.seed,
        superclass_source: match doc.superclass_source {
            Some(s) => s.parse().map_err(invalid)?,
            None => Conditioning::SUPERCLASS,
        },
    };
    grid.check_shape().map_err(invalid)?;
    Ok(grid)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<SweepGrid> {
    parse_grid(&std::fs::read_to_string(path)?)
}

/// One instantiated grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub config: StrategyConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub index: usize,
    pub config: StrategyConfig,
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub metrics: MetricRecord,
    pub calls_per_sample: f64,
    pub wall_ms: f64,
}

/// Seed for grid point `k`: the first word of stream `k` under the master seed.
pub fn point_seed(master: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(k as u64);
    rng.next_u64()
}

impl SweepGrid {
    pub fn new(strategy: StrategyKind) -> Self {
        Self {
            strategy,
            axes: Vec::new(),
            fixed: StrategyParams::default(),
            derive_omega_c_from_total: None,
            scenario: None,
            steps: default_steps(),
            n_samples: default_n(),
            seed: 0,
            superclass_source: Conditioning::SUPERCLASS,
        }
    }

    pub fn axis(mut self, name: &str, values: &[f64]) -> Self {
        self.axes.push(Axis { name: name.into(), values: values.to_vec() });
        self
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_shape(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        for (k, axis) in self.axes.iter().enumerate() {
            if axis.values.is_empty() {
                return Err(Error::config(format!("axes[{k}]"), format!("axis `{}` has no values", axis.name)));
            }
            if self.axes[..k].iter().any(|a| a.name == axis.name) {
                return Err(Error::config(format!("axes[{k}]"), format!("axis `{}` appears twice", axis.name)));
            }
            // Probe the name so typos fail before anything runs.
            StrategyParams::default().set_number(&axis.name, axis.values[0])?;
        }
        if let Some(total) = self.derive_omega_c_from_total {
            if !self.strategy.accepts().contains(&crate::guidance::Param::OmegaC)
                || !self.strategy.accepts().contains(&crate::guidance::Param::OmegaS)
            {
                return Err(Error::config(
                    "derive_omega_c_from_total",
                    format!("{} has no omega_c/omega_s pair", self.strategy),
                ));
            }
            if !total.is_finite() {
                return Err(Error::config("derive_omega_c_from_total", "total must be finite"));
            }
            if self.fixed.omega_c.is_some() || self.axes.iter().any(|a| a.name == "omega_c") {
                return Err(Error::config(
                    "derive_omega_c_from_total",
                    "omega_c is derived and cannot also be given",
                ));
            }
        }
        Ok(())
    }

    /// Every grid point in enumeration order, each fully validated.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        self.check_shape()?;
        let mut out = Vec::with_capacity(self.len());
        for index in 0..self.len() {
            let mut params = self.fixed.clone();
            let mut rest = index;
            let mut tags = Vec::new();
            for axis in self.axes.iter().rev() {
                let v = axis.values[rest % axis.values.len()];
                rest /= axis.values.len();
                params.set_number(&axis.name, v)?;
                tags.push(format!("{}={v}", axis.name));
            }
            tags.reverse();
            let named = |e: Error| match e {
                Error::Config { field, reason } => Error::config(
                    field,
                    format!("{reason} (grid point {index}: {})", tags.join(", ")),
                ),
                other => other,
            };
            if let Some(total) = self.derive_omega_c_from_total {
                let omega_s = params.omega_s.unwrap_or(crate::guidance::DEFAULT_SPLIT_OMEGA);
                params.omega_c = Some(total - omega_s);
            }
            let strategy = Strategy::from_params(self.strategy, &params).map_err(named)?;
            strategy.validate(self.steps).map_err(named)?;
            out.push(GridPoint {
                index,
                config: StrategyConfig::new(strategy).with_superclass_source(self.superclass_source),
                seed: point_seed(self.seed, index),
            });
        }
        Ok(out)
    }
}

fn run_point(scenario: &Scenario, grid: &SweepGrid, point: &GridPoint) -> Result<SweepRecord> {
    let start = Instant::now();
    let cfg = RunConfig {
        schedule: ScheduleParams::with_steps(grid.steps),
        strategy: point.config,
        n_samples: grid.n_samples,
        seed: point.seed,
        record_trajectory: false,
    };
    let result = run_sampling(scenario, &cfg)?;
    let metrics = proxy_scores(&result.finals, scenario)?;
    Ok(SweepRecord {
        index: point.index,
        config: point.config,
        steps: grid.steps,
        n_samples: grid.n_samples,
        seed: point.seed,
        metrics,
        calls_per_sample: result.calls_per_sample(),
        wall_ms: elapsed_ms(start),
    })
}

/// Runs every grid point; records come back in enumeration order however
/// the points were scheduled.
pub fn run_sweep(scenario: &Scenario, grid: &SweepGrid) -> Result<Vec<SweepRecord>> {
    let points = grid.points()?;
    let schedule = ScheduleParams::with_steps(grid.steps).build()?;
    let probe = crate::denoiser::AnalyticDenoiser::new(scenario, &schedule);
    for p in &points {
        p.config.validate(grid.steps, &probe)?;
    }

    #[cfg(feature = "parallel")]
    let records: Vec<_> = {
        use rayon::prelude::*;
        points.par_iter().map(|p| run_point(scenario, grid, p)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<_> = points.iter().map(|p| run_point(scenario, grid, p)).collect();

    records.into_iter().collect()
}

pub const PRESET_NAMES: [&str; 5] = ["mixed-7", "switching-8", "multistage-3x3", "masked-4", "profusion-9"];

/// The published evaluation grids, ready to run.
pub fn preset_grid(name: &str) -> Result<SweepGrid> {
    let grid = match name {
        "mixed-7" => {
            let omega_s: Vec<f64> = (0..=8).map(|k| k as f64 * 0.875).collect();
            let mut g = SweepGrid::new(StrategyKind::Mixed).axis("omega_s", &omega_s);
            g.derive_omega_c_from_total = Some(7.0);
            g
        }
        "switching-8" => {
            let mut g = SweepGrid::new(StrategyKind::Switching)
                .axis("t_sw", &[1.0, 3.0, 5.0, 7.0, 10.0, 20.0, 30.0, 40.0]);
            g.fixed.omega = Some(7.0);
            g
        }
        "multistage-3x3" => {
            let mut g = SweepGrid::new(StrategyKind::MultiStage)
                .axis("t_sw", &[3.0, 10.0, 20.0])
                .axis("omega_s", &[1.0, 3.0, 5.0]);
            g.derive_omega_c_from_total = Some(7.0);
            g
        }
        "masked-4" => {
            let mut g = SweepGrid::new(StrategyKind::Masked).axis("q", &[0.3, 0.5, 0.7, 0.9]);
            g.fixed.t_sw = Some(3);
            g.fixed.omega_c = Some(3.5);
            g.fixed.omega_s = Some(3.5);
            g.scenario = Some("grid-8x8".into());
            g
        }
        "profusion-9" => {
            let mut g = SweepGrid::new(StrategyKind::ProFusion)
                .axis("r", &[0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0]);
            g.fixed.omega_c = Some(3.5);
            g.fixed.omega_s = Some(3.5);
            g
        }
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected one of {})", PRESET_NAMES.join(", ")),
            ))
        }
    };
    Ok(grid)
}

/// All presets by name.
pub fn preset_grids() -> Vec<(&'static str, SweepGrid)> {
    PRESET_NAMES
        .iter()
        .map(|&n| (n, preset_grid(n).expect("preset names resolve")))
        .collect()
}
