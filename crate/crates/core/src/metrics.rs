//! Likelihood proxies for concept fidelity and context alignment, and
//! Pareto-front extraction.
//!
//! The proxies are mean log-densities of the final latents under the
//! scenario's two reference mixtures. They stand in for image/text
//! similarity scores and only their trends are comparable to those.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{LatentDensity, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
    pub context_mean: f64,
    pub context_std: f64,
    pub n: usize,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and population standard deviation; independent of input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    if sorted.first() == sorted.last() {
        return (sorted[0], 0.0);
    }
    let mean = compensated_sum(sorted.iter().copied()) / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (compensated_sum(sq) / n).sqrt())
}

fn log_densities(density: &LatentDensity, finals: &[Vec<f64>]) -> Result<Vec<f64>> {
    finals.iter().map(|x| density.log_density(x)).collect()
}

/// Per-sample log-density under the fidelity and context references,
/// summarized as mean and standard deviation.
pub fn proxy_scores(finals: &[Vec<f64>], scenario: &Scenario) -> Result<MetricRecord> {
    if finals.is_empty() {
        return Err(Error::config("finals", "need at least one sample to score"));
    }
    let (fidelity_mean, fidelity_std) = mean_std(&log_densities(scenario.fidelity_density(), finals)?);
    let (context_mean, context_std) = mean_std(&log_densities(scenario.context_density(), finals)?);
    Ok(MetricRecord {
        fidelity_mean,
        fidelity_std,
        context_mean,
        context_std,
        n: finals.len(),
    })
}

/// A point in metric space, both axes maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub x: f64,
    pub y: f64,
}

impl ParetoPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// At least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.x >= other.x && self.y >= other.y && (self.x > other.x || self.y > other.y)
    }
}

/// Indices of the non-dominated points, ordered by `x` ascending (ties by
/// index). Exact duplicates are all kept; points with a NaN coordinate are
/// dropped.
pub fn pareto_indices(points: &[ParetoPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&k| !points[k].x.is_nan() && !points[k].y.is_nan())
        .collect();
    order.sort_by(|&a, &b| points[b].x.total_cmp(&points[a].x).then(a.cmp(&b)));

    let mut keep = Vec::new();
    let mut best_y: Option<f64> = None;
    let mut start = 0;
    while start < order.len() {
        let x = points[order[start]].x;
        let mut end = start;
        while end < order.len() && points[order[end]].x == x {
            end += 1;
        }
        let group = &order[start..end];
        let group_max = group.iter().map(|&k| points[k].y).fold(f64::NEG_INFINITY, f64::max);
        // A group survives only if it beats every point with a larger x.
        if best_y.is_none_or(|b| group_max > b) {
            keep.extend(group.iter().copied().filter(|&k| points[k].y == group_max));
            best_y = Some(group_max);
        }
        start = end;
    }
    keep.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(a.cmp(&b)));
    keep
}

pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    pareto_indices(points).into_iter().map(|k| points[k]).collect()
}
