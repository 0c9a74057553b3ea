//! Browser demo: sample a strategy, draw the Mixed frontier, and inspect a
//! Masked-sampling mask. The plain functions are usable natively; the
//! `wasm32` build exports them through wasm-bindgen.

use serde::Serialize;
use trajlab::denoiser::AnalyticDenoiser;
use trajlab::guidance::guidance_delta;
use trajlab::report::{svg_scatter, xml_escape, PlotSpec, Series};
use trajlab::scenario::LatentShape;
use trajlab::{
    binarize_mask, pareto_front, preset_grid, run_sampling, run_sweep, soft_mask_divergence, CallCounter, Conditioning,
    Denoiser, ParetoPoint, RunConfig, Scenario, ScheduleParams, Strategy, StrategyConfig, StrategyParams,
};

/// Largest batch the page may request.
pub const MAX_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Serialize)]
pub struct SampleView {
    pub svg: String,
    pub fidelity_mean: f64,
    pub context_mean: f64,
    pub calls_per_sample: f64,
}

fn check_n(n: usize) -> Result<(), String> {
    if (1..=MAX_SAMPLES).contains(&n) {
        Ok(())
    } else {
        Err(format!("sample count must be between 1 and {MAX_SAMPLES}, got {n}"))
    }
}

fn canonical() -> Scenario {
    Scenario::builtin("canonical-2d").expect("built-in scenario")
}

/// Samples `strategy` on `canonical-2d`; `params_json` holds the strategy's
/// hyperparameters, e.g. `{"omega_c": 3.5, "omega_s": 3.5}`.
pub fn sample(strategy: &str, params_json: &str, n: usize, seed: u64) -> Result<SampleView, String> {
    check_n(n)?;
    let kind = strategy.parse().map_err(|e: trajlab::Error| e.to_string())?;
    let params: StrategyParams = if params_json.trim().is_empty() {
        StrategyParams::default()
    } else {
        serde_json::from_str(params_json).map_err(|e| format!("parameters: {e}"))?
    };
    let config = StrategyConfig::new(Strategy::from_params(kind, &params).map_err(|e| e.to_string())?);
    let scenario = canonical();
    let result = run_sampling(&scenario, &RunConfig::new(config, n, seed)).map_err(|e| e.to_string())?;
    let metrics = trajlab::proxy_scores(&result.finals, &scenario).map_err(|e| e.to_string())?;

    let series = [Series { name: kind.to_string(), points: result.finals.iter().map(|z| (z[0], z[1])).collect() }];
    let svg = svg_scatter(&PlotSpec {
        series: &series,
        front: None,
        x_label: "z0 (identity)",
        y_label: "z1 (context)",
        title: &format!("{n} samples, seed {seed}"),
    });
    Ok(SampleView {
        svg,
        fidelity_mean: metrics.fidelity_mean,
        context_mean: metrics.context_mean,
        calls_per_sample: result.calls_per_sample(),
    })
}

/// Runs the Mixed grid at total scale 7 and plots it in metric space with
/// its Pareto front.
pub fn frontier_svg(n: usize, seed: u64) -> Result<String, String> {
    check_n(n)?;
    let mut grid = preset_grid("mixed-7").map_err(|e| e.to_string())?;
    grid.n_samples = n;
    grid.seed = seed;
    let records = run_sweep(&canonical(), &grid).map_err(|e| e.to_string())?;
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.metrics.context_mean, r.metrics.fidelity_mean)).collect();
    let front: Vec<(f64, f64)> = pareto_front(&points.iter().map(|&(x, y)| ParetoPoint::new(x, y)).collect::<Vec<_>>())
        .iter()
        .map(|p| (p.x, p.y))
        .collect();
    Ok(svg_scatter(&PlotSpec {
        series: &[Series { name: "mixed".into(), points }],
        front: Some(&front),
        x_label: "context_mean",
        y_label: "fidelity_mean",
        title: "Mixed sampling, omega_c + omega_s = 7",
    }))
}

/// The divergence mask `|Δc − Δs|` on `grid-8x8` at inference index `index`
/// of a Mixed run, binarized at quantile `q`. Cells inside the mask are
/// outlined; the fixture's concept region is hatched for comparison.
pub fn mask_svg(q: f64, index: usize, seed: u64) -> Result<String, String> {
    let scenario = Scenario::builtin("grid-8x8").expect("built-in scenario");
    let LatentShape::Grid { rows, cols } = scenario.shape else {
        return Err("grid scenario expected".into());
    };
    let params = ScheduleParams::default();
    if !(1..=params.steps).contains(&index) {
        return Err(format!("index must be between 1 and {}, got {index}", params.steps));
    }
    let mut cfg = RunConfig::new(StrategyConfig::new(Strategy::Mixed { omega_c: 3.5, omega_s: 3.5 }), 1, seed);
    cfg.record_trajectory = true;
    let run = run_sampling(&scenario, &cfg).map_err(|e| e.to_string())?;
    let path = &run.trajectories.expect("recorded")[0];
    let z = &path[params.steps - index];

    let schedule = params.build().map_err(|e| e.to_string())?;
    let denoiser = AnalyticDenoiser::new(&scenario, &schedule);
    let t = schedule.timestep(index);
    let mut calls = CallCounter::new();
    let mut predict = |c| denoiser.predict(z, t, c, &mut calls).map_err(|e| e.to_string());
    let eps_u = predict(Conditioning::NULL)?;
    let dc = guidance_delta(&eps_u, &predict(Conditioning::CONCEPT)?).map_err(|e| e.to_string())?;
    let ds = guidance_delta(&eps_u, &predict(Conditioning::SUPERCLASS)?).map_err(|e| e.to_string())?;
    let soft = soft_mask_divergence(&dc, &ds).map_err(|e| e.to_string())?;
    let mask = binarize_mask(&soft, q).map_err(|e| e.to_string())?;
    let region = scenario.concept_region();

    const CELL: usize = 40;
    let (w, h) = (cols * CELL + 20, rows * CELL + 50);
    let mut svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse"><path d="M0 6L6 0" stroke="#ffffff" stroke-width="1"/></pattern></defs>
<text x="10" y="20">{}</text>
"##,
        xml_escape(&format!("index {index}, q = {q}: {} of {} cells inside", mask.inside(), soft.len()))
    );
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            let (x, y) = (10 + c * CELL, 30 + r * CELL);
            let shade = (255.0 * (1.0 - soft[k])).round() as u8;
            svg.push_str(&format!(
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#cccccc"/>"##
            ));
            if region.is_some_and(|reg| reg[k]) {
                svg.push_str(&format!(r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="url(#hatch)"/>"#));
            }
            if mask.binary[k] {
                svg.push_str(&format!(
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#d62728" stroke-width="3"/>"##,
                    x + 2,
                    y + 2,
                    CELL - 4,
                    CELL - 4
                ));
            }
            svg.push('\n');
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    /// Returns `{svg, fidelity_mean, context_mean, calls_per_sample}` as JSON.
    #[wasm_bindgen]
    pub fn sample(strategy: &str, params_json: &str, n: usize, seed: u32) -> Result<String, JsError> {
        let view = super::sample(strategy, params_json, n, seed.into()).map_err(|e| JsError::new(&e))?;
        serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen]
    pub fn frontier_svg(n: usize, seed: u32) -> Result<String, JsError> {
        super::frontier_svg(n, seed.into()).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen]
    pub fn mask_svg(q: f64, index: usize, seed: u32) -> Result<String, JsError> {
        super::mask_svg(q, index, seed.into()).map_err(|e| JsError::new(&e))
    }
}
