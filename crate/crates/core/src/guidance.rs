//! Per-step noise combination rules and their configuration.
//!
//! Every rule is written in terms of guidance deltas `Δ = ε(p) − ε(∅)` and
//! evaluates `ε_u + ω_c·Δc` before adding `ω_s·Δs`, so that setting a scale to
//! zero reproduces the simpler rule bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{CallCounter, Denoiser};
use crate::error::{check_len, Error, Result};
use crate::scenario::{Conditioning, Scenario};
use crate::schedule::{ddim_values, forward_values, LatentState, NoiseSchedule};

/// Guidance scale used when a single-scale strategy is given none.
pub const DEFAULT_OMEGA: f64 = 7.0;
/// Per-prompt scale used when a two-scale strategy is given none.
pub const DEFAULT_SPLIT_OMEGA: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Base,
    Superclass,
    Mixed,
    Switching,
    MultiStage,
    Masked,
    ProFusion,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Base,
        StrategyKind::Superclass,
        StrategyKind::Mixed,
        StrategyKind::Switching,
        StrategyKind::MultiStage,
        StrategyKind::Masked,
        StrategyKind::ProFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Base => "base",
            StrategyKind::Superclass => "superclass",
            StrategyKind::Mixed => "mixed",
            StrategyKind::Switching => "switching",
            StrategyKind::MultiStage => "multistage",
            StrategyKind::Masked => "masked",
            StrategyKind::ProFusion => "profusion",
        }
    }

    /// Denoiser evaluations per inference step.
    pub fn calls_per_step(self) -> u64 {
        match self {
            StrategyKind::Base | StrategyKind::Superclass | StrategyKind::Switching => 2,
            StrategyKind::Mixed | StrategyKind::MultiStage | StrategyKind::Masked => 3,
            StrategyKind::ProFusion => 5,
        }
    }

    /// Parameters this strategy accepts.
    pub fn accepts(self) -> &'static [Param] {
        use Param::*;
        match self {
            StrategyKind::Base => &[Omega, OmegaC],
            StrategyKind::Superclass => &[Omega, OmegaS],
            StrategyKind::Mixed => &[OmegaC, OmegaS],
            StrategyKind::Switching => &[Omega, TSw],
            StrategyKind::MultiStage => &[OmegaC, OmegaS, TSw],
            StrategyKind::Masked => &[OmegaC, OmegaS, OmegaC0, OmegaS0, TSw, Q, Provider, Basic],
            StrategyKind::ProFusion => &[OmegaC, OmegaS, R],
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = StrategyKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::config("strategy", format!("unknown strategy `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Strategy hyperparameter names, shared by CLI flags and grid documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Omega,
    OmegaC,
    OmegaS,
    OmegaC0,
    OmegaS0,
    TSw,
    Q,
    R,
    Provider,
    Basic,
}

impl Param {
    pub fn as_str(self) -> &'static str {
        match self {
            Param::Omega => "omega",
            Param::OmegaC => "omega_c",
            Param::OmegaS => "omega_s",
            Param::OmegaC0 => "omega_c0",
            Param::OmegaS0 => "omega_s0",
            Param::TSw => "t_sw",
            Param::Q => "q",
            Param::R => "r",
            Param::Provider => "provider",
            Param::Basic => "basic",
        }
    }

    /// Command-line spelling, e.g. `omega-s`.
    pub fn flag(self) -> String {
        self.as_str().replace('_', "-")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvider {
    /// Normalized `|Δc − Δs|` at the current latent.
    #[default]
    Divergence,
    /// The scenario's `concept_region`.
    FixedRegion,
}

impl MaskProvider {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskProvider::Divergence => "divergence",
            MaskProvider::FixedRegion => "fixed_region",
        }
    }
}

impl FromStr for MaskProvider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divergence" => Ok(MaskProvider::Divergence),
            "fixed_region" | "fixed-region" => Ok(MaskProvider::FixedRegion),
            other => Err(Error::config("provider", format!("unknown mask provider `{other}`"))),
        }
    }
}

/// Loose, optional hyperparameters as they arrive from flags or documents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_s0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_sw: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<MaskProvider>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basic: Option<bool>,
}

impl StrategyParams {
    fn present(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let mut push = |set: bool, p| {
            if set {
                out.push(p)
            }
        };
        push(self.omega.is_some(), Param::Omega);
        push(self.omega_c.is_some(), Param::OmegaC);
        push(self.omega_s.is_some(), Param::OmegaS);
        push(self.omega_c0.is_some(), Param::OmegaC0);
        push(self.omega_s0.is_some(), Param::OmegaS0);
        push(self.t_sw.is_some(), Param::TSw);
        push(self.q.is_some(), Param::Q);
        push(self.r.is_some(), Param::R);
        push(self.provider.is_some(), Param::Provider);
        push(self.basic.is_some(), Param::Basic);
        out
    }

    /// Sets a numeric parameter by name; `t_sw` must be a non-negative integer.
    pub fn set_number(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "omega" => &mut self.omega,
            "omega_c" => &mut self.omega_c,
            "omega_s" => &mut self.omega_s,
            "omega_c0" => &mut self.omega_c0,
            "omega_s0" => &mut self.omega_s0,
            "q" => &mut self.q,
            "r" => &mut self.r,
            "t_sw" => {
                if !(value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(Error::config("t_sw", format!("must be a non-negative integer, got {value}")));
                }
                self.t_sw = Some(value as usize);
                return Ok(());
            }
            other => return Err(Error::config(other, "not a numeric strategy parameter")),
        };
        *slot = Some(value);
        Ok(())
    }
}

/// One fully resolved strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Base { omega: f64 },
    Superclass { omega: f64 },
    Mixed { omega_c: f64, omega_s: f64 },
    Switching { omega: f64, t_sw: usize },
    MultiStage { omega_c: f64, omega_s: f64, t_sw: usize },
    Masked {
        omega_c: f64,
        omega_s: f64,
        omega_c0: f64,
        omega_s0: f64,
        t_sw: usize,
        q: f64,
        provider: MaskProvider,
        basic: bool,
    },
    ProFusion { omega_c: f64, omega_s: f64, r: f64 },
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::Base { .. } => StrategyKind::Base,
            Strategy::Superclass { .. } => StrategyKind::Superclass,
            Strategy::Mixed { .. } => StrategyKind::Mixed,
            Strategy::Switching { .. } => StrategyKind::Switching,
            Strategy::MultiStage { .. } => StrategyKind::MultiStage,
            Strategy::Masked { .. } => StrategyKind::Masked,
            Strategy::ProFusion { .. } => StrategyKind::ProFusion,
        }
    }

    /// Resolves loose parameters, applying defaults and rejecting any
    /// parameter the strategy does not take.
    pub fn from_params(kind: StrategyKind, p: &StrategyParams) -> Result<Strategy> {
        let accepted = kind.accepts();
        if let Some(bad) = p.present().into_iter().find(|q| !accepted.contains(q)) {
            return Err(Error::config(
                bad.as_str(),
                format!("{} not valid for {kind}", bad.flag()),
            ));
        }
        let required = |v: Option<f64>, name: Param| {
            v.ok_or_else(|| Error::config(name.as_str(), format!("{} is required for {kind}", name.flag())))
        };
        let single = |alias: Option<f64>, alias_name: Param| -> Result<f64> {
            match (p.omega, alias) {
                (Some(_), Some(_)) => Err(Error::config(
                    "omega",
                    format!("give either omega or {}, not both", alias_name.flag()),
                )),
                (Some(w), None) | (None, Some(w)) => Ok(w),
                (None, None) => Ok(DEFAULT_OMEGA),
            }
        };
        let omega_c = p.omega_c.unwrap_or(DEFAULT_SPLIT_OMEGA);
        let omega_s = p.omega_s.unwrap_or(DEFAULT_SPLIT_OMEGA);
        let t_sw = || {
            p.t_sw
                .ok_or_else(|| Error::config("t_sw", format!("t-sw is required for {kind}")))
        };
        Ok(match kind {
            StrategyKind::Base => Strategy::Base { omega: single(p.omega_c, Param::OmegaC)? },
            StrategyKind::Superclass => Strategy::Superclass { omega: single(p.omega_s, Param::OmegaS)? },
            StrategyKind::Mixed => Strategy::Mixed { omega_c, omega_s },
            StrategyKind::Switching => Strategy::Switching {
                omega: p.omega.unwrap_or(DEFAULT_OMEGA),
                t_sw: t_sw()?,
            },
            StrategyKind::MultiStage => Strategy::MultiStage { omega_c, omega_s, t_sw: t_sw()? },
            StrategyKind::Masked => Strategy::Masked {
                omega_c,
                omega_s,
                omega_c0: p.omega_c0.unwrap_or(omega_c),
                omega_s0: p.omega_s0.unwrap_or(omega_s),
                t_sw: t_sw()?,
                q: required(p.q, Param::Q)?,
                provider: p.provider.unwrap_or_default(),
                basic: p.basic.unwrap_or(false),
            },
            StrategyKind::ProFusion => Strategy::ProFusion {
                omega_c,
                omega_s,
                r: required(p.r, Param::R)?,
            },
        })
    }

    /// The loose form that resolves back to `self`.
    pub fn params(&self) -> StrategyParams {
        let mut p = StrategyParams::default();
        match *self {
            Strategy::Base { omega } | Strategy::Superclass { omega } => p.omega = Some(omega),
            Strategy::Mixed { omega_c, omega_s } => {
                p.omega_c = Some(omega_c);
                p.omega_s = Some(omega_s);
            }
            Strategy::Switching { omega, t_sw } => {
                p.omega = Some(omega);
                p.t_sw = Some(t_sw);
            }
            Strategy::MultiStage { omega_c, omega_s, t_sw } => {
                p.omega_c = Some(omega_c);
                p.omega_s = Some(omega_s);
                p.t_sw = Some(t_sw);
            }
            Strategy::Masked { omega_c, omega_s, omega_c0, omega_s0, t_sw, q, provider, basic } => {
                p.omega_c = Some(omega_c);
                p.omega_s = Some(omega_s);
                p.omega_c0 = Some(omega_c0);
                p.omega_s0 = Some(omega_s0);
                p.t_sw = Some(t_sw);
                p.q = Some(q);
                p.provider = Some(provider);
                p.basic = Some(basic);
            }
            Strategy::ProFusion { omega_c, omega_s, r } => {
                p.omega_c = Some(omega_c);
                p.omega_s = Some(omega_s);
                p.r = Some(r);
            }
        }
        p
    }

    fn scales(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Strategy::Base { omega } | Strategy::Superclass { omega } | Strategy::Switching { omega, .. } => {
                vec![("omega", omega)]
            }
            Strategy::Mixed { omega_c, omega_s }
            | Strategy::MultiStage { omega_c, omega_s, .. }
            | Strategy::ProFusion { omega_c, omega_s, .. } => vec![("omega_c", omega_c), ("omega_s", omega_s)],
            Strategy::Masked { omega_c, omega_s, omega_c0, omega_s0, .. } => vec![
                ("omega_c", omega_c),
                ("omega_s", omega_s),
                ("omega_c0", omega_c0),
                ("omega_s0", omega_s0),
            ],
        }
    }

    /// Checks ranges against an `S`-step schedule.
    pub fn validate(&self, steps: usize) -> Result<()> {
        for (name, w) in self.scales() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(name, format!("guidance scale must be finite and >= 0, got {w}")));
            }
        }
        match *self {
            Strategy::Switching { t_sw, .. }
            | Strategy::MultiStage { t_sw, .. }
            | Strategy::Masked { t_sw, .. }
                if t_sw > steps =>
            {
                return Err(Error::config("t_sw", format!("{t_sw} exceeds the {steps} inference steps")));
            }
            _ => {}
        }
        if let Strategy::Masked { q, basic, omega_c, omega_s, .. } = *self {
            check_unit("q", q)?;
            if basic && omega_c != omega_s {
                return Err(Error::config(
                    "basic",
                    format!("the basic masked rule needs omega_c == omega_s, got {omega_c} and {omega_s}"),
                ));
            }
        }
        if let Strategy::ProFusion { r, .. } = *self {
            check_unit("r", r)?;
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(name, format!("must lie in [0, 1], got {v}")))
    }
}

/// A strategy plus the trajectory sources it draws on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Where `ε(p^S)` comes from; the unconditional and concept predictions
    /// are always `tuned.null` and `tuned.concept`.
    pub superclass_source: Conditioning,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            superclass_source: Conditioning::SUPERCLASS,
        }
    }

    pub fn with_superclass_source(mut self, source: Conditioning) -> Self {
        self.superclass_source = source;
        self
    }

    pub fn kind(&self) -> StrategyKind {
        self.strategy.kind()
    }

    pub fn calls_per_step(&self) -> u64 {
        self.kind().calls_per_step()
    }

    /// Range checks plus the denoiser's ability to serve every source.
    pub fn validate<D: Denoiser + ?Sized>(&self, steps: usize, denoiser: &D) -> Result<()> {
        self.strategy.validate(steps)?;
        denoiser.supports(Conditioning::NULL)?;
        denoiser.supports(Conditioning::CONCEPT)?;
        denoiser.supports(self.superclass_source)?;
        if let Strategy::Masked { provider: MaskProvider::FixedRegion, .. } = self.strategy {
            if denoiser.concept_region().is_none() {
                return Err(Error::config("provider", "fixed_region needs a scenario with a concept_region"));
            }
        }
        Ok(())
    }
}

/// `ε(p) − ε(∅)`.
pub fn guidance_delta(eps_u: &[f64], eps_p: &[f64]) -> Result<Vec<f64>> {
    check_len("guidance delta", eps_u.len(), eps_p.len())?;
    Ok(eps_p.iter().zip(eps_u).map(|(p, u)| p - u).collect())
}

fn guided(eps_u: &[f64], delta: &[f64], omega: f64) -> Vec<f64> {
    eps_u.iter().zip(delta).map(|(u, d)| u + omega * d).collect()
}

fn mixed_values(eps_u: &[f64], dc: &[f64], ds: &[f64], omega_c: f64, omega_s: f64) -> Vec<f64> {
    eps_u
        .iter()
        .zip(dc)
        .zip(ds)
        .map(|((u, c), s)| (u + omega_c * c) + omega_s * s)
        .collect()
}

fn check3(eps_u: &[f64], dc: &[f64], ds: &[f64]) -> Result<()> {
    check_len("concept delta", eps_u.len(), dc.len())?;
    check_len("superclass delta", eps_u.len(), ds.len())
}

/// Classifier-free guidance: `ε_u + ω·(ε_c − ε_u)`.
pub fn cfg_combine(eps_u: &[f64], eps_c: &[f64], omega: f64) -> Result<Vec<f64>> {
    let delta = guidance_delta(eps_u, eps_c)?;
    Ok(guided(eps_u, &delta, omega))
}

/// `ε_u + ω_c·Δc + ω_s·Δs`.
pub fn mixed_combine(eps_u: &[f64], dc: &[f64], ds: &[f64], omega_c: f64, omega_s: f64) -> Result<Vec<f64>> {
    check3(eps_u, dc, ds)?;
    Ok(mixed_values(eps_u, dc, ds, omega_c, omega_s))
}

/// True while inference index `i` is still in the first `t_sw` steps.
pub fn in_first_stage(i: usize, steps: usize, t_sw: usize) -> bool {
    i + t_sw > steps
}

/// Superclass guidance for the first `t_sw` steps, concept guidance after.
pub fn switching_combine(
    eps_u: &[f64],
    dc: &[f64],
    ds: &[f64],
    omega: f64,
    i: usize,
    steps: usize,
    t_sw: usize,
) -> Result<Vec<f64>> {
    check3(eps_u, dc, ds)?;
    let delta = if in_first_stage(i, steps, t_sw) { ds } else { dc };
    Ok(guided(eps_u, delta, omega))
}

/// Superclass-only at the combined scale for the first `t_sw` steps, then mixed.
#[allow(clippy::too_many_arguments)]
pub fn multistage_combine(
    eps_u: &[f64],
    dc: &[f64],
    ds: &[f64],
    omega_c: f64,
    omega_s: f64,
    i: usize,
    steps: usize,
    t_sw: usize,
) -> Result<Vec<f64>> {
    check3(eps_u, dc, ds)?;
    if in_first_stage(i, steps, t_sw) {
        Ok(guided(eps_u, ds, omega_s + omega_c))
    } else {
        Ok(mixed_values(eps_u, dc, ds, omega_c, omega_s))
    }
}

/// A soft map and its binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub soft: Vec<f64>,
    pub binary: Vec<bool>,
    pub q: f64,
}

impl Mask {
    /// A mask with every element inside.
    pub fn full(len: usize) -> Self {
        Mask { soft: vec![1.0; len], binary: vec![true; len], q: 0.0 }
    }

    /// A mask with every element outside.
    pub fn empty(len: usize) -> Self {
        Mask { soft: vec![0.0; len], binary: vec![false; len], q: 1.0 }
    }

    pub fn inside(&self) -> usize {
        self.binary.iter().filter(|b| **b).count()
    }
}

/// `|Δc − Δs|` scaled so its maximum is 1; all zeros stays all zeros.
pub fn soft_mask_divergence(dc: &[f64], ds: &[f64]) -> Result<Vec<f64>> {
    check_len("mask deltas", dc.len(), ds.len())?;
    let mut soft: Vec<f64> = dc.iter().zip(ds).map(|(c, s)| (c - s).abs()).collect();
    let max = soft.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        soft.iter_mut().for_each(|v| *v /= max);
    }
    Ok(soft)
}

pub fn region_mask(region: &[bool]) -> Vec<f64> {
    region.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect()
}

/// The scenario's concept region as a soft map.
pub fn fixed_region_mask(scenario: &Scenario) -> Result<Vec<f64>> {
    scenario
        .concept_region()
        .map(region_mask)
        .ok_or_else(|| Error::config("provider", format!("scenario `{}` has no concept_region", scenario.name)))
}

/// Threshold at the lower order statistic `sorted[⌊q·(n−1)⌋]`; elements at
/// or above it are inside.
pub fn binarize_mask(soft: &[f64], q: f64) -> Result<Mask> {
    check_unit("q", q)?;
    if soft.is_empty() {
        return Ok(Mask { soft: Vec::new(), binary: Vec::new(), q });
    }
    let mut sorted = soft.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (q * (sorted.len() - 1) as f64).floor() as usize;
    let threshold = sorted[k];
    Ok(Mask {
        soft: soft.to_vec(),
        binary: soft.iter().map(|&v| v >= threshold).collect(),
        q,
    })
}

/// Concept guidance inside the mask, superclass guidance outside.
///
/// With `basic`, inside gets `ω·Δc` and outside `ω·Δs` (needs `ω_c == ω_s`).
/// Otherwise inside gets the mixed rule and outside `(ω_c + ω_s)·Δs`.
pub fn masked_combine(
    eps_u: &[f64],
    dc: &[f64],
    ds: &[f64],
    omega_c: f64,
    omega_s: f64,
    mask: &Mask,
    basic: bool,
) -> Result<Vec<f64>> {
    check3(eps_u, dc, ds)?;
    check_len("mask", eps_u.len(), mask.binary.len())?;
    if basic && omega_c != omega_s {
        return Err(Error::config(
            "basic",
            format!("the basic masked rule needs omega_c == omega_s, got {omega_c} and {omega_s}"),
        ));
    }
    let total = omega_c + omega_s;
    Ok((0..eps_u.len())
        .map(|k| {
            let (u, c, s) = (eps_u[k], dc[k], ds[k]);
            match (mask.binary[k], basic) {
                (true, true) => u + omega_c * c,
                (false, true) => u + omega_s * s,
                (true, false) => (u + omega_c * c) + omega_s * s,
                (false, false) => u + total * s,
            }
        })
        .collect())
}

/// Fused latent `(1−r)·z + r·forward(ddim(z, ε_u + ω·Δc))`; exactly `z`
/// when `r == 0`.
#[allow(clippy::too_many_arguments)]
pub fn profusion_fuse(
    schedule: &NoiseSchedule,
    i: usize,
    z: &[f64],
    eps_u: &[f64],
    eps_c: &[f64],
    omega: f64,
    r: f64,
    fresh: &[f64],
) -> Result<Vec<f64>> {
    check_unit("r", r)?;
    check_len("profusion noise", z.len(), fresh.len())?;
    let guided = cfg_combine(eps_u, eps_c, omega)?;
    check_len("profusion prediction", z.len(), guided.len())?;
    if r == 0.0 {
        return Ok(z.to_vec());
    }
    let denoised = ddim_values(schedule, i, z, &guided);
    let renoised = forward_values(schedule, i, &denoised, fresh)?;
    Ok(z.iter()
        .zip(&renoised)
        .map(|(a, b)| (1.0 - r) * a + r * b)
        .collect())
}

/// One ProFusion step: a concept-guided backward step at scale `ω_c + ω_s`,
/// re-noising with `fresh`, fusion by `r`, then a mixed backward step.
#[allow(clippy::too_many_arguments)]
pub fn profusion_step<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    i: usize,
    z: &LatentState,
    denoiser: &D,
    superclass: Conditioning,
    omega_c: f64,
    omega_s: f64,
    r: f64,
    fresh: &[f64],
    counter: &mut CallCounter,
) -> Result<LatentState> {
    if i == 0 || i > schedule.steps() || z.index != i {
        return Err(Error::config(
            "latent index",
            format!("profusion step {i} got a latent at index {}", z.index),
        ));
    }
    let t = schedule.timestep(i);
    let eps_u = denoiser.predict(&z.values, t, Conditioning::NULL, counter)?;
    let eps_c = denoiser.predict(&z.values, t, Conditioning::CONCEPT, counter)?;
    let fused = profusion_fuse(schedule, i, &z.values, &eps_u, &eps_c, omega_c + omega_s, r, fresh)?;
    let eps = mixed_prediction(denoiser, &fused, t, superclass, omega_c, omega_s, counter)?;
    Ok(LatentState::new(ddim_values(schedule, i, &fused, &eps), i - 1))
}

fn mixed_prediction<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &[f64],
    t: usize,
    superclass: Conditioning,
    omega_c: f64,
    omega_s: f64,
    counter: &mut CallCounter,
) -> Result<Vec<f64>> {
    let eps_u = denoiser.predict(z, t, Conditioning::NULL, counter)?;
    let dc = guidance_delta(&eps_u, &denoiser.predict(z, t, Conditioning::CONCEPT, counter)?)?;
    let ds = guidance_delta(&eps_u, &denoiser.predict(z, t, superclass, counter)?)?;
    Ok(mixed_values(&eps_u, &dc, &ds, omega_c, omega_s))
}

/// The combined noise prediction for one inference step of any strategy
/// other than ProFusion, which replaces the whole step.
pub fn step_prediction<D: Denoiser + ?Sized>(
    cfg: &StrategyConfig,
    schedule: &NoiseSchedule,
    i: usize,
    z: &[f64],
    denoiser: &D,
    counter: &mut CallCounter,
) -> Result<Vec<f64>> {
    let steps = schedule.steps();
    let t = schedule.timestep(i);
    let sup = cfg.superclass_source;
    let eps_u = denoiser.predict(z, t, Conditioning::NULL, counter)?;
    let delta = |c: Conditioning, counter: &mut CallCounter| -> Result<Vec<f64>> {
        guidance_delta(&eps_u, &denoiser.predict(z, t, c, counter)?)
    };
    match cfg.strategy {
        Strategy::Base { omega } => Ok(guided(&eps_u, &delta(Conditioning::CONCEPT, counter)?, omega)),
        Strategy::Superclass { omega } => Ok(guided(&eps_u, &delta(sup, counter)?, omega)),
        Strategy::Switching { omega, t_sw } => {
            let source = if in_first_stage(i, steps, t_sw) { sup } else { Conditioning::CONCEPT };
            Ok(guided(&eps_u, &delta(source, counter)?, omega))
        }
        Strategy::Mixed { omega_c, omega_s } => {
            let dc = delta(Conditioning::CONCEPT, counter)?;
            let ds = delta(sup, counter)?;
            Ok(mixed_values(&eps_u, &dc, &ds, omega_c, omega_s))
        }
        Strategy::MultiStage { omega_c, omega_s, t_sw } => {
            let dc = delta(Conditioning::CONCEPT, counter)?;
            let ds = delta(sup, counter)?;
            multistage_combine(&eps_u, &dc, &ds, omega_c, omega_s, i, steps, t_sw)
        }
        Strategy::Masked { omega_c, omega_s, omega_c0, omega_s0, t_sw, q, provider, basic } => {
            let dc = delta(Conditioning::CONCEPT, counter)?;
            let ds = delta(sup, counter)?;
            if in_first_stage(i, steps, t_sw) {
                return Ok(mixed_values(&eps_u, &dc, &ds, omega_c0, omega_s0));
            }
            let soft = match provider {
                MaskProvider::Divergence => soft_mask_divergence(&dc, &ds)?,
                MaskProvider::FixedRegion => region_mask(denoiser.concept_region().ok_or_else(|| {
                    Error::config("provider", "fixed_region needs a scenario with a concept_region")
                })?),
            };
            let mask = binarize_mask(&soft, q)?;
            masked_combine(&eps_u, &dc, &ds, omega_c, omega_s, &mask, basic)
        }
        Strategy::ProFusion { .. } => Err(Error::Invariant(
            "profusion replaces the whole step and has no single prediction".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticDenoiser;
    use crate::schedule::ScheduleParams;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn cfg_endpoints_and_arithmetic() {
        let u = [0.3, -1.25, 7.0];
        let c = [1.1, 0.5, -2.0];
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.to_vec());
        let one = cfg_combine(&u, &c, 1.0).unwrap();
        for (a, b) in one.iter().zip(&c) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
        }
        assert_eq!(cfg_combine(&[0.0], &[1.0], 2.0).unwrap(), vec![2.0]);
        assert!(matches!(cfg_combine(&[0.0], &[1.0, 2.0], 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn mixed_reductions_are_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w: f64 = rng.random_range(0.0..8.0);
            let dc = guidance_delta(&u, &c).unwrap();
            let ds = guidance_delta(&u, &s).unwrap();
            assert_eq!(bits(&mixed_combine(&u, &dc, &ds, w, 0.0).unwrap()), bits(&cfg_combine(&u, &c, w).unwrap()));
            assert_eq!(bits(&mixed_combine(&u, &dc, &ds, 0.0, w).unwrap()), bits(&cfg_combine(&u, &s, w).unwrap()));
        }
    }

    #[test]
    fn mixed_cancellation() {
        let out = mixed_combine(&[0.25], &[1.0], &[-1.0], 3.5, 3.5).unwrap();
        assert_eq!(out, vec![0.25]);
    }

    #[test]
    fn switching_boundary_follows_strict_inequality() {
        let (u, dc, ds) = ([0.0], [1.0], [-1.0]);
        for i in 1..=50 {
            let got = switching_combine(&u, &dc, &ds, 1.0, i, 50, 10).unwrap()[0];
            let expect = if i >= 41 { -1.0 } else { 1.0 };
            assert_eq!(got, expect, "i={i}");
        }
        for i in 1..=50 {
            assert_eq!(switching_combine(&u, &dc, &ds, 1.0, i, 50, 0).unwrap()[0], 1.0);
            assert_eq!(switching_combine(&u, &dc, &ds, 1.0, i, 50, 50).unwrap()[0], -1.0);
        }
    }

    #[test]
    fn multistage_first_stage_uses_combined_superclass_scale() {
        let out = multistage_combine(&[0.0], &[1.0], &[2.0], 3.0, 0.0, 50, 50, 5).unwrap();
        assert_eq!(out, vec![6.0]);
        let out = multistage_combine(&[0.0], &[1.0], &[2.0], 3.0, 1.0, 45, 50, 5).unwrap();
        assert_eq!(out, vec![5.0]);
        for i in 1..=50 {
            let a = multistage_combine(&[0.1], &[1.0], &[2.0], 3.0, 1.5, i, 50, 0).unwrap();
            let b = mixed_combine(&[0.1], &[1.0], &[2.0], 3.0, 1.5).unwrap();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn divergence_mask_cases() {
        assert_eq!(soft_mask_divergence(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(soft_mask_divergence(&[1.0, 2.0, 3.0], &[1.0, 0.5, 3.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let soft = soft_mask_divergence(&c, &s).unwrap();
        let max = c.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for k in 0..30 {
            assert_eq!(soft[k], (c[k] - s[k]).abs() / max);
        }
    }

    #[test]
    fn fixed_region_reads_the_fixture() {
        let sc = Scenario::builtin("grid-8x8").unwrap();
        let soft = fixed_region_mask(&sc).unwrap();
        let region = sc.concept_region().unwrap();
        assert_eq!(soft.len(), 64);
        for (v, r) in soft.iter().zip(region) {
            assert_eq!(*v, if *r { 1.0 } else { 0.0 });
        }
        let flat = Scenario::builtin("canonical-2d").unwrap();
        assert!(fixed_region_mask(&flat).unwrap_err().is_config());
        assert_eq!(region_mask(&[true; 3]), vec![1.0; 3]);
        assert_eq!(region_mask(&[false; 3]), vec![0.0; 3]);
    }

    #[test]
    fn binarize_worked_example() {
        let m = binarize_mask(&[0.1, 0.2, 0.3, 0.4], 0.5).unwrap();
        assert_eq!(m.binary, vec![false, true, true, true]);
        let m = binarize_mask(&[0.4, 0.9, 0.1, 0.9], 1.0).unwrap();
        assert_eq!(m.binary, vec![false, true, false, true]);
        assert!(binarize_mask(&[0.1], 1.5).is_err());
    }

    #[test]
    fn masked_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16;
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dc: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ds: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let full = masked_combine(&u, &dc, &ds, 2.0, 1.5, &Mask::full(n), false).unwrap();
        assert_eq!(bits(&full), bits(&mixed_combine(&u, &dc, &ds, 2.0, 1.5).unwrap()));
        let empty = masked_combine(&u, &dc, &ds, 2.0, 1.5, &Mask::empty(n), false).unwrap();
        assert_eq!(bits(&empty), bits(&guided(&u, &ds, 3.5)));
        let basic = masked_combine(&u, &dc, &ds, 2.0, 2.0, &Mask::full(n), true).unwrap();
        assert_eq!(bits(&basic), bits(&guided(&u, &dc, 2.0)));
        let err = masked_combine(&u, &dc, &ds, 2.0, 1.0, &Mask::full(n), true).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn masked_grid_partition_matches_both_reductions() {
        let sc = Scenario::builtin("grid-8x8").unwrap();
        let sd = ScheduleParams::default().build().unwrap();
        let den = AnalyticDenoiser::new(&sc, &sd);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = sd.timestep(20);
        let mut calls = CallCounter::new();
        let u = den.predict(&z, t, Conditioning::NULL, &mut calls).unwrap();
        let dc = guidance_delta(&u, &den.predict(&z, t, Conditioning::CONCEPT, &mut calls).unwrap()).unwrap();
        let ds = guidance_delta(&u, &den.predict(&z, t, Conditioning::SUPERCLASS, &mut calls).unwrap()).unwrap();
        let mask = binarize_mask(&fixed_region_mask(&sc).unwrap(), 0.9).unwrap();
        assert_eq!(mask.inside(), 16);
        let out = masked_combine(&u, &dc, &ds, 3.0, 2.0, &mask, false).unwrap();
        let inside = mixed_combine(&u, &dc, &ds, 3.0, 2.0).unwrap();
        let outside = guided(&u, &ds, 5.0);
        for k in 0..64 {
            let expect = if mask.binary[k] { inside[k] } else { outside[k] };
            assert_eq!(out[k].to_bits(), expect.to_bits(), "element {k}");
        }
    }

    #[test]
    fn profusion_fuse_limits() {
        let sd = ScheduleParams::default().build().unwrap();
        let z = [0.7, -1.3];
        let u = [0.2, 0.1];
        let c = [0.5, -0.4];
        let fresh = [0.9, 1.1];
        assert_eq!(profusion_fuse(&sd, 30, &z, &u, &c, 7.0, 0.0, &fresh).unwrap(), z.to_vec());
        let fused = profusion_fuse(&sd, 30, &z, &u, &c, 7.0, 1.0, &[0.0, 0.0]).unwrap();
        let denoised = ddim_values(&sd, 30, &z, &cfg_combine(&u, &c, 7.0).unwrap());
        let ratio = sd.alpha_at(30) / sd.alpha_at(29);
        for k in 0..2 {
            assert!((fused[k] - ratio * denoised[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn profusion_step_costs_five_calls() {
        let sc = Scenario::builtin("canonical-2d").unwrap();
        let sd = ScheduleParams::default().build().unwrap();
        let den = AnalyticDenoiser::new(&sc, &sd);
        let mut calls = CallCounter::new();
        let z = LatentState::new(vec![0.5, -0.5], 50);
        let out = profusion_step(&sd, 50, &z, &den, Conditioning::SUPERCLASS, 3.5, 3.5, 0.3, &[0.1, 0.2], &mut calls)
            .unwrap();
        assert_eq!(out.index, 49);
        assert_eq!(calls.total(), 5);
        assert_eq!(calls.get(Conditioning::NULL), 2);
        assert_eq!(calls.get(Conditioning::CONCEPT), 2);
        assert_eq!(calls.get(Conditioning::SUPERCLASS), 1);
    }

    #[test]
    fn params_resolve_with_defaults() {
        let p = StrategyParams { omega_s: Some(1.0), ..Default::default() };
        let err = Strategy::from_params(StrategyKind::Base, &p).unwrap_err();
        assert!(err.to_string().contains("omega-s not valid for base"), "{err}");

        let s = Strategy::from_params(StrategyKind::Mixed, &StrategyParams::default()).unwrap();
        assert_eq!(s, Strategy::Mixed { omega_c: 3.5, omega_s: 3.5 });

        let s = Strategy::from_params(StrategyKind::Base, &StrategyParams::default()).unwrap();
        assert_eq!(s, Strategy::Base { omega: 7.0 });

        let p = StrategyParams { omega_c: Some(2.0), ..Default::default() };
        assert_eq!(Strategy::from_params(StrategyKind::Base, &p).unwrap(), Strategy::Base { omega: 2.0 });

        assert!(Strategy::from_params(StrategyKind::Switching, &StrategyParams::default()).is_err());
        assert!(Strategy::from_params(StrategyKind::ProFusion, &StrategyParams::default()).is_err());

        let p = StrategyParams { t_sw: Some(3), q: Some(0.5), omega_c: Some(2.0), ..Default::default() };
        match Strategy::from_params(StrategyKind::Masked, &p).unwrap() {
            Strategy::Masked { omega_c0, omega_s0, provider, basic, .. } => {
                assert_eq!((omega_c0, omega_s0), (2.0, 3.5));
                assert_eq!(provider, MaskProvider::Divergence);
                assert!(!basic);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn params_roundtrip_for_every_kind() {
        let examples = [
            Strategy::Base { omega: 2.0 },
            Strategy::Superclass { omega: 1.0 },
            Strategy::Mixed { omega_c: 1.0, omega_s: 6.0 },
            Strategy::Switching { omega: 7.0, t_sw: 10 },
            Strategy::MultiStage { omega_c: 4.0, omega_s: 3.0, t_sw: 3 },
            Strategy::Masked {
                omega_c: 3.5,
                omega_s: 3.5,
                omega_c0: 1.0,
                omega_s0: 2.0,
                t_sw: 3,
                q: 0.7,
                provider: MaskProvider::FixedRegion,
                basic: true,
            },
            Strategy::ProFusion { omega_c: 3.5, omega_s: 3.5, r: 0.2 },
        ];
        for s in examples {
            assert_eq!(Strategy::from_params(s.kind(), &s.params()).unwrap(), s);
            s.validate(50).unwrap();
        }
    }

    #[test]
    fn validation_ranges() {
        assert!(Strategy::Base { omega: -1.0 }.validate(50).is_err());
        assert!(Strategy::Base { omega: f64::NAN }.validate(50).is_err());
        assert!(Strategy::Switching { omega: 1.0, t_sw: 51 }.validate(50).is_err());
        assert!(Strategy::Switching { omega: 1.0, t_sw: 50 }.validate(50).is_ok());
        assert!(Strategy::ProFusion { omega_c: 1.0, omega_s: 1.0, r: 1.5 }.validate(50).is_err());
        let masked = |q, basic, omega_s| Strategy::Masked {
            omega_c: 3.5,
            omega_s,
            omega_c0: 3.5,
            omega_s0: 3.5,
            t_sw: 3,
            q,
            provider: MaskProvider::Divergence,
            basic,
        };
        assert!(masked(-0.1, false, 3.5).validate(50).is_err());
        assert!(masked(0.5, true, 2.0).validate(50).is_err());
        assert!(masked(0.5, true, 3.5).validate(50).is_ok());
    }

    #[test]
    fn fixed_region_provider_needs_a_region() {
        let sc = Scenario::builtin("canonical-2d").unwrap();
        let sd = ScheduleParams::default().build().unwrap();
        let den = AnalyticDenoiser::new(&sc, &sd);
        let p = StrategyParams {
            t_sw: Some(3),
            q: Some(0.5),
            provider: Some(MaskProvider::FixedRegion),
            ..Default::default()
        };
        let cfg = StrategyConfig::new(Strategy::from_params(StrategyKind::Masked, &p).unwrap());
        assert!(cfg.validate(50, &den).unwrap_err().is_config());
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("photoswap".parse::<StrategyKind>().is_err());
    }

    proptest! {
        #[test]
        fn binarize_is_monotone_in_q(
            soft in prop::collection::vec(0.0f64..1.0, 1..40),
            q1 in 0.0f64..=1.0,
            q2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let a = binarize_mask(&soft, lo).unwrap();
            let b = binarize_mask(&soft, hi).unwrap();
            for k in 0..soft.len() {
                prop_assert!(!b.binary[k] || a.binary[k]);
            }
            prop_assert!(binarize_mask(&soft, 0.0).unwrap().binary.iter().all(|b| *b));
            prop_assert!(b.inside() >= 1);
        }

        #[test]
        fn mixed_is_linear_in_the_deltas(
            dc in prop::collection::vec(-3.0f64..3.0, 4),
            ds in prop::collection::vec(-3.0f64..3.0, 4),
            wc in 0.0f64..7.0,
            ws in 0.0f64..7.0,
            k in -4.0f64..4.0,
        ) {
            let zero = vec![0.0; 4];
            let base = mixed_combine(&zero, &dc, &ds, wc, ws).unwrap();
            let sdc: Vec<f64> = dc.iter().map(|v| v * k).collect();
            let sds: Vec<f64> = ds.iter().map(|v| v * k).collect();
            let scaled = mixed_combine(&zero, &sdc, &sds, wc, ws).unwrap();
            for j in 0..4 {
                prop_assert!((scaled[j] - k * base[j]).abs() <= 1e-12 * (1.0 + base[j].abs() * k.abs()));
            }
        }

        #[test]
        fn masked_elements_take_exactly_one_branch(
            u in prop::collection::vec(-3.0f64..3.0, 6),
            dc in prop::collection::vec(-3.0f64..3.0, 6),
            ds in prop::collection::vec(-3.0f64..3.0, 6),
            soft in prop::collection::vec(0.0f64..1.0, 6),
            q in 0.0f64..=1.0,
        ) {
            let mask = binarize_mask(&soft, q).unwrap();
            let out = masked_combine(&u, &dc, &ds, 2.5, 1.5, &mask, false).unwrap();
            let inside = mixed_combine(&u, &dc, &ds, 2.5, 1.5).unwrap();
            let outside = guided(&u, &ds, 4.0);
            for k in 0..6 {
                let expect = if mask.binary[k] { inside[k] } else { outside[k] };
                prop_assert_eq!(out[k].to_bits(), expect.to_bits());
            }
        }
    }
}
