//! The toy generative world: one latent density per (model variant,
//! condition) pair, plus the references the metrics score against.
//!
//! Scenario documents are JSON objects:
//!
//! ```json
//! {
//!   "name": "canonical-2d",
//!   "version": 1,
//!   "latent_shape": [2],
//!   "mixtures": {
//!     "tuned.null":    { "weights": [1.0], "means": [[0, 0]], "variances": [[25, 25]] },
//!     "tuned.concept": { "weights": [0.8, 0.2], "means": [[2, -2], [2, 2]], "variances": [[0.1, 0.1], [0.1, 0.1]] }
//!   },
//!   "fidelity_ref": "tuned.concept",
//!   "context_ref": "tuned.context_only"
//! }
//! ```
//!
//! `latent_shape` is `[D]` for a flat latent or `[rows, cols]` for a grid.
//! Grid scenarios may carry a row-major 0/1 `concept_region` and may give a
//! mixture in factorized form, `{ "inside": <1-D mixture>, "outside": <1-D
//! mixture> }`, meaning every latent element is independent and follows the
//! inside or outside law according to the region.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Deserialize;

use crate::error::{check_len, Error, Result};
use crate::mixture::GaussianMixture;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelVariant {
    Tuned,
    Orig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Null,
    Concept,
    Superclass,
    ContextOnly,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 2] = [ModelVariant::Tuned, ModelVariant::Orig];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Tuned => "tuned",
            ModelVariant::Orig => "orig",
        }
    }
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Null,
        Condition::Concept,
        Condition::Superclass,
        Condition::ContextOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Null => "null",
            Condition::Concept => "concept",
            Condition::Superclass => "superclass",
            Condition::ContextOnly => "context_only",
        }
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuned" => Ok(ModelVariant::Tuned),
            "orig" => Ok(ModelVariant::Orig),
            other => Err(Error::config("variant", format!("unknown model variant `{other}`"))),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(Condition::Null),
            "concept" => Ok(Condition::Concept),
            "superclass" => Ok(Condition::Superclass),
            "context_only" => Ok(Condition::ContextOnly),
            other => Err(Error::config("condition", format!("unknown condition `{other}`"))),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which model weights and which prompt a noise prediction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Conditioning {
    pub variant: ModelVariant,
    pub condition: Condition,
}

impl Conditioning {
    pub const fn new(variant: ModelVariant, condition: Condition) -> Self {
        Self { variant, condition }
    }

    pub const NULL: Conditioning = Conditioning::new(ModelVariant::Tuned, Condition::Null);
    pub const CONCEPT: Conditioning = Conditioning::new(ModelVariant::Tuned, Condition::Concept);
    pub const SUPERCLASS: Conditioning =
        Conditioning::new(ModelVariant::Tuned, Condition::Superclass);
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.variant, self.condition)
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (v, c) = s
            .split_once('.')
            .ok_or_else(|| Error::config("mixture id", format!("`{s}` is not `variant.condition`")))?;
        Ok(Conditioning::new(v.parse()?, c.parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentShape {
    Flat(usize),
    Grid { rows: usize, cols: usize },
}

impl LatentShape {
    pub fn len(&self) -> usize {
        match *self {
            LatentShape::Flat(d) => d,
            LatentShape::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A latent-space density: either one joint mixture, or independent 1-D
/// mixtures per latent element.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentDensity {
    Joint(GaussianMixture),
    Factorized(Vec<GaussianMixture>),
}

impl LatentDensity {
    pub fn dim(&self) -> usize {
        match self {
            LatentDensity::Joint(m) => m.dim(),
            LatentDensity::Factorized(f) => f.len(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("log_density point", self.dim(), x.len())?;
        match self {
            LatentDensity::Joint(m) => m.log_density(x),
            LatentDensity::Factorized(f) => {
                let mut acc = 0.0;
                for (m, xv) in f.iter().zip(x) {
                    acc += m.log_density(std::slice::from_ref(xv))?;
                }
                Ok(acc)
            }
        }
    }

    /// Density of `α x + σ ε` for `x` drawn from this density.
    pub fn marginal(&self, alpha: f64, sigma: f64) -> LatentDensity {
        match self {
            LatentDensity::Joint(m) => LatentDensity::Joint(m.marginal(alpha, sigma)),
            LatentDensity::Factorized(f) => {
                LatentDensity::Factorized(f.iter().map(|m| m.marginal(alpha, sigma)).collect())
            }
        }
    }

    pub fn score_at(&self, z: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        match self {
            LatentDensity::Joint(m) => m.score_at(z, alpha, sigma),
            LatentDensity::Factorized(f) => f
                .iter()
                .zip(z)
                .map(|(m, zv)| m.score_at(std::slice::from_ref(zv), alpha, sigma)[0])
                .collect(),
        }
    }

    /// One responsibility vector per independent factor (a single vector for
    /// a joint mixture).
    pub fn responsibilities_at(&self, z: &[f64], alpha: f64, sigma: f64) -> Vec<Vec<f64>> {
        match self {
            LatentDensity::Joint(m) => vec![m.responsibilities_at(z, alpha, sigma)],
            LatentDensity::Factorized(f) => f
                .iter()
                .zip(z)
                .map(|(m, zv)| m.responsibilities_at(std::slice::from_ref(zv), alpha, sigma))
                .collect(),
        }
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            LatentDensity::Joint(m) => m.draw(rng),
            LatentDensity::Factorized(f) => f.iter().map(|m| m.draw(rng)[0]).collect(),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        use rand::SeedableRng;
        if n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.draw(&mut rng)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub version: u32,
    pub shape: LatentShape,
    mixtures: BTreeMap<Conditioning, LatentDensity>,
    pub fidelity_ref: Conditioning,
    pub context_ref: Conditioning,
    concept_region: Option<Vec<bool>>,
}

impl Scenario {
    pub fn latent_len(&self) -> usize {
        self.shape.len()
    }

    pub fn density(&self, c: Conditioning) -> Result<&LatentDensity> {
        self.mixtures
            .get(&c)
            .ok_or_else(|| Error::config("mixture", format!("scenario `{}` defines no `{c}`", self.name)))
    }

    pub fn has(&self, c: Conditioning) -> bool {
        self.mixtures.contains_key(&c)
    }

    pub fn conditionings(&self) -> impl Iterator<Item = Conditioning> + '_ {
        self.mixtures.keys().copied()
    }

    pub fn concept_region(&self) -> Option<&[bool]> {
        self.concept_region.as_deref()
    }

    pub fn fidelity_density(&self) -> &LatentDensity {
        &self.mixtures[&self.fidelity_ref]
    }

    pub fn context_density(&self) -> &LatentDensity {
        &self.mixtures[&self.context_ref]
    }

    /// Looks up one of the fixtures shipped with the crate.
    pub fn builtin(name: &str) -> Option<Scenario> {
        let text = match name {
            "canonical-2d" => include_str!("../fixtures/canonical-2d.json"),
            "single-gaussian-2d" => include_str!("../fixtures/single-gaussian-2d.json"),
            "grid-8x8" => include_str!("../fixtures/grid-8x8.json"),
            _ => return None,
        };
        Some(parse_scenario(text).expect("shipped fixture is valid"))
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["canonical-2d", "single-gaussian-2d", "grid-8x8"];
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    name: String,
    version: u32,
    latent_shape: Vec<usize>,
    mixtures: BTreeMap<String, MixtureDoc>,
    fidelity_ref: String,
    context_ref: String,
    #[serde(default)]
    concept_region: Option<Vec<u8>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureDoc {
    #[serde(default)]
    weights: Option<Vec<f64>>,
    #[serde(default)]
    means: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    variances: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    inside: Option<Box<MixtureDoc>>,
    #[serde(default)]
    outside: Option<Box<MixtureDoc>>,
}

impl MixtureDoc {
    fn joint(self, key: &str) -> Result<GaussianMixture> {
        if self.inside.is_some() || self.outside.is_some() {
            return Err(Error::Validation(format!(
                "`{key}`: nested inside/outside mixtures are not allowed here"
            )));
        }
        match (self.weights, self.means, self.variances) {
            (Some(w), Some(m), Some(v)) => GaussianMixture::new(w, m, v)
                .map_err(|e| Error::Validation(format!("`{key}`: {}", strip_prefix(&e)))),
            _ => Err(Error::Validation(format!(
                "`{key}`: a mixture needs `weights`, `means` and `variances`"
            ))),
        }
    }

    fn into_density(self, key: &str, region: Option<&[bool]>) -> Result<LatentDensity> {
        if self.inside.is_none() && self.outside.is_none() {
            return self.joint(key).map(LatentDensity::Joint);
        }
        if self.weights.is_some() || self.means.is_some() || self.variances.is_some() {
            return Err(Error::Validation(format!(
                "`{key}`: give either a joint mixture or inside/outside, not both"
            )));
        }
        let (Some(inside), Some(outside)) = (self.inside, self.outside) else {
            return Err(Error::Validation(format!(
                "`{key}`: factorized mixtures need both `inside` and `outside`"
            )));
        };
        let region = region.ok_or_else(|| {
            Error::Validation(format!("`{key}`: inside/outside mixtures need a concept_region"))
        })?;
        let inside = inside.joint(&format!("{key}.inside"))?;
        let outside = outside.joint(&format!("{key}.outside"))?;
        for (part, m) in [("inside", &inside), ("outside", &outside)] {
            if m.dim() != 1 {
                return Err(Error::Validation(format!(
                    "`{key}.{part}` must be one-dimensional, got dimension {}",
                    m.dim()
                )));
            }
        }
        Ok(LatentDensity::Factorized(
            region
                .iter()
                .map(|&r| if r { inside.clone() } else { outside.clone() })
                .collect(),
        ))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Validation(msg) => msg.clone(),
        other => other.to_string(),
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let doc: ScenarioDoc = serde_json::from_str(text)?;
    validate(doc)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

fn validate(doc: ScenarioDoc) -> Result<Scenario> {
    if doc.version != SCENARIO_VERSION {
        return Err(Error::Validation(format!(
            "unsupported scenario version {} (expected {SCENARIO_VERSION})",
            doc.version
        )));
    }
    let shape = match doc.latent_shape[..] {
        [d] if d > 0 => LatentShape::Flat(d),
        [rows, cols] if rows > 0 && cols > 0 => LatentShape::Grid { rows, cols },
        _ => {
            return Err(Error::Validation(
                "latent_shape must be [D] or [rows, cols] with positive entries".into(),
            ))
        }
    };

    let region = match (doc.concept_region, shape) {
        (None, _) => None,
        (Some(_), LatentShape::Flat(_)) => {
            return Err(Error::Validation(
                "concept_region is only allowed for grid latents".into(),
            ))
        }
        (Some(r), LatentShape::Grid { .. }) => {
            if r.len() != shape.len() {
                return Err(Error::Validation(format!(
                    "concept_region has {} cells, grid has {}",
                    r.len(),
                    shape.len()
                )));
            }
            if r.iter().any(|&v| v > 1) {
                return Err(Error::Validation("concept_region entries must be 0 or 1".into()));
            }
            Some(r.into_iter().map(|v| v == 1).collect::<Vec<_>>())
        }
    };

    let mut mixtures = BTreeMap::new();
    for (key, mdoc) in doc.mixtures {
        let id: Conditioning = key
            .parse()
            .map_err(|_| Error::Validation(format!("unknown mixture key `{key}`")))?;
        let density = mdoc.into_density(&key, region.as_deref())?;
        if density.dim() != shape.len() {
            return Err(Error::Validation(format!(
                "`{key}` has dimension {}, latent has {}",
                density.dim(),
                shape.len()
            )));
        }
        mixtures.insert(id, density);
    }

    for required in [Conditioning::NULL, Conditioning::CONCEPT, Conditioning::SUPERCLASS] {
        if !mixtures.contains_key(&required) {
            return Err(Error::Validation(format!("missing required mixture `{required}`")));
        }
    }

    let resolve = |field: &str, id: &str| -> Result<Conditioning> {
        let c: Conditioning = id
            .parse()
            .map_err(|_| Error::Validation(format!("{field} `{id}` is not a mixture id")))?;
        if !mixtures.contains_key(&c) {
            return Err(Error::Validation(format!("{field} `{id}` names no defined mixture")));
        }
        Ok(c)
    };
    let fidelity_ref = resolve("fidelity_ref", &doc.fidelity_ref)?;
    let context_ref = resolve("context_ref", &doc.context_ref)?;

    Ok(Scenario {
        name: doc.name,
        version: doc.version,
        shape,
        mixtures,
        fidelity_ref,
        context_ref,
        concept_region: region,
    })
}
