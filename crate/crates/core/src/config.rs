//! Experiment configuration: TOML with one section per probe. Unknown keys
//! are rejected; validation errors name the offending key and its line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::deviation::{Direction, MIN_SAMPLES};
use crate::dynamics::{Observable, Point};
use crate::error::{Error, Result};
use crate::gibbs::MassMode;
use crate::hyperbolic::HyperbolicParams;
use crate::sampler::Sampler;
use crate::zoo::FamilyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Deviation,
    Tail,
    Entropy,
    Gibbs,
    Spec,
    Contraction,
    Distortion,
    Bounds,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Deviation => "deviation",
            Kind::Tail => "tail",
            Kind::Entropy => "entropy",
            Kind::Gibbs => "gibbs",
            Kind::Spec => "spec",
            Kind::Contraction => "contraction",
            Kind::Distortion => "distortion",
            Kind::Bounds => "bounds",
        }
    }

    /// Section holding the kind's own knobs.
    pub fn section(self) -> &'static str {
        match self {
            Kind::Deviation | Kind::Bounds => "deviation",
            Kind::Distortion => "contraction",
            k => k.as_str(),
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts integers and integral floats such as `1e6`.
fn count<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<usize, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        I(i64),
        F(f64),
    }
    let to_usize = |n: Num| match n {
        Num::I(i) if i >= 0 => Ok(i as usize),
        Num::F(f) if f >= 0.0 && f.fract() == 0.0 && f < 9.0e15 => Ok(f as usize),
        Num::I(i) => Err(format!("expected a nonnegative count, found {i}")),
        Num::F(f) => Err(format!("expected a nonnegative whole number, found {f}")),
    };
    to_usize(Num::deserialize(d)?).map_err(serde::de::Error::custom)
}

fn count_opt<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<usize>, D::Error> {
    count(d).map(Some)
}

fn counts<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    struct C(#[serde(deserialize_with = "count")] usize);
    Ok(Vec::<C>::deserialize(d)?.into_iter().map(|c| c.0).collect())
}

fn counts_opt<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<usize>>, D::Error> {
    counts(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// `lebesgue`, `orbit` or `points`.
    #[serde(default = "default_sampler_kind")]
    pub kind: String,
    #[serde(default, deserialize_with = "count_opt")]
    pub burn_in: Option<usize>,
    /// Text file with one point per line: `x`, or `theta x` on the cylinder.
    pub file: Option<PathBuf>,
}

fn default_sampler_kind() -> String {
    "lebesgue".into()
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: default_sampler_kind(), burn_in: None, file: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperbolicConfig {
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    pub b: Option<f64>,
    #[serde(default, deserialize_with = "count_opt")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationConfig {
    pub observable: String,
    pub knots: Option<Vec<[f64; 2]>>,
    pub knots_file: Option<PathBuf>,
    pub level: f64,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    #[serde(deserialize_with = "counts")]
    pub n: Vec<usize>,
    #[serde(deserialize_with = "count")]
    pub samples: usize,
    #[serde(default, deserialize_with = "counts_opt")]
    pub window: Option<Vec<usize>>,
    pub t_grid: Option<Vec<f64>>,
    #[serde(default, deserialize_with = "count_opt")]
    pub psi_n: Option<usize>,
    #[serde(default, deserialize_with = "count_opt")]
    pub psi_samples: Option<usize>,
    #[serde(default = "default_tail_samples", deserialize_with = "count")]
    pub tail_samples: usize,
    #[serde(default, deserialize_with = "counts_opt")]
    pub tail_window: Option<Vec<usize>>,
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_direction() -> Direction {
    Direction::AtLeast
}
fn default_tail_samples() -> usize {
    10_000
}
fn default_slack() -> f64 {
    crate::deviation::BOUND_SLACK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailConfig {
    #[serde(deserialize_with = "count")]
    pub samples: usize,
    #[serde(default, deserialize_with = "counts_opt")]
    pub window: Option<Vec<usize>>,
    /// Default window end: last `n` with at least this many survivors.
    #[serde(default = "default_min_survivors", deserialize_with = "count")]
    pub min_survivors: usize,
}

fn default_min_survivors() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    #[serde(deserialize_with = "counts")]
    pub n: Vec<usize>,
    pub epsilon: Vec<f64>,
    #[serde(default = "default_mass_delta")]
    pub delta: f64,
    #[serde(deserialize_with = "count")]
    pub samples: usize,
}

fn default_mass_delta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    pub epsilon: f64,
    #[serde(deserialize_with = "counts")]
    pub n: Vec<usize>,
    #[serde(default = "default_centres", deserialize_with = "count")]
    pub centres: usize,
    #[serde(deserialize_with = "count")]
    pub samples: usize,
    #[serde(default = "default_mode")]
    pub mode: MassMode,
    pub beta: Option<f64>,
    #[serde(default, deserialize_with = "counts_opt")]
    pub delta_n: Option<Vec<usize>>,
    #[serde(default = "default_delta_samples", deserialize_with = "count")]
    pub delta_samples: usize,
}

fn default_centres() -> usize {
    20
}
fn default_mode() -> MassMode {
    MassMode::Auto
}
fn default_delta_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub epsilon: Vec<f64>,
    #[serde(deserialize_with = "counts")]
    pub n: Vec<usize>,
    #[serde(deserialize_with = "count")]
    pub samples: usize,
    #[serde(default = "default_exactness_grid", deserialize_with = "count")]
    pub exactness_grid: usize,
    #[serde(default = "default_exactness_cap", deserialize_with = "count")]
    pub exactness_cap: usize,
    /// Random continuations per sampled gap for the shadowing cross-check.
    #[serde(default, deserialize_with = "count")]
    pub shadow_trials: usize,
}

fn default_exactness_grid() -> usize {
    256
}
fn default_exactness_cap() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    #[serde(default = "default_points", deserialize_with = "count")]
    pub points: usize,
    #[serde(default = "default_pairs", deserialize_with = "count")]
    pub pairs: usize,
    #[serde(default = "default_min_n", deserialize_with = "count")]
    pub min_n: usize,
    pub delta1: Option<f64>,
    #[serde(default = "default_pilot", deserialize_with = "count")]
    pub pilot: usize,
    #[serde(default = "default_pilot_pairs", deserialize_with = "count")]
    pub pilot_pairs: usize,
    #[serde(default = "default_min_pass")]
    pub min_pass: f64,
}

fn default_points() -> usize {
    100
}
fn default_pairs() -> usize {
    1_000
}
fn default_min_n() -> usize {
    10
}
fn default_pilot() -> usize {
    10
}
fn default_pilot_pairs() -> usize {
    200
}
fn default_min_pass() -> f64 {
    0.99
}

/// Assertion on one summary value for `run --check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckRule {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub equals: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    pub output: Option<PathBuf>,
    #[serde(default, deserialize_with = "count_opt")]
    pub workers: Option<usize>,
    pub map: FamilyParams,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub hyperbolic: HyperbolicConfig,
    pub deviation: Option<DeviationConfig>,
    pub tail: Option<TailConfig>,
    pub entropy: Option<EntropyConfig>,
    pub gibbs: Option<GibbsConfig>,
    pub spec: Option<SpecConfig>,
    pub contraction: Option<ContractionConfig>,
    #[serde(default)]
    pub check: BTreeMap<String, CheckRule>,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Line (1-based) of `key = …` inside `[section]` (top level for `""`).
pub fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Checker<'a> {
    text: &'a str,
}

impl Checker<'_> {
    fn fail(&self, section: &str, key: &str, msg: impl fmt::Display) -> Error {
        let name = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        match locate(self.text, section, key) {
            Some(line) => Error::Config(format!("line {line}: `{name}`: {msg}")),
            None => Error::Config(format!("`{name}`: {msg}")),
        }
    }

    fn samples(&self, section: &str, key: &str, v: usize) -> Result<()> {
        if v < MIN_SAMPLES {
            return Err(self.fail(section, key, format!("{v} is below the minimum {MIN_SAMPLES}")));
        }
        Ok(())
    }

    fn grid(&self, section: &str, key: &str, v: &[usize], strict: bool) -> Result<()> {
        if v.is_empty() {
            return Err(self.fail(section, key, "grid must be nonempty"));
        }
        if v.contains(&0) {
            return Err(self.fail(section, key, "grid values must be ≥ 1"));
        }
        if strict && v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(self.fail(section, key, "grid must be strictly increasing"));
        }
        Ok(())
    }

    fn radii(&self, section: &str, key: &str, v: &[f64]) -> Result<()> {
        if v.is_empty() {
            return Err(self.fail(section, key, "grid must be nonempty"));
        }
        if v.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(self.fail(section, key, "radii must be positive and finite"));
        }
        Ok(())
    }

    fn window(&self, section: &str, key: &str, w: &Option<Vec<usize>>) -> Result<()> {
        match w {
            Some(v) if v.len() != 2 || v[0] > v[1] => {
                Err(self.fail(section, key, "window must be [start, end] with start ≤ end"))
            }
            _ => Ok(()),
        }
    }
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    validate(&cfg, text)?;
    Ok(cfg)
}

/// Reads, parses and validates a configuration file; relative paths in it
/// resolve against its directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    let ck = Checker { text };
    cfg.map.build().map_err(|e| ck.fail("map", "family", e))?;
    if cfg.workers == Some(0) {
        return Err(ck.fail("", "workers", "must be ≥ 1"));
    }
    match cfg.sampler.kind.as_str() {
        "lebesgue" => {}
        "orbit" if cfg.sampler.burn_in.is_some() => {}
        "orbit" => return Err(ck.fail("sampler", "kind", "the orbit sampler needs `burn_in`")),
        "points" if cfg.sampler.file.is_some() => {}
        "points" => return Err(ck.fail("sampler", "kind", "the points sampler needs `file`")),
        other => return Err(ck.fail("sampler", "kind", format!("unknown sampler `{other}`"))),
    }
    cfg.hyperbolic_params(None).map_err(|e| ck.fail("hyperbolic", "sigma", e))?;
    let section = cfg.kind.section();
    let missing = || Error::Config(format!("kind `{}` needs a [{section}] section", cfg.kind));
    match cfg.kind {
        Kind::Deviation | Kind::Bounds => {
            let d = cfg.deviation.as_ref().ok_or_else(missing)?;
            ck.samples(section, "samples", d.samples)?;
            ck.grid(section, "n", &d.n, true)?;
            ck.window(section, "window", &d.window)?;
            ck.window(section, "tail_window", &d.tail_window)?;
            if let Some(s) = d.psi_samples {
                ck.samples(section, "psi_samples", s)?;
            }
            if d.psi_n == Some(0) {
                return Err(ck.fail(section, "psi_n", "must be ≥ 1"));
            }
            if !d.level.is_finite() {
                return Err(ck.fail(section, "level", "must be finite"));
            }
            if matches!(&d.t_grid, Some(t) if t.is_empty() || t.iter().any(|v| !v.is_finite())) {
                return Err(ck.fail(section, "t_grid", "must be a nonempty list of finite values"));
            }
            if !(d.slack >= 0.0) {
                return Err(ck.fail(section, "slack", "must be nonnegative"));
            }
            cfg.observable(None).map_err(|e| ck.fail(section, "observable", e))?;
        }
        Kind::Tail => {
            let t = cfg.tail.as_ref().ok_or_else(missing)?;
            ck.samples(section, "samples", t.samples)?;
            ck.window(section, "window", &t.window)?;
        }
        Kind::Entropy => {
            let e = cfg.entropy.as_ref().ok_or_else(missing)?;
            ck.samples(section, "samples", e.samples)?;
            ck.grid(section, "n", &e.n, true)?;
            ck.radii(section, "epsilon", &e.epsilon)?;
            if e.n.len() < 3 || e.epsilon.len() < 3 {
                return Err(ck.fail(section, "n", "Katok entropy needs ≥ 3 values of n and of epsilon"));
            }
            if !(0.0..1.0).contains(&e.delta) {
                return Err(ck.fail(section, "delta", "must lie in [0, 1)"));
            }
        }
        Kind::Gibbs => {
            let g = cfg.gibbs.as_ref().ok_or_else(missing)?;
            ck.samples(section, "samples", g.samples)?;
            ck.radii(section, "epsilon", &[g.epsilon])?;
            if g.n.is_empty() {
                return Err(ck.fail(section, "n", "grid must be nonempty"));
            }
            if let Some(beta) = g.beta {
                if !(beta > 0.0) {
                    return Err(ck.fail(section, "beta", "must be positive"));
                }
                match &g.delta_n {
                    Some(v) => ck.grid(section, "delta_n", v, true)?,
                    None => return Err(ck.fail(section, "beta", "needs a `delta_n` grid")),
                }
                ck.samples(section, "delta_samples", g.delta_samples)?;
            }
        }
        Kind::Spec => {
            let s = cfg.spec.as_ref().ok_or_else(missing)?;
            ck.samples(section, "samples", s.samples)?;
            ck.radii(section, "epsilon", &s.epsilon)?;
            ck.grid(section, "n", &s.n, true)?;
            if s.exactness_grid == 0 {
                return Err(ck.fail(section, "exactness_grid", "must be ≥ 1"));
            }
        }
        Kind::Contraction | Kind::Distortion => {
            let c = cfg.contraction.as_ref().ok_or_else(missing)?;
            if c.points == 0 || c.pairs == 0 || c.pilot == 0 || c.pilot_pairs == 0 {
                return Err(ck.fail(section, "points", "point and pair counts must be ≥ 1"));
            }
            if let Some(r) = c.delta1 {
                ck.radii(section, "delta1", &[r])?;
            }
            if !(0.0..=1.0).contains(&c.min_pass) {
                return Err(ck.fail(section, "min_pass", "must lie in [0, 1]"));
            }
        }
    }
    for (key, rule) in &cfg.check {
        if rule.min.is_none() && rule.max.is_none() && rule.equals.is_none() {
            return Err(ck.fail("check", key, "needs `min`, `max` or `equals`"));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Hyperbolic-time parameters: family defaults overridden per key; the
    /// horizon falls back to `fallback_horizon`, then 1000.
    pub fn hyperbolic_params(&self, fallback_horizon: Option<usize>) -> Result<HyperbolicParams> {
        let h = &self.hyperbolic;
        let base = HyperbolicParams::default_for(&self.map, h.horizon.or(fallback_horizon).unwrap_or(1_000));
        let p = HyperbolicParams {
            sigma: h.sigma.unwrap_or(base.sigma),
            delta: h.delta.unwrap_or(base.delta),
            b: h.b.unwrap_or(base.b),
            horizon: base.horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn sampler(&self) -> Result<Sampler> {
        match self.sampler.kind.as_str() {
            "orbit" => Ok(Sampler::Orbit { burn_in: self.sampler.burn_in.unwrap_or(0) }),
            "points" => {
                let file = self.sampler.file.as_ref().ok_or_else(|| Error::Config("points sampler needs `file`".into()))?;
                Ok(Sampler::points(read_points(&self.resolve(file))?))
            }
            _ => Ok(Sampler::Lebesgue),
        }
    }

    /// Observable from the registry, or piecewise-linear from inline knots
    /// or a knots file.
    pub fn observable(&self, map: Option<std::sync::Arc<dyn crate::dynamics::MapSystem>>) -> Result<Observable> {
        let d = self.deviation.as_ref().ok_or_else(|| Error::Config("no [deviation] section".into()))?;
        match d.observable.as_str() {
            "indicator_half" => Ok(Observable::indicator_half()),
            "cos2pi" => Ok(Observable::cos2pi()),
            "identity" => Ok(Observable::identity()),
            "log_deriv" => Ok(Observable::log_derivative(match map {
                Some(m) => m,
                None => self.map.build()?,
            })),
            "piecewise_linear" => {
                let knots: Vec<(f64, f64)> = match (&d.knots, &d.knots_file) {
                    (Some(k), None) => k.iter().map(|p| (p[0], p[1])).collect(),
                    (None, Some(f)) => read_pairs(&self.resolve(f))?,
                    _ => return Err(Error::Config("piecewise_linear needs exactly one of `knots`, `knots_file`".into())),
                };
                Observable::piecewise_linear(knots)
            }
            other => Err(Error::Config(format!(
                "unknown observable `{other}`; expected one of {}",
                OBSERVABLES.iter().map(|o| o.0).collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

/// Observable registry names and descriptions.
pub const OBSERVABLES: &[(&str, &str)] = &[
    ("indicator_half", "1 on [0, 1/2), 0 elsewhere (discontinuous)"),
    ("cos2pi", "cos 2πx"),
    ("identity", "x"),
    ("log_deriv", "log |det Df(x)|, singular on the critical set"),
    ("piecewise_linear", "interpolated from `knots = [[x, y], …]` or `knots_file`"),
];

fn numbers(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_points(path: &Path) -> Result<Vec<Point>> {
    let pts = numbers(path)?
        .into_iter()
        .map(|r| match r.as_slice() {
            [x] => Ok(Point::new(*x)),
            [t, x] => Ok(Point::cylinder(*t, *x)),
            _ => Err(Error::Config(format!("{}: expected `x` or `theta x` per line", path.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    if pts.is_empty() {
        return Err(Error::Config(format!("{}: no points", path.display())));
    }
    Ok(pts)
}

fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    numbers(path)?
        .into_iter()
        .map(|r| match r.as_slice() {
            [x, y] => Ok((*x, *y)),
            _ => Err(Error::Config(format!("{}: expected `x y` per line", path.display()))),
        })
        .collect()
}
