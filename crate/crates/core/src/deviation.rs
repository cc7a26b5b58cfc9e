//! Monte Carlo deviation probabilities, their exponential rates, the
//! Legendre-transform reference rate and the bound comparison harness.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{MapSystem, Observable, Point};
use crate::error::{Error, Result};
use crate::gibbs::{ball_measure, MassMode};
use crate::hyperbolic::{classify_tail, TailCurve, TailKind};
use crate::metric::BallSpec;
use crate::parallel::map_chunks;
use crate::rng::StreamKey;
use crate::sampler::Sampler;
use crate::stats::{json_float, line_fit, wilson, LogSumExp, Z95};

/// Minimum samples per deviation estimate.
pub const MIN_SAMPLES: usize = 1_000;

/// Ties between `S_n g / n` and `c` within this tolerance count as equal.
pub const LEVEL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `S_n g / n ≥ c`
    AtLeast,
    /// `S_n g / n > c`
    Above,
}

impl Direction {
    pub fn test(self, average: f64, level: f64) -> bool {
        match self {
            Direction::AtLeast => average >= level - LEVEL_TOL,
            Direction::Above => average > level + LEVEL_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviationExperiment {
    pub map: Arc<dyn MapSystem>,
    pub observable: Observable,
    pub level: f64,
    pub direction: Direction,
    pub sampler: Sampler,
    pub n_grid: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

impl DeviationExperiment {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        map: Arc<dyn MapSystem>,
        observable: Observable,
        level: f64,
        direction: Direction,
        sampler: Sampler,
        n_grid: Vec<usize>,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_grid.is_empty() || n_grid[0] == 0 || n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n grid must be nonempty, positive and strictly increasing".into()));
        }
        if samples < MIN_SAMPLES {
            return Err(Error::Config(format!("samples = {samples} is below the minimum {MIN_SAMPLES}")));
        }
        if !level.is_finite() {
            return Err(Error::Config("level c must be finite".into()));
        }
        Ok(Self { map, observable, level, direction, sampler, n_grid, samples, seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub hits: u64,
    pub samples: u64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `(1/n) log p̂`; `-inf` on zero-hit rows.
    #[serde(with = "json_float")]
    pub log_rate: f64,
    /// Zero-hit row, excluded from regressions.
    pub flagged: bool,
}

impl RateRow {
    fn new(n: usize, hits: u64, samples: u64) -> Self {
        let p_hat = hits as f64 / samples as f64;
        let (ci_low, ci_high) = wilson(hits, samples, Z95);
        let log_rate = if hits == 0 { f64::NEG_INFINITY } else { p_hat.ln() / n as f64 };
        Self { n, hits, samples, p_hat, ci_low, ci_high, log_rate, flagged: hits == 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCurve {
    pub map: String,
    pub observable: String,
    pub observable_continuous: bool,
    pub level: f64,
    pub direction: Direction,
    pub sampler: String,
    pub rows: Vec<RateRow>,
}

/// Fraction of sampled `x` whose average `S_n g(x)/n` lies beyond `c`,
/// with its Wilson 95% interval. Each `n` draws from its own stream.
pub fn deviation_probability(exp: &DeviationExperiment, n: usize) -> Result<RateRow> {
    if n == 0 {
        return Err(Error::Parameter("deviation probability needs n ≥ 1".into()));
    }
    let key = StreamKey::new(exp.seed, "deviation").child(n as u64);
    let map = exp.map.as_ref();
    let parts = map_chunks(exp.samples, |chunk, _, len| -> Result<u64> {
        let mut rng = key.stream(chunk);
        let mut hits = 0u64;
        for _ in 0..len {
            let x = exp.sampler.draw(map, &mut rng);
            let s = birkhoff_fast(map, &exp.observable, x, n)?;
            if exp.direction.test(s / n as f64, exp.level) {
                hits += 1;
            }
        }
        Ok(hits)
    });
    let mut hits = 0;
    for p in parts {
        hits += p?;
    }
    Ok(RateRow::new(n, hits, exp.samples as u64))
}

/// Birkhoff sum without the domain pre-check; samplers always land in the
/// domain.
fn birkhoff_fast<M: MapSystem + ?Sized>(map: &M, g: &Observable, x: Point, n: usize) -> Result<f64> {
    let mut p = x;
    let mut s = 0.0;
    for j in 0..n {
        let v = g.eval(p);
        if !v.is_finite() {
            return Err(Error::Evaluation { index: j });
        }
        s += v;
        if j + 1 < n {
            p = map.apply(p);
        }
    }
    Ok(s)
}

pub fn rate_curve(exp: &DeviationExperiment) -> Result<RateCurve> {
    let rows = exp.n_grid.iter().map(|&n| deviation_probability(exp, n)).collect::<Result<Vec<_>>>()?;
    Ok(RateCurve {
        map: exp.map.label(),
        observable: exp.observable.label().to_string(),
        observable_continuous: exp.observable.is_continuous(),
        level: exp.level,
        direction: exp.direction,
        sampler: exp.sampler.label(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub slope: f64,
    pub slope_se: f64,
    pub rows_used: usize,
    pub window: (usize, usize),
}

/// Least-squares slope of `log p̂` against `n` over unflagged rows with `n`
/// in the inclusive window.
pub fn rate_estimate(curve: &RateCurve, window: (usize, usize)) -> Result<RateEstimate> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = curve
        .rows
        .iter()
        .filter(|r| !r.flagged && r.n >= window.0 && r.n <= window.1)
        .map(|r| (r.n as f64, r.p_hat.ln()))
        .unzip();
    if xs.len() < 3 {
        return Err(Error::Config(format!(
            "rate estimate needs ≥ 3 unflagged rows in [{}, {}], found {}",
            window.0,
            window.1,
            xs.len()
        )));
    }
    let fit = line_fit(&xs, &ys).ok_or_else(|| Error::Config("degenerate rate window".into()))?;
    Ok(RateEstimate { slope: fit.slope, slope_se: fit.slope_se, rows_used: xs.len(), window })
}

/// `S_n g` for `samples` points drawn from the `(seed, n)` free-energy stream.
pub fn birkhoff_samples<M: MapSystem + ?Sized>(
    map: &M,
    sampler: &Sampler,
    g: &Observable,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Parameter("free energy needs n ≥ 1".into()));
    }
    let key = StreamKey::new(seed, "free_energy").child(n as u64);
    let parts = map_chunks(samples, |chunk, _, len| -> Result<Vec<f64>> {
        let mut rng = key.stream(chunk);
        (0..len).map(|_| birkhoff_fast(map, g, sampler.draw(map, &mut rng), n)).collect()
    });
    let mut out = Vec::with_capacity(samples);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `(1/n) log mean exp(t S_n g)` over precomputed sums, accumulated in
/// log-sum-exp form chunk by chunk.
pub fn free_energy_of(sums: &[f64], t: f64, n: usize) -> Result<f64> {
    let mut acc = LogSumExp::default();
    for chunk in sums.chunks(crate::rng::CHUNK_SIZE) {
        let mut part = LogSumExp::default();
        chunk.iter().for_each(|s| part.push(t * s));
        acc.merge(&part);
    }
    let v = acc.log_mean() / n as f64;
    if !v.is_finite() {
        return Err(Error::Range(format!("free energy at t = {t} is not finite")));
    }
    Ok(v)
}

pub fn free_energy<M: MapSystem + ?Sized>(
    map: &M,
    sampler: &Sampler,
    g: &Observable,
    t: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    free_energy_of(&birkhoff_samples(map, sampler, g, n, samples, seed)?, t, n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsiTable {
    pub n: usize,
    pub samples: usize,
    pub t: Vec<f64>,
    pub psi: Vec<f64>,
    /// Sample mean of `S_n g / n`, the slope of ψ̂ at 0.
    pub mean: f64,
}

/// ψ̂ on a `t` grid, every entry using the same samples, so the table is
/// convex in `t` up to rounding.
pub fn psi_table<M: MapSystem + ?Sized>(
    map: &M,
    sampler: &Sampler,
    g: &Observable,
    t_grid: &[f64],
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<PsiTable> {
    let sums = birkhoff_samples(map, sampler, g, n, samples, seed)?;
    let psi = t_grid.iter().map(|&t| free_energy_of(&sums, t, n)).collect::<Result<Vec<_>>>()?;
    let mean = sums.iter().sum::<f64>() / (sums.len() as f64 * n as f64);
    Ok(PsiTable { n, samples, t: t_grid.to_vec(), psi, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LegendreRate {
    pub level: f64,
    pub rate: f64,
    pub t_star: f64,
    /// The maximiser sits at an end of the grid, so the grid may not span
    /// the sign change of ψ′ − c.
    pub boundary: bool,
}

/// `I(c) = max over the grid of (t c − ψ(t))`.
pub fn legendre_rate(t: &[f64], psi: &[f64], level: f64) -> Result<LegendreRate> {
    if t.is_empty() || t.len() != psi.len() {
        return Err(Error::Config("Legendre transform needs a nonempty ψ table".into()));
    }
    let (i, rate) = t
        .iter()
        .zip(psi)
        .map(|(t, p)| t * level - p)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    Ok(LegendreRate { level, rate, t_star: t[i], boundary: i == 0 || i + 1 == t.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelativeEntropy {
    /// `−(1/n) log ν̂(B(x, n, ε))` per point; `None` on zero-mass points.
    pub per_point: Vec<Option<f64>>,
    pub max: f64,
    pub mean: f64,
    pub flagged: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn relative_entropy_estimate<M: MapSystem + ?Sized>(
    map: &M,
    nu: &Sampler,
    eta: &[Point],
    n: usize,
    eps: f64,
    samples: usize,
    seed: u64,
    mode: MassMode,
) -> Result<RelativeEntropy> {
    let mut per_point = Vec::with_capacity(eta.len());
    for (i, x) in eta.iter().enumerate() {
        let spec = BallSpec::new(*x, n, eps)?;
        let mass = ball_measure(map, nu, &spec, samples, seed.wrapping_add(i as u64), mode)?;
        per_point.push((mass.hits > 0).then(|| -mass.mass.ln() / n.max(1) as f64));
    }
    let good: Vec<f64> = per_point.iter().flatten().copied().collect();
    let flagged = per_point.len() - good.len();
    let max = good.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = if good.is_empty() { f64::NAN } else { good.iter().sum::<f64>() / good.len() as f64 };
    Ok(RelativeEntropy { per_point, max, mean, flagged })
}

/// Exponential decay rate of the hyperbolic-time tail, as fed to the bound
/// comparison: `-inf` when no sampled point lacks a first hyperbolic time at
/// `n = 1`, the semilog slope for exponential tails, 0 for polynomial ones.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRate {
    pub map: String,
    #[serde(with = "json_float")]
    pub rate: f64,
    pub kind: Option<TailKind>,
}

impl TailRate {
    pub fn from_curve(map: &str, curve: &TailCurve, window: (usize, usize)) -> Result<Self> {
        if curve.rows.first().is_none_or(|r| r.survivors == 0) {
            return Ok(Self { map: map.into(), rate: f64::NEG_INFINITY, kind: None });
        }
        let fit = classify_tail(curve, window)?;
        let rate = match fit.kind {
            TailKind::Exponential => fit.semilog.slope.min(0.0),
            TailKind::Polynomial => 0.0,
        };
        Ok(Self { map: map.into(), rate, kind: Some(fit.kind) })
    }

    /// The `Γ_n ≡ ∅` sentinel.
    pub fn empty(map: &str) -> Self {
        Self { map: map.into(), rate: f64::NEG_INFINITY, kind: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub map: String,
    pub observable: String,
    pub observable_continuous: bool,
    pub level: f64,
    pub measured_rate: f64,
    pub measured_rate_se: f64,
    #[serde(with = "json_float")]
    pub tail_rate: f64,
    /// `−I(c)`, standing in for the variational supremum.
    pub legendre_rate: f64,
    pub legendre_boundary: bool,
    #[serde(with = "json_float")]
    pub upper_bound: f64,
    pub upper_ok: bool,
    pub lower_ok: bool,
    pub slack: f64,
    pub verdict: String,
    pub proxy: String,
}

/// Default slack on both inequalities.
pub const BOUND_SLACK: f64 = 0.02;

/// Compares the measured rate with `max(tail rate, −I(c))` from above and
/// `−I(c)` from below.
pub fn bound_report(
    curve: &RateCurve,
    measured: &RateEstimate,
    tail: &TailRate,
    legendre: &LegendreRate,
    slack: f64,
) -> Result<BoundReport> {
    if tail.map != curve.map {
        return Err(Error::Config(format!(
            "tail rate belongs to {} but the deviation curve to {}",
            tail.map, curve.map
        )));
    }
    if (legendre.level - curve.level).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "Legendre rate is at c = {} but the deviation curve at c = {}",
            legendre.level, curve.level
        )));
    }
    let lower = -legendre.rate;
    let upper = tail.rate.max(lower);
    let upper_ok = measured.slope <= upper + slack;
    let lower_ok = measured.slope >= lower - slack;
    let verdict = if upper >= -1e-12 {
        "uninformative upper bound"
    } else if upper_ok && lower_ok {
        "pass"
    } else {
        "fail"
    };
    Ok(BoundReport {
        map: curve.map.clone(),
        observable: curve.observable.clone(),
        observable_continuous: curve.observable_continuous,
        level: curve.level,
        measured_rate: measured.slope,
        measured_rate_se: measured.slope_se,
        tail_rate: tail.rate,
        legendre_rate: lower,
        legendre_boundary: legendre.boundary,
        upper_bound: upper,
        upper_ok,
        lower_ok,
        slack,
        verdict: verdict.into(),
        proxy: "variational supremum replaced by -I(c) from the Legendre transform of the sampled free energy".into(),
    })
}
