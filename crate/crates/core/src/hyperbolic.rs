//! Detection of (σ, δ)-hyperbolic times along orbits and the statistics built
//! on them: first-time tails, Pliss densities, lag ratios.
//!
//! A time `n` is hyperbolic for `x` when, for every `1 ≤ k ≤ n`,
//! `∏_{j=n-k}^{n-1} ‖Df(fʲx)⁻¹‖ ≤ σ^{-k}` and
//! `dist_δ(f^{n-k}x, C) > σ^{-bk}`. Both families of suffix conditions reduce
//! to running minima of prefix sums, so a scan over `n = 1..N` costs `O(N)`.

use serde::Serialize;

use crate::dynamics::{inverse_norm_checked, truncated_distance, MapSystem, Point};
use crate::error::{Error, Result};
use crate::parallel::map_chunks;
use crate::rng::StreamKey;
use crate::sampler::Sampler;
use crate::stats::{line_fit, wilson, LineFit, Z95};
use crate::zoo::FamilyParams;

/// Relative tolerance used in both hyperbolicity comparisons; ties count as
/// passing.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HyperbolicParams {
    pub sigma: f64,
    pub delta: f64,
    pub b: f64,
    /// Orbit horizon `N_max`.
    pub horizon: usize,
}

impl HyperbolicParams {
    pub fn new(sigma: f64, delta: f64, b: f64, horizon: usize) -> Result<Self> {
        let p = Self { sigma, delta, b, horizon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 1.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("σ={} must exceed 1", self.sigma)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Parameter(format!("δ={} must be positive", self.delta)));
        }
        if !(self.b > 0.0 && self.b < 0.5) {
            return Err(Error::Parameter(format!("b={} outside (0, 1/2)", self.b)));
        }
        Ok(())
    }

    /// Per-family defaults; `horizon` is left to the caller.
    pub fn default_for(family: &FamilyParams, horizon: usize) -> Self {
        match family {
            FamilyParams::Quadratic { .. } | FamilyParams::Viana { .. } => {
                Self { sigma: 0.2f64.exp(), delta: 0.05, b: 0.25, horizon }
            }
            FamilyParams::MannevillePomeau { .. } => Self { sigma: 1.2, delta: 0.1, b: 0.25, horizon },
            FamilyParams::Doubling | FamilyParams::PerturbedExpanding { .. } => {
                Self { sigma: 1.4, delta: 0.1, b: 0.25, horizon }
            }
        }
    }
}

#[inline]
fn le_tol(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + TIE_TOL * (1.0 + lhs.abs().max(rhs.abs()))
}

#[inline]
fn gt_tol(lhs: f64, rhs: f64) -> bool {
    lhs > rhs - TIE_TOL * (1.0 + lhs.abs().max(rhs.abs()))
}

/// Incremental hyperbolic-time detector along one orbit.
pub struct HyperbolicScanner<'m, M: MapSystem + ?Sized> {
    map: &'m M,
    params: HyperbolicParams,
    log_sigma: f64,
    cur: Point,
    n: usize,
    /// `Σ_{j<n} (log ‖Df(fʲx)⁻¹‖ + log σ)`.
    prefix: f64,
    /// Minimum of the prefix over `0..=n`.
    min_prefix: f64,
    /// Minimum over `m < n` of `log dist_δ(f^m x) − b m log σ`.
    min_dist: f64,
    /// Plain `Σ_{j<n} log ‖Df(fʲx)⁻¹‖`.
    log_cocycle: f64,
}

impl<'m, M: MapSystem + ?Sized> HyperbolicScanner<'m, M> {
    pub fn new(map: &'m M, x: Point, params: HyperbolicParams) -> Self {
        Self {
            map,
            params,
            log_sigma: params.sigma.ln(),
            cur: map.domain().normalize(x),
            n: 0,
            prefix: 0.0,
            min_prefix: 0.0,
            min_dist: f64::INFINITY,
            log_cocycle: 0.0,
        }
    }

    /// Current time `n`.
    pub fn time(&self) -> usize {
        self.n
    }

    /// Current orbit point `fⁿ(x)`.
    pub fn point(&self) -> Point {
        self.cur
    }

    /// `Σ_{j<n} log ‖Df(fʲx)⁻¹‖`.
    pub fn log_cocycle(&self) -> f64 {
        self.log_cocycle
    }

    /// Advances to `n + 1` and reports whether `n + 1` is hyperbolic.
    pub fn advance(&mut self) -> Result<bool> {
        let c = inverse_norm_checked(self.map, self.cur, self.n)?.ln();
        let d = truncated_distance(self.map, self.cur, self.params.delta);
        let dist_term = d.ln() - self.params.b * self.n as f64 * self.log_sigma;
        self.min_dist = self.min_dist.min(dist_term);
        self.log_cocycle += c;
        self.prefix += c + self.log_sigma;
        self.n += 1;
        self.cur = self.map.apply(self.cur);
        let expand_ok = le_tol(self.prefix, self.min_prefix);
        let recur_ok = gt_tol(self.min_dist, -self.params.b * self.n as f64 * self.log_sigma);
        self.min_prefix = self.min_prefix.min(self.prefix);
        Ok(expand_ok && recur_ok)
    }

    /// Advances until the next hyperbolic time, at most to `limit`.
    pub fn next_time(&mut self, limit: usize) -> Result<Option<usize>> {
        while self.n < limit {
            if self.advance()? {
                return Ok(Some(self.n));
            }
        }
        Ok(None)
    }
}

/// Exact check of a single time `n ≥ 1`.
pub fn is_hyperbolic_time<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    n: usize,
    params: &HyperbolicParams,
) -> Result<bool> {
    if n == 0 {
        return Err(Error::Parameter("hyperbolic times start at n = 1".into()));
    }
    let mut scan = HyperbolicScanner::new(map, x, *params);
    let mut last = false;
    for _ in 0..n {
        last = scan.advance()?;
    }
    Ok(last)
}

/// Hyperbolic times of one orbit up to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperbolicTimeRecord {
    pub base: Point,
    pub times: Vec<usize>,
    pub horizon: usize,
    pub none_found: bool,
    /// `Σ_{j<m} log ‖Df(fʲx)⁻¹‖` for `m = 0..=horizon`.
    pub log_cocycle_prefix: Vec<f64>,
}

impl HyperbolicTimeRecord {
    /// Builds a record from given times, e.g. for synthetic lag tests.
    pub fn synthetic(times: Vec<usize>, horizon: usize) -> Self {
        Self {
            base: Point::new(0.0),
            none_found: times.is_empty(),
            times,
            horizon,
            log_cocycle_prefix: Vec::new(),
        }
    }

    pub fn first(&self) -> Option<usize> {
        self.times.first().copied()
    }

    /// Smallest hyperbolic time strictly greater than `n`.
    pub fn next_after(&self, n: usize) -> Option<usize> {
        let i = self.times.partition_point(|&t| t <= n);
        self.times.get(i).copied()
    }

    /// Largest hyperbolic time `≤ n`.
    pub fn last_at_or_before(&self, n: usize) -> Option<usize> {
        let i = self.times.partition_point(|&t| t <= n);
        i.checked_sub(1).map(|i| self.times[i])
    }
}

pub fn hyperbolic_times<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    params: &HyperbolicParams,
) -> Result<HyperbolicTimeRecord> {
    let mut scan = HyperbolicScanner::new(map, x, *params);
    let mut times = Vec::new();
    let mut prefix = Vec::with_capacity(params.horizon + 1);
    prefix.push(0.0);
    for _ in 0..params.horizon {
        if scan.advance()? {
            times.push(scan.time());
        }
        prefix.push(scan.log_cocycle());
    }
    Ok(HyperbolicTimeRecord {
        base: x,
        none_found: times.is_empty(),
        times,
        horizon: params.horizon,
        log_cocycle_prefix: prefix,
    })
}

/// First hyperbolic time, `None` if none up to `limit`.
pub fn first_hyperbolic_time<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    params: &HyperbolicParams,
    limit: usize,
) -> Result<Option<usize>> {
    HyperbolicScanner::new(map, x, *params).next_time(limit)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRow {
    pub n: usize,
    pub survivors: u64,
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Empirical `n ↦ m(Γ_n)` with `Γ_n = {n₁ > n}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailCurve {
    pub rows: Vec<TailRow>,
    pub samples: u64,
    /// Samples whose orbit hit the critical guard; excluded from the counts.
    pub singular: u64,
    /// First `n` with no survivors, after which the curve stops.
    pub truncated_at: Option<usize>,
    pub sampler: String,
}

impl TailCurve {
    pub fn positive_rows(&self) -> impl Iterator<Item = &TailRow> {
        self.rows.iter().filter(|r| r.survivors > 0)
    }
}

pub fn tail_curve<M: MapSystem + ?Sized>(
    map: &M,
    sampler: &Sampler,
    params: &HyperbolicParams,
    samples: usize,
    seed: u64,
) -> Result<TailCurve> {
    params.validate()?;
    let key = StreamKey::new(seed, "tail");
    let horizon = params.horizon;
    let parts = map_chunks(samples, |chunk, _, len| {
        let mut rng = key.stream(chunk);
        let mut hist = vec![0u64; horizon + 2];
        let mut singular = 0u64;
        for _ in 0..len {
            let x = sampler.draw(map, &mut rng);
            match first_hyperbolic_time(map, x, params, horizon) {
                Ok(Some(n1)) => hist[n1] += 1,
                Ok(None) => hist[horizon + 1] += 1,
                Err(_) => singular += 1,
            }
        }
        (hist, singular)
    });
    let mut hist = vec![0u64; horizon + 2];
    let mut singular = 0;
    for (h, s) in parts {
        hist.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        singular += s;
    }
    let valid: u64 = hist.iter().sum();
    let mut rows = Vec::new();
    let mut survivors = valid;
    let mut truncated_at = None;
    for n in 1..=horizon {
        survivors -= hist[n];
        let (lo, hi) = wilson(survivors, valid, Z95);
        rows.push(TailRow {
            n,
            survivors,
            fraction: if valid > 0 { survivors as f64 / valid as f64 } else { 0.0 },
            ci_low: lo,
            ci_high: hi,
        });
        if survivors == 0 {
            truncated_at = Some(n);
            break;
        }
    }
    Ok(TailCurve { rows, samples: samples as u64, singular, truncated_at, sampler: sampler.label() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    Exponential,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub kind: TailKind,
    /// Slope of `log p` against `n`.
    pub semilog: LineFit,
    /// Slope of `log p` against `log n`.
    pub loglog: LineFit,
    pub window: (usize, usize),
}

impl TailFit {
    pub fn exponential_rate(&self) -> f64 {
        self.semilog.slope
    }

    pub fn polynomial_exponent(&self) -> f64 {
        self.loglog.slope
    }
}

/// Fits semilog and log-log models to `(n, p)` pairs with `p > 0` and
/// `n` in the window; the kind with the smaller RMS residual wins.
pub fn classify_points(points: &[(f64, f64)], window: (usize, usize)) -> Result<TailFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(n, p)| *p > 0.0 && *n >= window.0 as f64 && *n <= window.1 as f64 && *n > 0.0)
        .collect();
    if pts.len() < 8 {
        return Err(Error::Config(format!(
            "tail classification needs ≥ 8 positive points in the window, got {}",
            pts.len()
        )));
    }
    let logp: Vec<f64> = pts.iter().map(|(_, p)| p.ln()).collect();
    let ns: Vec<f64> = pts.iter().map(|(n, _)| *n).collect();
    let logn: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let semilog = line_fit(&ns, &logp).ok_or_else(|| Error::Config("degenerate tail window".into()))?;
    let loglog = line_fit(&logn, &logp).ok_or_else(|| Error::Config("degenerate tail window".into()))?;
    let kind = if semilog.rms_residual <= loglog.rms_residual {
        TailKind::Exponential
    } else {
        TailKind::Polynomial
    };
    Ok(TailFit { kind, semilog, loglog, window })
}

pub fn classify_tail(curve: &TailCurve, window: (usize, usize)) -> Result<TailFit> {
    let pts: Vec<(f64, f64)> = curve.positive_rows().map(|r| (r.n as f64, r.fraction)).collect();
    classify_points(&pts, window)
}

/// Fraction of `1..=n_total` that are hyperbolic times for `x`.
pub fn pliss_density<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    n_total: usize,
    params: &HyperbolicParams,
) -> Result<f64> {
    if n_total == 0 {
        return Ok(0.0);
    }
    let mut scan = HyperbolicScanner::new(map, x, *params);
    let mut count = 0usize;
    for _ in 0..n_total {
        if scan.advance()? {
            count += 1;
        }
    }
    Ok(count as f64 / n_total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagStats {
    /// `max (n_{i+1} − n_i)/n_i` over consecutive times with `n_i ≥ window_start`.
    pub max_gap_ratio: f64,
    /// `max (n − n_i(n))/n` over `n` in the window, `n_i(n)` the last time `≤ n`.
    pub max_tail_ratio: f64,
    pub window: (usize, usize),
    pub insufficient: bool,
}

pub fn lag_statistic_of(record: &HyperbolicTimeRecord, window_start: usize) -> LagStats {
    let window = (window_start.max(1), record.horizon);
    let t = &record.times;
    if t.len() < 2 {
        return LagStats { max_gap_ratio: f64::NAN, max_tail_ratio: f64::NAN, window, insufficient: true };
    }
    let max_gap_ratio = t
        .windows(2)
        .filter(|w| w[0] >= window.0)
        .map(|w| (w[1] - w[0]) as f64 / w[0] as f64)
        .fold(0.0, f64::max);
    let mut max_tail_ratio = 0.0f64;
    for n in window.0..=window.1 {
        let ratio = match record.last_at_or_before(n) {
            Some(ni) => (n - ni) as f64 / n as f64,
            None => 1.0,
        };
        max_tail_ratio = max_tail_ratio.max(ratio);
    }
    LagStats { max_gap_ratio, max_tail_ratio, window, insufficient: false }
}

pub fn lag_statistic<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    n_total: usize,
    params: &HyperbolicParams,
    window_start: usize,
) -> Result<LagStats> {
    let p = HyperbolicParams { horizon: n_total, ..*params };
    Ok(lag_statistic_of(&hyperbolic_times(map, x, &p)?, window_start))
}
