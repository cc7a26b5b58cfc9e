//! Dynamical-ball masses, weak-Gibbs constants and their growth, and the
//! hyperbolic-time surrogate for the sets where the Gibbs constants are
//! small.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{MapSystem, Point, PotentialModel};
use crate::error::{Error, Result};
use crate::hyperbolic::{hyperbolic_times, HyperbolicParams, HyperbolicScanner};
use crate::interval::IntervalSet;
use crate::metric::{BallSpec, DynamicalBall};
use crate::parallel::map_chunks;
use crate::rng::StreamKey;
use crate::sampler::Sampler;
use crate::stats::{json_float, line_fit, percentile, wilson, Z95};

/// Below this many hits a mass estimate is flagged as starved.
pub const MIN_HITS: u64 = 10;

/// `Auto` counts hits directly when at least this many are expected.
const DIRECT_EXPECTED_HITS: f64 = 1_000.0;

/// How ball masses are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMode {
    /// Fraction of ν-samples that land in the ball.
    Direct,
    /// Lebesgue samples restricted to a window known to contain the ball,
    /// rescaled by the window's measure. Needs a one-dimensional map with
    /// inverse branches.
    Localized,
    /// Direct when enough hits are expected, localized otherwise (and when
    /// possible).
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallMass {
    pub mass: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub hits: u64,
    pub samples: u64,
    /// ν-measure of the sampling region (1 for direct counting).
    pub window: f64,
    pub localized: bool,
    /// Fewer than `MIN_HITS` hits.
    pub starved: bool,
}

/// Preimage of an x-interval set under every inverse branch.
pub fn preimage_set<M: MapSystem + ?Sized>(map: &M, set: &IntervalSet) -> IntervalSet {
    let inv = |k: usize, y: f64, inward: f64| {
        map.branch_inverse(k, y).or_else(|| map.branch_inverse(k, y + inward))
    };
    let mut parts = Vec::new();
    for &(u, v) in set.parts() {
        let nudge = 1e-12 * (v - u).max(1e-300);
        for k in 0..map.branch_count() {
            if let (Some(a), Some(b)) = (inv(k, u, nudge), inv(k, v, -nudge)) {
                parts.push((a.min(b), a.max(b)));
            }
        }
    }
    IntervalSet::from_parts(parts)
}

/// `B(x, n, ε)` as an interval set, by pulling the last ball back through
/// all inverse branches and intersecting with each earlier ball. `None` for
/// maps without the needed capability.
pub fn ball_as_intervals<M: MapSystem + ?Sized>(map: &M, spec: &BallSpec) -> Option<IntervalSet> {
    let dom = map.domain();
    if !dom.is_one_dimensional() || map.branch_count() == 0 {
        return None;
    }
    let ball = DynamicalBall::new(map, *spec);
    let orbit = ball.center_orbit();
    let mut set = dom.ball_1d(orbit[spec.depth].x, spec.radius);
    for j in (0..spec.depth).rev() {
        set = dom.ball_1d(orbit[j].x, spec.radius).intersect(&preimage_set(map, &set));
        if set.is_empty() {
            break;
        }
    }
    Some(set)
}

/// Widens every component by 5% of its length on both sides, and by at
/// least a few ulps, clipped to the domain.
pub(crate) fn widen<M: MapSystem + ?Sized>(map: &M, set: &IntervalSet) -> IntervalSet {
    let dom = map.domain();
    let (lo, hi) = dom.x_range();
    let mut parts = Vec::new();
    for &(a, b) in set.parts() {
        let pad = (0.05 * (b - a)).max(8.0 * f64::EPSILON * a.abs().max(b.abs()).max(1e-300));
        if dom.is_circle() {
            parts.extend(crate::interval::circle_arc(a - pad, b + pad).parts().iter().copied());
        } else {
            parts.push(((a - pad).max(lo), (b + pad).min(hi)));
        }
    }
    IntervalSet::from_parts(parts)
}

fn draw_in_set<R: Rng + ?Sized>(set: &IntervalSet, rng: &mut R) -> f64 {
    let total = set.measure();
    let mut u = rng.random::<f64>() * total;
    for &(a, b) in set.parts() {
        let len = b - a;
        if u <= len {
            return a + u;
        }
        u -= len;
    }
    set.parts().last().map(|p| p.1).unwrap_or(0.0)
}

/// Estimates `ν(B(x, n, ε))` by hit counting.
pub fn ball_measure<M: MapSystem + ?Sized>(
    map: &M,
    nu: &Sampler,
    spec: &BallSpec,
    samples: usize,
    seed: u64,
    mode: MassMode,
) -> Result<BallMass> {
    if samples == 0 {
        return Err(Error::Parameter("ball measure needs samples ≥ 1".into()));
    }
    let ball = DynamicalBall::new(map, *spec);
    let key = StreamKey::new(seed, "ball_mass");
    let dom = map.domain();
    let (lo, hi) = dom.x_range();
    let window = match mode {
        MassMode::Direct => None,
        MassMode::Localized | MassMode::Auto => {
            let exact = if nu.is_lebesgue() { ball_as_intervals(map, spec) } else { None };
            match (mode, exact) {
                (MassMode::Localized, None) => {
                    return Err(Error::Capability {
                        map: map.label(),
                        capability: "localized ball sampling (Lebesgue, 1D, inverse branches)",
                    })
                }
                (MassMode::Auto, Some(set))
                    if samples as f64 * set.measure() / (hi - lo) >= DIRECT_EXPECTED_HITS =>
                {
                    None
                }
                (_, set) => set.map(|s| widen(map, &s)),
            }
        }
    };
    let counts = match &window {
        None => map_chunks(samples, |chunk, _, len| {
            let mut rng = key.stream(chunk);
            (0..len).filter(|_| ball.contains(map, nu.draw(map, &mut rng))).count() as u64
        }),
        Some(w) if w.is_empty() => vec![0],
        Some(w) => map_chunks(samples, |chunk, _, len| {
            let mut rng = key.stream(chunk);
            (0..len).filter(|_| ball.contains(map, Point::new(draw_in_set(w, &mut rng)))).count() as u64
        }),
    };
    let hits: u64 = counts.iter().sum();
    let frac = window.as_ref().map_or(1.0, |w| w.measure() / (hi - lo));
    let (cl, ch) = wilson(hits, samples as u64, Z95);
    Ok(BallMass {
        mass: frac * hits as f64 / samples as f64,
        ci_low: frac * cl,
        ci_high: frac * ch,
        hits,
        samples: samples as u64,
        window: frac,
        localized: window.is_some(),
        starved: hits < MIN_HITS,
    })
}

/// `K̂ = max(r, 1/r)` with `r = mass · e^{Pn − S_nφ(x)}`; `None` when the
/// mass is zero.
pub fn gibbs_constant<M: MapSystem + ?Sized>(
    map: &M,
    potential: &PotentialModel,
    x: Point,
    n: usize,
    mass: f64,
) -> Result<Option<f64>> {
    if mass <= 0.0 {
        return Ok(None);
    }
    let snphi = if n == 0 { 0.0 } else { potential.birkhoff(map, x, n)? };
    let log_r = mass.ln() + potential.pressure() * n as f64 - snphi;
    Ok(Some(log_r.abs().exp()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GibbsEntry {
    pub x_id: usize,
    pub x: Point,
    pub n: usize,
    pub mass: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub snphi: f64,
    #[serde(with = "json_float::option")]
    pub k_hat: Option<f64>,
    #[serde(with = "json_float::option")]
    pub log_k_over_n: Option<f64>,
    pub starved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GibbsProbeReport {
    pub epsilon: f64,
    /// Radius of the containing balls; recorded, the mass estimates only use
    /// `epsilon ≤ delta0 / 4`.
    pub delta0: f64,
    pub pressure: f64,
    pub entries: Vec<GibbsEntry>,
    /// `max (1/n) log K̂_n` over entries with `n ≥ 1`.
    #[serde(with = "json_float")]
    pub growth: f64,
    pub undefined: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn gibbs_probe<M: MapSystem + ?Sized>(
    map: &M,
    potential: &PotentialModel,
    nu: &Sampler,
    centres: &[Point],
    n_grid: &[usize],
    eps: f64,
    samples: usize,
    seed: u64,
    mode: MassMode,
) -> Result<GibbsProbeReport> {
    let key = StreamKey::new(seed, "gibbs");
    let mut entries = Vec::new();
    for (i, x) in centres.iter().enumerate() {
        for &n in n_grid {
            let spec = BallSpec::new(*x, n, eps)?;
            let ball_seed: u64 = key.child(i as u64).child(n as u64).stream(0).random();
            let mass = ball_measure(map, nu, &spec, samples, ball_seed, mode)?;
            let snphi = if n == 0 { 0.0 } else { potential.birkhoff(map, *x, n)? };
            let k_hat = gibbs_constant(map, potential, *x, n, mass.mass)?;
            entries.push(GibbsEntry {
                x_id: i,
                x: *x,
                n,
                mass: mass.mass,
                ci_low: mass.ci_low,
                ci_high: mass.ci_high,
                snphi,
                k_hat,
                log_k_over_n: k_hat.filter(|_| n > 0).map(|k| k.ln() / n as f64),
                starved: mass.starved,
            });
        }
    }
    let growth = entries.iter().filter_map(|e| e.log_k_over_n).fold(f64::NEG_INFINITY, f64::max);
    let undefined = entries.iter().filter(|e| e.k_hat.is_none()).count();
    Ok(GibbsProbeReport { epsilon: eps, delta0: 4.0 * eps, pressure: potential.pressure(), entries, growth, undefined })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubexpRow {
    pub x_id: usize,
    pub x: Point,
    #[serde(with = "json_float")]
    pub log_k_first: f64,
    #[serde(with = "json_float")]
    pub log_k_last: f64,
    /// `(log K̂_{n_max} − log K̂_{n_0}) / n_max`
    #[serde(with = "json_float")]
    pub increment: f64,
    /// `(1/n_max) log K̂_{n_max}`
    #[serde(with = "json_float")]
    pub raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubexpReport {
    pub n_first: usize,
    pub n_last: usize,
    pub epsilon: f64,
    pub rows: Vec<SubexpRow>,
    /// Maximum increment over the sampled centres.
    #[serde(with = "json_float")]
    pub statistic: f64,
    /// Maximum of `(1/n_max) log K̂_{n_max}`, which keeps the n-independent
    /// part of the constant.
    #[serde(with = "json_float")]
    pub raw_statistic: f64,
    #[serde(with = "json_float")]
    pub median_increment: f64,
    /// Centres with an undefined constant at either grid end.
    pub flagged: usize,
}

/// Growth of the Gibbs constants between the ends of the `n` grid over
/// centres drawn from `centres`.
#[allow(clippy::too_many_arguments)]
pub fn subexp_check<M: MapSystem + ?Sized>(
    map: &M,
    potential: &PotentialModel,
    centres: &Sampler,
    nu: &Sampler,
    n_grid: &[usize],
    eps: f64,
    centre_count: usize,
    samples: usize,
    seed: u64,
    mode: MassMode,
) -> Result<SubexpReport> {
    let (Some(&n0), Some(&n1)) = (n_grid.iter().min(), n_grid.iter().max()) else {
        return Err(Error::Config("subexponential check needs a nonempty n grid".into()));
    };
    if n1 == 0 || n0 == n1 {
        return Err(Error::Config("subexponential check needs two distinct grid ends".into()));
    }
    let mut rng = StreamKey::new(seed, "subexp_centres").stream(0);
    let xs: Vec<Point> = (0..centre_count).map(|_| centres.draw(map, &mut rng)).collect();
    let report = gibbs_probe(map, potential, nu, &xs, &[n0, n1], eps, samples, seed, mode)?;
    subexp_from_report(&report, n0, n1)
}

/// Growth statistics between two depths already present in a probe report.
pub fn subexp_from_report(report: &GibbsProbeReport, n0: usize, n1: usize) -> Result<SubexpReport> {
    if n1 == 0 || n0 >= n1 {
        return Err(Error::Config("subexponential check needs n₀ < n₁".into()));
    }
    let ids: std::collections::BTreeSet<usize> = report.entries.iter().map(|e| e.x_id).collect();
    let mut rows = Vec::new();
    let mut flagged = 0;
    for i in ids {
        let entry = |n: usize| report.entries.iter().find(|e| e.x_id == i && e.n == n);
        let (Some(first), Some(last)) = (entry(n0), entry(n1)) else {
            return Err(Error::Config(format!("probe report lacks depth {n0} or {n1}")));
        };
        match (first.k_hat, last.k_hat) {
            (Some(a), Some(b)) => rows.push(SubexpRow {
                x_id: i,
                x: first.x,
                log_k_first: a.ln(),
                log_k_last: b.ln(),
                increment: (b.ln() - a.ln()) / n1 as f64,
                raw: b.ln() / n1 as f64,
            }),
            _ => flagged += 1,
        }
    }
    let incs: Vec<f64> = rows.iter().map(|r| r.increment).collect();
    Ok(SubexpReport {
        n_first: n0,
        n_last: n1,
        epsilon: report.epsilon,
        statistic: incs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        raw_statistic: rows.iter().map(|r| r.raw).fold(f64::NEG_INFINITY, f64::max),
        median_increment: percentile(&incs, 0.5).unwrap_or(f64::NAN),
        rows,
        flagged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub n: usize,
    pub violations: u64,
    pub samples: u64,
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaReport {
    pub beta: f64,
    pub c_beta: f64,
    pub sup_phi: f64,
    /// `sup|φ|` was replaced by the 99.9th percentile of sampled `|φ|`.
    pub sup_phi_clipped: bool,
    pub rows: Vec<DeltaRow>,
    /// Semilog slope of the violation fraction; `-inf` when no sample
    /// violates at any `n`.
    #[serde(with = "json_float")]
    pub delta_hat: f64,
    pub delta_hat_se: f64,
    pub singular: u64,
}

const SUP_PHI_SAMPLES: usize = 10_000;

fn estimate_sup_phi<M: MapSystem + ?Sized>(
    map: &M,
    potential: &PotentialModel,
    sampler: &Sampler,
    seed: u64,
) -> Result<(f64, bool)> {
    let key = StreamKey::new(seed, "sup_phi");
    let vals: Vec<f64> = map_chunks(SUP_PHI_SAMPLES, |chunk, _, len| {
        let mut rng = key.stream(chunk);
        (0..len).map(|_| potential.phi(sampler.draw(map, &mut rng)).abs()).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let unbounded = map.has_critical_set() || vals.iter().any(|v| !v.is_finite());
    let finite: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
    let sup = if unbounded {
        percentile(&finite, 0.999)
    } else {
        finite.iter().copied().reduce(f64::max)
    }
    .ok_or_else(|| Error::Sampling("no finite potential value sampled".into()))?;
    Ok((sup, unbounded))
}

/// Fraction of samples violating `n₁(f^{n_i}x) ≤ C_β n`, where `n_i` is the
/// last hyperbolic time of `x` not after `n` (0 if none) and
/// `C_β = β / (|P| + sup|φ|)`; δ̂ is the semilog slope of that fraction.
#[allow(clippy::too_many_arguments)]
pub fn delta_set_rate<M: MapSystem + ?Sized>(
    map: &M,
    params: &HyperbolicParams,
    potential: &PotentialModel,
    sampler: &Sampler,
    beta: f64,
    n_grid: &[usize],
    samples: usize,
    seed: u64,
) -> Result<DeltaReport> {
    params.validate()?;
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("β = {beta} must be positive")));
    }
    let Some(&n_max) = n_grid.iter().max() else {
        return Err(Error::Config("δ̂ needs a nonempty n grid".into()));
    };
    let (sup_phi, clipped) = estimate_sup_phi(map, potential, sampler, seed)?;
    let c_beta = beta / (potential.pressure().abs() + sup_phi);
    let key = StreamKey::new(seed, "delta_set");
    let scan = HyperbolicParams { horizon: n_max, ..*params };
    let parts = map_chunks(samples, |chunk, _, len| {
        let mut rng = key.stream(chunk);
        let mut viol = vec![0u64; n_grid.len()];
        let mut singular = 0u64;
        'sample: for _ in 0..len {
            let x = sampler.draw(map, &mut rng);
            let Ok(record) = hyperbolic_times(map, x, &scan) else {
                singular += 1;
                continue;
            };
            let mut orbit = Vec::with_capacity(n_max + 1);
            let mut p = x;
            orbit.push(p);
            for _ in 0..n_max {
                p = map.apply(p);
                orbit.push(p);
            }
            let mut row = vec![false; n_grid.len()];
            for (k, &n) in n_grid.iter().enumerate() {
                let ni = record.last_at_or_before(n).unwrap_or(0);
                let limit = (c_beta * n as f64).floor() as usize;
                let mut sc = HyperbolicScanner::new(map, orbit[ni], scan);
                match sc.next_time(limit) {
                    Ok(Some(_)) => {}
                    Ok(None) => row[k] = true,
                    Err(_) => {
                        singular += 1;
                        continue 'sample;
                    }
                }
            }
            viol.iter_mut().zip(row).for_each(|(v, r)| *v += r as u64);
        }
        (viol, singular)
    });
    let mut viol = vec![0u64; n_grid.len()];
    let mut singular = 0;
    for (v, s) in parts {
        viol.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        singular += s;
    }
    let valid = samples as u64 - singular;
    let rows: Vec<DeltaRow> = n_grid
        .iter()
        .zip(&viol)
        .map(|(&n, &v)| {
            let (lo, hi) = wilson(v, valid, Z95);
            DeltaRow { n, violations: v, samples: valid, fraction: v as f64 / valid.max(1) as f64, ci_low: lo, ci_high: hi }
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        rows.iter().filter(|r| r.violations > 0).map(|r| (r.n as f64, r.fraction.ln())).unzip();
    let (delta_hat, delta_hat_se) = if xs.is_empty() {
        (f64::NEG_INFINITY, 0.0)
    } else if xs.len() < 3 {
        return Err(Error::Config(format!("δ̂ needs ≥ 3 rows with violations, found {}", xs.len())));
    } else {
        let fit = line_fit(&xs, &ys).ok_or_else(|| Error::Config("degenerate n grid".into()))?;
        (fit.slope, fit.slope_se)
    };
    Ok(DeltaReport { beta, c_beta, sup_phi, sup_phi_clipped: clipped, rows, delta_hat, delta_hat_se, singular })
}
