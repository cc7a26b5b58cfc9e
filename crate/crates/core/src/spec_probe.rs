//! Probes of the specification property: exactness times, shadowing points
//! by backward cylinder refinement, and gap statistics built from hyperbolic
//! times.

use rand::Rng;
use serde::Serialize;

use crate::dynamics::{MapSystem, Point};
use crate::error::{Error, Result};
use crate::gibbs::preimage_set;
use crate::hyperbolic::{hyperbolic_times, HyperbolicParams, HyperbolicTimeRecord};
use crate::interval::IntervalSet;
use crate::metric::{in_dynamical_ball, BallSpec};
use crate::parallel::{map_chunks, map_indexed};
use crate::rng::StreamKey;
use crate::sampler::Sampler;
use crate::stats::json_float;

/// Shadowing searches accept at most this many pieces.
pub const MAX_PIECES: usize = 8;
/// Bound on total piece length plus gaps.
pub const MAX_SPAN: usize = 1_000;
/// Gap estimates cross-check by shadowing only up to this piece length;
/// beyond it the dynamical balls fall below double precision.
pub const SHADOW_MAX_N: usize = 40;

/// Piece of orbit `x, f(x), …, fⁿ(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrbitPiece {
    pub base: Point,
    pub length: usize,
}

impl OrbitPiece {
    pub fn new(base: Point, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::Parameter("orbit pieces need length ≥ 1".into()));
        }
        Ok(Self { base, length })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exactness {
    pub epsilon: f64,
    /// Smallest `N ≤ cap` such that every grid ball covers the domain after
    /// `N` steps; `None` when the cap is exceeded.
    pub n: Option<usize>,
    pub cap: usize,
    pub grid: usize,
    /// Centre of the slowest ball.
    pub worst_centre: Option<Point>,
    /// What that ball's image still misses at the cap.
    pub residual: IntervalSet,
    /// Grid-of-boxes estimate rather than exact interval propagation.
    pub estimated: bool,
}

fn image_set<M: MapSystem + ?Sized>(map: &M, set: &IntervalSet) -> Option<IntervalSet> {
    let mut out = IntervalSet::empty();
    for &(a, b) in set.parts() {
        out = out.union(&map.image_of_interval(a, b)?);
    }
    Some(out)
}

/// Steps until the interval-image of `ball` covers the domain, up to `cap`.
fn cover_time<M: MapSystem + ?Sized>(map: &M, ball: IntervalSet, cap: usize) -> Result<(Option<usize>, IntervalSet)> {
    let (lo, hi) = map.domain().x_range();
    let mut set = ball;
    for k in 0..=cap {
        if set.covers(lo, hi) {
            return Ok((Some(k), IntervalSet::empty()));
        }
        if k == cap {
            break;
        }
        set = image_set(map, &set)
            .ok_or_else(|| Error::Capability { map: map.label(), capability: "interval images" })?;
    }
    Ok((None, set.gaps_within(lo, hi)))
}

fn grid_centres(lo: f64, hi: f64, grid: usize, circle: bool) -> Vec<f64> {
    if circle {
        (0..grid).map(|i| i as f64 / grid as f64).collect()
    } else if grid == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).collect()
    }
}

/// Exactness time `N_ε`: iterates of every `ε`-ball centred on the probe
/// grid cover the domain after `N_ε` steps. One-dimensional maps use exact
/// interval-image propagation; cylinder maps fall back to
/// [`exactness_time_boxes`].
pub fn exactness_time<M: MapSystem + ?Sized>(map: &M, eps: f64, grid: usize, cap: usize) -> Result<Exactness> {
    if !(eps > 0.0) || grid == 0 {
        return Err(Error::Parameter("exactness probe needs ε > 0 and a nonempty grid".into()));
    }
    let dom = map.domain();
    if !dom.is_one_dimensional() {
        return exactness_time_boxes(map, eps, grid.min(8), cap, 16, 64);
    }
    if map.image_of_interval(0.0, 0.0).is_none() {
        return Err(Error::Capability { map: map.label(), capability: "interval images" });
    }
    let (lo, hi) = dom.x_range();
    let centres = grid_centres(lo, hi, grid, dom.is_circle());
    let results = map_indexed(centres.len(), |i| cover_time(map, dom.ball_1d(centres[i], eps), cap));
    let mut worst: Option<(usize, Option<usize>, IntervalSet)> = None;
    for (i, r) in results.into_iter().enumerate() {
        let (n, residual) = r?;
        let slower = match (&worst, n) {
            (None, _) => true,
            (Some((_, None, _)), _) => false,
            (Some(_), None) => true,
            (Some((_, Some(w), _)), Some(k)) => k > *w,
        };
        if slower {
            worst = Some((i, n, residual));
        }
    }
    let (i, n, residual) = worst.expect("nonempty grid");
    Ok(Exactness {
        epsilon: eps,
        n,
        cap,
        grid,
        worst_centre: Some(Point::new(centres[i])),
        residual,
        estimated: false,
    })
}

/// Exactness time on a cylinder estimated with box covers: `points²`
/// random points inside each `ε`-box on a `grid²` lattice of centres is pushed
/// forward until its image meets every cell of a `resolution²` partition.
pub fn exactness_time_boxes<M: MapSystem + ?Sized>(
    map: &M,
    eps: f64,
    grid: usize,
    cap: usize,
    resolution: usize,
    points: usize,
) -> Result<Exactness> {
    let dom = map.domain();
    let (lo, hi) = dom.x_range();
    let centres: Vec<Point> = (0..grid)
        .flat_map(|i| {
            (0..grid).map(move |j| {
                Point::cylinder((i as f64 + 0.5) / grid as f64, lo + (hi - lo) * (j as f64 + 0.5) / grid as f64)
            })
        })
        .collect();
    let cell = |p: Point| {
        let a = ((p.theta * resolution as f64) as usize).min(resolution - 1);
        let b = (((p.x - lo) / (hi - lo) * resolution as f64) as usize).min(resolution - 1);
        a * resolution + b
    };
    let times = map_indexed(centres.len(), |c| {
        let centre = centres[c];
        // Random rather than lattice points: a lattice in θ collapses under
        // the linear base map within a few steps.
        let mut rng = StreamKey::new(c as u64, "box_cover").stream(0);
        let mut cloud: Vec<Point> = (0..points * points)
            .map(|_| {
                let u = 2.0 * rng.random::<f64>() - 1.0;
                let v = 2.0 * rng.random::<f64>() - 1.0;
                dom.normalize(Point::cylinder(centre.theta + eps * u, centre.x + eps * v))
            })
            .collect();
        for k in 0..=cap {
            let mut seen = vec![false; resolution * resolution];
            cloud.iter().for_each(|p| seen[cell(*p)] = true);
            if seen.iter().all(|s| *s) {
                return Some(k);
            }
            cloud.iter_mut().for_each(|p| *p = map.apply(*p));
        }
        None
    });
    let worst = times
        .iter()
        .enumerate()
        .max_by_key(|(_, t)| t.map_or(usize::MAX, |t| t))
        .map(|(i, t)| (i, *t))
        .expect("nonempty grid");
    Ok(Exactness {
        epsilon: eps,
        n: worst.1,
        cap,
        grid: grid * grid,
        worst_centre: Some(centres[worst.0]),
        residual: IntervalSet::empty(),
        estimated: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowResult {
    pub point: Option<Point>,
    /// Piece index at which the refinement became empty (the constraint set
    /// between piece `i`'s start and piece `i + 1`'s start).
    pub failing_stage: Option<usize>,
    pub verified: bool,
}

/// Looks for `z` with `f^{t_i} z ∈ B(x_i, n_i, ε)` for every piece, where
/// `t_1 = 0` and `t_{i+1} = t_i + n_i + p_i`. The constraint set of the last
/// piece is pulled back through all inverse branches, intersected with the
/// ball of each earlier time and, during gaps, with the forward image of the
/// previous piece's end ball. Candidates are verified forward.
pub fn shadow_search<M: MapSystem + ?Sized>(
    map: &M,
    pieces: &[OrbitPiece],
    eps: f64,
    gaps: &[usize],
) -> Result<ShadowResult> {
    if pieces.is_empty() || pieces.len() > MAX_PIECES {
        return Err(Error::Parameter(format!("shadowing takes 1 to {MAX_PIECES} pieces")));
    }
    if gaps.len() + 1 != pieces.len() {
        return Err(Error::Parameter("shadowing needs one gap between consecutive pieces".into()));
    }
    let dom = map.domain();
    if !dom.is_one_dimensional() || map.branch_count() == 0 {
        return Err(Error::Capability { map: map.label(), capability: "complete inverse branches" });
    }
    let mut starts = vec![0usize];
    for (i, p) in pieces.iter().enumerate().take(pieces.len() - 1) {
        starts.push(starts[i] + p.length + gaps[i]);
    }
    let end = starts[pieces.len() - 1] + pieces[pieces.len() - 1].length;
    if end > MAX_SPAN {
        return Err(Error::Parameter(format!("total span {end} exceeds {MAX_SPAN}")));
    }
    let verify = |z: Point| {
        let mut p = dom.normalize(z);
        let mut t = 0;
        for (piece, &s) in pieces.iter().zip(&starts) {
            while t < s {
                p = map.apply(p);
                t += 1;
            }
            let spec = BallSpec { center: piece.base, depth: piece.length, radius: eps };
            if !in_dynamical_ball(map, p, &spec) {
                return false;
            }
        }
        true
    };
    if verify(pieces[0].base) {
        return Ok(ShadowResult { point: Some(dom.normalize(pieces[0].base)), failing_stage: None, verified: true });
    }

    // Constraint per time and the stage each time belongs to.
    let full = {
        let (lo, hi) = dom.x_range();
        IntervalSet::single(lo, hi)
    };
    let mut constraint: Vec<IntervalSet> = vec![full.clone(); end + 1];
    let mut stage = vec![0usize; end + 1];
    for (i, (piece, &s)) in pieces.iter().zip(&starts).enumerate() {
        let mut c = dom.normalize(piece.base);
        for j in 0..=piece.length {
            constraint[s + j] = constraint[s + j].intersect(&dom.ball_1d(c.x, eps));
            c = map.apply(c);
        }
        let stop = starts.get(i + 1).copied().unwrap_or(end);
        stage[s..=stop].iter_mut().for_each(|v| *v = i);
        // Forward tube through the gap.
        if i + 1 < pieces.len() {
            let mut tube = constraint[s + piece.length].clone();
            for t in s + piece.length + 1..starts[i + 1] {
                match image_set(map, &tube) {
                    Some(img) => {
                        tube = img;
                        constraint[t] = constraint[t].intersect(&tube);
                    }
                    None => break,
                }
            }
        }
    }
    let mut set = constraint[end].clone();
    for t in (0..end).rev() {
        set = preimage_set(map, &set).intersect(&constraint[t]);
        if set.is_empty() {
            return Ok(ShadowResult { point: None, failing_stage: Some(stage[t]), verified: false });
        }
    }
    let mut comps: Vec<(f64, f64)> = set.parts().to_vec();
    comps.sort_by(|a, b| (b.1 - b.0).total_cmp(&(a.1 - a.0)));
    for &(a, b) in comps.iter().take(32) {
        for frac in [0.5, 0.25, 0.75] {
            let z = Point::new(a + frac * (b - a));
            if verify(z) {
                return Ok(ShadowResult { point: Some(z), failing_stage: None, verified: true });
            }
        }
    }
    Ok(ShadowResult { point: None, failing_stage: Some(pieces.len() - 1), verified: false })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapEstimate {
    pub x: Point,
    pub n: usize,
    pub n_eps: usize,
    /// Smallest hyperbolic time strictly greater than `n`.
    pub next_time: usize,
    pub lag: usize,
    /// `N_ε + n_{k+1}(x) − n`
    pub p_hat: usize,
    /// `p̂ ≥ n / 2`: the lag is comparable to the piece length.
    pub large_lag: bool,
}

/// Gap from an existing hyperbolic-time record.
pub fn gap_from_record(record: &HyperbolicTimeRecord, n: usize, n_eps: usize) -> Result<GapEstimate> {
    let next = record.next_after(n).ok_or(Error::Horizon { n, horizon: record.horizon })?;
    let lag = next - n;
    let p_hat = n_eps + lag;
    Ok(GapEstimate { x: record.base, n, n_eps, next_time: next, lag, p_hat, large_lag: 2 * p_hat >= n })
}

/// `p̂(x, n, ε) = N_ε + n_{k+1}(x) − n` with the measured exactness time.
pub fn gap_estimate<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    n: usize,
    n_eps: usize,
    params: &HyperbolicParams,
) -> Result<GapEstimate> {
    if params.horizon <= n {
        return Err(Error::Horizon { n, horizon: params.horizon });
    }
    gap_from_record(&hyperbolic_times(map, x, params)?, n, n_eps)
}

/// Fraction of random continuations `(y, n)` that `shadow_search` can attach
/// after `(x, n)` with gap `p̂`.
pub fn shadow_cross_check<M: MapSystem + ?Sized>(
    map: &M,
    gap: &GapEstimate,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if gap.n > SHADOW_MAX_N || trials == 0 {
        return Ok(None);
    }
    let mut rng = StreamKey::new(seed, "shadow_check").stream(0);
    let mut found = 0;
    for _ in 0..trials {
        let y = map.domain().sample_uniform(&mut rng);
        let pieces = [OrbitPiece::new(gap.x, gap.n)?, OrbitPiece::new(y, gap.n)?];
        if shadow_search(map, &pieces, eps, &[gap.p_hat])?.verified {
            found += 1;
        }
    }
    Ok(Some(found as f64 / trials as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCell {
    pub eps: f64,
    pub n: usize,
    pub n_eps: Option<usize>,
    pub p_hat: Option<usize>,
    /// Supremum of `p̂ / n` over uncensored samples.
    #[serde(with = "json_float::option")]
    pub p_over_n: Option<f64>,
    #[serde(with = "json_float::option")]
    pub mean_p_over_n: Option<f64>,
    pub censored_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub cells: Vec<GapCell>,
    /// `sup p̂/n` at the smallest ε and largest n; `None` when every sample
    /// is censored there.
    #[serde(with = "json_float::option")]
    pub headline: Option<f64>,
    pub headline_eps: f64,
    pub headline_n: usize,
    pub sampler: String,
    pub samples: usize,
}

/// Aggregates gaps over records; `exactness` pairs each ε with its `N_ε`.
/// `singular` counts samples lost before a record was built; they count as
/// censored everywhere.
pub fn gap_report_from_records(
    records: &[HyperbolicTimeRecord],
    singular: usize,
    exactness: &[(f64, Option<usize>)],
    n_grid: &[usize],
    sampler: &str,
) -> Result<GapReport> {
    if exactness.is_empty() || n_grid.is_empty() {
        return Err(Error::Config("gap statistic needs nonempty ε and n grids".into()));
    }
    let total = records.len() + singular;
    let mut cells = Vec::new();
    for &(eps, n_eps) in exactness {
        for &n in n_grid {
            let ratios: Vec<(usize, f64)> = match n_eps {
                None => Vec::new(),
                Some(ne) => records
                    .iter()
                    .filter_map(|r| gap_from_record(r, n, ne).ok())
                    .map(|g| (g.p_hat, g.p_hat as f64 / n as f64))
                    .collect(),
            };
            let censored = total - ratios.len();
            let sup = ratios.iter().map(|r| r.1).reduce(f64::max);
            cells.push(GapCell {
                eps,
                n,
                n_eps,
                p_hat: ratios.iter().map(|r| r.0).max(),
                p_over_n: sup,
                mean_p_over_n: (!ratios.is_empty())
                    .then(|| ratios.iter().map(|r| r.1).sum::<f64>() / ratios.len() as f64),
                censored_fraction: if total == 0 { 1.0 } else { censored as f64 / total as f64 },
            });
        }
    }
    let eps0 = exactness.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
    let n1 = *n_grid.iter().max().expect("nonempty");
    let headline = cells.iter().find(|c| c.eps == eps0 && c.n == n1).and_then(|c| c.p_over_n);
    Ok(GapReport { cells, headline, headline_eps: eps0, headline_n: n1, sampler: sampler.into(), samples: total })
}

/// Samples points, measures `N_ε` per ε, and aggregates `p̂/n` over the grids.
#[allow(clippy::too_many_arguments)]
pub fn nonuniform_spec_statistic<M: MapSystem + ?Sized>(
    map: &M,
    sampler: &Sampler,
    eps_grid: &[f64],
    n_grid: &[usize],
    params: &HyperbolicParams,
    samples: usize,
    seed: u64,
    exactness_grid: usize,
    exactness_cap: usize,
) -> Result<(GapReport, Vec<Exactness>)> {
    params.validate()?;
    let n_max = n_grid.iter().copied().max().unwrap_or(0);
    if params.horizon <= n_max {
        return Err(Error::Config(format!(
            "hyperbolic-time horizon {} must exceed the largest n {n_max}",
            params.horizon
        )));
    }
    let exact = eps_grid
        .iter()
        .map(|&e| exactness_time(map, e, exactness_grid, exactness_cap))
        .collect::<Result<Vec<_>>>()?;
    let key = StreamKey::new(seed, "spec");
    let parts = map_chunks(samples, |chunk, _, len| {
        let mut rng = key.stream(chunk);
        let mut recs = Vec::with_capacity(len);
        let mut singular = 0usize;
        for _ in 0..len {
            let x = sampler.draw(map, &mut rng);
            match hyperbolic_times(map, x, params) {
                Ok(r) => recs.push(r),
                Err(_) => singular += 1,
            }
        }
        (recs, singular)
    });
    let mut records = Vec::with_capacity(samples);
    let mut singular = 0;
    for (r, s) in parts {
        records.extend(r);
        singular += s;
    }
    let pairs: Vec<(f64, Option<usize>)> = exact.iter().map(|e| (e.epsilon, e.n)).collect();
    let report = gap_report_from_records(&records, singular, &pairs, n_grid, &sampler.label())?;
    Ok((report, exact))
}
