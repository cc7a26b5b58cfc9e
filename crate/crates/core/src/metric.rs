//! Dynamical metrics and balls, separated sets, covering numbers and Katok
//! entropy, plus the backward-contraction and distortion probes at
//! hyperbolic times.
//!
//! Katok's entropy formula is stated for homeomorphisms; the probes apply
//! it to the non-invertible maps of the zoo, as is customary.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::Serialize;

use crate::dynamics::{inverse_branches, MapSystem, Point, PotentialModel};
use crate::error::{Error, Result};
use crate::hyperbolic::HyperbolicParams;
use crate::parallel::map_indexed;
use crate::rng::StreamKey;
use crate::sampler::Sampler;
use crate::stats::{line_fit, LineFit};

/// Centre, depth `n` and radius ε of `B(x, n, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BallSpec {
    pub center: Point,
    pub depth: usize,
    pub radius: f64,
}

impl BallSpec {
    pub fn new(center: Point, depth: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Parameter(format!("ball radius {radius} must be positive")));
        }
        Ok(Self { center, depth, radius })
    }
}

/// `d_n(x, y) = max_{0 ≤ j ≤ n−1} d(fʲx, fʲy)`.
pub fn dn_distance<M: MapSystem + ?Sized>(map: &M, x: Point, y: Point, n: usize) -> f64 {
    let dom = map.domain();
    let (mut a, mut b) = (dom.normalize(x), dom.normalize(y));
    let mut worst = 0.0f64;
    for j in 0..n {
        worst = worst.max(dom.distance(a, b));
        if j + 1 < n {
            a = map.apply(a);
            b = map.apply(b);
        }
    }
    worst
}

/// `B(x, n, ε) = {y : d(fʲy, fʲx) ≤ ε, 0 ≤ j ≤ n}` with the centre orbit
/// cached, so membership costs at most `n + 1` map evaluations.
#[derive(Debug, Clone)]
pub struct DynamicalBall {
    spec: BallSpec,
    orbit: Vec<Point>,
}

impl DynamicalBall {
    pub fn new<M: MapSystem + ?Sized>(map: &M, spec: BallSpec) -> Self {
        let mut orbit = Vec::with_capacity(spec.depth + 1);
        let mut p = map.domain().normalize(spec.center);
        orbit.push(p);
        for _ in 0..spec.depth {
            p = map.apply(p);
            orbit.push(p);
        }
        Self { spec, orbit }
    }

    pub fn spec(&self) -> BallSpec {
        self.spec
    }

    pub fn center_orbit(&self) -> &[Point] {
        &self.orbit
    }

    pub fn contains<M: MapSystem + ?Sized>(&self, map: &M, y: Point) -> bool {
        let dom = map.domain();
        let mut p = dom.normalize(y);
        for (j, c) in self.orbit.iter().enumerate() {
            if dom.distance(p, *c) > self.spec.radius {
                return false;
            }
            if j + 1 < self.orbit.len() {
                p = map.apply(p);
            }
        }
        true
    }
}

pub fn in_dynamical_ball<M: MapSystem + ?Sized>(map: &M, y: Point, spec: &BallSpec) -> bool {
    DynamicalBall::new(map, *spec).contains(map, y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparatedSet {
    pub depth: usize,
    pub radius: f64,
    pub members: Vec<Point>,
    /// No remaining candidate can be added.
    pub maximal: bool,
}

fn orbit_rows<M: MapSystem + ?Sized>(map: &M, points: &[Point], n: usize) -> Vec<Vec<Point>> {
    map_indexed(points.len(), |i| {
        let mut p = map.domain().normalize(points[i]);
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(p);
            if j + 1 < n {
                p = map.apply(p);
            }
        }
        row
    })
}

fn dn_rows<M: MapSystem + ?Sized>(map: &M, a: &[Point], b: &[Point]) -> f64 {
    let dom = map.domain();
    a.iter().zip(b).map(|(p, q)| dom.distance(*p, *q)).fold(0.0, f64::max)
}

/// Greedy pass in candidate order: a point is admitted iff its `d_n`
/// distance to every admitted point exceeds ε.
pub fn maximal_separated_subset<M: MapSystem + ?Sized>(
    map: &M,
    candidates: &[Point],
    n: usize,
    eps: f64,
) -> Result<SeparatedSet> {
    if candidates.is_empty() {
        return Err(Error::Parameter("separated set needs at least one candidate".into()));
    }
    let n = n.max(1);
    let rows = orbit_rows(map, candidates, n);
    let mut admitted: Vec<usize> = Vec::new();
    for i in 0..rows.len() {
        if admitted.iter().all(|&k| dn_rows(map, &rows[i], &rows[k]) > eps) {
            admitted.push(i);
        }
    }
    Ok(SeparatedSet {
        depth: n,
        radius: eps,
        members: admitted.iter().map(|&i| candidates[i]).collect(),
        maximal: true,
    })
}

/// Result of a greedy weighted cover by `(n, ε)` balls centred at samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverResult {
    pub count: usize,
    pub covered: f64,
    /// The greedy count is an upper estimate of the true minimum.
    pub upper_estimate: bool,
}

/// For every point, the indices of points within `d_n ≤ ε` of it.
fn neighbour_lists<M: MapSystem + ?Sized>(map: &M, rows: &[Vec<Point>], eps: f64) -> Vec<Vec<u32>> {
    let dom = map.domain();
    let s = rows.len();
    if !(dom.is_one_dimensional() && s > 64) {
        return map_indexed(s, |i| {
            (0..s as u32).filter(|&k| dn_rows(map, &rows[i], &rows[k as usize]) <= eps).collect()
        });
    }
    // Sort by the first coordinate so that any x-range of candidates is a
    // slice. The candidates are those in the exact ball computed through
    // inverse branches (slightly widened), else the j = 0 window; every
    // candidate is then checked against d_n directly.
    let mut order: Vec<u32> = (0..s as u32).collect();
    order.sort_by(|a, b| rows[*a as usize][0].x.total_cmp(&rows[*b as usize][0].x));
    let xs: Vec<f64> = order.iter().map(|&i| rows[i as usize][0].x).collect();
    let depth = rows.first().map_or(0, |r| r.len().saturating_sub(1));
    map_indexed(s, |i| {
        let mut out = Vec::new();
        let mut scan = |lo: f64, hi: f64| {
            let start = xs.partition_point(|v| *v < lo);
            let end = xs.partition_point(|v| *v <= hi);
            for &k in &order[start..end] {
                if dn_rows(map, &rows[i], &rows[k as usize]) <= eps {
                    out.push(k);
                }
            }
        };
        let exact = if depth > 0 && map.branch_count() > 0 {
            BallSpec::new(rows[i][0], depth, eps)
                .ok()
                .and_then(|spec| crate::gibbs::ball_as_intervals(map, &spec))
                .map(|set| crate::gibbs::widen(map, &set))
        } else {
            None
        };
        match exact {
            Some(set) => set.parts().iter().for_each(|&(a, b)| scan(a, b)),
            None => {
                let xi = rows[i][0].x;
                if dom.is_circle() {
                    crate::interval::circle_arc(xi - eps, xi + eps).parts().iter().for_each(|&(a, b)| scan(a, b));
                } else {
                    scan(xi - eps, xi + eps);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    })
}

#[derive(PartialEq)]
struct Gain(f64, u32);

impl Eq for Gain {}

impl PartialOrd for Gain {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Gain {
    fn cmp(&self, other: &Self) -> Ordering {
        // Larger gain first; ties go to the smaller index for determinism.
        self.0.total_cmp(&other.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Greedy cover: repeatedly centre a ball at the sample covering the most
/// residual weight until the covered weight reaches `1 − δ`.
pub fn covering_number<M: MapSystem + ?Sized>(
    map: &M,
    points: &[Point],
    weights: &[f64],
    n: usize,
    eps: f64,
    delta: f64,
) -> Result<CoverResult> {
    if points.len() != weights.len() {
        return Err(Error::Parameter("points and weights differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("weights sum to {total}, expected 1")));
    }
    let target = 1.0 - delta;
    if target <= 1e-12 {
        return Ok(CoverResult { count: 0, covered: 0.0, upper_estimate: true });
    }
    let rows = orbit_rows(map, points, n.max(1));
    let nbrs = neighbour_lists(map, &rows, eps);
    let mut covered_flag = vec![false; points.len()];
    let mut heap: BinaryHeap<Gain> = nbrs
        .iter()
        .enumerate()
        .map(|(i, nb)| Gain(nb.iter().map(|&k| weights[k as usize]).sum(), i as u32))
        .collect();
    let mut covered = 0.0;
    let mut count = 0;
    while covered < target - 1e-12 {
        let Some(Gain(stale, i)) = heap.pop() else {
            return Err(Error::ImpossibleCover { target, covered });
        };
        let fresh: f64 = nbrs[i as usize]
            .iter()
            .filter(|&&k| !covered_flag[k as usize])
            .map(|&k| weights[k as usize])
            .sum();
        if fresh <= 0.0 {
            continue;
        }
        if fresh + 1e-15 < stale {
            heap.push(Gain(fresh, i));
            continue;
        }
        for &k in &nbrs[i as usize] {
            covered_flag[k as usize] = true;
        }
        covered += fresh;
        count += 1;
    }
    Ok(CoverResult { count, covered, upper_estimate: true })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KatokRow {
    pub epsilon: f64,
    pub n: usize,
    pub covering_count: usize,
    pub log_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KatokReport {
    pub rows: Vec<KatokRow>,
    /// Slope of `log N(n, ε, δ)` against `n`, per ε.
    pub slopes: Vec<(f64, LineFit)>,
    /// Slope at the smallest ε.
    pub entropy: f64,
    pub delta: f64,
    pub samples: usize,
}

pub fn katok_entropy<M: MapSystem + ?Sized>(
    map: &M,
    sampler: &Sampler,
    n_grid: &[usize],
    eps_grid: &[f64],
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<KatokReport> {
    if n_grid.len() < 3 || eps_grid.len() < 3 {
        return Err(Error::Config("Katok entropy needs ≥ 3 values in each grid".into()));
    }
    let key = StreamKey::new(seed, "entropy");
    let points: Vec<Point> = crate::parallel::map_chunks(samples, |chunk, _, len| {
        let mut rng = key.stream(chunk);
        (0..len).map(|_| sampler.draw(map, &mut rng)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let weights = vec![1.0 / samples as f64; samples];
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &eps in eps_grid {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in n_grid {
            let cover = covering_number(map, &points, &weights, n, eps, delta)?;
            let log_count = (cover.count as f64).ln();
            rows.push(KatokRow { epsilon: eps, n, covering_count: cover.count, log_count });
            xs.push(n as f64);
            ys.push(log_count);
        }
        let fit = line_fit(&xs, &ys).ok_or_else(|| Error::Config("degenerate n grid".into()))?;
        slopes.push((eps, fit));
    }
    let entropy = slopes
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, f)| f.slope)
        .unwrap_or(f64::NAN);
    Ok(KatokReport { rows, slopes, entropy, delta, samples })
}

/// Pulls `target` back along the centre orbit: `y_n = target` and `y_j` is
/// the preimage of `y_{j+1}` nearest to `orbit[j]`. Fails (`None`) when a
/// preimage is missing or strays farther than `radius` from the orbit.
pub fn pull_back_along<M: MapSystem + ?Sized>(
    map: &M,
    orbit: &[Point],
    target: Point,
    radius: f64,
) -> Result<Option<Vec<Point>>> {
    let dom = map.domain();
    let n = orbit.len() - 1;
    let mut out = vec![target; n + 1];
    if dom.distance(target, orbit[n]) > radius {
        return Ok(None);
    }
    for j in (0..n).rev() {
        let pre = inverse_branches(map, out[j + 1])?;
        let best = pre
            .into_iter()
            .min_by(|a, b| dom.distance(*a, orbit[j]).total_cmp(&dom.distance(*b, orbit[j])));
        match best {
            Some(p) if dom.distance(p, orbit[j]) <= radius => out[j] = p,
            _ => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Draws a point uniformly from the ambient ball `B(c, r)` on a 1D domain,
/// `None` when the draw falls outside an interval domain.
fn draw_in_ball<M: MapSystem + ?Sized, R: Rng + ?Sized>(map: &M, c: Point, r: f64, rng: &mut R) -> Option<Point> {
    let dom = map.domain();
    let x = c.x + r * (2.0 * rng.random::<f64>() - 1.0);
    let p = Point::new(x);
    (dom.is_circle() || dom.contains(p)).then(|| dom.normalize(p))
}

/// Samples pairs inside `V_n(x) = B(x, n, r)` by pulling back uniform points
/// of `B(fⁿx, r)` along the centre's inverse branches.
pub fn sample_hyperbolic_pairs<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    n: usize,
    radius: f64,
    pairs: usize,
    seed: u64,
) -> Result<Vec<(Vec<Point>, Vec<Point>)>> {
    if !map.domain().is_one_dimensional() || map.branch_count() == 0 {
        return Err(Error::Capability { map: map.label(), capability: "hyperbolic-ball pair sampling" });
    }
    let orbit = DynamicalBall::new(map, BallSpec::new(x, n, radius)?).orbit;
    let mut rng = StreamKey::new(seed, "pairs").stream(0);
    let mut out = Vec::with_capacity(pairs);
    let attempts = pairs * 20 + 100;
    for _ in 0..attempts {
        if out.len() == pairs {
            break;
        }
        let (Some(wy), Some(wz)) =
            (draw_in_ball(map, orbit[n], radius, &mut rng), draw_in_ball(map, orbit[n], radius, &mut rng))
        else {
            continue;
        };
        let (Some(py), Some(pz)) =
            (pull_back_along(map, &orbit, wy, radius)?, pull_back_along(map, &orbit, wz, radius)?)
        else {
            continue;
        };
        out.push((py, pz));
    }
    if out.is_empty() {
        return Err(Error::Sampling(format!("no pair stayed inside B(x, {n}, {radius})")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub pass_fraction: f64,
    /// Largest `d(f^{n−j}y, f^{n−j}z) / (σ^{−j/2} d(fⁿy, fⁿz))`.
    pub worst_ratio: f64,
    pub assertions: usize,
    pub pairs: usize,
    pub slack: f64,
    pub radius: f64,
}

/// Slack factor on the backward contraction inequality.
pub const CONTRACTION_SLACK: f64 = 1.1;

/// Checks `d(f^{n−j}y, f^{n−j}z) ≤ σ^{−j/2} d(fⁿy, fⁿz)` for `1 ≤ j ≤ n` on
/// pairs sampled inside the hyperbolic ball of radius `delta1`.
pub fn backward_contraction_check<M: MapSystem + ?Sized>(
    map: &M,
    x: Point,
    n: usize,
    params: &HyperbolicParams,
    delta1: f64,
    pairs: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let dom = map.domain();
    let sample = sample_hyperbolic_pairs(map, x, n, delta1, pairs, seed)?;
    let half_log_sigma = 0.5 * params.sigma.ln();
    let mut passed = 0usize;
    let mut total = 0usize;
    let mut worst = 0.0f64;
    for (y, z) in &sample {
        let end = dom.distance(y[n], z[n]);
        if end <= 0.0 {
            continue;
        }
        for j in 1..=n {
            let bound = (-half_log_sigma * j as f64).exp() * end;
            let ratio = dom.distance(y[n - j], z[n - j]) / bound;
            worst = worst.max(ratio);
            total += 1;
            if ratio <= CONTRACTION_SLACK {
                passed += 1;
            }
        }
    }
    Ok(ContractionReport {
        pass_fraction: if total > 0 { passed as f64 / total as f64 } else { 1.0 },
        worst_ratio: worst,
        assertions: total,
        pairs: sample.len(),
        slack: CONTRACTION_SLACK,
        radius: delta1,
    })
}

/// Candidate radii for the hyperbolic-ball radius `δ₁`, largest first.
pub fn delta1_candidates() -> Vec<f64> {
    (3..=10).map(|k| 2f64.powi(-k)).collect()
}

/// Upper bound on admissible `δ₁` for maps with a critical set: a `δ₁`-ball
/// around `fⁿx` must not pull back onto the critical set in one step from a
/// point `δ`-away from it, so `δ₁ ≤ δ · min{‖Df⁻¹‖⁻¹ : dist(y, C) ≥ δ}`.
/// Infinite when the critical set is empty.
pub fn delta1_cap<M: MapSystem + ?Sized>(map: &M, params: &HyperbolicParams) -> f64 {
    if !map.has_critical_set() {
        return f64::INFINITY;
    }
    let dom = map.domain();
    let (lo, hi) = dom.x_range();
    const GRID: usize = 4096;
    let mut best = f64::INFINITY;
    let thetas: Vec<f64> = if dom.is_one_dimensional() { vec![0.0] } else { (0..64).map(|i| i as f64 / 64.0).collect() };
    for theta in thetas {
        for i in 0..=GRID {
            let x = lo + (hi - lo) * i as f64 / GRID as f64;
            let p = if dom.is_one_dimensional() { Point::new(x) } else { Point::cylinder(theta, x) };
            if map.critical_distance(p) >= params.delta {
                best = best.min(1.0 / map.derivative(p).inverse_norm());
            }
        }
    }
    params.delta * best
}

/// Largest admissible candidate radius at which the contraction check passes
/// at the given rate on every pilot `(x, n)`.
pub fn calibrate_delta1<M: MapSystem + ?Sized>(
    map: &M,
    pilot: &[(Point, usize)],
    params: &HyperbolicParams,
    pairs: usize,
    min_pass: f64,
    seed: u64,
) -> Result<Option<f64>> {
    let cap = delta1_cap(map, params);
    for r in delta1_candidates().into_iter().filter(|r| *r <= cap) {
        let mut ok = true;
        for (i, (x, n)) in pilot.iter().enumerate() {
            match backward_contraction_check(map, *x, *n, params, r, pairs, seed.wrapping_add(i as u64)) {
                Ok(rep) if rep.pass_fraction >= min_pass => {}
                Ok(_) | Err(Error::Sampling(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

/// `K̂₀ = max over sampled pairs in V_n(x) of exp |S_nφ(z) − S_nφ(y)|`.
pub fn distortion_estimate<M: MapSystem + ?Sized>(
    map: &M,
    potential: &PotentialModel,
    x: Point,
    n: usize,
    delta1: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let sample = sample_hyperbolic_pairs(map, x, n, delta1, pairs, seed)?;
    let mut worst = 0.0f64;
    for (y, z) in &sample {
        let mut diff = 0.0;
        for j in 0..n {
            let (a, b) = (potential.phi(y[j]), potential.phi(z[j]));
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Singularity { index: j, distance: map.critical_distance(y[j]) });
            }
            diff += b - a;
        }
        worst = worst.max(diff.abs());
    }
    Ok(worst.exp())
}

/// Distortion of pairs given explicitly by their orbits; `y == z` gives 1.
pub fn distortion_of_pair(potential: &PotentialModel, y: &[Point], z: &[Point]) -> f64 {
    let diff: f64 = y.iter().zip(z).map(|(a, b)| potential.phi(*b) - potential.phi(*a)).sum();
    diff.abs().exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Derivative, Domain};
    use rand::Rng;
    use crate::hyperbolic::hyperbolic_times;
    use crate::zoo::{make_doubling, make_mp, make_perturbed_expanding, make_quadratic};
    use proptest::prelude::*;

    struct Identity;

    impl MapSystem for Identity {
        fn label(&self) -> String {
            "identity".into()
        }
        fn domain(&self) -> Domain {
            Domain::Interval { lo: 0.0, hi: 1.0 }
        }
        fn apply(&self, p: Point) -> Point {
            p
        }
        fn derivative(&self, _p: Point) -> Derivative {
            Derivative::Scalar(1.0)
        }
        fn critical_distance(&self, _p: Point) -> f64 {
            f64::INFINITY
        }
    }

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| Point::new(x)).collect()
    }

    fn uniform(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = StreamKey::new(seed, "test").stream(0);
        (0..n).map(|_| Point::new(rng.random::<f64>())).collect()
    }

    #[test]
    fn dn_examples() {
        let d = make_doubling();
        assert!((dn_distance(&d, Point::new(0.0), Point::new(0.01), 3) - 0.04).abs() < 1e-15);
        assert_eq!(dn_distance(&d, Point::new(0.3), Point::new(0.3), 10), 0.0);
        let q = make_quadratic(2.0).unwrap();
        assert_eq!(dn_distance(&q, Point::new(-0.5), Point::new(0.25), 1), 0.75);
        // Circle metric at n = 1.
        assert!((dn_distance(&d, Point::new(0.05), Point::new(0.95), 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ball_examples() {
        let d = make_doubling();
        let c = Point::new(0.0);
        assert!(in_dynamical_ball(&d, c, &BallSpec::new(c, 5, 0.01).unwrap()));
        assert!(!in_dynamical_ball(&d, Point::new(0.01), &BallSpec::new(c, 3, 0.05).unwrap()));
        assert!(in_dynamical_ball(&d, Point::new(0.01), &BallSpec::new(c, 2, 0.05).unwrap()));
        assert!(BallSpec::new(c, 2, 0.0).is_err());
    }

    fn brute_separated<M: MapSystem>(map: &M, set: &SeparatedSet, candidates: &[Point]) {
        let m = &set.members;
        for i in 0..m.len() {
            for k in i + 1..m.len() {
                assert!(dn_distance(map, m[i], m[k], set.depth) > set.radius);
            }
        }
        for c in candidates {
            assert!(m.iter().any(|p| dn_distance(map, *c, *p, set.depth) <= set.radius), "not maximal");
        }
    }

    #[test]
    fn separated_set_examples() {
        let d = make_doubling();
        let same = pts(&[0.3; 5]);
        assert_eq!(maximal_separated_subset(&d, &same, 4, 0.1).unwrap().members.len(), 1);

        let s = maximal_separated_subset(&d, &pts(&[0.0, 0.25, 0.5]), 1, 0.3).unwrap();
        assert_eq!(s.members, pts(&[0.0, 0.5]));

        let grid: Vec<Point> = (0..256).map(|i| Point::new(i as f64 / 256.0)).collect();
        let s = maximal_separated_subset(&d, &grid, 3, 1.0 / 16.0).unwrap();
        brute_separated(&d, &s, &grid);
        // d_3 ≤ 1/16 confines admitted neighbours to within 1/64, so greedy
        // admits every fifth grid point: 51 members on the circle.
        assert_eq!(s.members.len(), 51);
        assert!(maximal_separated_subset(&d, &[], 3, 0.1).is_err());
    }

    fn brute_neighbours<M: MapSystem>(map: &M, rows: &[Vec<Point>], eps: f64) -> Vec<Vec<u32>> {
        (0..rows.len())
            .map(|i| (0..rows.len() as u32).filter(|&k| dn_rows(map, &rows[i], &rows[k as usize]) <= eps).collect())
            .collect()
    }

    #[test]
    fn neighbour_prefilter_matches_brute_force() {
        let cloud = uniform(400, 9);
        let q_cloud: Vec<Point> = cloud.iter().map(|p| Point::new(2.0 * p.x - 1.0)).collect();
        let d = make_doubling();
        let pe = make_perturbed_expanding(4, 0.3).unwrap();
        let mp = make_mp(0.5).unwrap();
        let q = make_quadratic(2.0).unwrap();
        for (n, eps) in [(1, 0.05), (4, 0.1), (7, 0.03)] {
            for (map, pts) in [
                (&d as &dyn MapSystem, &cloud),
                (&pe as &dyn MapSystem, &cloud),
                (&mp as &dyn MapSystem, &cloud),
                (&q as &dyn MapSystem, &q_cloud),
            ] {
                let rows = orbit_rows(map, pts, n);
                let want = brute_neighbours(&WrapRef(map), &rows, eps);
                assert_eq!(neighbour_lists(map, &rows, eps), want, "{} n={n}", map.label());
            }
        }
    }

    struct WrapRef<'a>(&'a dyn MapSystem);

    impl MapSystem for WrapRef<'_> {
        fn label(&self) -> String {
            self.0.label()
        }
        fn domain(&self) -> Domain {
            self.0.domain()
        }
        fn apply(&self, p: Point) -> Point {
            self.0.apply(p)
        }
        fn derivative(&self, p: Point) -> Derivative {
            self.0.derivative(p)
        }
        fn critical_distance(&self, p: Point) -> f64 {
            self.0.critical_distance(p)
        }
    }

    #[test]
    fn covering_examples() {
        let d = make_doubling();
        let cluster = pts(&[0.5, 0.501, 0.502, 0.499]);
        let w = vec![0.25; 4];
        assert_eq!(covering_number(&d, &cluster, &w, 2, 0.01, 0.0).unwrap().count, 1);
        assert_eq!(covering_number(&d, &cluster, &w, 2, 0.01, 1.0).unwrap().count, 0);
        assert!(covering_number(&d, &cluster, &[0.5; 4], 2, 0.01, 0.0).is_err());

        let cloud = uniform(10_000, 4);
        let w = vec![1e-4; 10_000];
        let c = covering_number(&d, &cloud, &w, 5, 0.1, 0.1).unwrap();
        // Each ball has length at most 2ε·2⁻⁴, so at least 72 are needed;
        // the count stays within a factor 2 of 2⁵·(1/(2ε))·0.9 = 144.
        assert!((72..=288).contains(&c.count), "{}", c.count);
        assert!(c.covered >= 0.9 - 1e-9 && c.upper_estimate);
    }

    #[test]
    fn covering_monotone_in_eps_and_n() {
        let d = make_doubling();
        let cloud = uniform(2000, 5);
        let w = vec![1.0 / 2000.0; 2000];
        let count = |n, eps| covering_number(&d, &cloud, &w, n, eps, 0.1).unwrap().count;
        for n in [2, 4, 6] {
            assert!(count(n, 0.05) >= count(n, 0.1) && count(n, 0.1) >= count(n, 0.2));
        }
        for eps in [0.05, 0.1] {
            assert!(count(2, eps) <= count(4, eps) && count(4, eps) <= count(6, eps));
        }
    }

    #[test]
    fn identity_has_zero_entropy() {
        let r = katok_entropy(&Identity, &Sampler::Lebesgue, &[2, 4, 6, 8], &[0.05, 0.1, 0.2], 0.1, 3000, 1).unwrap();
        assert!(r.entropy.abs() < 0.02, "{}", r.entropy);
        assert_eq!(r.rows.len(), 12);
        assert!(katok_entropy(&Identity, &Sampler::Lebesgue, &[2, 4], &[0.1, 0.2, 0.3], 0.1, 100, 1).is_err());
    }

    #[test]
    fn doubling_contraction_and_distortion() {
        let d = make_doubling();
        let p = HyperbolicParams::new(1.4, 0.1, 0.25, 20).unwrap();
        let rep = backward_contraction_check(&d, Point::new(0.3), 12, &p, 0.01, 200, 7).unwrap();
        assert_eq!(rep.pass_fraction, 1.0);
        assert!(rep.worst_ratio <= 1.0 + 1e-6, "{}", rep.worst_ratio);
        assert_eq!(rep.pairs, 200);
        let pot = PotentialModel::constant(-2f64.ln(), 0.0);
        assert_eq!(distortion_estimate(&d, &pot, Point::new(0.3), 12, 0.01, 200, 7).unwrap(), 1.0);
        let y = vec![Point::new(0.2), Point::new(0.4)];
        let q = make_quadratic(2.0).unwrap();
        assert_eq!(distortion_of_pair(&PotentialModel::geometric(std::sync::Arc::new(q)), &y, &y), 1.0);
        assert_eq!(delta1_cap(&d, &p), f64::INFINITY);
    }

    #[test]
    fn quadratic_contraction_at_hyperbolic_time() {
        let q = make_quadratic(2.0).unwrap();
        let p = HyperbolicParams::new(0.25f64.exp(), 0.05, 0.45, 400).unwrap();
        let cap = delta1_cap(&q, &p);
        assert!(cap > 0.005 && cap < 0.02, "{cap}");
        let rec = hyperbolic_times(&q, Point::new(0.3), &p).unwrap();
        let n = *rec.times.iter().find(|&&t| t >= 20).unwrap();
        let rep = backward_contraction_check(&q, Point::new(0.3), n, &p, 2f64.powi(-7), 1000, 3).unwrap();
        assert!(rep.pass_fraction >= 0.99, "{rep:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn dn_is_a_metric(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0, n in 1usize..12) {
            let pe = make_perturbed_expanding(3, 0.1).unwrap();
            let (px, py, pz) = (Point::new(x), Point::new(y), Point::new(z));
            prop_assert_eq!(dn_distance(&pe, px, py, n), dn_distance(&pe, py, px, n));
            prop_assert!(dn_distance(&pe, px, pz, n) <= dn_distance(&pe, px, py, n) + dn_distance(&pe, py, pz, n) + 1e-12);
            prop_assert!(dn_distance(&pe, px, py, n) <= dn_distance(&pe, px, py, n + 1));
        }

        #[test]
        fn balls_shrink_with_depth(c in -1.0f64..1.0, y in -1.0f64..1.0, n in 0usize..15, eps in 0.01f64..0.5) {
            let q = make_quadratic(2.0).unwrap();
            let deep = BallSpec::new(Point::new(c), n + 1, eps).unwrap();
            let shallow = BallSpec::new(Point::new(c), n, eps).unwrap();
            if in_dynamical_ball(&q, Point::new(y), &deep) {
                prop_assert!(in_dynamical_ball(&q, Point::new(y), &shallow));
            }
        }

        #[test]
        fn greedy_sets_are_separated(seed in 0u64..1000, n in 1usize..6, eps in 0.02f64..0.3) {
            let mp = make_mp(0.5).unwrap();
            let cand = uniform(150, seed);
            let s = maximal_separated_subset(&mp, &cand, n, eps).unwrap();
            brute_separated(&mp, &s, &cand);
        }
    }
}
