//! The four example families and sampled checks of the regularity
//! conditions (H) and (C).

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Derivative, Domain, MapSystem, Point};
use crate::error::{Error, Result};
use crate::interval::{circle_arc, IntervalSet};
use crate::rng::StreamKey;
use crate::stats::line_fit;

/// Bisection on an increasing function over `[lo, hi]`.
fn solve_increasing<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (flo, fhi) = (f(lo), f(hi));
    if (target - flo).abs() <= (fhi - target).abs() {
        lo
    } else {
        hi
    }
}

/// `f_a(x) = 1 − a x²` on `[−1, 1]`, critical set `{0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadratic {
    pub a: f64,
}

pub fn make_quadratic(a: f64) -> Result<Quadratic> {
    if !(a > 0.0 && a <= 2.0) {
        return Err(Error::Parameter(format!("quadratic parameter a={a} outside (0, 2]")));
    }
    Ok(Quadratic { a })
}

impl MapSystem for Quadratic {
    fn label(&self) -> String {
        format!("quadratic(a={})", self.a)
    }

    fn domain(&self) -> Domain {
        Domain::Interval { lo: -1.0, hi: 1.0 }
    }

    #[inline]
    fn apply(&self, p: Point) -> Point {
        Point::new((1.0 - self.a * p.x * p.x).clamp(-1.0, 1.0))
    }

    fn derivative(&self, p: Point) -> Derivative {
        Derivative::Scalar(-2.0 * self.a * p.x)
    }

    #[inline]
    fn critical_distance(&self, p: Point) -> f64 {
        p.x.abs()
    }

    fn branch_count(&self) -> usize {
        2
    }

    fn branch_inverse(&self, branch: usize, y: f64) -> Option<f64> {
        if y > 1.0 + 1e-12 || y < 1.0 - self.a - 1e-12 {
            return None;
        }
        let r = ((1.0 - y) / self.a).max(0.0).sqrt();
        match branch {
            0 => Some(-r),
            1 => Some(r),
            _ => None,
        }
    }

    fn image_of_interval(&self, lo: f64, hi: f64) -> Option<IntervalSet> {
        let (lo, hi) = (lo.max(-1.0), hi.min(1.0));
        let f = |x: f64| self.apply(Point::new(x)).x;
        let (mut a, mut b) = (f(lo).min(f(hi)), f(lo).max(f(hi)));
        if lo <= 0.0 && 0.0 <= hi {
            a = a.min(1.0);
            b = b.max(1.0);
        }
        Some(IntervalSet::single(a, b))
    }
}

/// Manneville–Pomeau map with an indifferent fixed point at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannevillePomeau {
    pub alpha: f64,
    scale: f64,
}

pub fn make_mp(alpha: f64) -> Result<MannevillePomeau> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("Manneville–Pomeau alpha={alpha} outside (0, 1)")));
    }
    Ok(MannevillePomeau { alpha, scale: 2f64.powf(alpha) })
}

impl MannevillePomeau {
    #[inline]
    fn left(&self, x: f64) -> f64 {
        x * (1.0 + self.scale * x.powf(self.alpha))
    }
}

impl MapSystem for MannevillePomeau {
    fn label(&self) -> String {
        format!("manneville_pomeau(alpha={})", self.alpha)
    }

    fn domain(&self) -> Domain {
        Domain::Interval { lo: 0.0, hi: 1.0 }
    }

    #[inline]
    fn apply(&self, p: Point) -> Point {
        let x = p.x;
        let y = if x <= 0.5 { self.left(x) } else { 2.0 * x - 1.0 };
        Point::new(y.clamp(0.0, 1.0))
    }

    fn derivative(&self, p: Point) -> Derivative {
        let x = p.x;
        if x <= 0.5 {
            Derivative::Scalar(1.0 + self.scale * (1.0 + self.alpha) * x.powf(self.alpha))
        } else {
            Derivative::Scalar(2.0)
        }
    }

    fn critical_distance(&self, _p: Point) -> f64 {
        f64::INFINITY
    }

    fn branch_count(&self) -> usize {
        2
    }

    fn branch_inverse(&self, branch: usize, y: f64) -> Option<f64> {
        if !(-1e-12..=1.0 + 1e-12).contains(&y) {
            return None;
        }
        let y = y.clamp(0.0, 1.0);
        match branch {
            0 => Some(solve_increasing(|x| self.left(x), y, 0.0, 0.5)),
            1 if y > 0.0 => Some(0.5 * (y + 1.0)),
            _ => None,
        }
    }

    fn image_of_interval(&self, lo: f64, hi: f64) -> Option<IntervalSet> {
        let (lo, hi) = (lo.max(0.0), hi.min(1.0));
        Some(if hi <= 0.5 {
            IntervalSet::single(self.left(lo), self.left(hi).min(1.0))
        } else if lo > 0.5 {
            IntervalSet::single(2.0 * lo - 1.0, 2.0 * hi - 1.0)
        } else {
            IntervalSet::from_parts([(self.left(lo), 1.0), (0.0, 2.0 * hi - 1.0)])
        })
    }
}

/// Circle map `x ↦ d x − a sin(2πx) mod 1`. With `a = 0` it is the linear
/// degree-`d` map; `d = 2, a = 0` is the doubling map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedExpanding {
    pub d: u32,
    pub a: f64,
}

pub fn make_perturbed_expanding(d: u32, a: f64) -> Result<PerturbedExpanding> {
    if d < 2 {
        return Err(Error::Parameter(format!("degree d={d} must be ≥ 2")));
    }
    if !(a >= 0.0 && (d as f64) - 2.0 * PI * a > 0.0) {
        return Err(Error::Parameter(format!("a={a} outside [0, d/(2π)) for d={d}")));
    }
    Ok(PerturbedExpanding { d, a })
}

pub fn make_doubling() -> PerturbedExpanding {
    PerturbedExpanding { d: 2, a: 0.0 }
}

impl PerturbedExpanding {
    #[inline]
    fn lift(&self, x: f64) -> f64 {
        self.d as f64 * x - self.a * (2.0 * PI * x).sin()
    }
}

impl MapSystem for PerturbedExpanding {
    fn label(&self) -> String {
        if self.a == 0.0 && self.d == 2 {
            "doubling".into()
        } else {
            format!("perturbed_expanding(d={}, a={})", self.d, self.a)
        }
    }

    fn domain(&self) -> Domain {
        Domain::Circle
    }

    #[inline]
    fn apply(&self, p: Point) -> Point {
        let y = if self.a == 0.0 {
            (self.d as f64 * p.x).rem_euclid(1.0)
        } else {
            self.lift(p.x).rem_euclid(1.0)
        };
        Point::new(if y >= 1.0 { 0.0 } else { y })
    }

    fn derivative(&self, p: Point) -> Derivative {
        Derivative::Scalar(self.d as f64 - 2.0 * PI * self.a * (2.0 * PI * p.x).cos())
    }

    fn critical_distance(&self, _p: Point) -> f64 {
        f64::INFINITY
    }

    fn branch_count(&self) -> usize {
        self.d as usize
    }

    fn branch_inverse(&self, branch: usize, y: f64) -> Option<f64> {
        if branch >= self.d as usize || !(-1e-12..1.0 + 1e-12).contains(&y) {
            return None;
        }
        let target = y.clamp(0.0, 1.0) + branch as f64;
        if self.a == 0.0 {
            return Some(target / self.d as f64);
        }
        Some(solve_increasing(|x| self.lift(x), target, 0.0, 1.0))
    }

    fn image_of_interval(&self, lo: f64, hi: f64) -> Option<IntervalSet> {
        Some(circle_arc(self.lift(lo), self.lift(hi)))
    }
}

/// Skew product `(θ, x) ↦ (dθ mod 1, 1 − a x² + α cos 2πθ)` on the cylinder.
///
/// The fibre is `[−(1+α), 1+α]`; images leaving it are clamped onto it (for
/// `a = 2` a thin set near the fibre ends would otherwise escape).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viana {
    pub d: u32,
    pub a: f64,
    pub alpha: f64,
}

pub fn make_viana(d: u32, a: f64, alpha: f64) -> Result<Viana> {
    if d < 16 {
        return Err(Error::Parameter(format!("Viana base degree d={d} must be ≥ 16")));
    }
    if !(a > 0.0 && a <= 2.0) {
        return Err(Error::Parameter(format!("Viana fibre parameter a={a} outside (0, 2]")));
    }
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::Parameter(format!("Viana coupling alpha={alpha} outside [0, 0.5]")));
    }
    Ok(Viana { d, a, alpha })
}

impl Viana {
    fn fibre_bound(&self) -> f64 {
        1.0 + self.alpha
    }
}

impl MapSystem for Viana {
    fn label(&self) -> String {
        format!("viana(d={}, a={}, alpha={})", self.d, self.a, self.alpha)
    }

    fn domain(&self) -> Domain {
        let r = self.fibre_bound();
        Domain::Cylinder { lo: -r, hi: r }
    }

    #[inline]
    fn apply(&self, p: Point) -> Point {
        let t = (self.d as f64 * p.theta).rem_euclid(1.0);
        let r = self.fibre_bound();
        let x = 1.0 - self.a * p.x * p.x + self.alpha * (2.0 * PI * p.theta).cos();
        Point::cylinder(if t >= 1.0 { 0.0 } else { t }, x.clamp(-r, r))
    }

    fn derivative(&self, p: Point) -> Derivative {
        Derivative::Matrix([
            [self.d as f64, 0.0],
            [-2.0 * PI * self.alpha * (2.0 * PI * p.theta).sin(), -2.0 * self.a * p.x],
        ])
    }

    #[inline]
    fn critical_distance(&self, p: Point) -> f64 {
        p.x.abs()
    }
}

/// Family selector and parameters, as read from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyParams {
    Doubling,
    Quadratic {
        #[serde(default = "default_a")]
        a: f64,
    },
    #[serde(alias = "mp")]
    MannevillePomeau { alpha: f64 },
    PerturbedExpanding { d: u32, a: f64 },
    Viana {
        #[serde(default = "default_viana_d")]
        d: u32,
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_viana_alpha")]
        alpha: f64,
    },
}

fn default_a() -> f64 {
    2.0
}
fn default_viana_d() -> u32 {
    16
}
fn default_viana_alpha() -> f64 {
    0.01
}

impl FamilyParams {
    pub fn build(&self) -> Result<Arc<dyn MapSystem>> {
        Ok(match *self {
            FamilyParams::Doubling => Arc::new(make_doubling()),
            FamilyParams::Quadratic { a } => Arc::new(make_quadratic(a)?),
            FamilyParams::MannevillePomeau { alpha } => Arc::new(make_mp(alpha)?),
            FamilyParams::PerturbedExpanding { d, a } => Arc::new(make_perturbed_expanding(d, a)?),
            FamilyParams::Viana { d, a, alpha } => Arc::new(make_viana(d, a, alpha)?),
        })
    }

    pub fn names() -> &'static [(&'static str, &'static str)] {
        &[
            ("doubling", "x ↦ 2x mod 1 (perturbed_expanding with d=2, a=0)"),
            ("quadratic", "x ↦ 1 − a x² on [−1, 1]; a ∈ (0, 2], default 2"),
            ("manneville_pomeau", "x(1 + 2^α x^α) on [0, 1/2], 2x − 1 on (1/2, 1]; α ∈ (0, 1)"),
            ("perturbed_expanding", "x ↦ d x − a sin 2πx mod 1; d ≥ 2, 0 ≤ a < d/2π"),
            ("viana", "(θ, x) ↦ (dθ, 1 − a x² + α cos 2πθ); d ≥ 16, defaults d=16, a=2, α=0.01"),
        ]
    }
}

/// Sampled fit of condition (H).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HFit {
    pub b: f64,
    pub beta: f64,
    /// Required `B` per sub-condition (a), (b), (c) at the fitted β.
    pub b_by_condition: [f64; 3],
    pub pairs: usize,
    /// Largest observed `lhs / rhs` at the fitted `(B, β)`; ≤ 1 on samples.
    pub worst_ratio: f64,
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HFailure {
    pub witness: (Point, Point),
    pub beta: f64,
    pub required_b: f64,
}

/// Largest `B` accepted before (H) is declared to fail on the samples.
pub const H_MAX_B: f64 = 1e6;

/// Fits the smallest `B ≥ 1` over a β grid such that (H)(a)–(c) hold on
/// sampled pairs with `d(x, y) < dist(x, C)/2`.
pub fn verify_h<M: MapSystem + ?Sized>(
    map: &M,
    samples: usize,
    seed: u64,
) -> Result<std::result::Result<HFit, HFailure>> {
    if !map.has_critical_set() {
        return Ok(Ok(HFit {
            b: 1.0,
            beta: 1.0,
            b_by_condition: [1.0; 3],
            pairs: 0,
            worst_ratio: 0.0,
            vacuous: true,
        }));
    }
    if samples == 0 {
        return Err(Error::Config("verify_h needs at least one sample".into()));
    }
    let dom = map.domain();
    let mut rng = StreamKey::new(seed, "verify_h").stream(0);
    // (dist, dist(x,y), |Df(x)| min stretch, |Df(x)| norm, Δ log‖Df⁻¹‖, Δ log|det|, x, y)
    let mut rows = Vec::with_capacity(samples);
    while rows.len() < samples {
        let x = dom.sample_uniform(&mut rng);
        let dc = map.critical_distance(x);
        if dc < 1e-10 {
            continue;
        }
        let r = 0.5 * dc * (1.0 - 1e-9);
        let dx = r * (2.0 * rng.random::<f64>() - 1.0);
        let dt = if dom.is_one_dimensional() { 0.0 } else { r * (2.0 * rng.random::<f64>() - 1.0) };
        let y = dom.normalize(Point { x: x.x + dx, theta: x.theta + dt });
        let dxy = dom.distance(x, y);
        if dxy <= 0.0 || dxy >= 0.5 * dc || map.critical_distance(y) < 1e-12 {
            continue;
        }
        let (jx, jy) = (map.derivative(x), map.derivative(y));
        rows.push((
            dc,
            dxy,
            jx.conorm(),
            jx.norm(),
            (jx.inverse_norm().ln() - jy.inverse_norm().ln()).abs(),
            (jx.abs_det().ln() - jy.abs_det().ln()).abs(),
            x,
            y,
        ));
    }
    let required = |beta: f64| {
        let mut need = [1.0f64; 3];
        let mut witness = [0usize; 3];
        for (i, r) in rows.iter().enumerate() {
            let dpow = r.0.powf(beta);
            let a = (dpow / r.2).max(r.3 * dpow);
            let b = r.4 * dpow / r.1;
            let c = r.5 * dpow / r.1;
            for (k, v) in [a, b, c].into_iter().enumerate() {
                if v > need[k] {
                    need[k] = v;
                    witness[k] = i;
                }
            }
        }
        (need, witness)
    };
    let mut best: Option<(f64, f64, [f64; 3], [usize; 3])> = None;
    for step in 0..10 {
        let beta = 1.0 - 0.1 * step as f64;
        let (need, wit) = required(beta);
        let b = need.iter().copied().fold(1.0, f64::max);
        if best.as_ref().is_none_or(|(bb, ..)| b < *bb) {
            best = Some((b, beta, need, wit));
        }
    }
    let (b, beta, need, wit) = best.expect("β grid is nonempty");
    if b > H_MAX_B || !b.is_finite() {
        let k = (0..3).max_by(|i, j| need[*i].total_cmp(&need[*j])).unwrap_or(0);
        let row = &rows[wit[k]];
        return Ok(Err(HFailure { witness: (row.6, row.7), beta, required_b: b }));
    }
    let worst_ratio = need.iter().copied().fold(0.0, f64::max) / b;
    Ok(Ok(HFit { b, beta, b_by_condition: need, pairs: rows.len(), worst_ratio, vacuous: false }))
}

/// Log-log fit of preimage-component diameters against set diameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CFit {
    pub l: f64,
    pub gamma: f64,
    pub rms_residual: f64,
    /// `(ε, largest preimage-component diameter)`.
    pub per_eps: Vec<(f64, f64)>,
}

/// Preimage of `[lo, hi]` under all inverse branches, as merged components.
pub fn preimage_of_interval<M: MapSystem + ?Sized>(map: &M, lo: f64, hi: f64, resolution: usize) -> IntervalSet {
    let mut parts = Vec::new();
    for b in 0..map.branch_count() {
        let mut range: Option<(f64, f64)> = None;
        for i in 0..=resolution {
            let y = lo + (hi - lo) * i as f64 / resolution as f64;
            if let Some(x) = map.branch_inverse(b, y) {
                range = Some(match range {
                    None => (x, x),
                    Some((a, c)) => (a.min(x), c.max(x)),
                });
            }
        }
        if let Some(r) = range {
            parts.push(r);
        }
    }
    IntervalSet::from_parts(parts)
}

/// Measures the largest preimage component of sets of diameter ε placed on
/// a uniform grid of `placements` positions, for each ε in the grid.
pub fn verify_c<M: MapSystem + ?Sized>(map: &M, eps_grid: &[f64], placements: usize) -> Result<CFit> {
    if eps_grid.len() < 3 {
        return Err(Error::Config("verify_c needs at least 3 ε values".into()));
    }
    if map.branch_count() == 0 {
        return Err(Error::Capability { map: map.label(), capability: "inverse branches" });
    }
    let (lo, hi) = map.domain().x_range();
    let placements = placements.max(2);
    let mut per_eps = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        if !(eps > 0.0 && eps < hi - lo) {
            return Err(Error::Config(format!("ε={eps} outside (0, domain length)")));
        }
        let mut worst = 0.0f64;
        for i in 0..placements {
            let s = lo + (hi - lo - eps) * i as f64 / (placements - 1) as f64;
            let e = if i + 1 == placements { hi } else { (s + eps).min(hi) };
            let pre = preimage_of_interval(map, e - eps, e, 32);
            for (a, b) in pre.parts() {
                worst = worst.max(b - a);
            }
        }
        per_eps.push((eps, worst));
    }
    let xs: Vec<f64> = per_eps.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = per_eps.iter().map(|(_, d)| d.ln()).collect();
    let fit = line_fit(&xs, &ys).ok_or_else(|| Error::Config("degenerate ε grid".into()))?;
    Ok(CFit { l: fit.intercept.exp(), gamma: fit.slope, rms_residual: fit.rms_residual, per_eps })
}
