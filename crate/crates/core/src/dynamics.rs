//! Map-evaluation kernel: points, domains, derivative data and the orbit
//! primitives shared by every probe.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interval::IntervalSet;

/// Domain membership tolerance.
pub const DOMAIN_TOL: f64 = 1e-12;
/// Orbit points closer than this to the critical set raise a singularity.
pub const CRITICAL_GUARD: f64 = 1e-14;
/// Re-evaluation tolerance for preimages.
pub const BRANCH_TOL: f64 = 1e-9;

/// A point of an interval, the circle, or the cylinder `S¹ × I`.
///
/// One-dimensional maps use `x` only and keep `theta` at zero. On the
/// cylinder `theta` is the circle coordinate and `x` the fibre coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Point {
    pub x: f64,
    pub theta: f64,
}

impl Point {
    pub const fn new(x: f64) -> Self {
        Self { x, theta: 0.0 }
    }

    pub const fn cylinder(theta: f64, x: f64) -> Self {
        Self { x, theta }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.theta == 0.0 {
            write!(f, "{}", self.x)
        } else {
            write!(f, "({}, {})", self.theta, self.x)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Interval { lo: f64, hi: f64 },
    /// `[0, 1)` with the arc metric.
    Circle,
    /// `S¹ × [lo, hi]` with the max of the circle and fibre distances.
    Cylinder { lo: f64, hi: f64 },
}

fn circle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(1.0);
    d.min(1.0 - d)
}

impl Domain {
    pub fn distance(&self, p: Point, q: Point) -> f64 {
        match self {
            Domain::Interval { .. } => (p.x - q.x).abs(),
            Domain::Circle => circle_distance(p.x, q.x),
            Domain::Cylinder { .. } => circle_distance(p.theta, q.theta).max((p.x - q.x).abs()),
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        if !p.x.is_finite() || !p.theta.is_finite() {
            return false;
        }
        let on_circle = |t: f64| (-DOMAIN_TOL..1.0 + DOMAIN_TOL).contains(&t);
        match *self {
            Domain::Interval { lo, hi } => p.x >= lo - DOMAIN_TOL && p.x <= hi + DOMAIN_TOL,
            Domain::Circle => on_circle(p.x),
            Domain::Cylinder { lo, hi } => {
                on_circle(p.theta) && p.x >= lo - DOMAIN_TOL && p.x <= hi + DOMAIN_TOL
            }
        }
    }

    /// Brings a point that is in the domain up to tolerance onto the domain.
    pub fn normalize(&self, p: Point) -> Point {
        let wrap = |t: f64| {
            let w = t.rem_euclid(1.0);
            if w >= 1.0 {
                0.0
            } else {
                w
            }
        };
        match *self {
            Domain::Interval { lo, hi } => Point::new(p.x.clamp(lo, hi)),
            Domain::Circle => Point::new(wrap(p.x)),
            Domain::Cylinder { lo, hi } => Point::cylinder(wrap(p.theta), p.x.clamp(lo, hi)),
        }
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            Domain::Interval { lo, hi } => hi - lo,
            Domain::Circle => 0.5,
            Domain::Cylinder { lo, hi } => (hi - lo).max(0.5),
        }
    }

    /// Extent of the one-dimensional coordinate.
    pub fn x_range(&self) -> (f64, f64) {
        match *self {
            Domain::Interval { lo, hi } | Domain::Cylinder { lo, hi } => (lo, hi),
            Domain::Circle => (0.0, 1.0),
        }
    }

    pub fn is_one_dimensional(&self) -> bool {
        !matches!(self, Domain::Cylinder { .. })
    }

    pub fn is_circle(&self) -> bool {
        matches!(self, Domain::Circle)
    }

    /// Lebesgue-uniform point.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match *self {
            Domain::Interval { lo, hi } => Point::new(lo + (hi - lo) * rng.random::<f64>()),
            Domain::Circle => Point::new(rng.random::<f64>()),
            Domain::Cylinder { lo, hi } => {
                let theta = rng.random::<f64>();
                Point::cylinder(theta, lo + (hi - lo) * rng.random::<f64>())
            }
        }
    }

    /// The closed ball of radius `r` around `p` on the x-coordinate, as a
    /// subset of `x_range()`. Meaningful for one-dimensional domains.
    pub fn ball_1d(&self, centre: f64, r: f64) -> IntervalSet {
        match *self {
            Domain::Circle => crate::interval::circle_arc(centre - r, centre + r),
            Domain::Interval { lo, hi } | Domain::Cylinder { lo, hi } => {
                IntervalSet::single((centre - r).max(lo), (centre + r).min(hi))
            }
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Interval { lo, hi } => write!(f, "[{lo}, {hi}]"),
            Domain::Circle => write!(f, "S¹"),
            Domain::Cylinder { lo, hi } => write!(f, "S¹ × [{lo}, {hi}]"),
        }
    }
}

/// Derivative of the map at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Derivative {
    Scalar(f64),
    /// Row-major 2×2 matrix acting on `(theta, x)`.
    Matrix([[f64; 2]; 2]),
}

impl Derivative {
    fn singular_values(m: &[[f64; 2]; 2]) -> (f64, f64) {
        let frob = m[0][0].powi(2) + m[0][1].powi(2) + m[1][0].powi(2) + m[1][1].powi(2);
        let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs();
        let disc = (frob * frob - 4.0 * det * det).max(0.0).sqrt();
        let smax = ((frob + disc) / 2.0).sqrt();
        let smin = if smax > 0.0 { det / smax } else { 0.0 };
        (smax, smin)
    }

    /// Operator norm.
    pub fn norm(&self) -> f64 {
        match self {
            Derivative::Scalar(d) => d.abs(),
            Derivative::Matrix(m) => Self::singular_values(m).0,
        }
    }

    /// Minimum stretch `min ‖Dv‖/‖v‖`.
    pub fn conorm(&self) -> f64 {
        match self {
            Derivative::Scalar(d) => d.abs(),
            Derivative::Matrix(m) => Self::singular_values(m).1,
        }
    }

    /// `‖Df⁻¹‖`, infinite when singular.
    pub fn inverse_norm(&self) -> f64 {
        1.0 / self.conorm()
    }

    pub fn abs_det(&self) -> f64 {
        match self {
            Derivative::Scalar(d) => d.abs(),
            Derivative::Matrix(m) => (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs(),
        }
    }
}

/// A dynamical system on one of the supported domains.
///
/// Implementations are immutable and shared freely across workers. Inverse
/// branches are indexed; a map with `branch_count() == 0` exposes none.
pub trait MapSystem: Send + Sync {
    fn label(&self) -> String;

    fn domain(&self) -> Domain;

    /// Image of an in-domain point; the result is normalised onto the domain.
    fn apply(&self, p: Point) -> Point;

    fn derivative(&self, p: Point) -> Derivative;

    /// Distance to the critical/singular set, `+∞` when the set is empty.
    fn critical_distance(&self, p: Point) -> f64;

    fn has_critical_set(&self) -> bool {
        self.critical_distance(Point::new(0.5)).is_finite()
    }

    fn branch_count(&self) -> usize {
        0
    }

    /// Preimage of `y` on branch `branch`, `None` outside the branch range.
    fn branch_inverse(&self, _branch: usize, _y: f64) -> Option<f64> {
        None
    }

    /// Image of the x-interval `[lo, hi]` (lifted coordinates on the circle).
    fn image_of_interval(&self, _lo: f64, _hi: f64) -> Option<IntervalSet> {
        None
    }
}

impl fmt::Debug for dyn MapSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Evaluates the map after checking domain membership.
pub fn evaluate<M: MapSystem + ?Sized>(map: &M, p: Point) -> Result<Point> {
    let dom = map.domain();
    if !dom.contains(p) {
        return Err(Error::Domain { value: p.to_string(), domain: dom.to_string() });
    }
    Ok(map.apply(dom.normalize(p)))
}

/// `[x, f(x), …, fⁿ(x)]`.
pub fn orbit<M: MapSystem + ?Sized>(map: &M, p: Point, n: usize) -> Result<Vec<Point>> {
    let mut out = Vec::with_capacity(n + 1);
    let mut cur = evaluate(map, p).map(|_| map.domain().normalize(p))?;
    out.push(cur);
    for _ in 0..n {
        cur = map.apply(cur);
        out.push(cur);
    }
    Ok(out)
}

/// Birkhoff sum `Σ_{j<n} g(fʲ(x))`.
pub fn birkhoff_sum<M: MapSystem + ?Sized>(
    map: &M,
    g: &Observable,
    p: Point,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("birkhoff sum needs n ≥ 1".into()));
    }
    let mut cur = evaluate(map, p).map(|_| map.domain().normalize(p))?;
    let mut sum = 0.0;
    for j in 0..n {
        let v = g.eval(cur);
        if !v.is_finite() {
            return Err(Error::Evaluation { index: j });
        }
        sum += v;
        if j + 1 < n {
            cur = map.apply(cur);
        }
    }
    Ok(sum)
}

/// `‖Df(fʲ(x))⁻¹‖` for `j < n`.
pub fn expansion_cocycle<M: MapSystem + ?Sized>(map: &M, p: Point, n: usize) -> Result<Vec<f64>> {
    let mut cur = evaluate(map, p).map(|_| map.domain().normalize(p))?;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        out.push(inverse_norm_checked(map, cur, j)?);
        cur = map.apply(cur);
    }
    Ok(out)
}

/// `‖Df(p)⁻¹‖` with the near-critical guard; `index` is reported on failure.
pub fn inverse_norm_checked<M: MapSystem + ?Sized>(map: &M, p: Point, index: usize) -> Result<f64> {
    let dist = map.critical_distance(p);
    if dist < CRITICAL_GUARD {
        return Err(Error::Singularity { index, distance: dist });
    }
    let v = map.derivative(p).inverse_norm();
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::Singularity { index, distance: dist });
    }
    Ok(v)
}

/// δ-truncated distance to the critical set: the distance when it is below
/// `delta`, and 1 otherwise.
pub fn truncated_distance<M: MapSystem + ?Sized>(map: &M, p: Point, delta: f64) -> f64 {
    let d = map.critical_distance(p);
    if d < delta {
        d
    } else {
        1.0
    }
}

/// All preimages of `y`, each verified to re-evaluate to `y`.
pub fn inverse_branches<M: MapSystem + ?Sized>(map: &M, y: Point) -> Result<Vec<Point>> {
    let dom = map.domain();
    if map.branch_count() == 0 {
        return Err(Error::Capability { map: map.label(), capability: "inverse branches" });
    }
    if !dom.contains(y) {
        return Err(Error::Domain { value: y.to_string(), domain: dom.to_string() });
    }
    let y = dom.normalize(y);
    let mut out: Vec<Point> = Vec::new();
    for b in 0..map.branch_count() {
        let Some(x) = map.branch_inverse(b, y.x) else { continue };
        let cand = dom.normalize(Point::new(x));
        if dom.distance(map.apply(cand), y) > BRANCH_TOL {
            continue;
        }
        if out.iter().all(|q| dom.distance(*q, cand) > 1e-12) {
            out.push(cand);
        }
    }
    out.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok(out)
}

type PointFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// A real-valued function on the domain.
#[derive(Clone)]
pub struct Observable {
    label: String,
    func: PointFn,
    modulus: Option<f64>,
    continuous: bool,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable").field("label", &self.label).finish_non_exhaustive()
    }
}

impl Observable {
    pub fn new<F>(label: impl Into<String>, continuous: bool, f: F) -> Self
    where
        F: Fn(Point) -> f64 + Send + Sync + 'static,
    {
        Self { label: label.into(), func: Arc::new(f), modulus: None, continuous }
    }

    pub fn with_modulus(mut self, modulus: f64) -> Self {
        self.modulus = Some(modulus);
        self
    }

    #[inline]
    pub fn eval(&self, p: Point) -> f64 {
        (self.func)(p)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn modulus(&self) -> Option<f64> {
        self.modulus
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    pub fn constant(k: f64) -> Self {
        Self::new(format!("const({k})"), true, move |_| k).with_modulus(0.0)
    }

    /// 1 on `[0, 1/2)`, 0 elsewhere (x-coordinate).
    pub fn indicator_half() -> Self {
        Self::new("indicator_half", false, |p| if (0.0..0.5).contains(&p.x) { 1.0 } else { 0.0 })
    }

    pub fn cos2pi() -> Self {
        Self::new("cos2pi", true, |p| (2.0 * std::f64::consts::PI * p.x).cos())
            .with_modulus(2.0 * std::f64::consts::PI)
    }

    pub fn identity() -> Self {
        Self::new("identity", true, |p| p.x).with_modulus(1.0)
    }

    /// `log |det Df|`; infinite on the critical set.
    pub fn log_derivative(map: Arc<dyn MapSystem>) -> Self {
        Self::new("log_deriv", true, move |p| map.derivative(p).abs_det().ln())
    }

    /// Piecewise-linear interpolation through `(x, value)` knots, constant
    /// beyond the end knots.
    pub fn piecewise_linear(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Parameter("piecewise-linear observable needs ≥ 2 knots".into()));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Parameter("piecewise-linear knots must be strictly increasing".into()));
        }
        if knots.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Parameter("piecewise-linear knots must be finite".into()));
        }
        let lip = knots
            .windows(2)
            .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
            .fold(0.0, f64::max);
        let knots = Arc::new(knots);
        Ok(Self::new("piecewise_linear", true, move |p| {
            let x = p.x;
            let k = &knots;
            if x <= k[0].0 {
                return k[0].1;
            }
            if x >= k[k.len() - 1].0 {
                return k[k.len() - 1].1;
            }
            let i = k.partition_point(|(kx, _)| *kx <= x) - 1;
            let (x0, y0) = k[i];
            let (x1, y1) = k[i + 1];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        })
        .with_modulus(lip))
    }
}

/// Potential φ with its pressure `P = log λ`; the conformal Jacobian is
/// `λ e^{−φ}` and the normalised potential is `ψ = φ − P`.
#[derive(Clone)]
pub struct PotentialModel {
    label: String,
    phi: PointFn,
    pressure: f64,
}

impl fmt::Debug for PotentialModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialModel")
            .field("label", &self.label)
            .field("pressure", &self.pressure)
            .finish_non_exhaustive()
    }
}

impl PotentialModel {
    pub fn new<F>(label: impl Into<String>, pressure: f64, phi: F) -> Self
    where
        F: Fn(Point) -> f64 + Send + Sync + 'static,
    {
        Self { label: label.into(), phi: Arc::new(phi), pressure }
    }

    /// `φ = −log|det Df|` with `P = 0` (Lebesgue is conformal).
    pub fn geometric(map: Arc<dyn MapSystem>) -> Self {
        Self::new("-log|det Df|", 0.0, move |p| -map.derivative(p).abs_det().ln())
    }

    pub fn constant(value: f64, pressure: f64) -> Self {
        Self::new(format!("const({value})"), pressure, move |_| value)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn phi(&self, p: Point) -> f64 {
        (self.phi)(p)
    }

    #[inline]
    pub fn psi(&self, p: Point) -> f64 {
        self.phi(p) - self.pressure
    }

    pub fn pressure(&self) -> f64 {
        self.pressure
    }

    pub fn lambda(&self) -> f64 {
        self.pressure.exp()
    }

    /// Conformal Jacobian `λ e^{−φ(p)}`.
    pub fn jacobian(&self, p: Point) -> f64 {
        self.lambda() * (-self.phi(p)).exp()
    }

    /// `S_n φ(x)`, failing on a non-finite term.
    pub fn birkhoff<M: MapSystem + ?Sized>(&self, map: &M, p: Point, n: usize) -> Result<f64> {
        let mut cur = p;
        let mut sum = 0.0;
        for j in 0..n {
            let v = self.phi(cur);
            if !v.is_finite() {
                return Err(Error::Singularity { index: j, distance: map.critical_distance(cur) });
            }
            sum += v;
            cur = map.apply(cur);
        }
        Ok(sum)
    }
}
