//! Browser bindings for the demo page in `www/`.
//!
//! Each export takes a family name plus up to two numeric parameters and
//! returns a flat `Float64Array`. The plain functions below the bindings do
//! the work so they can be tested natively.

use std::sync::Arc;

use devgibbs::deviation::{rate_curve, DeviationExperiment, Direction};
use devgibbs::hyperbolic::tail_curve;
use devgibbs::{Error, FamilyParams, HyperbolicParams, MapSystem, Observable, Point, Sampler};
use wasm_bindgen::prelude::*;

fn to_js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Orbit `x₀, f(x₀), …` of length `steps + 1`, for a cobweb plot.
#[wasm_bindgen]
pub fn orbit(family: &str, p1: f64, p2: f64, x0: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    orbit_points(family, p1, p2, x0, steps).map_err(to_js)
}

/// Graph of the map on `resolution` evenly spaced points: `[x₀, f(x₀), x₁, …]`.
#[wasm_bindgen]
pub fn graph(family: &str, p1: f64, p2: f64, resolution: usize) -> Result<Vec<f64>, JsError> {
    graph_points(family, p1, p2, resolution).map_err(to_js)
}

/// First-hyperbolic-time tail: `[n, m(Γ_n)]` pairs for n = 1, 2, ….
#[wasm_bindgen]
pub fn tail(family: &str, p1: f64, p2: f64, samples: usize, horizon: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    tail_points(family, p1, p2, samples, horizon, seed).map_err(to_js)
}

/// Doubling-map deviation curve for `1[0,1/2)` at `level`:
/// `[n, p̂, (1/n) log p̂]` triples for n = 1..=n_max.
#[wasm_bindgen]
pub fn deviation(level: f64, n_max: usize, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    deviation_points(level, n_max, samples, seed).map_err(to_js)
}

pub fn family(name: &str, p1: f64, p2: f64) -> devgibbs::Result<FamilyParams> {
    Ok(match name {
        "doubling" => FamilyParams::Doubling,
        "quadratic" => FamilyParams::Quadratic { a: p1 },
        "manneville_pomeau" | "mp" => FamilyParams::MannevillePomeau { alpha: p1 },
        "perturbed_expanding" => {
            if !(p1 >= 2.0 && p1.fract() == 0.0 && p1 <= u32::MAX as f64) {
                return Err(Error::Parameter(format!("d = {p1} must be an integer ≥ 2")));
            }
            FamilyParams::PerturbedExpanding { d: p1 as u32, a: p2 }
        }
        other => return Err(Error::Parameter(format!("family `{other}` has no one-dimensional demo"))),
    })
}

fn build(name: &str, p1: f64, p2: f64) -> devgibbs::Result<(FamilyParams, Arc<dyn MapSystem>)> {
    let f = family(name, p1, p2)?;
    Ok((f, f.build()?))
}

pub fn orbit_points(name: &str, p1: f64, p2: f64, x0: f64, steps: usize) -> devgibbs::Result<Vec<f64>> {
    let (_, map) = build(name, p1, p2)?;
    let pts = devgibbs::dynamics::orbit(map.as_ref(), Point::new(x0), steps)?;
    Ok(pts.into_iter().map(|p| p.x).collect())
}

pub fn graph_points(name: &str, p1: f64, p2: f64, resolution: usize) -> devgibbs::Result<Vec<f64>> {
    let (_, map) = build(name, p1, p2)?;
    let (lo, hi) = map.domain().x_range();
    let k = resolution.max(2);
    let mut out = Vec::with_capacity(2 * k);
    for i in 0..k {
        let x = lo + (hi - lo) * i as f64 / (k - 1) as f64;
        out.push(x);
        out.push(map.apply(Point::new(x)).x);
    }
    Ok(out)
}

pub fn tail_points(
    name: &str,
    p1: f64,
    p2: f64,
    samples: usize,
    horizon: usize,
    seed: u64,
) -> devgibbs::Result<Vec<f64>> {
    let (f, map) = build(name, p1, p2)?;
    let params = HyperbolicParams::default_for(&f, horizon);
    let curve = tail_curve(map.as_ref(), &Sampler::Lebesgue, &params, samples, seed)?;
    Ok(curve.rows.iter().flat_map(|r| [r.n as f64, r.fraction]).collect())
}

pub fn deviation_points(level: f64, n_max: usize, samples: usize, seed: u64) -> devgibbs::Result<Vec<f64>> {
    let map: Arc<dyn MapSystem> = Arc::new(devgibbs::zoo::make_doubling());
    let exp = DeviationExperiment::new(
        map,
        Observable::indicator_half(),
        level,
        Direction::AtLeast,
        Sampler::Lebesgue,
        (1..=n_max).collect(),
        samples,
        seed,
    )?;
    let curve = rate_curve(&exp)?;
    Ok(curve.rows.iter().flat_map(|r| [r.n as f64, r.p_hat, r.log_rate]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_orbit_of_a_dyadic_point() {
        assert_eq!(orbit_points("doubling", 0.0, 0.0, 0.375, 3).unwrap(), vec![0.375, 0.75, 0.5, 0.0]);
    }

    #[test]
    fn graph_spans_the_domain() {
        let g = graph_points("quadratic", 2.0, 0.0, 3).unwrap();
        assert_eq!(g, vec![-1.0, -1.0, 0.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn unknown_family_and_bad_degree_are_errors() {
        assert!(family("viana", 0.0, 0.0).is_err());
        assert!(family("perturbed_expanding", 2.5, 0.0).is_err());
        assert!(orbit_points("quadratic", 3.0, 0.0, 0.1, 5).is_err());
    }

    #[test]
    fn doubling_tail_is_truncated_at_once() {
        let t = tail_points("doubling", 0.0, 0.0, 2000, 50, 1).unwrap();
        assert_eq!(&t[..2], &[1.0, 0.0]);
    }

    #[test]
    fn deviation_matches_binomial_at_n_1() {
        // P(1[0,1/2)(x) ≥ 0.7) = 1/2 for n = 1.
        let d = deviation_points(0.7, 3, 20_000, 3).unwrap();
        assert_eq!(d.len(), 9);
        assert!((d[1] - 0.5).abs() < 0.02, "{d:?}");
    }
}
