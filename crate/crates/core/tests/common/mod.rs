//! Oracle suites shared by the integration tests and the acceptance run.
//! Each returns a one-line summary or the first disagreement found.

use devgibbs::dynamics::{truncated_distance, MapSystem, Point};
use devgibbs::hyperbolic::{hyperbolic_times, HyperbolicParams};
use devgibbs::metric::{dn_distance, maximal_separated_subset};
use devgibbs::zoo::{make_doubling, make_mp, make_perturbed_expanding, make_quadratic, make_viana};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct double loop over `n` and `k` with the products recomputed from
/// scratch; `None` when the orbit meets a singularity.
pub fn naive_times<M: MapSystem + ?Sized>(map: &M, x: Point, p: &HyperbolicParams) -> Option<Vec<usize>> {
    let n_max = p.horizon;
    let mut orbit = vec![map.domain().normalize(x)];
    for _ in 0..n_max {
        orbit.push(map.apply(*orbit.last().unwrap()));
    }
    let mut log_inv = Vec::with_capacity(n_max);
    for q in &orbit[..n_max] {
        let v = map.derivative(*q).inverse_norm();
        if !v.is_finite() || v <= 0.0 {
            return None;
        }
        log_inv.push(v.ln());
    }
    let ls = p.sigma.ln();
    let tol = |a: f64, b: f64| 1e-12 * (1.0 + a.abs().max(b.abs()));
    let mut out = Vec::new();
    for n in 1..=n_max {
        let mut ok = true;
        for k in 1..=n {
            // Σ_{j=n−k}^{n−1} (log ‖Df⁻¹‖ + log σ) ≤ 0, i.e. the product is
            // at most σ^{−k}.
            let s: f64 = (n - k..n).map(|j| log_inv[j] + ls).sum();
            if s > tol(s, 0.0) {
                ok = false;
                break;
            }
            let lhs = truncated_distance(map, orbit[n - k], p.delta).ln();
            let rhs = -p.b * k as f64 * ls;
            if lhs <= rhs - tol(lhs, rhs) {
                ok = false;
                break;
            }
        }
        if ok {
            out.push(n);
        }
    }
    Some(out)
}

/// Incremental detector against [`naive_times`] on 10³ random instances.
pub fn hyperbolic_detector_suite() -> Result<String, String> {
    let maps: Vec<(Box<dyn MapSystem>, HyperbolicParams)> = vec![
        (Box::new(make_doubling()), HyperbolicParams::new(1.4, 0.1, 0.25, 0).unwrap()),
        (Box::new(make_quadratic(2.0).unwrap()), HyperbolicParams::new(0.2f64.exp(), 0.05, 0.25, 0).unwrap()),
        (Box::new(make_quadratic(1.8).unwrap()), HyperbolicParams::new(1.1, 0.1, 0.4, 0).unwrap()),
        (Box::new(make_mp(0.5).unwrap()), HyperbolicParams::new(1.2, 0.1, 0.25, 0).unwrap()),
        (Box::new(make_perturbed_expanding(4, 0.3).unwrap()), HyperbolicParams::new(1.4, 0.1, 0.25, 0).unwrap()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut compared, mut with_times) = (0, 0);
    for i in 0..1000 {
        let (map, base) = &maps[i % maps.len()];
        let params = HyperbolicParams { horizon: rng.random_range(1..=200), ..*base };
        let x = map.domain().sample_uniform(&mut rng);
        let Some(want) = naive_times(map.as_ref(), x, &params) else { continue };
        let got = hyperbolic_times(map.as_ref(), x, &params).map_err(|e| e.to_string())?;
        if got.times != want || got.none_found != want.is_empty() {
            return Err(format!("{} x={:?} N={}: {:?} vs {:?}", map.label(), x, params.horizon, got.times, want));
        }
        compared += 1;
        with_times += usize::from(!want.is_empty());
    }
    if compared < 990 {
        return Err(format!("only {compared} instances avoided singularities"));
    }
    Ok(format!("{compared} instances identical ({with_times} with times)"))
}

/// Greedy separated sets checked pairwise and for maximality by brute force.
pub fn separated_set_suite() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let maps: Vec<Box<dyn MapSystem>> = vec![
        Box::new(make_doubling()),
        Box::new(make_quadratic(2.0).unwrap()),
        Box::new(make_mp(0.5).unwrap()),
        Box::new(make_perturbed_expanding(4, 0.2).unwrap()),
    ];
    let mut members = 0;
    for trial in 0..40 {
        let map = &maps[trial % maps.len()];
        let n = rng.random_range(1..8);
        let eps = rng.random_range(0.01..0.3);
        let cands: Vec<Point> = (0..300).map(|_| map.domain().sample_uniform(&mut rng)).collect();
        let set = maximal_separated_subset(map.as_ref(), &cands, n, eps).map_err(|e| e.to_string())?;
        let m = &set.members;
        for a in 0..m.len() {
            for b in a + 1..m.len() {
                if dn_distance(map.as_ref(), m[a], m[b], n) <= eps {
                    return Err(format!("{} trial {trial}: members {a}, {b} not separated", map.label()));
                }
            }
        }
        if let Some(c) = cands.iter().find(|c| m.iter().all(|p| dn_distance(map.as_ref(), **c, *p, n) > eps)) {
            return Err(format!("{} trial {trial}: {c:?} could still be added", map.label()));
        }
        members += m.len();
    }
    Ok(format!("40 sets, {members} members, pairwise separated and maximal"))
}

/// Viana fibres with zero coupling against quadratic orbits, bit for bit.
pub fn viana_fibre_suite() -> Result<String, String> {
    let q = make_quadratic(2.0).unwrap();
    let v = make_viana(16, 2.0, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let x: f64 = rng.random_range(-1.0..1.0);
        let theta: f64 = rng.random();
        let (mut a, mut b) = (Point::new(x), Point::cylinder(theta, x));
        for j in 0..1000 {
            a = q.apply(a);
            b = v.apply(b);
            if a.x.to_bits() != b.x.to_bits() {
                return Err(format!("orbit {i} differs at step {j}: {} vs {}", a.x, b.x));
            }
        }
    }
    Ok("1000 orbits of 1000 steps identical".into())
}
