//! Reference measures the Monte Carlo probes draw from.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::dynamics::{MapSystem, Point};

/// How sample points are drawn.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Normalised Lebesgue measure on the domain.
    Lebesgue,
    /// Lebesgue start pushed forward `burn_in` steps: a proxy for the
    /// absolutely continuous invariant measure.
    Orbit { burn_in: usize },
    /// Uniform choice from a fixed point cloud (an empirical measure).
    Points {
        #[serde(skip)]
        points: Arc<Vec<Point>>,
        count: usize,
    },
}

impl Sampler {
    pub fn points(points: Vec<Point>) -> Self {
        let count = points.len();
        Sampler::Points { points: Arc::new(points), count }
    }

    pub fn draw<M: MapSystem + ?Sized, R: Rng + ?Sized>(&self, map: &M, rng: &mut R) -> Point {
        match self {
            Sampler::Lebesgue => map.domain().sample_uniform(rng),
            Sampler::Orbit { burn_in } => {
                let mut p = map.domain().sample_uniform(rng);
                for _ in 0..*burn_in {
                    p = map.apply(p);
                }
                p
            }
            Sampler::Points { points, .. } => points[rng.random_range(0..points.len())],
        }
    }

    pub fn label(&self) -> String {
        match self {
            Sampler::Lebesgue => "lebesgue".into(),
            Sampler::Orbit { burn_in } => format!("orbit(burn_in={burn_in})"),
            Sampler::Points { count, .. } => format!("points({count})"),
        }
    }

    pub fn is_lebesgue(&self) -> bool {
        matches!(self, Sampler::Lebesgue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::zoo::{make_doubling, make_mp, make_quadratic};

    #[test]
    fn draws_stay_in_domain() {
        let q = make_quadratic(2.0).unwrap();
        let mut rng = StreamKey::new(1, "t").stream(0);
        for s in [Sampler::Lebesgue, Sampler::Orbit { burn_in: 50 }] {
            for _ in 0..1000 {
                assert!(q.domain().contains(s.draw(&q, &mut rng)));
            }
        }
    }

    #[test]
    fn orbit_sampler_pushes_forward() {
        let mp = make_mp(0.5).unwrap();
        let mut a = StreamKey::new(2, "t").stream(0);
        let mut b = StreamKey::new(2, "t").stream(0);
        let start = Sampler::Lebesgue.draw(&mp, &mut a);
        let pushed = Sampler::Orbit { burn_in: 3 }.draw(&mp, &mut b);
        assert_eq!(pushed, mp.apply(mp.apply(mp.apply(start))));
    }

    #[test]
    fn point_cloud_sampler() {
        let d = make_doubling();
        let cloud = vec![Point::new(0.1), Point::new(0.2)];
        let s = Sampler::points(cloud.clone());
        let mut rng = StreamKey::new(3, "t").stream(0);
        let mut seen = [false; 2];
        for _ in 0..100 {
            let p = s.draw(&d, &mut rng);
            seen[cloud.iter().position(|c| *c == p).unwrap()] = true;
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(s.label(), "points(2)");
        assert!(Sampler::Lebesgue.is_lebesgue() && !s.is_lebesgue());
    }
}
