//! Finite unions of closed intervals on the line, used for image
//! propagation and preimage bookkeeping of one-dimensional maps.

use serde::Serialize;

/// Components closer than this are merged.
pub const MERGE_TOL: f64 = 1e-12;
/// Upper bound on tracked components; beyond it the union is coarsened by
/// merging the closest neighbours.
pub const MAX_COMPONENTS: usize = 10_000;

/// Sorted, pairwise-disjoint closed intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IntervalSet {
    parts: Vec<(f64, f64)>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(lo: f64, hi: f64) -> Self {
        let mut s = Self::empty();
        s.insert(lo, hi);
        s
    }

    pub fn from_parts<I: IntoIterator<Item = (f64, f64)>>(parts: I) -> Self {
        let mut raw: Vec<(f64, f64)> =
            parts.into_iter().filter(|(a, b)| a <= b && a.is_finite() && b.is_finite()).collect();
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (a, b) in raw {
            match out.last_mut() {
                Some(last) if a <= last.1 + MERGE_TOL => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        let mut s = Self { parts: out };
        s.coarsen();
        s
    }

    fn coarsen(&mut self) {
        while self.parts.len() > MAX_COMPONENTS {
            let (i, _) = self
                .parts
                .windows(2)
                .enumerate()
                .map(|(i, w)| (i, w[1].0 - w[0].1))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least two components");
            let hi = self.parts[i + 1].1;
            self.parts[i].1 = hi;
            self.parts.remove(i + 1);
        }
    }

    pub fn insert(&mut self, lo: f64, hi: f64) {
        let mut parts = std::mem::take(&mut self.parts);
        parts.push((lo, hi));
        *self = Self::from_parts(parts);
    }

    pub fn union(&self, other: &IntervalSet) -> IntervalSet {
        Self::from_parts(self.parts.iter().chain(other.parts.iter()).copied())
    }

    pub fn intersect(&self, other: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.parts.len() && j < other.parts.len() {
            let (a0, a1) = self.parts[i];
            let (b0, b1) = other.parts[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo <= hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { parts: out }
    }

    pub fn parts(&self) -> &[(f64, f64)] {
        &self.parts
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.parts.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.parts.iter().any(|&(a, b)| a - MERGE_TOL <= x && x <= b + MERGE_TOL)
    }

    /// True when `[lo, hi]` is contained in the union up to the merge tolerance.
    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        self.parts.iter().any(|&(a, b)| a <= lo + MERGE_TOL && b >= hi - MERGE_TOL)
    }

    /// Components of `[lo, hi]` not covered by the union.
    pub fn gaps_within(&self, lo: f64, hi: f64) -> IntervalSet {
        let mut out = Vec::new();
        let mut cursor = lo;
        for &(a, b) in &self.parts {
            if b < cursor {
                continue;
            }
            if a > hi {
                break;
            }
            if a > cursor + MERGE_TOL {
                out.push((cursor, a.min(hi)));
            }
            cursor = cursor.max(b);
        }
        if cursor < hi - MERGE_TOL {
            out.push((cursor, hi));
        }
        Self { parts: out }
    }

    /// Component containing `x`, if any.
    pub fn component_of(&self, x: f64) -> Option<(f64, f64)> {
        self.parts.iter().copied().find(|&(a, b)| a - MERGE_TOL <= x && x <= b + MERGE_TOL)
    }
}

/// Splits a circle arc `[lo, hi]` given in lifted coordinates into pieces of
/// `[0, 1]`. Arcs of length at least one cover the circle.
pub fn circle_arc(lo: f64, hi: f64) -> IntervalSet {
    if hi - lo >= 1.0 - MERGE_TOL {
        return IntervalSet::single(0.0, 1.0);
    }
    let shift = lo.floor();
    let (a, b) = (lo - shift, hi - shift);
    if b <= 1.0 {
        IntervalSet::single(a, b)
    } else {
        IntervalSet::from_parts([(a, 1.0), (0.0, b - 1.0)])
    }
}
