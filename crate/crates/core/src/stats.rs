//! Small statistical helpers: binomial confidence intervals, least squares,
//! percentiles and log-domain means.

use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for a binomial proportion.
pub fn wilson(hits: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if hits >= trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Ordinary least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    /// Root-mean-square residual.
    pub rms_residual: f64,
    pub points: usize,
}

/// Fits `y = intercept + slope * x`. Returns `None` for fewer than two
/// points or a degenerate abscissa.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let slope_se = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Some(LineFit { slope, intercept, slope_se, rms_residual: (sse / nf).sqrt(), points: n })
}

/// Linear-interpolated percentile, `q` in [0, 1]. Sorts a copy.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Running log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
    count: u64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0, count: 0 }
    }
}

impl LogSumExp {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        if v == f64::NEG_INFINITY {
            return;
        }
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    /// Combines two accumulators; order-dependent only in the last bits,
    /// callers merge in a fixed order.
    pub fn merge(&mut self, other: &LogSumExp) {
        self.count += other.count;
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max > self.max {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    /// log of the sample mean of `exp(v)`.
    pub fn log_mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.max + self.sum.ln() - (self.count as f64).ln()
    }
}

/// Serde helpers writing non-finite floats as the strings `"inf"`, `"-inf"`
/// and `"nan"`, since JSON has no literal for them.
pub mod json_float {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub mod option {
        use serde::Serializer;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }
    }
}
