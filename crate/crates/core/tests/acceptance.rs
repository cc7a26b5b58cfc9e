//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
//! criterion fails. Reference values are computed here from closed forms or
//! independent code, never taken from the library.
//!
//! `cargo test --release --test acceptance` (about ten minutes on one core).

mod common;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use devgibbs::config::load_config;
use devgibbs::dynamics::{birkhoff_sum, MapSystem, Observable, Point};
use devgibbs::run::{run, RunOptions};
use devgibbs::spec_probe::{exactness_time, shadow_search, OrbitPiece};
use devgibbs::zoo::{make_doubling, make_quadratic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

type Outcome = Result<String, String>;

struct Run {
    dir: PathBuf,
    summary: Map<String, Value>,
    elapsed: Duration,
}

/// Single-threaded runs of the bundled configs, kept for the determinism
/// comparison.
struct Runs {
    root: tempfile::TempDir,
    done: RefCell<BTreeMap<String, Run>>,
}

impl Runs {
    fn config_path(stem: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{stem}.toml"))
    }

    fn execute(&self, stem: &str, workers: usize) -> Result<Run, String> {
        let cfg = load_config(&Self::config_path(stem)).map_err(|e| format!("{stem}: {e}"))?;
        let dir = self.root.path().join(format!("{stem}-w{workers}"));
        let started = Instant::now();
        let out = run(&cfg, &RunOptions { workers: Some(workers), output: Some(dir.clone()) })
            .map_err(|e| format!("{stem}: {e}"))?;
        Ok(Run { dir, summary: out.summary, elapsed: started.elapsed() })
    }

    /// Runs `stem` with one worker unless that already happened, then hands
    /// the run to `f`.
    fn with<T>(&self, stem: &str, f: impl FnOnce(&Run) -> T) -> Result<T, String> {
        if !self.done.borrow().contains_key(stem) {
            let r = self.execute(stem, 1)?;
            self.done.borrow_mut().insert(stem.into(), r);
        }
        Ok(f(&self.done.borrow()[stem]))
    }
}

fn num(s: &Map<String, Value>, key: &str) -> Result<f64, String> {
    match s.get(key) {
        Some(Value::Number(n)) => Ok(n.as_f64().unwrap()),
        Some(Value::String(t)) => t.parse().map_err(|_| format!("{key} = {t:?} is not a number")),
        other => Err(format!("{key} missing or not numeric: {other:?}")),
    }
}

fn flag(s: &Map<String, Value>, key: &str) -> Result<bool, String> {
    s.get(key).and_then(Value::as_bool).ok_or_else(|| format!("{key} missing or not a bool"))
}

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    Ok(lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect())
}

fn field(row: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    row.get(key).ok_or(format!("column {key} missing"))?.parse().map_err(|e| format!("{key}: {e}"))
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn within_time(r: &Run, limit: u64, what: &str) -> Result<(), String> {
    check(r.elapsed.as_secs_f64() <= limit as f64, || {
        format!("{what} took {:.1} s, limit {limit} s", r.elapsed.as_secs_f64())
    })
}

/// `P(Bin(n, 1/2) ≥ k)` by exact integer arithmetic.
fn binomial_upper_tail(n: u32, k: u32) -> f64 {
    let mut c: u128 = 1;
    let mut total: u128 = 0;
    for j in 0..=n {
        if j >= k {
            total += c;
        }
        c = c * u128::from(n - j) / u128::from(j + 1);
    }
    total as f64 / 2f64.powi(n as i32)
}

fn cramer_rate(c: f64) -> f64 {
    let h = -(c * c.ln() + (1.0 - c) * (1.0 - c).ln());
    2f64.ln() - h
}

fn criterion_1(runs: &Runs) -> Outcome {
    runs.with("doubling_deviation", |r| {
        within_time(r, 120, "deviation run")?;
        let rows = read_csv(&r.dir.join("rate_curve.csv"))?;
        check(rows.len() == 21, || format!("{} rows, expected 21", rows.len()))?;
        for row in &rows {
            let n = field(row, "n")? as u32;
            // ⌈0.7n⌉ in integers.
            let exact = binomial_upper_tail(n, (7 * n).div_ceil(10));
            let (lo, hi) = (field(row, "ci_low")?, field(row, "ci_high")?);
            check(lo <= exact && exact <= hi, || format!("n={n}: exact {exact:.3e} outside [{lo:.3e}, {hi:.3e}]"))?;
        }
        let est = num(&r.summary, "rate_estimate")?;
        let want = -cramer_rate(0.7);
        check((est - want).abs() <= 0.02, || format!("rate_estimate {est:.4} vs {want:.4}"))?;
        Ok(format!(
            "21/21 exact tails inside CI, rate {est:.4} vs {want:.4}, {:.1} s",
            r.elapsed.as_secs_f64()
        ))
    })?
}

fn criterion_2(runs: &Runs) -> Outcome {
    runs.with("doubling_deviation", |r| {
        let rate = num(&r.summary, "legendre_rate")?;
        let want = cramer_rate(0.7);
        check((rate - want).abs() <= 0.01, || format!("I(0.7) {rate:.4} vs {want:.4}"))?;
        let at_mean = num(&r.summary, "legendre_rate_at_mean")?;
        check(at_mean.abs() <= 0.005, || format!("I(mean) = {at_mean:.4}"))?;
        let psi1 = num(&r.summary, "psi_at_1")?;
        // Free energy of a fair indicator: log((1 + e^t)/2).
        let closed = ((1.0 + 1f64.exp()) / 2.0).ln();
        check((psi1 - closed).abs() <= 0.005, || format!("ψ̂(1) {psi1:.4} vs closed form {closed:.4}"))?;
        Ok(format!(
            "I(0.7) {rate:.4}, I(mean) {at_mean:.4}, ψ̂(1) {psi1:.4} vs log((1+e)/2) = {closed:.4} (listed 0.4338 is log cosh 1)"
        ))
    })?
}

fn criterion_3(runs: &Runs) -> Outcome {
    runs.with("doubling_deviation", |r| {
        let tail = r.summary.get("tail_rate").and_then(Value::as_str);
        check(tail == Some("-inf"), || format!("tail term {tail:?}, expected -inf"))?;
        check(flag(&r.summary, "upper_ok")?, || "upper inequality fails".into())?;
        check(flag(&r.summary, "lower_ok")?, || "lower inequality fails".into())?;
        let report: Value = serde_json::from_str(
            &std::fs::read_to_string(r.dir.join("bound_report.json")).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let slack = report.get("slack").and_then(Value::as_f64);
        check(slack == Some(0.02), || format!("slack {slack:?}"))?;
        Ok("both inequalities hold with slack 0.02, tail term -inf".into())
    })?
}

fn criterion_4(runs: &Runs) -> Outcome {
    let mut parts = Vec::new();
    for (stem, exact) in [("doubling_entropy", 2f64.ln()), ("pe_entropy", 4f64.ln())] {
        let part = runs.with(stem, |r| -> Outcome {
            within_time(r, 300, stem)?;
            let h = num(&r.summary, "entropy")?;
            check((h - exact).abs() <= 0.05 * exact, || format!("{stem}: {h:.4} vs {exact:.4}"))?;
            Ok(format!("{h:.4} vs {exact:.4} ({:.1} s)", r.elapsed.as_secs_f64()))
        })??;
        parts.push(part);
    }
    Ok(format!("doubling {}, x4 {}", parts[0], parts[1]))
}

fn criterion_5(runs: &Runs) -> Outcome {
    let mp = runs.with("mp_tail", |r| -> Outcome {
        within_time(r, 600, "mp tail")?;
        let (slope, ll, sl) =
            (num(&r.summary, "loglog_slope")?, num(&r.summary, "loglog_residual")?, num(&r.summary, "semilog_residual")?);
        let (a, b) = (num(&r.summary, "window_start")?, num(&r.summary, "window_end")?);
        check(a == 100.0 && b == 1000.0, || format!("window [{a}, {b}]"))?;
        check((slope + 1.0).abs() <= 0.3, || format!("MP log-log slope {slope:.3}"))?;
        check(ll < sl, || format!("MP log-log residual {ll:.4} ≥ semilog {sl:.4}"))?;
        Ok(format!("MP slope {slope:.3} (res {ll:.3} < {sl:.3})"))
    })??;
    let q = runs.with("quadratic_tail", |r| -> Outcome {
        within_time(r, 600, "quadratic tail")?;
        let (slope, ll, sl) =
            (num(&r.summary, "semilog_slope")?, num(&r.summary, "loglog_residual")?, num(&r.summary, "semilog_residual")?);
        check(slope < -0.01, || format!("quadratic semilog slope {slope:.4}"))?;
        check(sl < ll, || format!("quadratic semilog residual {sl:.4} ≥ log-log {ll:.4}"))?;
        Ok(format!("quadratic semilog slope {slope:.4} (res {sl:.3} < {ll:.3})"))
    })??;
    Ok(format!("{mp}, {q}"))
}

fn criterion_6() -> Outcome {
    // Invariant density 1/(π√(1−x²)) of x ↦ 1 − 2x²; with x = cos θ the
    // exponent is the mean of log|4 cos θ| over θ uniform on [0, π].
    let m = 2_000_000;
    let h = std::f64::consts::PI / m as f64;
    let oracle = (0..m).map(|i| (4.0 * ((i as f64 + 0.5) * h).cos()).abs().ln()).sum::<f64>() / m as f64;

    let map = std::sync::Arc::new(make_quadratic(2.0).map_err(|e| e.to_string())?);
    let g = Observable::log_derivative(map.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..1000 {
        let x = map.domain().sample_uniform(&mut rng);
        total += birkhoff_sum(map.as_ref(), &g, x, n).map_err(|e| e.to_string())? / n as f64;
    }
    let mean = total / 1000.0;
    check((mean - oracle).abs() <= 0.02 * oracle, || format!("Birkhoff mean {mean:.4} vs oracle {oracle:.4}"))?;
    Ok(format!("Birkhoff mean {mean:.4} vs quadrature {oracle:.4}"))
}

fn criterion_7(runs: &Runs) -> Outcome {
    runs.with("doubling_gibbs", |r| {
        let eps = 1.0 / 64.0;
        let rows = read_csv(&r.dir.join("gibbs_probe.csv"))?;
        let (mut lo, mut hi) = (f64::INFINITY, 0f64);
        for row in &rows {
            let n = field(row, "n")?;
            // Dyadic oracle: ν(B(x, n, ε)) = 2ε·2⁻ⁿ.
            let ratio = field(row, "mass")? * 2f64.powf(n) / (2.0 * eps);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        check(rows.len() == 210, || format!("{} probe rows, expected 210", rows.len()))?;
        check(lo >= 0.9 && hi <= 1.1, || format!("mass·2ⁿ/2ε in [{lo:.4}, {hi:.4}]"))?;
        let s = num(&r.summary, "subexp_statistic")?;
        check(s <= 0.02, || format!("subexp statistic {s:.4}"))?;
        Ok(format!("mass·2ⁿ/2ε in [{lo:.4}, {hi:.4}], subexp {s:.4}"))
    })?
}

fn criterion_8(runs: &Runs) -> Outcome {
    let c = runs.with("quadratic_contraction", |r| -> Outcome {
        let (frac, pts) = (num(&r.summary, "min_pass_fraction")?, num(&r.summary, "points")?);
        check(pts == 100.0, || format!("{pts} hyperbolic times tested"))?;
        check(frac >= 0.99, || format!("min pass fraction {frac:.4}"))?;
        Ok(format!("min pass fraction {frac:.4} over {pts} times"))
    })??;
    let d = runs.with("quadratic_distortion", |r| -> Outcome {
        let v = num(&r.summary, "variation")?;
        check(v < 0.1, || format!("K̂₀ variation {v:.4}"))?;
        Ok(format!("K̂₀ variation {v:.4}"))
    })??;
    Ok(format!("{c}, {d}"))
}

fn circle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn criterion_9(runs: &Runs) -> Outcome {
    let d = make_doubling();
    let eps = 1.0 / 64.0;
    let e = exactness_time(&d, eps, 64, 50).map_err(|e| e.to_string())?;
    let oracle = (0..).find(|&k| 2.0 * eps * 2f64.powi(k) >= 1.0).unwrap() as usize;
    check(e.n == Some(oracle) && oracle == 5, || format!("exactness {:?} vs {oracle}", e.n))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..20 {
        let (x1, x2): (f64, f64) = (rng.random(), rng.random());
        let pieces = [OrbitPiece::new(Point::new(x1), 5).unwrap(), OrbitPiece::new(Point::new(x2), 5).unwrap()];
        let s = shadow_search(&d, &pieces, eps, &[6]).map_err(|e| e.to_string())?;
        let z = s.point.ok_or(format!("trial {trial}: no shadowing point"))?.x;
        // Forward check: z follows x1 for 0..=5, then f¹¹z follows x2.
        let step = |v: f64| (2.0 * v).rem_euclid(1.0);
        let (mut w, mut a, mut b) = (z, x1, x2);
        for j in 0..=16 {
            if j <= 5 && circle_dist(w, a) > eps {
                return Err(format!("trial {trial}: step {j} leaves the first ball"));
            }
            if j >= 11 && circle_dist(w, b) > eps {
                return Err(format!("trial {trial}: step {j} leaves the second ball"));
            }
            if j >= 11 {
                b = step(b);
            }
            w = step(w);
            a = step(a);
        }
    }

    let doubling = runs.with("doubling_spec", |r| -> Outcome {
        let h = num(&r.summary, "headline")?;
        check(h <= 0.01, || format!("doubling headline {h:.4}"))?;
        Ok(format!("doubling headline {h:.4}"))
    })??;
    let pe = runs.with("pe_spec", |r| -> Outcome {
        match r.summary.get("headline") {
            Some(Value::Null) | None => {
                Err("x4 − 0.55 sin: headline censored, no exactness time (0 is attracting)".into())
            }
            _ => {
                let h = num(&r.summary, "headline")?;
                check(h <= 0.05, || format!("x4 − 0.55 sin headline {h:.4}"))?;
                Ok(format!("x4 − 0.55 sin headline {h:.4}"))
            }
        }
    })?;
    let companion = pe_companion().unwrap_or_else(|e| format!("companion failed: {e}"));
    match pe {
        Ok(p) => Ok(format!("N(1/64) = 5, 20 shadows verified, {doubling}, {p}; {companion}")),
        Err(p) => Err(format!("N(1/64) = 5, 20 shadows verified, {doubling}; {p}; {companion}")),
    }
}

/// Same probe at a = 0.46, where 0 is repelling; reported only.
fn pe_companion() -> Outcome {
    let text = std::fs::read_to_string(Runs::config_path("pe_spec")).map_err(|e| e.to_string())?;
    let cfg = devgibbs::config::parse_config(&text.replace("a = 0.55", "a = 0.46")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = run(&cfg, &RunOptions { workers: Some(1), output: Some(dir.path().into()) }).map_err(|e| e.to_string())?;
    Ok(format!("info: a = 0.46 headline {}", out.summary.get("headline").unwrap_or(&Value::Null)))
}

fn criterion_10(runs: &Runs) -> Outcome {
    let q = runs.with("quadratic_delta", |r| -> Outcome {
        let d = num(&r.summary, "delta_hat")?;
        check(d < -0.005, || format!("quadratic δ̂ {d:.4}"))?;
        Ok(format!("quadratic δ̂ {d:.4}"))
    })??;
    let mp = runs.with("mp_delta", |r| -> Outcome {
        let d = num(&r.summary, "delta_hat")?;
        check(d.abs() <= 0.01, || format!("MP δ̂ {d:.4}"))?;
        Ok(format!("MP δ̂ {d:.4}"))
    })??;
    Ok(format!("{q}, {mp}"))
}

fn data_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if (name.ends_with(".csv") || name.ends_with(".json")) && name != "manifest.json" {
            out.insert(name, std::fs::read(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn criterion_11(runs: &Runs) -> Outcome {
    let mut stems: Vec<String> = std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    let mut files = 0;
    for stem in &stems {
        let single = runs.with(stem, |r| data_files(&r.dir))??;
        let multi = data_files(&runs.execute(stem, 3)?.dir)?;
        check(single.keys().eq(multi.keys()), || format!("{stem}: file sets differ"))?;
        for (name, bytes) in &single {
            check(multi[name] == *bytes, || format!("{stem}/{name} differs between 1 and 3 workers"))?;
        }
        files += single.len();
    }
    Ok(format!("{} configs, {files} data files identical with 1 and 3 workers", stems.len()))
}

fn criterion_12() -> Outcome {
    let a = common::hyperbolic_detector_suite()?;
    let b = common::separated_set_suite()?;
    let c = common::viana_fibre_suite()?;
    Ok(format!("detector: {a}; separated sets: {b}; Viana: {c}"))
}

fn main() {
    let runs = Runs { root: tempfile::tempdir().expect("tempdir"), done: RefCell::new(BTreeMap::new()) };
    let criteria: Vec<(u32, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, Box::new(|| criterion_1(&runs))),
        (2, Box::new(|| criterion_2(&runs))),
        (3, Box::new(|| criterion_3(&runs))),
        (4, Box::new(|| criterion_4(&runs))),
        (5, Box::new(|| criterion_5(&runs))),
        (6, Box::new(criterion_6)),
        (7, Box::new(|| criterion_7(&runs))),
        (8, Box::new(|| criterion_8(&runs))),
        (9, Box::new(|| criterion_9(&runs))),
        (10, Box::new(|| criterion_10(&runs))),
        (11, Box::new(|| criterion_11(&runs))),
        (12, Box::new(criterion_12)),
    ];
    let only: Option<Vec<u32>> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.parse().ok())
        .collect::<Option<Vec<u32>>>()
        .filter(|v| !v.is_empty());
    let mut failed = 0;
    for (id, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2}  {tag}  ({secs:>6.1} s)  {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
