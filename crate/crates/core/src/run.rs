//! Orchestration: dispatches a validated config to its probe, writes CSV,
//! JSON and SVG outputs, and records a manifest with data-file checksums.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{CheckRule, ExperimentConfig, Kind};
use crate::deviation::{
    bound_report, legendre_rate, psi_table, rate_curve, rate_estimate, DeviationExperiment, TailRate,
};
use crate::dynamics::{MapSystem, Point, PotentialModel};
use crate::error::{Error, Result};
use crate::gibbs::{delta_set_rate, gibbs_probe, subexp_from_report};
use crate::hyperbolic::{classify_tail, hyperbolic_times, tail_curve, HyperbolicParams, TailCurve};
use crate::metric::{
    backward_contraction_check, calibrate_delta1, delta1_cap, distortion_estimate, katok_entropy,
};
use crate::parallel::map_indexed;
use crate::report::{json_number, svg_plot, to_json, Csv, Series};
use crate::rng::StreamKey;
use crate::sampler::Sampler;
use crate::spec_probe::{gap_estimate, nonuniform_spec_statistic, shadow_cross_check, SHADOW_MAX_N};

/// Environment variable overriding the worker count of the config.
pub const WORKERS_ENV: &str = "DEVGIBBS_WORKERS";

const PARTIAL_DIR: &str = ".partial";
const SHADOW_POINTS: usize = 20;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Takes precedence over the environment and the config.
    pub workers: Option<usize>,
    /// Takes precedence over `output` in the config.
    pub output: Option<PathBuf>,
}

/// A probe failure tagged with the stage that raised it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}`: {}", self.stage, self.error)
    }
}

impl std::error::Error for RunError {}

fn at(stage: &'static str) -> impl Fn(Error) -> RunError {
    move |error| RunError { stage, error }
}

type Staged<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
    /// CSV/JSON data covered by the determinism guarantee; SVG plots are not.
    pub data: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub kind: Kind,
    pub seed: u64,
    pub config: Value,
    pub files: Vec<FileEntry>,
    pub workers: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub key: String,
    pub value: Option<Value>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: PathBuf,
    pub manifest: RunManifest,
    pub summary: Map<String, Value>,
    pub checks: Vec<CheckOutcome>,
}

impl RunOutcome {
    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Worker count: explicit option, then the environment, then the config,
/// then the number of available cores.
pub fn worker_count(cfg: &ExperimentConfig, explicit: Option<usize>) -> Result<usize> {
    if let Some(w) = explicit {
        return positive_workers(w);
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let w = v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a worker count")))?;
        return positive_workers(w);
    }
    match cfg.workers {
        Some(w) => positive_workers(w),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn positive_workers(w: usize) -> Result<usize> {
    if w == 0 {
        Err(Error::Config("worker count must be ≥ 1".into()))
    } else {
        Ok(w)
    }
}

#[cfg(feature = "parallel")]
fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Range(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_pool<T: Send>(_workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

/// Files and headline scalars produced by one probe.
#[derive(Default)]
struct Emit {
    files: Vec<(String, String)>,
    summary: Map<String, Value>,
}

impl Emit {
    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.into(), contents));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Staged<()> {
        let text = to_json(value).map_err(at("report"))?;
        self.file(name, text);
        Ok(())
    }

    fn set(&mut self, key: &str, v: impl Into<Value>) {
        self.summary.insert(key.into(), v.into());
    }

    fn num(&mut self, key: &str, v: f64) {
        self.summary.insert(key.into(), json_number(v));
    }

    fn opt(&mut self, key: &str, v: Option<f64>) {
        self.summary.insert(key.into(), v.map_or(Value::Null, json_number));
    }
}

/// Runs the experiment and writes its outputs. Files are staged in a
/// `.partial` subdirectory and moved into place only when every stage
/// succeeded; on failure the staging directory is removed.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Staged<RunOutcome> {
    let started = Instant::now();
    let workers = worker_count(cfg, opts.workers).map_err(at("setup"))?;
    let out = opts
        .output
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.kind.as_str()));
    let mut emit = with_pool(workers, || dispatch(cfg)).map_err(at("setup"))??;
    emit.set("kind", cfg.kind.as_str());
    emit.set("map", cfg.map.build().map(|m| m.label()).unwrap_or_default());
    emit.set("seed", cfg.seed);
    let summary = emit.summary.clone();
    emit.json("summary.json", &summary)?;

    let mut files: Vec<FileEntry> = emit
        .files
        .iter()
        .map(|(name, text)| FileEntry {
            name: name.clone(),
            bytes: text.len(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
            data: !name.ends_with(".svg"),
        })
        .collect();
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: cfg.kind,
        seed: cfg.seed,
        config: serde_json::to_value(cfg).unwrap_or(Value::Null),
        files,
        workers,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    emit.json("manifest.json", &manifest)?;
    write_outputs(&out, &emit.files).map_err(at("write"))?;
    let checks = evaluate_checks(&cfg.check, &summary);
    Ok(RunOutcome { output: out, manifest, summary, checks })
}

fn write_outputs(out: &Path, files: &[(String, String)]) -> Result<()> {
    let io = |what: &str, p: &Path, e: std::io::Error| Error::Range(format!("cannot {what} {}: {e}", p.display()));
    let staging = out.join(PARTIAL_DIR);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| io("clear", &staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| io("create", &staging, e))?;
    let result = (|| {
        for (name, text) in files {
            let p = staging.join(name);
            std::fs::write(&p, text).map_err(|e| io("write", &p, e))?;
        }
        for (name, _) in files {
            let (from, to) = (staging.join(name), out.join(name));
            std::fs::rename(&from, &to).map_err(|e| io("move", &to, e))?;
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&staging);
    result
}

fn dispatch(cfg: &ExperimentConfig) -> Staged<Emit> {
    let map = cfg.map.build().map_err(at("map"))?;
    let sampler = cfg.sampler().map_err(at("sampler"))?;
    match cfg.kind {
        Kind::Deviation => run_deviation(cfg, map, &sampler, false),
        Kind::Bounds => run_deviation(cfg, map, &sampler, true),
        Kind::Tail => run_tail(cfg, &*map, &sampler),
        Kind::Entropy => run_entropy(cfg, &*map, &sampler),
        Kind::Gibbs => run_gibbs(cfg, map, &sampler),
        Kind::Spec => run_spec(cfg, &*map, &sampler),
        Kind::Contraction => run_contraction(cfg, map, &sampler, false),
        Kind::Distortion => run_contraction(cfg, map, &sampler, true),
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Staged<&'a T> {
    s.as_ref().ok_or_else(|| RunError { stage: "config", error: Error::Config(format!("missing [{name}] section")) })
}

fn default_t_grid() -> Vec<f64> {
    (-80..=80).map(|i| i as f64 * 0.05).collect()
}

/// `[min(10, …), last n with at least `min_survivors` survivors]`.
fn default_tail_window(curve: &TailCurve, min_survivors: usize) -> (usize, usize) {
    let end = curve.rows.iter().filter(|r| r.survivors >= min_survivors as u64).map(|r| r.n).max().unwrap_or(1);
    (10.min(end), end)
}

fn tail_files(emit: &mut Emit, curve: &TailCurve, params: &HyperbolicParams, window: (usize, usize)) -> Staged<()> {
    let mut csv = Csv::new(&["n", "survivors", "fraction", "ci_low", "ci_high"]);
    for r in &curve.rows {
        csv.row(vec![r.n.into(), r.survivors.into(), r.fraction.into(), r.ci_low.into(), r.ci_high.into()]);
    }
    emit.file("tail.csv", csv.finish());
    let fit = classify_tail(curve, window).ok();
    emit.json(
        "tail_fit.json",
        &json!({
            "kind": fit.as_ref().map(|f| f.kind),
            "semilog": fit.as_ref().map(|f| f.semilog),
            "loglog": fit.as_ref().map(|f| f.loglog),
            "window": [window.0, window.1],
            "samples": curve.samples,
            "singular": curve.singular,
            "truncated_at": curve.truncated_at,
            "sampler": curve.sampler,
            "hyperbolic": params,
        }),
    )?;
    let series = Series {
        name: "m(Γ_n)".into(),
        points: curve.rows.iter().map(|r| (r.n as f64, r.fraction)).collect(),
    };
    emit.file("tail.svg", svg_plot("Hyperbolic-time tail", "n", "fraction with n₁ > n", &[series], true));
    Ok(())
}

fn run_deviation(cfg: &ExperimentConfig, map: Arc<dyn MapSystem>, sampler: &Sampler, bounds: bool) -> Staged<Emit> {
    let d = section(&cfg.deviation, "deviation")?;
    let mut emit = Emit::default();
    let g = cfg.observable(Some(map.clone())).map_err(at("observable"))?;
    let exp = DeviationExperiment::new(
        map.clone(),
        g.clone(),
        d.level,
        d.direction,
        sampler.clone(),
        d.n.clone(),
        d.samples,
        cfg.seed,
    )
    .map_err(at("deviation"))?;
    let curve = rate_curve(&exp).map_err(at("rate_curve"))?;
    let last_n = *d.n.last().expect("validated grid");
    let window = d.window.as_ref().map_or((d.n[0], last_n), |w| (w[0], w[1]));
    let est = rate_estimate(&curve, window).map_err(at("rate_estimate"))?;

    let t_grid = d.t_grid.clone().unwrap_or_else(default_t_grid);
    let psi_n = d.psi_n.unwrap_or(last_n);
    let psi = psi_table(&*map, sampler, &g, &t_grid, psi_n, d.psi_samples.unwrap_or(d.samples), cfg.seed)
        .map_err(at("free_energy"))?;
    let leg = legendre_rate(&psi.t, &psi.psi, d.level).map_err(at("legendre"))?;

    let params = cfg.hyperbolic_params(None).map_err(at("hyperbolic"))?;
    let tail = tail_curve(&*map, sampler, &params, d.tail_samples, cfg.seed).map_err(at("tail"))?;
    let tail_window = d.tail_window.as_ref().map_or_else(|| default_tail_window(&tail, 10), |w| (w[0], w[1]));
    let tail_rate = TailRate::from_curve(&map.label(), &tail, tail_window).map_err(at("tail"))?;
    let report = bound_report(&curve, &est, &tail_rate, &leg, d.slack).map_err(at("bound_report"))?;

    let mut csv = Csv::new(&["n", "hits", "samples", "p_hat", "ci_low", "ci_high", "log_rate", "flagged"]);
    for r in &curve.rows {
        csv.row(vec![
            r.n.into(),
            r.hits.into(),
            r.samples.into(),
            r.p_hat.into(),
            r.ci_low.into(),
            r.ci_high.into(),
            r.log_rate.into(),
            r.flagged.into(),
        ]);
    }
    emit.file("rate_curve.csv", csv.finish());
    let mut csv = Csv::new(&["t", "psi"]);
    for (t, p) in psi.t.iter().zip(&psi.psi) {
        csv.row(vec![(*t).into(), (*p).into()]);
    }
    emit.file("psi.csv", csv.finish());
    emit.json("bound_report.json", &report)?;

    let pts = |f: fn(&crate::deviation::RateRow) -> f64| -> Vec<(f64, f64)> {
        curve.rows.iter().map(|r| (r.n as f64, f(r))).collect()
    };
    emit.file(
        "rate_curve.svg",
        svg_plot(
            "Deviation probability",
            "n",
            "p̂",
            &[
                Series { name: "p̂".into(), points: pts(|r| r.p_hat) },
                Series { name: "95% low".into(), points: pts(|r| r.ci_low) },
                Series { name: "95% high".into(), points: pts(|r| r.ci_high) },
            ],
            true,
        ),
    );
    emit.file(
        "psi.svg",
        svg_plot(
            "Free energy",
            "t",
            "ψ̂(t)",
            &[Series { name: format!("n = {psi_n}"), points: psi.t.iter().copied().zip(psi.psi.iter().copied()).collect() }],
            false,
        ),
    );
    if bounds {
        tail_files(&mut emit, &tail, &params, tail_window)?;
    }

    emit.num("rate_estimate", est.slope);
    emit.num("rate_estimate_se", est.slope_se);
    emit.set("rate_rows_used", est.rows_used);
    emit.set("zero_hit_rows", curve.rows.iter().filter(|r| r.hits == 0).count());
    emit.num("legendre_rate", leg.rate);
    emit.num("legendre_t_star", leg.t_star);
    emit.set("legendre_boundary", leg.boundary);
    emit.num("psi_mean", psi.mean);
    let at_t = |t0: f64| psi.t.iter().position(|t| (t - t0).abs() < 1e-9).map(|i| psi.psi[i]);
    emit.opt("psi_at_1", at_t(1.0));
    if let Ok(l) = legendre_rate(&psi.t, &psi.psi, psi.mean) {
        emit.num("legendre_rate_at_mean", l.rate);
    }
    emit.num("tail_rate", tail_rate.rate);
    emit.num("upper_bound", report.upper_bound);
    emit.set("upper_ok", report.upper_ok);
    emit.set("lower_ok", report.lower_ok);
    emit.set("verdict", report.verdict.clone());
    Ok(emit)
}

fn run_tail(cfg: &ExperimentConfig, map: &dyn MapSystem, sampler: &Sampler) -> Staged<Emit> {
    let t = section(&cfg.tail, "tail")?;
    let mut emit = Emit::default();
    let params = cfg.hyperbolic_params(None).map_err(at("hyperbolic"))?;
    let curve = tail_curve(map, sampler, &params, t.samples, cfg.seed).map_err(at("tail"))?;
    let window = t.window.as_ref().map_or_else(|| default_tail_window(&curve, t.min_survivors), |w| (w[0], w[1]));
    let fit = classify_tail(&curve, window).map_err(at("tail_fit"))?;
    tail_files(&mut emit, &curve, &params, window)?;
    emit.set("tail_kind", serde_json::to_value(fit.kind).unwrap_or(Value::Null));
    emit.num("semilog_slope", fit.semilog.slope);
    emit.num("semilog_residual", fit.semilog.rms_residual);
    emit.num("loglog_slope", fit.loglog.slope);
    emit.num("loglog_residual", fit.loglog.rms_residual);
    emit.set("window_start", window.0);
    emit.set("window_end", window.1);
    emit.set("singular", curve.singular);
    Ok(emit)
}

fn run_entropy(cfg: &ExperimentConfig, map: &dyn MapSystem, sampler: &Sampler) -> Staged<Emit> {
    let e = section(&cfg.entropy, "entropy")?;
    let mut emit = Emit::default();
    let rep = katok_entropy(map, sampler, &e.n, &e.epsilon, e.delta, e.samples, cfg.seed).map_err(at("entropy"))?;
    let mut csv = Csv::new(&["epsilon", "n", "covering_count", "log_count"]);
    for r in &rep.rows {
        csv.row(vec![r.epsilon.into(), r.n.into(), r.covering_count.into(), r.log_count.into()]);
    }
    emit.file("entropy.csv", csv.finish());
    let slopes: Vec<Value> = rep.slopes.iter().map(|(eps, fit)| json!({ "epsilon": eps, "fit": fit })).collect();
    emit.json(
        "entropy.json",
        &json!({ "entropy": rep.entropy, "delta": rep.delta, "samples": rep.samples, "slopes": slopes }),
    )?;
    let series: Vec<Series> = rep
        .slopes
        .iter()
        .map(|(eps, _)| Series {
            name: format!("ε = {eps}"),
            points: rep.rows.iter().filter(|r| r.epsilon == *eps).map(|r| (r.n as f64, r.log_count)).collect(),
        })
        .collect();
    emit.file("entropy.svg", svg_plot("Covering numbers", "n", "log N(n, ε, δ)", &series, false));
    emit.num("entropy", rep.entropy);
    Ok(emit)
}

fn run_gibbs(cfg: &ExperimentConfig, map: Arc<dyn MapSystem>, sampler: &Sampler) -> Staged<Emit> {
    let g = section(&cfg.gibbs, "gibbs")?;
    let mut emit = Emit::default();
    let potential = PotentialModel::geometric(map.clone());
    let mut rng = StreamKey::new(cfg.seed, "gibbs_centres").stream(0);
    let centres: Vec<Point> = (0..g.centres).map(|_| sampler.draw(&*map, &mut rng)).collect();
    let probe = gibbs_probe(&*map, &potential, &Sampler::Lebesgue, &centres, &g.n, g.epsilon, g.samples, cfg.seed, g.mode)
        .map_err(at("gibbs_probe"))?;

    let mut csv = Csv::new(&[
        "x_id", "x", "theta", "n", "mass", "ci_low", "ci_high", "snphi", "k_hat", "log_k_over_n", "starved",
    ]);
    for e in &probe.entries {
        csv.row(vec![
            e.x_id.into(),
            e.x.x.into(),
            e.x.theta.into(),
            e.n.into(),
            e.mass.into(),
            e.ci_low.into(),
            e.ci_high.into(),
            e.snphi.into(),
            e.k_hat.into(),
            e.log_k_over_n.into(),
            e.starved.into(),
        ]);
    }
    emit.file("gibbs_probe.csv", csv.finish());

    // mass · e^{nP − S_nφ} / 2ε: 1 when the ball mass matches the Gibbs
    // prediction for a ball of Lebesgue length 2ε.
    let sandwich: Vec<f64> = probe
        .entries
        .iter()
        .map(|e| e.mass * (e.n as f64 * probe.pressure - e.snphi).exp() / (2.0 * g.epsilon))
        .collect();
    let (n0, n1) = (*g.n.iter().min().expect("validated"), *g.n.iter().max().expect("validated"));
    let subexp = if n0 < n1 { Some(subexp_from_report(&probe, n0, n1).map_err(at("subexp"))?) } else { None };
    if let Some(s) = &subexp {
        let mut csv = Csv::new(&["x_id", "x", "theta", "log_k_first", "log_k_last", "increment", "raw"]);
        for r in &s.rows {
            csv.row(vec![
                r.x_id.into(),
                r.x.x.into(),
                r.x.theta.into(),
                r.log_k_first.into(),
                r.log_k_last.into(),
                r.increment.into(),
                r.raw.into(),
            ]);
        }
        emit.file("subexp.csv", csv.finish());
    }

    let delta = match g.beta {
        None => None,
        Some(beta) => {
            let params = cfg.hyperbolic_params(None).map_err(at("hyperbolic"))?;
            let grid = g.delta_n.as_ref().ok_or_else(|| RunError {
                stage: "config",
                error: Error::Config("`gibbs.beta` needs `gibbs.delta_n`".into()),
            })?;
            Some(
                delta_set_rate(&*map, &params, &potential, sampler, beta, grid, g.delta_samples, cfg.seed)
                    .map_err(at("delta_set"))?,
            )
        }
    };
    if let Some(d) = &delta {
        let mut csv = Csv::new(&["n", "violations", "samples", "fraction", "ci_low", "ci_high"]);
        for r in &d.rows {
            csv.row(vec![r.n.into(), r.violations.into(), r.samples.into(), r.fraction.into(), r.ci_low.into(), r.ci_high.into()]);
        }
        emit.file("delta.csv", csv.finish());
        let series = Series { name: "violations".into(), points: d.rows.iter().map(|r| (r.n as f64, r.fraction)).collect() };
        emit.file("delta.svg", svg_plot("Gap-set violations", "n", "fraction", &[series], true));
    }

    let starved = probe.entries.iter().filter(|e| e.starved).count();
    emit.json(
        "gibbs.json",
        &json!({
            "epsilon": probe.epsilon,
            "delta0": probe.delta0,
            "pressure": probe.pressure,
            "potential": potential.label(),
            "growth": json_number(probe.growth),
            "undefined": probe.undefined,
            "starved": starved,
            "subexp": subexp.as_ref().map(|s| json!({
                "n_first": s.n_first,
                "n_last": s.n_last,
                "statistic": json_number(s.statistic),
                "raw_statistic": json_number(s.raw_statistic),
                "median_increment": json_number(s.median_increment),
                "flagged": s.flagged,
            })),
            "delta": delta.as_ref().map(|d| json!({
                "beta": d.beta,
                "c_beta": d.c_beta,
                "sup_phi": d.sup_phi,
                "sup_phi_clipped": d.sup_phi_clipped,
                "delta_hat": json_number(d.delta_hat),
                "delta_hat_se": json_number(d.delta_hat_se),
                "singular": d.singular,
            })),
        }),
    )?;
    let series: Vec<Series> = (0..centres.len().min(6))
        .map(|i| Series {
            name: format!("x{i}"),
            points: probe.entries.iter().filter(|e| e.x_id == i).filter_map(|e| e.k_hat.map(|k| (e.n as f64, k))).collect(),
        })
        .collect();
    emit.file("gibbs.svg", svg_plot("Gibbs constants", "n", "K̂_n", &series, true));

    emit.num("growth", probe.growth);
    emit.set("undefined", probe.undefined);
    emit.set("starved", starved);
    emit.opt("sandwich_min", sandwich.iter().copied().reduce(f64::min));
    emit.opt("sandwich_max", sandwich.iter().copied().reduce(f64::max));
    emit.opt("subexp_statistic", subexp.as_ref().map(|s| s.statistic));
    emit.opt("subexp_raw_statistic", subexp.as_ref().map(|s| s.raw_statistic));
    emit.opt("delta_hat", delta.as_ref().map(|d| d.delta_hat));
    emit.opt("c_beta", delta.as_ref().map(|d| d.c_beta));
    Ok(emit)
}

fn run_spec(cfg: &ExperimentConfig, map: &dyn MapSystem, sampler: &Sampler) -> Staged<Emit> {
    let s = section(&cfg.spec, "spec")?;
    let mut emit = Emit::default();
    let n_max = *s.n.iter().max().expect("validated");
    let params = cfg.hyperbolic_params(Some(n_max + (n_max / 10).max(100))).map_err(at("hyperbolic"))?;
    let (report, exact) = nonuniform_spec_statistic(
        map,
        sampler,
        &s.epsilon,
        &s.n,
        &params,
        s.samples,
        cfg.seed,
        s.exactness_grid,
        s.exactness_cap,
    )
    .map_err(at("spec"))?;

    let mut csv = Csv::new(&["epsilon", "n_eps", "cap", "grid", "estimated", "worst_x", "worst_theta"]);
    for e in &exact {
        csv.row(vec![
            e.epsilon.into(),
            e.n.into(),
            e.cap.into(),
            e.grid.into(),
            e.estimated.into(),
            e.worst_centre.map(|p| p.x).into(),
            e.worst_centre.map(|p| p.theta).into(),
        ]);
    }
    emit.file("exactness.csv", csv.finish());
    let mut csv = Csv::new(&["eps", "n", "n_eps", "p_hat", "p_over_n", "mean_p_over_n", "censored_fraction"]);
    for c in &report.cells {
        csv.row(vec![
            c.eps.into(),
            c.n.into(),
            c.n_eps.into(),
            c.p_hat.into(),
            c.p_over_n.into(),
            c.mean_p_over_n.into(),
            c.censored_fraction.into(),
        ]);
    }
    emit.file("gaps.csv", csv.finish());
    emit.json("gap_report.json", &report)?;
    let series: Vec<Series> = s
        .epsilon
        .iter()
        .map(|eps| Series {
            name: format!("ε = {eps}"),
            points: report.cells.iter().filter(|c| c.eps == *eps).filter_map(|c| c.p_over_n.map(|p| (c.n as f64, p))).collect(),
        })
        .collect();
    emit.file("gaps.svg", svg_plot("Specification gaps", "n", "sup p̂/n", &series, false));

    // Shadowing cross-check at the smallest resolved ε and the shortest
    // piece length the search can handle.
    let mut shadow = None;
    let resolved = exact.iter().filter_map(|e| e.n.map(|n| (e.epsilon, n))).min_by(|a, b| a.0.total_cmp(&b.0));
    let short_n = s.n.iter().copied().filter(|n| *n <= SHADOW_MAX_N).min();
    if let (true, Some((eps, n_eps)), Some(n)) = (s.shadow_trials > 0, resolved, short_n) {
        let mut rng = StreamKey::new(cfg.seed, "shadow_points").stream(0);
        let xs: Vec<Point> = (0..SHADOW_POINTS).map(|_| sampler.draw(map, &mut rng)).collect();
        let mut fractions = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            let Ok(gap) = gap_estimate(map, *x, n, n_eps, &params) else { continue };
            if let Some(f) = shadow_cross_check(map, &gap, eps, s.shadow_trials, cfg.seed.wrapping_add(i as u64))
                .map_err(at("shadow"))?
            {
                fractions.push(f);
            }
        }
        if !fractions.is_empty() {
            shadow = Some(fractions.iter().sum::<f64>() / fractions.len() as f64);
        }
    }

    emit.opt("headline", report.headline);
    emit.num("headline_eps", report.headline_eps);
    emit.set("headline_n", report.headline_n);
    let cell = report.cells.iter().find(|c| c.eps == report.headline_eps && c.n == report.headline_n);
    emit.opt("headline_censored_fraction", cell.map(|c| c.censored_fraction));
    emit.set("n_eps", cell.and_then(|c| c.n_eps));
    emit.opt("shadow_fraction", shadow);
    Ok(emit)
}

/// A sampled point with its first hyperbolic time `n ≥ min_n` and, when
/// asked for, a later one `n2 ≥ 2n`.
struct HypPoint {
    x: Point,
    n: usize,
    n2: Option<usize>,
}

fn hyperbolic_points(
    map: &dyn MapSystem,
    sampler: &Sampler,
    params: &HyperbolicParams,
    count: usize,
    min_n: usize,
    doubled: bool,
    seed: u64,
) -> Result<Vec<HypPoint>> {
    let mut rng = StreamKey::new(seed, "hyperbolic_points").stream(0);
    let mut out = Vec::with_capacity(count);
    let budget = count.saturating_mul(1_000).max(10_000);
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let x = sampler.draw(map, &mut rng);
        let Ok(rec) = hyperbolic_times(map, x, params) else { continue };
        let Some(&n) = rec.times.iter().find(|t| **t >= min_n.max(1)) else { continue };
        let n2 = rec.times.iter().copied().find(|t| *t >= 2 * n);
        if doubled && n2.is_none() {
            continue;
        }
        out.push(HypPoint { x, n, n2 });
    }
    if out.len() < count {
        return Err(Error::Sampling(format!(
            "found {} of {count} points with a hyperbolic time ≥ {min_n} within horizon {}",
            out.len(),
            params.horizon
        )));
    }
    Ok(out)
}

fn run_contraction(cfg: &ExperimentConfig, map: Arc<dyn MapSystem>, sampler: &Sampler, distortion: bool) -> Staged<Emit> {
    let c = section(&cfg.contraction, "contraction")?;
    let mut emit = Emit::default();
    let params = cfg.hyperbolic_params(None).map_err(at("hyperbolic"))?;
    let pts = hyperbolic_points(&*map, sampler, &params, c.points, c.min_n, distortion, cfg.seed)
        .map_err(at("hyperbolic_points"))?;
    let cap = delta1_cap(&*map, &params);
    let (delta1, calibrated) = match c.delta1 {
        Some(r) => (r, false),
        None => {
            let pilot: Vec<(Point, usize)> = pts.iter().take(c.pilot).map(|p| (p.x, p.n)).collect();
            let r = calibrate_delta1(&*map, &pilot, &params, c.pilot_pairs, c.min_pass, cfg.seed)
                .map_err(at("calibrate"))?
                .ok_or_else(|| RunError {
                    stage: "calibrate",
                    error: Error::Sampling("no candidate radius passes the contraction check on the pilot".into()),
                })?;
            (r, true)
        }
    };
    let key = StreamKey::new(cfg.seed, if distortion { "distortion" } else { "contraction" });
    let seed_of = |i: usize| -> u64 { key.child(i as u64).stream(0).random() };
    let base = json!({
        "delta1": delta1,
        "delta1_calibrated": calibrated,
        "delta1_cap": json_number(cap),
        "hyperbolic": params,
        "points": pts.len(),
        "pairs": c.pairs,
    });

    if !distortion {
        let reps = map_indexed(pts.len(), |i| {
            backward_contraction_check(&*map, pts[i].x, pts[i].n, &params, delta1, c.pairs, seed_of(i))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(at("contraction"))?;
        let mut csv = Csv::new(&["x_id", "x", "theta", "n", "pass_fraction", "worst_ratio", "assertions", "pairs"]);
        for (i, (p, r)) in pts.iter().zip(&reps).enumerate() {
            csv.row(vec![
                i.into(),
                p.x.x.into(),
                p.x.theta.into(),
                p.n.into(),
                r.pass_fraction.into(),
                r.worst_ratio.into(),
                r.assertions.into(),
                r.pairs.into(),
            ]);
        }
        emit.file("contraction.csv", csv.finish());
        let min_pass = reps.iter().map(|r| r.pass_fraction).fold(1.0, f64::min);
        let assertions: usize = reps.iter().map(|r| r.assertions).sum();
        let passed: f64 = reps.iter().map(|r| r.pass_fraction * r.assertions as f64).sum();
        let pooled = if assertions > 0 { passed / assertions as f64 } else { 1.0 };
        let worst = reps.iter().map(|r| r.worst_ratio).fold(0.0, f64::max);
        let mut doc = base;
        doc["slack"] = json!(crate::metric::CONTRACTION_SLACK);
        doc["min_pass_fraction"] = json!(min_pass);
        doc["pooled_pass_fraction"] = json!(pooled);
        doc["worst_ratio"] = json_number(worst);
        emit.json("contraction.json", &doc)?;
        emit.num("min_pass_fraction", min_pass);
        emit.num("pooled_pass_fraction", pooled);
        emit.num("worst_ratio", worst);
    } else {
        let potential = PotentialModel::geometric(map.clone());
        let ks = map_indexed(pts.len(), |i| -> Result<(f64, f64)> {
            let p = &pts[i];
            let s = seed_of(i);
            let k1 = distortion_estimate(&*map, &potential, p.x, p.n, delta1, c.pairs, s)?;
            let k2 = distortion_estimate(&*map, &potential, p.x, p.n2.expect("doubled"), delta1, c.pairs, s ^ 1)?;
            Ok((k1, k2))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(at("distortion"))?;
        let mut csv = Csv::new(&["x_id", "x", "theta", "n", "n2", "k_n", "k_2n", "ratio"]);
        let mut per_point = Vec::with_capacity(ks.len());
        for (i, (p, (k1, k2))) in pts.iter().zip(&ks).enumerate() {
            let ratio = k2 / k1;
            per_point.push((ratio - 1.0).abs());
            csv.row(vec![
                i.into(),
                p.x.x.into(),
                p.x.theta.into(),
                p.n.into(),
                p.n2.into(),
                (*k1).into(),
                (*k2).into(),
                ratio.into(),
            ]);
        }
        emit.file("distortion.csv", csv.finish());
        let k_n = ks.iter().map(|k| k.0).fold(0.0, f64::max);
        let k_2n = ks.iter().map(|k| k.1).fold(0.0, f64::max);
        let variation = (k_2n / k_n - 1.0).abs();
        let per_max = per_point.iter().copied().fold(0.0, f64::max);
        let per_median = crate::stats::percentile(&per_point, 0.5).unwrap_or(f64::NAN);
        let mut doc = base;
        doc["k_n"] = json_number(k_n);
        doc["k_2n"] = json_number(k_2n);
        doc["variation"] = json_number(variation);
        doc["per_point_variation_max"] = json_number(per_max);
        doc["per_point_variation_median"] = json_number(per_median);
        emit.json("distortion.json", &doc)?;
        emit.num("k_n", k_n);
        emit.num("k_2n", k_2n);
        emit.num("variation", variation);
        emit.num("per_point_variation_max", per_max);
        emit.num("per_point_variation_median", per_median);
    }
    emit.num("delta1", delta1);
    emit.set("points", pts.len());
    Ok(emit)
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

/// Applies `[check]` rules to the summary. A missing or null value fails
/// every rule.
pub fn evaluate_checks(rules: &BTreeMap<String, CheckRule>, summary: &Map<String, Value>) -> Vec<CheckOutcome> {
    rules
        .iter()
        .map(|(key, rule)| {
            let value = summary.get(key).cloned().filter(|v| !v.is_null());
            let mut failures = Vec::new();
            match &value {
                None => failures.push("no value".to_string()),
                Some(v) => {
                    let x = as_f64(v);
                    if let Some(min) = rule.min {
                        if !x.is_some_and(|x| x >= min) {
                            failures.push(format!("below min {min}"));
                        }
                    }
                    if let Some(max) = rule.max {
                        if !x.is_some_and(|x| x <= max) {
                            failures.push(format!("above max {max}"));
                        }
                    }
                    if let Some(want) = &rule.equals {
                        let same = match (as_f64(want), x) {
                            (Some(a), Some(b)) if want.is_number() => a == b,
                            _ => want == v,
                        };
                        if !same {
                            failures.push(format!("not equal to {want}"));
                        }
                    }
                }
            }
            let shown = value.as_ref().map_or("null".to_string(), Value::to_string);
            CheckOutcome {
                key: key.clone(),
                passed: failures.is_empty(),
                detail: if failures.is_empty() { format!("{key} = {shown}") } else { format!("{key} = {shown}: {}", failures.join(", ")) },
                value,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn rule(min: Option<f64>, max: Option<f64>, equals: Option<Value>) -> CheckRule {
        CheckRule { min, max, equals }
    }

    #[test]
    fn checks_compare_numbers_strings_and_missing() {
        let mut summary = Map::new();
        summary.insert("a".into(), json!(0.5));
        summary.insert("b".into(), json!("-inf"));
        summary.insert("c".into(), json!("pass"));
        summary.insert("d".into(), Value::Null);
        let mut rules = BTreeMap::new();
        rules.insert("a".into(), rule(Some(0.0), Some(1.0), None));
        rules.insert("b".into(), rule(None, Some(-1.0), None));
        rules.insert("c".into(), rule(None, None, Some(json!("pass"))));
        rules.insert("d".into(), rule(Some(0.0), None, None));
        rules.insert("e".into(), rule(None, Some(1.0), None));
        let out = evaluate_checks(&rules, &summary);
        let passed: Vec<bool> = out.iter().map(|c| c.passed).collect();
        assert_eq!(passed, vec![true, true, true, false, false]);
    }

    #[test]
    fn worker_precedence() {
        let cfg = parse_config(
            "kind = \"tail\"\nseed = 1\nworkers = 3\n[map]\nfamily = \"doubling\"\n[tail]\nsamples = 1000\n",
        )
        .unwrap();
        assert_eq!(worker_count(&cfg, Some(2)).unwrap(), 2);
        assert!(worker_count(&cfg, Some(0)).is_err());
    }

    #[test]
    fn failed_run_leaves_no_partial_output() {
        let dir = tempfile::tempdir().unwrap();
        // No n ≥ 10 hyperbolic time exists within a horizon of 5.
        let cfg = parse_config(
            "kind = \"contraction\"\nseed = 1\n[map]\nfamily = \"doubling\"\n[hyperbolic]\nhorizon = 5\n[contraction]\npoints = 2\n",
        )
        .unwrap();
        let out = dir.path().join("out");
        let err = run(&cfg, &RunOptions { workers: Some(1), output: Some(out.clone()) }).unwrap_err();
        assert_eq!(err.stage, "hyperbolic_points");
        assert!(!out.join(PARTIAL_DIR).exists());
        assert!(!out.join("manifest.json").exists());
    }

    #[test]
    fn tail_run_writes_fits_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(
            "kind = \"tail\"\nseed = 7\n[map]\nfamily = \"manneville_pomeau\"\nalpha = 0.5\n[hyperbolic]\nhorizon = 200\n[tail]\nsamples = 2000\n",
        )
        .unwrap();
        let out = dir.path().join("mp");
        let res = run(&cfg, &RunOptions { workers: Some(2), output: Some(out.clone()) }).unwrap();
        for f in ["tail.csv", "tail_fit.json", "tail.svg", "summary.json", "manifest.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let fit: Value = serde_json::from_str(&std::fs::read_to_string(out.join("tail_fit.json")).unwrap()).unwrap();
        assert!(fit["semilog"]["slope"].is_number() && fit["loglog"]["slope"].is_number());
        let tail = res.manifest.files.iter().find(|f| f.name == "tail.csv").unwrap();
        let bytes = std::fs::read(out.join("tail.csv")).unwrap();
        assert_eq!(tail.sha256, hex::encode(Sha256::digest(&bytes)));
        assert!(!res.manifest.files.iter().find(|f| f.name == "tail.svg").unwrap().data);
    }
}
