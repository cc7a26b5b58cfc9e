//! Command-line front end: argument parsing, config expansion and exit codes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, ExperimentConfig, OBSERVABLES};
use crate::run::{run, worker_count, RunOptions};
use crate::FamilyParams;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "devgibbs", version, about = "Large-deviation and weak-Gibbs experiments on non-uniformly expanding maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more experiment configs (files or directories of *.toml).
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Evaluate the `[check]` rules; exit 3 if any fails.
        #[arg(long)]
        check: bool,
        /// Worker threads; overrides DEVGIBBS_WORKERS and the config.
        #[arg(long, short = 'j')]
        workers: Option<usize>,
        /// Output directory (with several configs, one subdirectory each).
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Parse and validate configs without running them.
    Validate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// List the built-in map families.
    ListFamilies,
    /// List the built-in observables.
    ListObservables,
}

fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| format!("{}: {e}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "toml"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(format!("{}: no .toml configs", p.display()));
            }
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<(PathBuf, ExperimentConfig)>, u8> {
    let files = expand(paths).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let mut out = Vec::new();
    let mut failed = false;
    for f in files {
        match load_config(&f) {
            Ok(cfg) => out.push((f, cfg)),
            Err(e) => {
                eprintln!("{}: {e}", f.display());
                failed = true;
            }
        }
    }
    if failed {
        Err(EXIT_CONFIG)
    } else {
        Ok(out)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn main_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::ListFamilies => {
            for (name, about) in FamilyParams::names() {
                println!("{name:<22} {about}");
            }
            EXIT_OK
        }
        Command::ListObservables => {
            for (name, about) in OBSERVABLES {
                println!("{name:<18} {about}");
            }
            EXIT_OK
        }
        Command::Validate { configs } => match load_all(&configs) {
            Ok(cfgs) => {
                for (p, cfg) in cfgs {
                    println!("{}: ok ({} on {})", p.display(), cfg.kind, cfg.map.build().map(|m| m.label()).unwrap_or_default());
                }
                EXIT_OK
            }
            Err(code) => code,
        },
        Command::Run { configs, check, workers, output } => {
            let cfgs = match load_all(&configs) {
                Ok(c) => c,
                Err(code) => return code,
            };
            // A bad worker count (flag, environment or config) is a config error.
            for (path, cfg) in &cfgs {
                if let Err(e) = worker_count(cfg, workers) {
                    eprintln!("{}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            }
            let several = cfgs.len() > 1;
            let mut check_failed = false;
            for (path, cfg) in cfgs {
                let out = match (&output, several) {
                    (Some(o), false) => Some(o.clone()),
                    (Some(o), true) => Some(o.join(stem(&path))),
                    (None, _) if cfg.output.is_some() => None,
                    (None, _) => Some(PathBuf::from("out").join(stem(&path))),
                };
                eprintln!("running {} ({})", path.display(), cfg.kind);
                let outcome = match run(&cfg, &RunOptions { workers, output: out }) {
                    Ok(o) => o,
                    Err(e) => {
                        eprintln!("{}: {e}", path.display());
                        return EXIT_RUNTIME;
                    }
                };
                eprintln!(
                    "  wrote {} files to {} in {:.1} s on {} workers",
                    outcome.manifest.files.len() + 1,
                    outcome.output.display(),
                    outcome.manifest.wall_time_seconds,
                    outcome.manifest.workers
                );
                if check {
                    if outcome.checks.is_empty() {
                        eprintln!("  no [check] rules");
                    }
                    for c in &outcome.checks {
                        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, stem(&path), c.detail);
                    }
                    check_failed |= !outcome.checks_passed();
                }
            }
            if check_failed {
                EXIT_CHECK
            } else {
                EXIT_OK
            }
        }
    }
}
