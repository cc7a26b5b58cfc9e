//! Exit codes and outputs of the command-line tool.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_devgibbs"));
    c.env_remove("DEVGIBBS_WORKERS");
    c
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const MP_TAIL: &str = "kind = \"tail\"\nseed = 5\n[map]\nfamily = \"manneville_pomeau\"\nalpha = 0.5\n\
[hyperbolic]\nhorizon = 200\n[tail]\nsamples = 4000\nwindow = [10, 200]\n";

#[test]
fn listings_succeed() {
    let o = bin().arg("list-families").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for f in ["doubling", "quadratic", "manneville_pomeau", "perturbed_expanding", "viana"] {
        assert!(text.contains(f), "{text}");
    }
    let o = bin().arg("list-observables").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for g in ["indicator_half", "cos2pi", "identity", "log_deriv"] {
        assert!(text.contains(g), "{text}");
    }
}

#[test]
fn bundled_configs_validate() {
    let o = bin().arg("validate").arg(configs_dir()).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 12);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "kind = \"tail\"\nseed = 1\nsigma_typo = 2\n[map]\nfamily = \"doubling\"\n");
    let o = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma_typo"));
    assert_eq!(code(&bin().arg("run").arg(&bad).output().unwrap()), 1);
    assert_eq!(code(&bin().arg("validate").arg(dir.path().join("missing.toml")).output().unwrap()), 1);

    let good = write(dir.path(), "mp.toml", MP_TAIL);
    let o = bin().arg("run").arg(&good).env("DEVGIBBS_WORKERS", "0").output().unwrap();
    assert_eq!(code(&o), 1);
    let o = bin().arg("run").arg(&good).env("DEVGIBBS_WORKERS", "many").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    // Every doubling time is hyperbolic, so the tail is empty and cannot be classified.
    let cfg = write(
        dir.path(),
        "empty_tail.toml",
        "kind = \"tail\"\nseed = 1\n[map]\nfamily = \"doubling\"\n[tail]\nsamples = 1000\n",
    );
    let out = dir.path().join("out");
    let o = bin().arg("run").arg(&cfg).arg("-o").arg(&out).output().unwrap();
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("tail.csv").exists());
    assert!(!out.join(".partial").exists());
}

#[test]
fn checks_pass_or_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let pass = write(
        dir.path(),
        "pass.toml",
        &format!("{MP_TAIL}[check]\ntail_kind = {{ equals = \"polynomial\" }}\nloglog_slope = {{ max = 0 }}\n"),
    );
    let fail = write(dir.path(), "fail.toml", &format!("{MP_TAIL}[check]\nloglog_slope = {{ min = 5 }}\n"));
    let out = dir.path().join("out");
    let o = bin().args(["run", "--check", "-j", "1"]).arg(&pass).arg("-o").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().lines().all(|l| l.starts_with("PASS pass:")));
    for f in ["tail.csv", "tail_fit.json", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = bin().args(["run", "--check"]).arg(&fail).arg("-o").arg(dir.path().join("f")).output().unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8(o.stdout).unwrap().contains("FAIL fail:"));

    // Without --check the rules are ignored.
    let o = bin().arg("run").arg(&fail).arg("-o").arg(dir.path().join("g")).output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn several_configs_get_one_directory_each() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.toml", MP_TAIL);
    let b = write(dir.path(), "b.toml", &MP_TAIL.replace("seed = 5", "seed = 6"));
    let out = dir.path().join("out");
    let o = bin().arg("run").arg(&a).arg(&b).arg("-o").arg(&out).env("DEVGIBBS_WORKERS", "2").output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ma: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["workers"], 2);
    assert!(out.join("b/tail.csv").exists());
    let ta = std::fs::read(out.join("a/tail.csv")).unwrap();
    let tb = std::fs::read(out.join("b/tail.csv")).unwrap();
    assert_ne!(ta, tb);
}
