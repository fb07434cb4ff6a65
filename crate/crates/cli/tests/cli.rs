// Copyright 2026 The nvcs Authors
// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use nvcs::spectrum::oracle_check;
use nvcs_cli::cache::{self, CachedSpectrum, CACHE_SCHEMA};
use nvcs_cli::ExperimentConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn nvcs(args: &[&str], out: &Path, cache_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nvcs"));
    cmd.args(args).arg("--out").arg(out).env_remove(cache::CACHE_ENV);
    if let Some(d) = cache_dir {
        cmd.env(cache::CACHE_ENV, d);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn canonical_spectrum_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvcs(&["spectrum"], dir.path(), None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("spectrum-all.toml")).unwrap();
    assert!(report.contains("pass = true"));
    let csv = fs::read_to_string(dir.path().join("spectrum-all.csv")).unwrap();
    assert!(csv.starts_with("n,e_plus,e_minus,abs_sin,cos\n"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model\nk = 1\n").unwrap();
    let b = bad.to_str().unwrap();
    for args in [
        vec!["spectrum", "--config", b],
        vec!["spectrum", "--suite", "nonsense"],
        vec!["spectrum", "--tolerance-scale", "-1"],
        vec!["s3", "--config", "/nonexistent/config.toml"],
    ] {
        let o = nvcs(&args, dir.path(), None);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: "), "{args:?}");
    }
    // A family the command cannot run.
    fs::write(&bad, "family = \"s3\"\n").unwrap();
    let o = nvcs(&["matrix", "--config", b], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not valid for matrix"));
}

#[test]
fn tiny_tolerance_fails_and_names_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvcs(&["spectrum", "--suite", "oracle", "--tolerance-scale", "1e-30"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("failed check: oracle max relative energy error"), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("spectrum-oracle.toml")).unwrap();
    assert!(report.contains("pass = false"));
}

#[test]
fn reports_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = configs().join("burban-pq.toml");
    let args = ["nvcs", "--config", cfg.to_str().unwrap()];
    for d in [&a, &b] {
        assert_eq!(nvcs(&args, d.path(), None).status.code(), Some(0));
    }
    for f in ["nvcs-all.toml", "nvcs-all.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sample_configs_pass() {
    let dir = tempfile::tempdir().unwrap();
    let runs: &[(&str, &[&str])] = &[
        ("jc.toml", &["spectrum", "nvcs", "matrix", "displacement", "specfun"]),
        ("jc-action.toml", &["nvcs", "verify-identity"]),
        ("s3-action.toml", &["s3"]),
        ("burban-pq.toml", &["spectrum", "nvcs", "specfun"]),
        ("burban-dual.toml", &["displacement"]),
    ];
    for (file, commands) in runs {
        let cfg = configs().join(file);
        for c in *commands {
            let o = nvcs(&[c, "--config", cfg.to_str().unwrap()], dir.path(), None);
            assert_eq!(o.status.code(), Some(0), "{c} {file}: {}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
        }
    }
}

#[test]
fn spectrum_cache_is_written_then_hit() {
    let (out, cache_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = nvcs(&["spectrum"], out.path(), Some(cache_dir.path()));
    assert_eq!(first.status.code(), Some(0));
    assert!(stderr(&first).contains("spectrum cached: "));
    let report = fs::read(out.path().join("spectrum-all.toml")).unwrap();
    let entries: Vec<_> = fs::read_dir(cache_dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
    let second = nvcs(&["spectrum"], out.path(), Some(cache_dir.path()));
    assert_eq!(second.status.code(), Some(0));
    assert!(stderr(&second).contains("spectrum cache hit: "));
    // A hit reproduces the report exactly.
    assert_eq!(report, fs::read(out.path().join("spectrum-all.toml")).unwrap());
}

#[test]
fn corrupt_cache_entry_is_recomputed() {
    let (out, cache_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(nvcs(&["spectrum"], out.path(), Some(cache_dir.path())).status.code(), Some(0));
    let entry = fs::read_dir(cache_dir.path()).unwrap().next().unwrap().unwrap().path();
    fs::write(&entry, "schema = 999\n").unwrap();
    let o = nvcs(&["spectrum"], out.path(), Some(cache_dir.path()));
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning: incompatible cache entry"), "{}", stderr(&o));
    assert!(cache::load_spectrum(&entry).is_ok());
}

#[test]
fn cache_hit_beats_recomputation() {
    let cfg = ExperimentConfig::parse("[numeric]\nn_max = 200\nn_report = 200\n").unwrap();
    let params = cfg.params().unwrap();
    let (n_max, n_report) = (cfg.numeric.n_max, cfg.numeric.n_report);
    let dir = tempfile::tempdir().unwrap();

    let t0 = Instant::now();
    let entry = CachedSpectrum {
        schema: CACHE_SCHEMA,
        key: cache::cache_key(&params, n_max, n_report).unwrap(),
        n_max,
        n_report,
        oracle: oracle_check(&params, n_max, n_report).unwrap(),
        spectral: params.reorganized_spectrum(n_max).unwrap(),
        params: params.clone(),
    };
    let miss = t0.elapsed();
    cache::cache_spectrum(dir.path(), &entry).unwrap();

    let t1 = Instant::now();
    let hit = cache::lookup(dir.path(), &params, n_max, n_report).unwrap().unwrap();
    let hit_time = t1.elapsed();
    println!("miss {miss:?}, hit {hit_time:?}");
    assert_eq!(hit.oracle, entry.oracle);
    assert!(hit_time < miss, "miss {miss:?}, hit {hit_time:?}");
    assert!(matches!(cache::lookup(dir.path(), &params, n_max + 1, n_report), Ok(None)));
}
