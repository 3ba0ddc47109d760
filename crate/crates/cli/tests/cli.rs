use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bridgelab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bridgelab"));
    c.args(args);
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = bridgelab(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

const SMALL_PROCEDURE: &str = r#"{"schema":"bridgelab/v1","iterations":2,"m_steps":20,"n_samples":300,
    "path_cache":100,"cache_refresh":50,"train":{"sgd_steps":60,"batch_size":32,"hidden":[8]}}"#;

#[test]
fn gauss1d_idbm_beats_ipf() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("g");
    run_ok(&["gauss1d", "--out", out.to_str().unwrap()]);
    let rows = read_csv(&out.join("gauss1d.csv"));
    let kl = |proc_: &str, sigma: f64, rho: Option<f64>, it: usize| {
        rows.iter()
            .find(|r| {
                r[0] == proc_ && num(&r[1]) == sigma && rho.is_none_or(|v| num(&r[2]) == v) && r[3] == it.to_string()
            })
            .map(|r| num(&r[4]))
            .unwrap()
    };
    assert!(kl("idbm", 1.0, Some(0.0), 10) < kl("ipf", 1.0, None, 10));
    assert!(kl("idbm", 100.0, Some(0.0), 1) < 1e-3);
    assert!(kl("ipf", 100.0, None, 1) < 1e-3);
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", SMALL_PROCEDURE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["idbm", "--config", &cfg, "--out", a.to_str().unwrap()]);
    let out = bridgelab(&["idbm", "--config", &cfg, "--out", b.to_str().unwrap()], &[("BRIDGELAB_THREADS", "1")]);
    assert!(out.status.success());
    for f in ["manifest.json", "diagnostics.csv", "coupling_final.csv", "model_1.bin", "model_2.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "idbm");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_override_changes_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", SMALL_PROCEDURE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["dipf", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["dipf", "--config", &cfg, "--seed", "9", "--out", b.to_str().unwrap()]);
    assert_ne!(fs::read(a.join("coupling_final.csv")).unwrap(), fs::read(b.join("coupling_final.csv")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn diagnostics_have_no_wall_time() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "p.json", SMALL_PROCEDURE);
    let a = tmp.path().join("a");
    run_ok(&["dipf", "--config", &cfg, "--out", a.to_str().unwrap()]);
    let text = fs::read_to_string(a.join("diagnostics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iteration,direction,loss,l_oc,mean_error,cov_error");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("never");
    let o = bridgelab(&["mixture1d", "--dry-run", "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let bad = write_config(tmp.path(), "bad.json", r#"{"schema":"bridgelab/v1","typo":1}"#);
    assert_eq!(bridgelab(&["gauss1d", "--config", &bad, "--out", out.to_str().unwrap()], &[]).status.code(), Some(1));
    let schema = write_config(tmp.path(), "schema.json", r#"{"schema":"other/v9"}"#);
    assert_eq!(
        bridgelab(&["sinkhorn-compare", "--config", &schema, "--out", out.to_str().unwrap()], &[]).status.code(),
        Some(1)
    );
    assert_eq!(bridgelab(&["gauss1d", "--bogus-flag"], &[]).status.code(), Some(1));
    assert_eq!(
        bridgelab(&["gauss1d", "--out", out.to_str().unwrap()], &[("BRIDGELAB_THREADS", "zero")]).status.code(),
        Some(1)
    );

    // a regular file where the output directory should go
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let nested = blocker.join("sub");
    assert_eq!(bridgelab(&["gauss1d", "--out", nested.to_str().unwrap()], &[]).status.code(), Some(2));
    let missing = tmp.path().join("missing.json");
    assert_eq!(
        bridgelab(&["gauss1d", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])
            .status
            .code(),
        Some(2)
    );

    let diverge = write_config(
        tmp.path(),
        "nan.json",
        r#"{"schema":"bridgelab/v1","iterations":1,"m_steps":10,"n_samples":50,
            "train":{"sgd_steps":200,"batch_size":16,"hidden":[8],"lr":1e300}}"#,
    );
    let o = bridgelab(&["idbm", "--config", &diverge, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_output_directory_is_created() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("a").join("b").join("c");
    let cfg = write_config(tmp.path(), "g.json", r#"{"schema":"bridgelab/v1","dim":3,"scenarios":2,"iterations":4}"#);
    run_ok(&["gaussnd", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let rows = read_csv(&out.join("gaussnd.csv"));
    assert_eq!(rows.len(), 2 * 2 * 4);
    let summary = read_csv(&out.join("gaussnd_summary.csv"));
    for r in summary {
        assert!(num(&r[3]) <= num(&r[2]) && num(&r[2]) <= num(&r[4]));
    }
}

#[test]
fn sinkhorn_matches_closed_form() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    let cfg = write_config(
        tmp.path(),
        "s.json",
        r#"{"schema":"bridgelab/v1","bins":300,"sigmas":[0.5,1.0],"var0":2.0,"mean1":1.0}"#,
    );
    run_ok(&["sinkhorn-compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let rows = read_csv(&out.join("sinkhorn_compare.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[6], "true");
        assert!(num(&r[4]) < 1e-3, "{r:?}");
    }
    let hist = read_csv(&out.join("residual_history.csv"));
    assert!(!hist.is_empty());
}

#[test]
fn mixture_and_sgm_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("m");
    let cfg = write_config(
        tmp.path(),
        "m.json",
        r#"{"schema":"bridgelab/v1","n_samples":500,"m_steps":20,"train":{"sgd_steps":30,"batch_size":32,"hidden":[8]},
            "sinkhorn_bins":100,"coupling_bins":10,"grid_points":11,"drift_times":[0.5]}"#,
    );
    run_ok(&["mixture1d", "--config", &cfg, "--out", out.to_str().unwrap()]);
    for f in [
        "drift_analytic_idbm.csv",
        "drift_analytic_dipf.csv",
        "drift_nn_idbm.csv",
        "drift_nn_dipf.csv",
        "terminal_density.csv",
        "coupling_idbm.csv",
        "coupling_sinkhorn.csv",
        "summary.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(read_csv(&out.join("drift_analytic_idbm.csv")).len(), 11);
    assert_eq!(read_csv(&out.join("coupling_sinkhorn.csv")).len(), 100);
    let summary = read_csv(&out.join("summary.csv"));
    let tv = summary.iter().find(|r| r[0] == "tv_analytic_idbm").unwrap();
    assert!((0.0..=1.0).contains(&num(&tv[1])));
    // the KDE never reports a negative zero
    assert!(!fs::read_to_string(out.join("terminal_density.csv")).unwrap().contains("-0.0"));

    let sgm = tmp.path().join("s");
    let cfg = write_config(
        tmp.path(),
        "s.json",
        r#"{"schema":"bridgelab/v1","m_steps":20,"n_samples":200,"train":{"sgd_steps":20,"batch_size":16,"hidden":[8]}}"#,
    );
    run_ok(&["sgm-toy", "--config", &cfg, "--out", sgm.to_str().unwrap()]);
    assert_eq!(read_csv(&sgm.join("losses.csv")).len(), 20);
    assert_eq!(read_csv(&sgm.join("generated.csv")).len(), 200);
}
