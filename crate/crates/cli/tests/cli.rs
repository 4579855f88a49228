//! End-to-end tests of the `nhmc` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONJUGATE: &str = r#"{
  "seed": 0,
  "prior": {"kind": "standard_normal", "dim": 1},
  "decoder": {"kind": "identity"},
  "operator": {"kind": "identity"},
  "noise": {"kind": "gaussian", "sigma": 1.0},
  "measurement": {"kind": "given", "y": [2.0]},
  "sampler": {"iterations": 3000, "sigma_schedule": {"kind": "none"}, "mode": {"mode": "known_sigma", "sigma": 1.0}}
}"#;

fn nhmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nhmc")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_str().unwrap().replace('\\', "/"));
            }
        }
    }
    out
}

fn assert_manifest_complete(root: &Path) {
    let manifest = read_json(&root.join("manifest.json"));
    let listed: BTreeSet<String> = manifest["files"].as_object().unwrap().keys().cloned().collect();
    let mut on_disk = files_under(root);
    on_disk.remove("manifest.json");
    assert_eq!(listed, on_disk);
}

#[test]
fn run_conjugate_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONJUGATE);
    let out = dir.path().join("out");
    let o = nhmc(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = read_json(&out.join("metrics.json"));
    let chain = &metrics["chains"][0]["metrics"];
    let mean = chain["mean_x0"][0].as_f64().unwrap();
    let se = chain["se_x0"][0].as_f64().unwrap();
    let oracle_mean = metrics["oracle"]["mean"][0].as_f64().unwrap();
    assert!((oracle_mean - 1.0).abs() < 1e-12);
    assert!((mean - oracle_mean).abs() <= 3.0 * se, "{mean} vs {oracle_mean} (se {se})");
    for f in ["samples.csv", "trace.jsonl", "metrics.json", "oracle.csv", "measurement.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_manifest_complete(&out);
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &CONJUGATE.replace("3000", "300"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = nhmc(&["run", &cfg, "--chains", "3", "--seed", "11", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.json", "samples.csv", "trace.jsonl", "metrics.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = dir.path().join("c");
    nhmc(&["run", &cfg, "--chains", "3", "--seed", "12", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(a.join("samples.csv")).unwrap(), fs::read(c.join("samples.csv")).unwrap());
}

#[test]
fn unknown_operator_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &CONJUGATE.replace(r#"{"kind": "identity"},
  "noise""#, r#"{"kind": "swirl"},
  "noise""#));
    let o = nhmc(&["run", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("operator"), "{}", stderr(&o));
}

#[test]
fn chain_abort_exits_1_and_keeps_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    // one retry allowed and a step size that is rejected often
    let text = CONJUGATE.replace(r#""iterations": 3000"#, r#""iterations": 3000, "step_size": 1.3, "leapfrog_steps": 3, "max_retries": 1"#);
    let cfg = write_config(dir.path(), "abort.json", &text);
    let out = dir.path().join("out");
    let o = nhmc(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err = read_json(&out.join("error.json"));
    assert!(err[0]["error"].as_str().unwrap().contains("no proposal accepted"), "{err}");
    let iteration = err[0]["iteration"].as_u64().unwrap() as usize;
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), iteration);
    assert!(iteration > 0, "abort should happen after some accepted iterations");
    assert_manifest_complete(&out);
}

#[test]
fn sweep_emits_one_row_per_value_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &CONJUGATE.replace("3000", "200"));
    let out = dir.path().join("out");
    let o = nhmc(&["sweep", &cfg, "--axis", "L", "--values", "10,15,20,25,30", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let metrics: BTreeSet<&str> = rows.iter().map(|r| r[2]).collect();
    assert!(metrics.contains("acceptance_rate") && metrics.contains("min_ks_p_value"));
    for m in &metrics {
        assert_eq!(rows.iter().filter(|r| r[2] == *m).count(), 5, "{m}");
    }
    assert!(out.join("runs/L=25/samples.csv").exists());
    assert_manifest_complete(&out);
}

#[test]
fn sweep_delta_acceptance_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONJUGATE
        .replace(r#""iterations": 3000"#, r#""iterations": 300, "leapfrog_steps": 5, "decay": 0.999, "max_retries": 100000"#)
        .replace(r#""seed": 0,"#, r#""seed": 0, "chains": 8,"#);
    let cfg = write_config(dir.path(), "c.json", &text);
    let out = dir.path().join("out");
    let o = nhmc(&["sweep", &cfg, "--axis", "delta", "--values", "0.05,0.4,0.9,1.3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rates: Vec<f64> = csv
        .lines()
        .filter(|l| l.contains(",acceptance_rate,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(rates.len(), 4);
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
}

#[test]
fn oracle_conjugate_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONJUGATE);
    let out = dir.path().join("out");
    let o = nhmc(&["oracle", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = read_json(&out.join("oracle.json"));
    assert!((v["conjugate"]["mean"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["conjugate"]["variance"][0].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((v["conjugate"]["residual"]["expected_residual"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert_manifest_complete(&out);
}

#[test]
fn oracle_grid_2d_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
      "prior": {"kind": "grid_2d"},
      "operator": {"kind": "identity"},
      "noise": {"kind": "gaussian", "sigma": 0.5},
      "measurement": {"kind": "given", "y": [0.4, -1.1]},
      "sampler": {"mode": {"mode": "known_sigma", "sigma": 0.5}},
      "oracle": {"kind": "grid", "resolution": 161}
    }"#;
    let cfg = write_config(dir.path(), "g.json", text);
    let out = dir.path().join("out");
    let o = nhmc(&["oracle", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = read_json(&out.join("oracle.json"));
    assert!((v["grid"]["total_mass"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 161 * 161);
    // trapezoid integral recomputed from the CSV
    let h = 16.0 / 160.0;
    let mut mass = 0.0;
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let w = |x: f64| if (x.abs() - 8.0).abs() < 1e-9 { 0.5 } else { 1.0 };
        mass += w(f[0]) * w(f[1]) * f[2] * h * h;
    }
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
}

#[test]
fn oracle_rejects_nonlinear_conjugate_and_large_grids() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONJUGATE.replace(r#""operator": {"kind": "identity"}"#, r#""operator": {"kind": "dft_magnitude"}"#)
        .replace(r#""sampler""#, r#""oracle": {"kind": "conjugate"}, "sampler""#);
    let cfg = write_config(dir.path(), "n.json", &text);
    let o = nhmc(&["oracle", &cfg, "--out", dir.path().join("o1").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonlinear"), "{}", stderr(&o));

    let text = r#"{"prior": {"kind": "standard_normal", "dim": 3}, "operator": {"kind": "identity"},
      "noise": {"kind": "gaussian", "sigma": 0.5}, "oracle": {"kind": "grid"}}"#;
    let cfg = write_config(dir.path(), "g3.json", text);
    let o = nhmc(&["oracle", &cfg, "--out", dir.path().join("o2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported") || stderr(&o).contains("dimension"), "{}", stderr(&o));
}

#[test]
fn compare_unimodal_and_noise_recovery() {
    let dir = tempfile::tempdir().unwrap();
    // tight prior around a fixed signal: one basin, and a decoded spread far
    // below the noise level so the adaptive chain can read sigma off the residual
    let n = 128;
    let mean: Vec<String> = (0..n).map(|j| format!("{:.6}", (j as f64 * 0.3).sin())).collect();
    let text = format!(
        r#"{{"seed": 0,
          "prior": {{"kind": "gmm", "weights": [1.0], "means": [[{}]], "variances": [0.0001]}},
          "operator": {{"kind": "identity"}},
          "noise": {{"kind": "gaussian", "sigma": 0.2}},
          "measurement": {{"kind": "synthesize", "x_true": {{"kind": "decoded"}}}},
          "sampler": {{"iterations": 210}},
          "chains": 4}}"#,
        mean.join(",")
    );
    let cfg = write_config(dir.path(), "u.json", &text);
    let out = dir.path().join("out");
    let o = nhmc(&["compare", &cfg, "--methods", "nanhmc", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = read_json(&out.join("compare.json"));
    assert_eq!(v[0]["success_rate"].as_f64().unwrap(), 1.0);
    let sigma = v[0]["median_final_sigma_hat"].as_f64().unwrap();
    assert!((0.17..=0.23).contains(&sigma), "final sigma_hat {sigma}");
    let bands = fs::read_to_string(out.join("bands.csv")).unwrap();
    assert_eq!(bands.lines().count(), 1 + 210);
    assert_manifest_complete(&out);
}
