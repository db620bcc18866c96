use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn magtomo(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_magtomo"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("MAGTOMO_THREADS", "1")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FLAT: &str = "schema_version = 1\n";

#[test]
fn flat_structure_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = magtomo(dir.path(), FLAT, &["verify", "structure"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("config_hash "));
    assert!(stdout.contains("verify structure: PASS"));
    let first = fs::read(dir.path().join("out/verify.json")).unwrap();
    let csv = fs::read_to_string(dir.path().join("out/verify_refinement.csv")).unwrap();
    assert!(csv.starts_with("suite,quantity,resolution,residual"));
    assert_eq!(csv.lines().count(), 1 + 9);

    let o = magtomo(dir.path(), FLAT, &["verify", "--suite", "structure"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, fs::read(dir.path().join("out/verify.json")).unwrap());
}

#[test]
fn strong_field_fails_the_convexity_gate() {
    let dir = tempfile::tempdir().unwrap();
    let o = magtomo(dir.path(), "schema_version = 1\n[magnetic]\nlambda = \"1.5\"\n", &["verify", "structure"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not strictly magnetic convex"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = magtomo(dir.path(), "schema_version = 1\n[surface]\nconformal_factor = \"0.1*x +\"\n", &["trace"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = magtomo(dir.path(), "schema_version = 1\n\n[numerics]\nfan = 3\n", &["trace"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4, column 1"), "{}", stderr(&o));

    let o = magtomo(dir.path(), FLAT, &["verify", "nonexistent"]);
    assert_eq!(o.status.code(), Some(2));

    let o = magtomo(dir.path(), FLAT, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_writes_a_chord() {
    let dir = tempfile::tempdir().unwrap();
    let o = magtomo(dir.path(), "schema_version = 1\n[trace]\nbeta = 0.0\nmu = 0.0\n", &["trace", "--dt", "1e-2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x,y,theta"));
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((last[0] - 2.0).abs() < 1e-9);
    assert!((last[1] + 1.0).abs() < 1e-9);
}

#[test]
fn transform_and_scatter_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = "schema_version = 1\n[attenuation]\nn = 1\nphi = [\"0.8*i\"]\n[integrand]\nf = [\"1\"]\n";
    let o = magtomo(dir.path(), config, &["transform", "--fan", "8", "--dt", "1e-2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/transform.csv")).unwrap();
    assert!(text.starts_with("beta,mu,tau,re_0,im_0\n"));
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        // (e^{icτ} - 1)/(ic) with c = 0.8
        let (s, co) = (0.8 * v[2]).sin_cos();
        assert!((v[3] - s / 0.8).abs() < 1e-6 && (v[4] - (1.0 - co) / 0.8).abs() < 1e-6);
    }
    let o = magtomo(dir.path(), config, &["scatter", "--fan", "8", "--dt", "1e-2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("out/scatter.csv")).unwrap();
    assert!(text.starts_with("beta,mu,re_00,im_00\n"));
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn validate_fields_reports_non_skew_entries() {
    let dir = tempfile::tempdir().unwrap();
    let o = magtomo(dir.path(), "schema_version = 1\n[attenuation]\nphi = [\"x\"]\n", &["validate-fields"]);
    assert_eq!(o.status.code(), Some(1));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/validate.json")).unwrap()).unwrap();
    assert_eq!(json["pass"], false);
    assert!(json["phi"].as_f64().unwrap() > 0.5);
}

#[test]
fn probe_reports_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = "schema_version = 1\n[magnetic]\nlambda = \"0.3\"\n[probes]\ndraws = 2\n";
    let o = magtomo(dir.path(), config, &["probe", "kernel,tensor", "--fan", "16", "--dt", "1e-2"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/probes.json")).unwrap()).unwrap();
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["name"], "kernel_forward");
    let all_pass = reports.iter().all(|r| r["pass"] == true);
    assert_eq!(o.status.code(), Some(if all_pass { 0 } else { 1 }));
}
