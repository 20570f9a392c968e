use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_curesimex"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const GEN: &str = r#"{"model":"ph","censoring_rate_target":0.25,"sigma_eta":0.5,"n":10,"seed":4}"#;

#[test]
fn simulate_writes_n_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.json", GEN);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&b)]).status.success());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("y,a,delta,w1,z1\n"));
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let c = dir.path().join("c.csv");
    assert!(run(&["--seed", "5", "simulate", "--config", s(&cfg), "--out", s(&c)]).status.success());
    assert_ne!(text, std::fs::read_to_string(&c).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 4);
    assert!(manifest["config"]["censoring_c"].as_f64().unwrap() > 0.0);
}

#[test]
fn latent_columns_are_optional() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.json", GEN);
    let out = dir.path().join("d.csv");
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&out), "--latent"]).status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("y,a,delta,w1,z1,x,pi,tstar\n"));
}

fn simulated(dir: &Path, n: usize) -> PathBuf {
    let cfg = write(
        dir,
        "g.json",
        &format!(r#"{{"model":"ph","censoring_rate_target":0.25,"sigma_eta":0.5,"n":{n},"seed":21}}"#),
    );
    let out = dir.join("data.csv");
    assert!(run(&["simulate", "--config", s(&cfg), "--out", s(&out)]).status.success());
    out
}

#[test]
fn fit_flags_control_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 150);
    let cfg = write(dir.path(), "fit.json", r#"{"model":"ph","sigma_eta":0.5,"B":6,"seed":2}"#);

    let full = dir.path().join("full.json");
    let o = run(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&full)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&full).unwrap()).unwrap();
    assert!(v["theta_simex"].is_array());
    assert_eq!(v["trace"]["points"].as_array().unwrap().len(), 9);
    assert_eq!(v["variance"]["standard_errors"].as_array().unwrap().len(), 2);
    assert!(v["variance"]["h_variance"].is_array());

    let naive = dir.path().join("naive.json");
    assert!(run(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&naive), "--naive-only"]).status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&naive).unwrap()).unwrap();
    assert!(v.get("theta_simex").is_none() && v.get("trace").is_none());
    assert!(v["variance"]["covariance"].is_array());

    let bare = dir.path().join("bare.json");
    assert!(run(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&bare), "--no-variance"]).status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bare).unwrap()).unwrap();
    assert!(v.get("variance").is_none());
    assert!(v["theta_simex"].is_array());

    let svg = dir.path().join("trace.svg");
    let o = run(&["report", s(&full), "--svg", s(&svg)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("simex"));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 60);

    let bad = write(dir.path(), "bad.json", r#"{"model":"ph","solver":{"tol":"small"}}"#);
    let o = run(&["fit", "--data", s(&data), "--config", s(&bad), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(r#""pointer":"/solver/tol""#), "{err}");

    let unknown = write(dir.path(), "u.json", r#"{"model":"ph","bogus":1}"#);
    let o = run(&["fit", "--data", s(&data), "--config", s(&unknown), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));

    let ok = write(dir.path(), "ok.json", r#"{"model":"ph"}"#);
    let o = run(&["fit", "--data", s(&dir.path().join("missing.csv")), "--config", s(&ok), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(4));

    let censored = write(dir.path(), "c.csv", "y,a,delta,w1,z1\n1.0,0.0,0,0.1,0.2\n2.0,0.5,0,0.3,-0.1\n");
    let o = run(&["fit", "--data", s(&censored), "--config", s(&ok), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_estimable"));

    let broken = write(dir.path(), "b.csv", "y,a,delta,w1,z1\n1.0,2.0,1,0.1,0.2\n");
    let o = run(&["fit", "--data", s(&broken), "--config", s(&ok), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 1"));

    // two events, the second with only its own subject at risk: the
    // profile step has no finite root under the strict tail policy
    let tail = write(dir.path(), "t.csv", "y,a,delta,w1,z1\n1.0,0.0,1,0.0,0.0\n2.0,0.0,1,0.0,0.0\n");
    let strict = write(dir.path(), "s.json", r#"{"model":"ph","tail":"error"}"#);
    let o = run(&["fit", "--data", s(&tail), "--config", s(&strict), "--out", s(&dir.path().join("x.json")), "--naive-only"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tail_divergence"));

    let gen = write(
        dir.path(),
        "inf.json",
        r#"{"model":"ph","censoring_rate_target":0.01,"censoring_basis":"overall","n":10}"#,
    );
    let o = run(&["simulate", "--config", s(&gen), "--out", s(&dir.path().join("y.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("censoring_infeasible"));
}

const STUDY: &str = r#"{"cells":[{"model":"po","cr":0.5,"sigma_eta":0.5}],"reps":3,"B":3,"n":80,"seed":17}"#;

#[test]
fn mc_writes_metrics_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "study.json", STUDY);
    let out = dir.path().join("run");
    let o = run(&["mc", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "model,cr,sigma_eta,method,coordinate,bias,var,mse,cp,mve,n_ok,n_fail,valid");
    assert_eq!(lines.count(), 4);
    let cell = out.join("cells").join("po_cr0.5_s0.5.json");
    assert!(cell.exists() && out.join("cells").join("po_cr0.5_s0.5.json.manifest.json").exists());
    assert!(out.join("manifest.json").exists());

    let stamp = std::fs::metadata(&cell).unwrap().modified().unwrap();
    let o = run(&["-v", "mc", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("reusing"));
    assert_eq!(std::fs::metadata(&cell).unwrap().modified().unwrap(), stamp);
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);

    // a changed setting invalidates the stored cell
    let changed = write(dir.path(), "study2.json", &STUDY.replace(r#""B":3"#, r#""B":4"#));
    let o = run(&["-v", "mc", "--config", s(&changed), "--out", s(&out)]);
    assert!(!String::from_utf8_lossy(&o.stderr).contains("reusing"));

    let o = run(&["-v", "mc", "--config", s(&changed), "--out", s(&out), "--fresh"]);
    assert!(!String::from_utf8_lossy(&o.stderr).contains("reusing"));

    let o = run(&["report", s(&out.join("metrics.csv"))]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("beta:bias") && table.contains("simex") && table.contains("naive"));
}

#[test]
fn mc_output_does_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "study.json", STUDY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["--threads", "1", "mc", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(run(&["--threads", "3", "mc", "--config", s(&cfg), "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn report_handles_empty_and_malformed_tables() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "e.csv", "model,cr,sigma_eta,method,coordinate,bias,var,mse,cp,mve,n_ok,n_fail,valid\n");
    let o = run(&["report", s(&empty)]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "no cells\n");

    let wrong = write(dir.path(), "w.csv", "model,cr,method,bias\nph,0.25,simex,0.1\n");
    let o = run(&["report", s(&wrong)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma_eta"));
}
