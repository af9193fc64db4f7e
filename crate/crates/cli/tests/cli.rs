use std::path::Path;
use std::process::{Command, Output};

fn qrtd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrtd")).args(args).env("QRTD_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = qrtd(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn jasa() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/jasa.csv").to_string()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let msg = ok(&["simulate", "--n", "150", "--seed", "7", "--out", p(out)]);
        assert!(msg.contains("150 subjects"), "{msg}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.csv.truth.csv").exists());

    let c = dir.path().join("c.csv");
    ok(&["simulate", "--n", "150", "--seed", "8", "--out", p(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn fit_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let out = dir.path().join("fit.json");
    ok(&["simulate", "--n", "400", "--seed", "3", "--out", p(&data)]);
    ok(&["fit", p(&data), "--q", "0.5", "--light", "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["command"], "fit");
    let r = &v["results"][0];
    assert_eq!(r["q"], 0.5);
    assert_eq!(r["coefficients"].as_array().unwrap().len(), 3);
    let beta: Vec<f64> = r["beta"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(beta.len(), 3);
    assert!(beta.iter().all(|b| b.is_finite()));
    assert!(r["diagnostics"]["converged"].as_bool().unwrap());
}

#[test]
fn km_prints_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["simulate", "--n", "100", "--seed", "2", "--out", p(&data)]);
    let text = ok(&["km", p(&data)]);
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert!(lines.next().unwrap().contains("time"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
}

#[test]
fn stanford_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stanford.csv");
    let msg = ok(&["stanford", &jasa(), "--out", p(&out)]);
    assert!(msg.contains("99 patients (28 censored)"), "{msg}");
    let km = ok(&["km", p(&out), "--instrument", "at-y"]);
    assert!(km.lines().count() > 2);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,start,stop,event,x\na,0,5,1,oops\n").unwrap();
    let o = qrtd(&["fit", p(&bad), "--q", "0.5"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");

    let o = qrtd(&["fit", p(&dir.path().join("missing.csv")), "--q", "0.5"]);
    assert!(!o.status.success());

    let o = qrtd(&["fit", p(&bad), "--q", "0.5", "--q-grid", "0.1:0.2:0.1"]);
    assert_eq!(o.status.code(), Some(2));

    let out = dir.path().join("never.csv");
    let o = qrtd(&["simulate", "--n", "50", "--censoring", "1.5", "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(!out.exists());
}
