use std::path::Path;
use std::process::{Command, Output};

fn apdgain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apdgain"))
        .current_dir(dir)
        .env_remove("APDGAIN_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pmf_first_entry() {
    let dir = tempfile::tempdir().unwrap();
    let o = apdgain(dir.path(), &["pmf", "--k", "0.9218", "--M", "3.7", "--out", "pmf.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = json(&dir.path().join("pmf.json"));
    assert_eq!(doc["kind"], "analytic");
    assert_eq!(doc["pmf"][0][0], 1);
    assert!((doc["pmf"][0][1].as_f64().unwrap() - 0.4926).abs() < 1e-4);
    let manifest = json(&dir.path().join("pmf.json.manifest.json"));
    assert_eq!(manifest["command"], "pmf");
    assert_eq!(manifest["config"]["k"], 0.9218);
    assert_eq!(manifest["config"]["tail_tolerance"], 1e-12);
}

#[test]
fn enf_at_unity_gain() {
    let dir = tempfile::tempdir().unwrap();
    let o = apdgain(dir.path(), &["enf", "--k", "0.9218", "--M", "1", "--format", "csv", "--out", "enf.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(dir.path().join("enf.csv")).unwrap(), "M,F\n1,1\n");
}

#[test]
fn validation_errors_exit_2_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str); 5] = [
        (&["pmf", "--k", "1.5", "--M", "3"], "invalid-parameter"),
        (&["pmf", "--k", "0.5"], "missing-parameter"),
        (&["nonsense"], "usage"),
        (&["fit-k", "--input", "absent.csv"], "missing-file"),
        (&["mc", "--k", "0.9", "--M", "3", "--trials", "0"], "invalid-parameter"),
    ];
    for (args, kind) in cases {
        let o = apdgain(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error: kind={kind} message=")), "{err}");
    }
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // every trial hits an event cap of one
    let o = apdgain(dir.path(), &["mc", "--k", "0.9", "--M", "20", "--trials", "1000", "--event-cap", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: kind=excessive-censoring"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = apdgain(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("fit-spectrum"));
}

#[test]
fn flags_override_config_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"k": 0.5, "M": 5, "format": "csv"}"#).unwrap();
    let o = apdgain(dir.path(), &["pmf", "--config", "c.json", "--M", "2", "--out", "p.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    // k = 0.5, M = 2: P(1) = 2/3
    assert!(text.starts_with("m,p\n1,0.666666666666666"), "{text}");

    std::fs::write(dir.path().join("bad.json"), r#"{"k": 0.5, "trials": 3}"#).unwrap();
    let o = apdgain(dir.path(), &["pmf", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=invalid-config"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let o = Command::new(env!("CARGO_BIN_EXE_apdgain"))
        .current_dir(dir.path())
        .env("APDGAIN_OUT_DIR", &out)
        .args(["enf", "--k", "0.5", "--gains", "1,2,4"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = json(&out.join("enf.json"));
    assert_eq!(doc["points"].as_array().unwrap().len(), 3);
    assert!(out.join("enf.json.manifest.json").is_file());
}

#[test]
fn mc_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mc", "--k", "0.9218", "--M", "3.7", "--trials", "1000000", "--seed", "7"];
    let mut runs = Vec::new();
    for name in ["a.json", "b.json"] {
        let mut a = args.to_vec();
        a.extend(["--out", name]);
        let o = apdgain(dir.path(), &a);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(std::fs::read(dir.path().join(name)).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let manifest = json(&dir.path().join("a.json.manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["summary"]["trials"], 1_000_000);
    assert!(!std::fs::read_to_string(dir.path().join("a.json.manifest.json")).unwrap().contains("time"));
}

#[test]
fn fit_k_and_gain_curve_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = apdgain(
        dir.path(),
        &["enf", "--k", "0.9218", "--gains", "2,3.7,5,8,13.2", "--method", "pmf", "--format", "csv", "--out", "enf.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("enf.csv")).unwrap();
    let mut points = String::from("M,F,weight\n");
    for line in table.lines().skip(1) {
        points.push_str(&format!("{line},1\n"));
    }
    std::fs::write(dir.path().join("points.csv"), points).unwrap();
    let o = apdgain(dir.path(), &["fit-k", "--input", "points.csv", "--out", "k.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let k = json(&dir.path().join("k.json"))["parameters"]["k"].as_f64().unwrap();
    assert!((k - 0.9218).abs() < 1e-5, "{k}");

    std::fs::write(
        dir.path().join("curve.csv"),
        "bias_voltage,mean_output_carriers\n18,48\n18.5,48\n19,48\n22,96\n26,480\n",
    )
    .unwrap();
    let o = apdgain(dir.path(), &["gain-curve", "--input", "curve.csv", "--out", "m.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("m.csv")).unwrap(),
        "bias_voltage,M\n18,1\n18.5,1\n19,1\n22,2\n26,10\n"
    );
}

#[test]
fn synth_histogram_feeds_fit_spectrum_and_theory() {
    let dir = tempfile::tempdir().unwrap();
    let o = apdgain(
        dir.path(),
        &["synth", "--M", "13.2", "--pulses", "20000", "--seed", "3", "--out", "p.csv", "--histogram", "h.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = apdgain(dir.path(), &["fit-spectrum", "--input", "h.json", "--M", "10", "--free", "M", "--out", "f.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = json(&dir.path().join("f.json"));
    let m = doc["fit"]["parameters"]["M"].as_f64().unwrap();
    let se = doc["fit"]["standard_errors"]["M"].as_f64().unwrap();
    assert!((m - 13.2).abs() < 4.0 * se, "{m} ± {se}");
    assert!(dir.path().join("f.residuals.csv").is_file());

    let o = apdgain(dir.path(), &["fit-spectrum", "--input", "p.csv", "--free", "M,bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let o = apdgain(dir.path(), &["spectrum-theory", "--M", "3.7", "--out", "s.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = json(&dir.path().join("s.csv.manifest.json"));
    assert!((manifest["summary"]["integral"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}
