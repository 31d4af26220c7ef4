use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FLAGSHIP: &str = r#"{
    "problem": {
        "kernel": {"type": "gaussian", "coeffs": [[1.0]]},
        "weights": [{"type": "exp_sqrt", "eps": 0.1}],
        "nonlinearities": [{"type": "power", "alpha": 0.5, "eta": 1.0}],
        "phi": {"type": "power", "p": 0.5}
    },
    "numerics": {"h": 0.1}
}"#;

fn coupled() -> String {
    FLAGSHIP
        .replace("[[1.0]]", "[[1.0, 0.5], [0.5, 1.0]]")
        .replace(r#"[{"type": "exp_sqrt", "eps": 0.1}]"#, r#"[{"type": "exp_sqrt", "eps": 0.1}, {"type": "exp_sqrt", "eps": 0.1}]"#)
        .replace(
            r#"[{"type": "power", "alpha": 0.5, "eta": 1.0}]"#,
            r#"[{"type": "power", "alpha": 0.5}, {"type": "power", "alpha": 0.5}]"#,
        )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn nlconv(config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlconv"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn flagship_solves_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "flagship.json", FLAGSHIP);
    let out = dir.path().join("out");
    let o = nlconv(&cfg, &out, &["--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).is_empty(), "quiet run logged: {}", stderr(&o));

    let r = report(&out);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["status"]["exit_code"], 0);
    let run = &r["runs"][0];
    let s = &run["spectral"];
    assert!((s["sigma"].as_f64().unwrap() - 0.6944444444).abs() < 1e-9);
    assert!((s["k"].as_f64().unwrap() - 0.6292253857).abs() < 1e-9);
    assert!((s["xi"][0].as_f64().unwrap() - 1.44).abs() < 1e-10);
    let sol = &run["solution"];
    assert_eq!(sol["termination"], "converged");
    assert!(sol["iterations"].as_u64().unwrap() <= s["a_priori_iterations"].as_u64().unwrap());
    assert!(sol["uniqueness_deviation"].as_f64().unwrap() < 1e-6);
    assert!(!sol["trace"].as_array().unwrap().is_empty());
    assert_eq!(r["config"]["problem"]["weights"][0]["eps"], 0.1);

    let csv = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,f_1,eta_gap_1"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len() as u64, run["grid"]["n_cells"].as_u64().unwrap() + 1);
    for row in &rows {
        assert!(row[1] >= 1.0 - 1e-12 && row[1] <= 1.44 + 1e-12);
        assert_eq!(row[2], row[1] - 1.0);
    }
    let centre = &rows[rows.len() / 2];
    assert_eq!(centre[0], 0.0);
    assert!(centre[1] > rows[0][1]);
}

#[test]
fn reports_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", FLAGSHIP);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(nlconv(&cfg, &a, &["--quiet"]).status.code(), Some(0));
    assert_eq!(nlconv(&cfg, &b, &["--quiet"]).status.code(), Some(0));
    for name in ["report.json", "profile.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn validate_mode_lists_eight_conditions_without_solving() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", FLAGSHIP);
    let out = dir.path().join("out");
    let o = nlconv(&cfg, &out, &["--mode", "validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out.join("profile.csv").exists());
    let r = report(&out);
    let run = &r["runs"][0];
    let ids: Vec<&str> = run["validation"]["conditions"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["1", "2", "a", "b", "I", "II", "III", "IV"]);
    assert!(run.get("solution").is_none() && run.get("spectral").is_none());
}

#[test]
fn unit_weight_fails_condition_a() {
    let dir = tempfile::tempdir().unwrap();
    let text = FLAGSHIP.replace(r#"{"type": "exp_sqrt", "eps": 0.1}"#, r#"{"type": "unit"}"#);
    let cfg = write_config(dir.path(), "c.json", &text);
    let out = dir.path().join("out");
    let o = nlconv(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("condition a)"), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["status"]["stage"], "validation");
    assert!(r["status"]["message"].as_str().unwrap().contains("condition a)"));
}

#[test]
fn sweep_writes_one_profile_per_eps() {
    let dir = tempfile::tempdir().unwrap();
    let text = FLAGSHIP.replace(
        r#""numerics": {"h": 0.1}"#,
        r#""numerics": {"h": 0.1, "uniqueness_scale": null}, "mode": "sweep", "sweep": {"eps": [0.05, 0.1, 0.2]}"#,
    );
    let cfg = write_config(dir.path(), "c.json", &text);
    let out = dir.path().join("out");
    let o = nlconv(&cfg, &out, &["--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&out);
    let runs = r["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let radii: Vec<f64> = runs.iter().map(|x| x["grid"]["radius"].as_f64().unwrap()).collect();
    assert!(radii.iter().all(|&x| x == radii[0]));
    let peaks: Vec<f64> = runs.iter().map(|x| x["solution"]["peak_excess"][0].as_f64().unwrap()).collect();
    assert!(peaks[0] < peaks[1] && peaks[1] < peaks[2], "{peaks:?}");
    for k in 1..=3 {
        assert!(out.join(format!("profile_{k}.csv")).exists());
    }
}

#[test]
fn stage_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("split.csv"), "tau,k_1_1,k_1_2,k_2_2\n0,1,0,1\n1,0.5,0,0.5\n2,0,0,0\n").unwrap();
    let cases = [
        (r#"{"problem": 7}"#.to_string(), 1),
        // decoupled components: A is reducible, so no positive Perron vector
        (coupled().replace("{\"type\": \"gaussian\", \"coeffs\": [[1.0, 0.5], [0.5, 1.0]]}", "{\"type\": \"tabulated\", \"path\": \"split.csv\"}"), 3),
        (FLAGSHIP.replace(r#""p": 0.5"#, r#""p": 1.0"#), 4),
        (FLAGSHIP.replace(r#""h": 0.1"#, r#""h": 0.1, "max_iters": 3"#), 5),
    ];
    for (k, (text, code)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{k}.json"), text);
        let o = nlconv(&cfg, &dir.path().join(format!("out{k}")), &[]);
        assert_eq!(o.status.code(), Some(*code), "case {k}: {}", stderr(&o));
        assert!(stderr(&o).contains("ERROR"), "case {k} gave no message");
    }
    let o = nlconv(&dir.path().join("missing.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_mode_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", FLAGSHIP);
    let o = nlconv(&cfg, dir.path(), &["--mode", "explore"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("explore"));
}
