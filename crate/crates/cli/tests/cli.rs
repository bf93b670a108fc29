use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::io::Write;

use serde_json::Value;
use valence_core::model::{profile_line, report_line, sample_line, Ingested};
use valence_core::synth::{generate_population, Driver, EntitySpec};

const QUICK: &str = "[learn]\nbudget = 6\nk_max = 4\n";

fn sxp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sxp"))
        .args(args)
        .env_remove("SXP_CONFIG")
        .output()
        .expect("binary runs")
}

fn sxp_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_sxp"))
        .args(args)
        .env_remove("SXP_CONFIG")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json output")
}

fn write_log(path: &Path, data: &Ingested) {
    let mut text = String::new();
    for r in &data.reports {
        text += &report_line(r);
        text.push('\n');
    }
    for s in &data.samples {
        text += &sample_line(s);
        text.push('\n');
    }
    for p in &data.profiles {
        text += &profile_line(p);
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    log: String,
    config: String,
}

fn fixture(specs: &[EntitySpec]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let log = root.join("events.jsonl");
    write_log(&log, &generate_population(specs, 7));
    let config = root.join("sxp.toml");
    std::fs::write(&config, QUICK).unwrap();
    Fixture {
        _dir: dir,
        log: log.display().to_string(),
        config: config.display().to_string(),
        root,
    }
}

/// Trains a single weekday-driven entity and returns its model path.
fn trained(f: &Fixture) -> String {
    let out = f.root.join("run");
    let o = sxp(&["train", "--input", &f.log, "--config", &f.config, "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("models/alice.sxpm").display().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let o = sxp(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for sub in [
        "ingest", "reconstruct", "score-text", "train", "evaluate", "predict", "explain", "compare", "empathy", "map",
        "journal",
    ] {
        assert!(text.contains(sub), "missing {sub}");
    }
    assert!(text.contains("SXP_CONFIG"));
}

#[test]
fn usage_errors_exit_two() {
    let o = sxp(&["ingest", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));
    assert_eq!(sxp(&["predict", "--model", "m", "--weekday", "sun", "--hour", "24", "--cell", "x"]).status.code(), Some(2));
    assert_eq!(sxp(&[]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let o = sxp(&["ingest", "--input", "/nonexistent/events.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[learn]\nbudget = 0\n").unwrap();
    let log = dir.path().join("e.jsonl");
    std::fs::write(&log, "").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sxp"))
        .args(["ingest", "--input", log.to_str().unwrap()])
        .env("SXP_CONFIG", &bad)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn ingest_reports_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("e.jsonl");
    std::fs::write(
        &log,
        "{\"type\":\"report\",\"entity\":\"a\",\"at\":\"2024-01-01T10:00:00Z\",\"tz\":\"UTC\",\"class\":\"positive\"}\n\
         # comment\n\
         {\"type\":\"report\",\"entity\":\"a\"}\n",
    )
    .unwrap();
    let v = json(&sxp(&["ingest", "--input", log.to_str().unwrap()]));
    assert_eq!(v["reports"], 1);
    assert_eq!(v["diagnostics"].as_array().unwrap().len(), 1);
    assert_eq!(v["diagnostics"][0]["line"], 3);
}

#[test]
fn train_predict_map_explain_evaluate() {
    let f = fixture(&[EntitySpec::new("alice", Driver::Weekday, 400)]);
    let model = trained(&f);
    let run = f.root.join("run");
    assert!(run.join("reports/alice.json").exists());
    assert!(run.join("influence.csv").exists());
    let pop: Value = serde_json::from_str(&std::fs::read_to_string(run.join("population.json")).unwrap()).unwrap();
    assert_eq!(pop["total"], 1);
    assert_eq!(pop["completed"], 1);

    let cell = "29SMC8785";
    let p = json(&sxp(&["predict", "--model", &model, "--weekday", "sunday", "--hour", "8", "--cell", cell]));
    let triple: Vec<f64> = ["negative", "neutral", "positive"].iter().map(|k| p[k].as_f64().unwrap()).collect();
    assert!((triple.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(triple[2] > 0.5, "{triple:?}");

    let map_dir = f.root.join("map_sun");
    let doc = json(&sxp(&[
        "map", "--model", &model, "--input", &f.log, "--weekday", "sun", "--hour", "12", "--top-n", "50", "--out",
        map_dir.to_str().unwrap(),
    ]));
    let cells = doc["cells"].as_array().unwrap();
    // six places, top_n larger than available
    assert_eq!(cells.len(), 6);
    for c in cells {
        let pr: Vec<f64> = c["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(pr[2] > pr[0] && pr[2] > pr[1], "sunday cell not positive: {pr:?}");
    }
    let geo: Value = serde_json::from_str(&std::fs::read_to_string(map_dir.join("map.geojson")).unwrap()).unwrap();
    assert_eq!(geo["type"], "FeatureCollection");
    for feat in geo["features"].as_array().unwrap() {
        assert_eq!(feat["geometry"]["type"], "Polygon");
        let ring = feat["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);
        for pt in ring {
            let (lon, lat) = (pt[0].as_f64().unwrap(), pt[1].as_f64().unwrap());
            assert!((-9.3..-8.9).contains(&lon) && (38.6..38.9).contains(&lat), "{lon},{lat}");
        }
    }
    let html = std::fs::read_to_string(map_dir.join("map.html")).unwrap();
    assert!(html.contains("<svg") && html.contains("mouseenter"));

    let monday = json(&sxp(&[
        "map", "--model", &model, "--input", &f.log, "--weekday", "monday", "--hour", "12", "--out",
        f.root.join("map_mon").to_str().unwrap(),
    ]));
    let mon_cells = monday["cells"].as_array().unwrap();
    assert!(mon_cells.len() <= 7);
    let pos = |cs: &Vec<Value>| cs.iter().map(|c| c["probabilities"][2].as_f64().unwrap()).sum::<f64>() / cs.len() as f64;
    assert!(pos(cells) - pos(mon_cells) > 0.3);

    let ex = json(&sxp(&["explain", "--model", &model, "--input", &f.log, "--limit", "3", "--csv", f.root.join("inf.csv").to_str().unwrap()]));
    assert_eq!(ex["instances"].as_array().unwrap().len(), 3);
    assert_eq!(ex["ranking"]["entities"][0]["family"], "moment_dow");
    let csv = std::fs::read_to_string(f.root.join("inf.csv")).unwrap();
    assert!(csv.starts_with("family,share_percent,mean_abs"));

    let ev = json(&sxp(&["evaluate", "--model", &model, "--input", &f.log]));
    assert!(ev["eval"]["f1_macro"].as_f64().unwrap() > 0.85);
}

#[test]
fn train_is_deterministic_and_handles_empty_input() {
    let f = fixture(&[EntitySpec::new("alice", Driver::Location, 150)]);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = f.root.join(name);
        let o = sxp(&["train", "--input", &f.log, "--config", &f.config, "--seed", "11", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        reports.push(std::fs::read(out.join("reports/alice.json")).unwrap());
        assert_eq!(std::fs::read(out.join("models/alice.sxpm")).unwrap().len() > 0, true);
    }
    assert_eq!(reports[0], reports[1]);

    let empty = f.root.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = sxp(&["train", "--input", empty.to_str().unwrap(), "--out", f.root.join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn compare_and_empathy_and_reconstruct() {
    let specs: Vec<EntitySpec> = (0..8).map(|i| EntitySpec::new(&format!("e{i}"), Driver::Weekday, 40)).collect();
    let f = fixture(&specs);
    let o = sxp(&["compare", "--input", &f.log, "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 6, "{text}");
    assert!(text.starts_with("comparison,group_a,group_b"));
    let v = json(&sxp(&["compare", "--input", &f.log, "--measurement", "report-coding"]));
    assert_eq!(v["rows"].as_array().unwrap().len(), 5);

    let o = sxp(&["empathy", "--input", &f.log, "--entity", "e0", "--tick-s", "3600"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("at,event,score"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().filter(|l| l.contains(",report,")).count() == 40);
    assert!(rows.iter().any(|l| l.contains(",tick,")));
    assert_eq!(sxp(&["empathy", "--input", &f.log]).status.code(), Some(1));

    let out = f.root.join("rebuilt.jsonl");
    assert!(sxp(&["reconstruct", "--input", &f.log, "--out", out.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# source:"));
    assert!(text.contains("\"synthetic\":true"));
    let again = json(&sxp(&["ingest", "--input", out.to_str().unwrap()]));
    assert_eq!(again["diagnostics"].as_array().unwrap().len(), 0);
}

#[test]
fn score_text_from_stdin() {
    let o = sxp_stdin(&["score-text"], "what a wonderful happy day :)\nterrible awful mess\n\n");
    assert!(o.status.success());
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["class"], "positive");
    assert_eq!(lines[1]["class"], "negative");
    assert_eq!(sxp_stdin(&["score-text", "--primary", "xx"], "hi").status.code(), Some(1));
}

#[test]
fn journal_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let j = dir.path().join("j.sxpj");
    let j = j.to_str().unwrap();
    let o = sxp_stdin(&["journal", "--journal", j, "append"], "{\"a\":1}\n{\"a\":2}\n");
    assert_eq!(stdout(&o), "1\n2\n");
    let peer = dir.path().join("peer");
    let o = sxp(&["journal", "--journal", j, "sync", "--peer-dir", peer.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::create_dir(&peer).unwrap();
    let v = json(&sxp(&["journal", "--journal", j, "sync", "--peer-dir", peer.to_str().unwrap()]));
    assert_eq!(v["acked"], serde_json::json!([1, 2]));
    let list = stdout(&sxp(&["journal", "--journal", j, "list"]));
    assert_eq!(list.lines().count(), 2);
    assert!(list.contains("\"synced\":true"));
    let v = json(&sxp(&["journal", "--journal", j, "compact", "--now", "2999-01-01T00:00:00Z"]));
    assert_eq!(v["removed"], 2);
    let o = sxp(&["journal", "--journal", j, "append", "--payload", "x"]);
    assert_eq!(stdout(&o), "3\n");
}
