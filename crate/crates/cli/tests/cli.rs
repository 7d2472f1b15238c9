use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--warmup",
    "4",
    "--raw-samples",
    "32",
    "--mc-samples",
    "64",
    "--restarts",
    "2",
];

fn pipetune(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipetune"))
        .args(args)
        .env("PIPETUNE_CACHE_ROOT", cache)
        .output()
        .unwrap()
}

fn run_small(out: &Path, cache: &Path) -> Output {
    let mut args = vec![
        "run",
        "--pipeline",
        "synth3",
        "--methods",
        "eeipu,ei",
        "--repeats",
        "3",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL);
    pipetune(&args, cache)
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_traces_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("res");
    let o = run_small(&out, &tmp.path().join("cache"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names = csv_files(&out);
    assert_eq!(names.iter().filter(|n| n.starts_with("trace_")).count(), 6);
    assert!(names.contains(&"summary.csv".to_string()));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("eeipu") && stdout.contains("ei"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_small(&a, &tmp.path().join("ca")).status.success());
    assert!(run_small(&b, &tmp.path().join("cb")).status.success());
    let names = csv_files(&a);
    assert_eq!(names, csv_files(&b));
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap(),
            "{n} differs"
        );
    }
}

#[test]
fn missing_pipeline_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pipetune(&["run", "--out", tmp.path().to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
}

#[test]
fn unknown_pipeline_and_bad_budget_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pipetune(&["run", "--pipeline", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = pipetune(
        &["run", "--pipeline", "synth3", "--budget", "-1"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_regenerates_summary_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("res");
    assert!(run_small(&out, &tmp.path().join("cache")).status.success());
    let before = std::fs::read(out.join("summary.csv")).unwrap();
    std::fs::remove_file(out.join("summary.csv")).unwrap();
    let o = pipetune(&["report", out.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("curves.csv").exists());
    let after = std::fs::read(out.join("summary.csv")).unwrap();
    let rows = |b: &[u8]| {
        let mut v: Vec<String> = String::from_utf8_lossy(b)
            .lines()
            .map(String::from)
            .collect();
        v.sort();
        v
    };
    assert_eq!(rows(&before), rows(&after));
}

#[test]
fn failing_external_stage_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let def = tmp.path().join("p.json");
    std::fs::write(
        &def,
        r#"{"name":"bad","cost_currency":"seconds","stages":[
            {"kind":"external","dims":1,"bounds":[[0,1]],"command":"exit 4"}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("res");
    let o = pipetune(
        &[
            "run",
            "--pipeline-file",
            def.to_str().unwrap(),
            "--methods",
            "ei",
            "--repeats",
            "1",
            "--warmup",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        &tmp.path().join("cache"),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 1"));
}
