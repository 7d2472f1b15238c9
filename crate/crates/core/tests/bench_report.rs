use std::path::Path;

use pipetune::bench::{self, ExperimentSpec};
use pipetune::pipeline::synthetic_suite;
use pipetune::{Budget, Error, Method, RunConfig};

fn small(out: &Path) -> ExperimentSpec {
    ExperimentSpec {
        pipeline: synthetic_suite("synth3").unwrap(),
        methods: vec![Method::Eeipu, Method::Ei],
        repeats: 2,
        base_seed: 3,
        config: RunConfig {
            warmup: 4,
            raw_samples: 32,
            mc_samples: 64,
            restarts: 2,
            budget: Budget::Auto,
            ..RunConfig::default()
        },
        out_dir: out.to_path_buf(),
        cache_root: Some(out.join("cache")),
        jobs: 2,
    }
}

#[test]
fn report_reproduces_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench::run_experiment(&small(dir.path())).unwrap();
    assert_eq!(out.failures().count(), 0);
    assert_eq!(out.runs.len(), 4);

    let written = bench::read_summary(&dir.path().join("summary.csv")).unwrap();
    std::fs::remove_file(dir.path().join("summary.csv")).unwrap();
    let mut again = bench::report(dir.path()).unwrap();
    let mut expected = written.clone();
    again.sort_by(|a, b| a.method.cmp(&b.method));
    expected.sort_by(|a, b| a.method.cmp(&b.method));
    assert_eq!(again, expected);
    assert_eq!(
        bench::read_summary(&dir.path().join("summary.csv"))
            .unwrap()
            .len(),
        2
    );
}

#[test]
fn curves_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    bench::run_experiment(&small(dir.path())).unwrap();
    bench::report(dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("curves.csv")).unwrap();
    let mut prev: Option<(String, u64, f64, f64)> = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let key = (rec[0].to_string(), rec[1].parse::<u64>().unwrap());
        let cost: f64 = rec[3].parse().unwrap();
        let best: f64 = rec[4].parse().unwrap();
        if let Some((m, s, c, b)) = &prev {
            if (m.clone(), *s) == key {
                assert!(cost >= *c, "cumulative cost decreased");
                assert!(best >= *b, "best objective decreased");
            }
        }
        prev = Some((key.0, key.1, cost, best));
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn parallel_and_serial_runs_agree() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    bench::run_experiment(&small(a.path())).unwrap();
    let mut serial = small(b.path());
    serial.jobs = 1;
    bench::run_experiment(&serial).unwrap();
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let name = name.to_str().unwrap();
        if name.ends_with(".csv") {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
    }
}

#[test]
fn malformed_trace_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join(bench::trace_file_name("eeipu", 0));
    std::fs::write(&bad, "iter,delta\nnot,a,number\n").unwrap();
    match bench::report(dir.path()) {
        Err(Error::Parse { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn empty_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bench::report(dir.path()).is_err());
}
