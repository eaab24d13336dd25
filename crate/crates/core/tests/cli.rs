use std::fs;
use std::path::Path;
use std::process::Command;

use platoon::cli::{
    emit_plot_data, parse_config, read_csv, read_summary, read_timing, run_matrix, AggregateRow,
    ManifestRow, PlotKind, RunRole, SweepRow,
};
use platoon::sim::TraceRow;

const SINGLE: &str = r#"{
  "experiments": [
    { "task": 1, "controller": { "kind": "centralized" },
      "m": [2], "n": [2], "seeds": [0], "k_sim": 3 }
  ]
}"#;

const PAIRED: &str = r#"{
  "experiments": [
    { "task": 2, "controller": { "kind": "decentralized" },
      "m": [2, 3], "n": [2], "seeds": [0, 1], "k_sim": 3 }
  ]
}"#;

fn files(dir: &Path, suffix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(suffix))
        .collect();
    v.sort();
    v
}

#[test]
fn single_run_matrix_writes_one_of_each() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(SINGLE).unwrap();
    let outcome = run_matrix(&cfg, dir.path(), 1).unwrap();
    assert_eq!(
        (outcome.runs, outcome.baselines, outcome.failures),
        (1, 0, 0)
    );
    assert_eq!(outcome.exit_code(), 0);

    let runs = dir.path().join("runs");
    let traces = files(&runs, ".csv");
    let summaries: Vec<String> = files(&runs, ".json")
        .into_iter()
        .filter(|n| !n.ends_with(".timing.json"))
        .collect();
    assert_eq!(traces.len(), 1);
    assert_eq!(summaries.len(), 1);
    let aggregate: Vec<AggregateRow> = read_csv(&dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.len(), 1);
    assert_eq!(aggregate[0].runs, 1);
    assert_eq!(aggregate[0].j_std, Some(0.0));
    // a centralized run is its own baseline
    assert_eq!(aggregate[0].delta_j_mean, Some(0.0));

    let rows: Vec<TraceRow> = read_csv(&runs.join(&traces[0])).unwrap();
    assert_eq!(rows.len(), 4 * 2);
    let summary = read_summary(&runs.join(&summaries[0])).unwrap();
    assert_eq!(summary.steps_completed, 3);
    let stem = summaries[0].trim_end_matches(".json");
    let timing = read_timing(&runs.join(format!("{stem}.timing.json"))).unwrap();
    assert!(timing.t_comp.is_some());
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = parse_config(PAIRED).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_matrix(&cfg, a.path(), 1).unwrap();
    run_matrix(&cfg, b.path(), 2).unwrap();
    for sub in ["runs", "baselines"] {
        let names: Vec<String> = files(&a.path().join(sub), ".json")
            .into_iter()
            .filter(|n| !n.ends_with(".timing.json"))
            .collect();
        assert!(!names.is_empty());
        assert_eq!(
            names,
            files(&b.path().join(sub), ".json")
                .into_iter()
                .filter(|n| !n.ends_with(".timing.json"))
                .collect::<Vec<_>>()
        );
        for n in names {
            let x = fs::read(a.path().join(sub).join(&n)).unwrap();
            let y = fs::read(b.path().join(sub).join(&n)).unwrap();
            assert_eq!(x, y, "{sub}/{n}");
        }
    }
}

#[test]
fn manifest_accounts_for_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(PAIRED).unwrap();
    let planned = cfg.expand().unwrap();
    let outcome = run_matrix(&cfg, dir.path(), 2).unwrap();
    assert_eq!(outcome.runs, planned.len());
    assert_eq!(outcome.baselines, planned.len());

    let manifest: Vec<ManifestRow> = read_csv(&dir.path().join("manifest.csv")).unwrap();
    let mut ids: Vec<&str> = manifest
        .iter()
        .filter(|r| r.role == RunRole::Run)
        .map(|r| r.id.as_str())
        .collect();
    ids.sort_unstable();
    let mut expected: Vec<&str> = planned.iter().map(|p| p.id.as_str()).collect();
    expected.sort_unstable();
    assert_eq!(ids, expected);

    for row in &manifest {
        assert!(row.ok);
        let summary = read_summary(Path::new(row.summary.as_ref().unwrap())).unwrap();
        let rows: Vec<TraceRow> = read_csv(Path::new(row.trace.as_ref().unwrap())).unwrap();
        assert_eq!(rows.len(), (summary.k_sim + 1) * summary.m);
        if row.role == RunRole::Run {
            assert!(summary.delta_j.is_some());
        }
    }
    let aggregate: Vec<AggregateRow> = read_csv(&dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.len(), 2);
    assert!(aggregate
        .iter()
        .all(|a| a.runs == 2 && a.delta_j_mean.is_some()));
}

#[test]
fn plot_data_matches_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(PAIRED).unwrap();
    run_matrix(&cfg, dir.path(), 1).unwrap();
    let written = emit_plot_data(dir.path(), PlotKind::Trajectory).unwrap();
    assert_eq!(written.len(), 4);

    let manifest: Vec<ManifestRow> = read_csv(&dir.path().join("manifest.csv")).unwrap();
    for row in manifest.iter().filter(|r| r.role == RunRole::Run) {
        let traces: Vec<TraceRow> = read_csv(Path::new(row.trace.as_ref().unwrap())).unwrap();
        let path = dir
            .path()
            .join("plots")
            .join(format!("{}.trajectory.csv", row.id));
        let mut rd = csv::Reader::from_path(&path).unwrap();
        let header = rd.headers().unwrap().clone();
        let spacing: Vec<usize> = (0..header.len())
            .filter(|&c| header[c].starts_with("spacing_"))
            .collect();
        assert_eq!(spacing.len(), row.m - 1);
        assert!(header.iter().any(|h| h == "d_safe"));
        for (rec, step) in rd.records().zip(traces.chunks(row.m)) {
            let rec = rec.unwrap();
            for (p, &c) in spacing.iter().enumerate() {
                let gap: f64 = rec[c].parse().unwrap();
                assert_eq!(gap, step[p].position - step[p + 1].position);
            }
        }
    }

    emit_plot_data(dir.path(), PlotKind::Sweep).unwrap();
    let sweep: Vec<SweepRow> = read_csv(&dir.path().join("plots").join("sweep_m.csv")).unwrap();
    assert_eq!(
        sweep.iter().map(|r| r.value).collect::<Vec<_>>(),
        vec![2, 3]
    );
    assert!(sweep.iter().all(|r| r.runs == 2));
}

#[test]
fn missing_outputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_plot_data(dir.path(), PlotKind::Sweep).is_err());
}

fn bench(args: &[&str], out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_platoon-bench"))
        .args(args)
        .arg("--output")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.display().to_string()
    };
    let out = dir.path().join("out");

    let good = write("good.json", SINGLE);
    assert_eq!(bench(&["--config", &good], &out), 0);
    assert!(out.join("plots").join("sweep_m.csv").exists());
    assert_eq!(
        bench(&["--config", &good, "--dry-run"], &dir.path().join("dry")),
        0
    );
    assert!(!dir.path().join("dry").exists());

    let failing = write(
        "failing.json",
        r#"{ "experiments": [ { "task": 2, "m": [3], "n": [4], "k_sim": 3,
             "solver": { "node_limit": 1 } } ] }"#,
    );
    assert_eq!(bench(&["--config", &failing], &dir.path().join("fail")), 1);

    let empty = write("empty.json", r#"{ "experiments": [] }"#);
    assert_eq!(bench(&["--config", &empty], &out), 2);
    let unknown = write("unknown.json", r#"{ "experiments": [ { "tsk": 1 } ] }"#);
    assert_eq!(bench(&["--config", &unknown], &out), 2);
    assert_eq!(bench(&["--config", "/nonexistent/config.json"], &out), 2);
}
