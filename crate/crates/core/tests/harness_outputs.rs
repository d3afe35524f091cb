use std::fs;
use std::path::Path;

use stratatrack::harness::{run_figure1, run_figure2, ExperimentConfig};
use stratatrack::Regularizer;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::l1_default();
    cfg.regularizer = Regularizer::l1(30);
    cfg.n = 20;
    cfg.s = 3;
    cfg.lambda = 0.2;
    cfg.batches = 15;
    cfg.replications = 8;
    cfg.delta_targets = (0..=30).collect();
    cfg
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (head, rows)
}

#[test]
fn figure2_average_equals_mean_of_trace_files() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = run_figure2(&cfg, Some(dir.path())).unwrap();
    assert!(!out.trajectories.is_empty());

    let (head, avg_rows) = read_rows(&dir.path().join("averaged.csv"));
    assert_eq!(head[0], "batch");
    for (col, name) in head.iter().enumerate().skip(1) {
        let delta: usize = name.strip_prefix("delta_").unwrap().parse().unwrap();
        let reps: Vec<usize> = out
            .report
            .rows
            .iter()
            .filter(|r| r.retained && r.delta == Some(delta))
            .map(|r| r.replication)
            .collect();
        assert!(!reps.is_empty());
        let mut sums = vec![0.0; avg_rows.len()];
        for rep in &reps {
            let (th, trows) = read_rows(&dir.path().join(format!("traces/saga_{rep}.csv")));
            assert_eq!(th, ["batch", "k", "R0", "objective", "dual_residual", "stratum"]);
            assert_eq!(trows.len(), avg_rows.len());
            for (i, row) in trows.iter().enumerate() {
                sums[i] += row[2].parse::<f64>().unwrap();
            }
        }
        for (i, row) in avg_rows.iter().enumerate() {
            let want = sums[i] / reps.len() as f64;
            let got: f64 = row[col].parse().unwrap();
            assert!((got - want).abs() <= 1e-12, "delta {delta} row {i}: {got} vs {want}");
        }
    }
    assert!(dir.path().join("plot.gp").exists());
}

#[test]
fn reports_are_deterministic_across_thread_counts() {
    let mut cfg = small_config();
    cfg.replications = 5;
    let mut texts = Vec::new();
    for threads in [1, 3] {
        cfg.threads = Some(threads);
        let dir = tempfile::tempdir().unwrap();
        run_figure2(&cfg, Some(dir.path())).unwrap();
        let mut report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        // the thread count is echoed in the config; everything else must match
        report["config"].as_object_mut().unwrap().remove("threads");
        texts.push((report, fs::read(dir.path().join("averaged.csv")).unwrap()));
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn figure1_writes_one_trace_per_solver() {
    let mut cfg = small_config();
    cfg.batches = 5;
    let dir = tempfile::tempdir().unwrap();
    let out = run_figure1(&cfg, Some(dir.path())).unwrap();
    assert_eq!(out.runs.len(), 3);
    for name in ["fb", "proxsgd", "saga"] {
        let (_, rows) = read_rows(&dir.path().join(format!("traces/{name}_0.csv")));
        assert_eq!(rows.len(), 5, "{name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "figure1");
}

#[test]
fn empty_selection_is_reported_not_an_error() {
    let mut cfg = small_config();
    cfg.replications = 2;
    cfg.delta_targets = vec![1000];
    let out = run_figure2(&cfg, None).unwrap();
    assert_eq!(serde_json::to_value(out.report.status).unwrap(), "empty");
    assert!(out.averages.is_empty());
}

#[test]
fn config_overrides_merge_over_preset() {
    let cfg = ExperimentConfig::from_json(r#"{"regularizer": {"kind": "nuclear", "rows": 6, "cols": 4}, "n": 80}"#)
        .unwrap();
    assert_eq!(cfg.n, 80);
    assert_eq!(cfg.batches, ExperimentConfig::nuclear_default().batches);
    assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"s": 500}"#).is_err());
}

#[test]
fn shipped_schema_lists_every_config_field() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/experiment_config.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let props = schema["properties"].as_object().unwrap();
    let mut cfg = ExperimentConfig::nuclear_default();
    cfg.threads = Some(2);
    cfg.output_dir = Some("out".into());
    let value = serde_json::to_value(&cfg).unwrap();
    let fields = value.as_object().unwrap();
    let mut want: Vec<&String> = fields.keys().collect();
    let mut have: Vec<&String> = props.keys().collect();
    want.sort();
    have.sort();
    assert_eq!(want, have);
}
