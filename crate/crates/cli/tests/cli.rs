use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use marketplace::consistency::TransactionMode;
use marketplace::report::BenchmarkReport;
use marketplace_bench::commands::{compare_reports, Overrides};

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marketplace-bench"))
        .args(args)
        .env_remove("MARKETPLACE_SEED")
        .env_remove("MARKETPLACE_CONCURRENCY")
        .output()
        .unwrap()
}

fn read_report(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

fn schema() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/report.schema.json");
    let schema: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(report: &Value) {
    let v = schema();
    let errors: Vec<String> = v
        .iter_errors(report)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn golden_run_exits_zero_with_a_schema_valid_report() {
    let out = tempfile::tempdir().unwrap();
    let o = bench(&[
        "run",
        "--spec",
        spec("golden.toml").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "audit.jsonl",
        "measurements.jsonl",
        "dashboards.jsonl",
        "report.json",
        "timing.json",
    ] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    let report = read_report(out.path());
    assert_valid(&report);
    assert_eq!(report["valid"], true);
    assert_eq!(report["config"]["workload"]["seed"], 42);
    assert!(String::from_utf8_lossy(&o.stdout).contains("report.json"));
}

#[test]
fn threshold_breach_exits_three() {
    let out = tempfile::tempdir().unwrap();
    let o = bench(&[
        "run",
        "--spec",
        spec("saga-crash.json").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("atomicity"));
    let report = read_report(out.path());
    assert_valid(&report);
    assert!(report["anomalies"]["atomicity_violations"].as_u64().unwrap() > 0);
}

#[test]
fn malformed_specs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "[workload]\nnum_custmers = 3\n"),
        ("syntax.json", "{ \"workload\": "),
        ("ratio.toml", "[workload.transaction_ratio]\ncheckout = 0.5\n"),
        (
            "causal.toml",
            "[consistency]\nevent_ordering = \"UNORDERED\"\n[delivery]\nordering = \"CAUSAL\"\n",
        ),
    ];
    for (name, text) in cases {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        let o = bench(&[
            "run",
            "--spec",
            p.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = bench(&["run", "--spec", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = bench(&["run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn environment_overrides_seed_and_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("small.toml");
    std::fs::write(
        &p,
        "scenario = \"small\"\n[workload]\nnum_customers = 20\nnum_sellers = 2\nproducts_per_seller = 5\n\
         spare_products_per_seller = 1\ntransaction_count = 100\nconcurrency_level = 4\nseed = 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_marketplace-bench"))
        .args(["run", "--spec", p.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("MARKETPLACE_SEED", "77")
        .env("MARKETPLACE_CONCURRENCY", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_report(&out);
    assert_eq!(report["config"]["workload"]["seed"], 77);
    assert_eq!(report["config"]["workload"]["concurrency_level"], 2);

    let o = Command::new(env!("CARGO_BIN_EXE_marketplace-bench"))
        .args(["run", "--spec", p.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("MARKETPLACE_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_runs_both_modes_on_one_dataset() {
    let reports: Vec<BenchmarkReport> = compare_reports(
        &[spec("saga.toml"), spec("transactional.toml")],
        Overrides {
            seed: Some(5),
            concurrency: None,
        },
    )
    .unwrap();
    assert_eq!(reports.len(), 2);
    let mode = |r: &BenchmarkReport| r.config["consistency"]["transaction_mode"].clone();
    assert_eq!(
        mode(&reports[0]),
        serde_json::to_value(TransactionMode::EventualSaga).unwrap()
    );
    assert_eq!(
        mode(&reports[1]),
        serde_json::to_value(TransactionMode::Transactional).unwrap()
    );
    assert_eq!(reports[0].config["workload"]["seed"], 5);
    assert_eq!(reports[1].config["workload"]["seed"], 5);
    assert!(reports[0].throughput >= reports[1].throughput);
    let (saga, tx) = (&reports[0].anomalies, &reports[1].anomalies);
    assert_eq!(tx.atomicity_violations, 0);
    assert!(tx.atomicity_violations <= saga.atomicity_violations);
    for r in &reports {
        assert_valid(&serde_json::to_value(r).unwrap());
    }

    let table = marketplace::report::compare_table(&reports);
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains("EVENTUAL_SAGA") && rows[1].contains("TRANSACTIONAL"));
}

#[test]
fn compare_needs_two_specs() {
    let o = bench(&["compare", "--spec", spec("saga.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
