//! The benchmark report, threshold evaluation and the mode comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkers::{AnomalyCounts, CheckResults};
use crate::driver::{Accounting, RunOutput};
use crate::metrics::{compute_performance, LatencySummary, TICKS_PER_SECOND};
use crate::workload::TxType;

pub const REPORT_FORMAT: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_SPEC: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

/// Maximum tolerated count per anomaly class; absent means unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub atomicity_violations: Option<u64>,
    pub replication_anomalies: Option<u64>,
    pub integrity_violations: Option<u64>,
    pub snapshot_mismatches: Option<u64>,
    pub causality_violations: Option<u64>,
}

impl Thresholds {
    pub fn zero() -> Self {
        Self {
            atomicity_violations: Some(0),
            replication_anomalies: Some(0),
            integrity_violations: Some(0),
            snapshot_mismatches: Some(0),
            causality_violations: Some(0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortCounts {
    pub aborted: u64,
    pub timed_out: u64,
    pub total: u64,
}

/// Properties that hold in every mode. Any nonzero count is a breach.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCounts {
    pub accounting_balanced: bool,
    pub conservation_violations: u64,
    pub session_affinity_violations: u64,
    pub cache_coherence_violations: u64,
    pub order_path_violations: u64,
    pub duplicate_effects: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensationStats {
    pub compensated: u64,
    pub mean_ticks: f64,
    pub max_ticks: u64,
    /// Cancels that arrived for a reservation stock never made.
    pub orphan_compensations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format: u32,
    pub scenario: String,
    pub valid: bool,
    pub error: Option<String>,
    pub ticks_per_second: u64,
    /// Matched transactions per logical second.
    pub throughput: f64,
    pub window_ticks: u64,
    pub latency: BTreeMap<TxType, LatencySummary>,
    pub overall_latency: LatencySummary,
    pub aborts: AbortCounts,
    pub accounting: Accounting,
    pub anomalies: AnomalyCounts,
    pub invariants: InvariantCounts,
    pub compensation: CompensationStats,
    pub breaches: Vec<String>,
    pub config: serde_json::Value,
}

impl BenchmarkReport {
    pub fn build(
        scenario: &str,
        output: &RunOutput,
        checks: &CheckResults,
        orphan_compensations: u64,
        config: serde_json::Value,
        thresholds: &Thresholds,
    ) -> Self {
        let (performance, error) = match compute_performance(&output.measurements) {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let a = output.accounting;
        let latencies: Vec<u64> = checks
            .atomicity
            .compensation_latencies
            .iter()
            .map(|(_, t)| *t)
            .collect();
        let mut report = Self {
            format: REPORT_FORMAT,
            scenario: scenario.to_owned(),
            valid: error.is_none(),
            error,
            ticks_per_second: TICKS_PER_SECOND,
            throughput: performance.as_ref().map_or(0.0, |p| p.throughput),
            window_ticks: performance.as_ref().map_or(0, |p| p.window_ticks),
            latency: performance.as_ref().map(|p| p.latency.clone()).unwrap_or_default(),
            overall_latency: performance.as_ref().map(|p| p.overall).unwrap_or_default(),
            aborts: AbortCounts {
                aborted: a.aborted,
                timed_out: a.timed_out,
                total: a.aborted + a.timed_out,
            },
            accounting: a,
            anomalies: checks.counts(),
            invariants: InvariantCounts {
                accounting_balanced: a.balanced(),
                conservation_violations: checks.conservation.len() as u64,
                session_affinity_violations: checks.session_affinity.len() as u64,
                cache_coherence_violations: checks.cache_coherence.len() as u64,
                order_path_violations: checks.order_paths.len() as u64,
                duplicate_effects: checks.exactly_once.len() as u64,
            },
            compensation: CompensationStats {
                compensated: latencies.len() as u64,
                mean_ticks: if latencies.is_empty() {
                    0.0
                } else {
                    latencies.iter().sum::<u64>() as f64 / latencies.len() as f64
                },
                max_ticks: latencies.iter().copied().max().unwrap_or(0),
                orphan_compensations,
            },
            breaches: Vec::new(),
            config,
        };
        report.breaches = breaches(&report, thresholds);
        report
    }

    /// A report for a run that failed before producing results.
    pub fn failed(scenario: &str, error: String, config: serde_json::Value) -> Self {
        Self {
            format: REPORT_FORMAT,
            scenario: scenario.to_owned(),
            valid: false,
            error: Some(error),
            ticks_per_second: TICKS_PER_SECOND,
            throughput: 0.0,
            window_ticks: 0,
            latency: BTreeMap::new(),
            overall_latency: LatencySummary::default(),
            aborts: AbortCounts::default(),
            accounting: Accounting::default(),
            anomalies: AnomalyCounts::default(),
            invariants: InvariantCounts::default(),
            compensation: CompensationStats::default(),
            breaches: Vec::new(),
            config,
        }
    }

    /// Pretty JSON with a trailing newline. Map keys are sorted, so equal
    /// reports serialize to equal bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Anomaly classes above their threshold and any broken invariant.
pub fn breaches(report: &BenchmarkReport, thresholds: &Thresholds) -> Vec<String> {
    let a = &report.anomalies;
    let limits = [
        (
            "atomicity_violations",
            a.atomicity_violations,
            thresholds.atomicity_violations,
        ),
        (
            "replication_anomalies",
            a.replication_anomalies,
            thresholds.replication_anomalies,
        ),
        (
            "integrity_violations",
            a.integrity_violations,
            thresholds.integrity_violations,
        ),
        (
            "snapshot_mismatches",
            a.snapshot_mismatches,
            thresholds.snapshot_mismatches,
        ),
        (
            "causality_violations",
            a.causality_violations,
            thresholds.causality_violations,
        ),
    ];
    let mut out: Vec<String> = limits
        .into_iter()
        .filter_map(|(name, n, max)| max.filter(|m| n > *m).map(|m| format!("{name}: {n} > {m}")))
        .collect();
    let i = &report.invariants;
    if report.valid && !i.accounting_balanced {
        out.push("accounting identity does not hold".into());
    }
    let hard = [
        ("conservation_violations", i.conservation_violations),
        ("session_affinity_violations", i.session_affinity_violations),
        ("cache_coherence_violations", i.cache_coherence_violations),
        ("order_path_violations", i.order_path_violations),
        ("duplicate_effects", i.duplicate_effects),
    ];
    out.extend(
        hard.into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(name, n)| format!("{name}: {n} > 0")),
    );
    out
}

pub fn exit_code(report: &BenchmarkReport, thresholds: &Thresholds) -> i32 {
    if !report.valid {
        EXIT_RUNTIME
    } else if !breaches(report, thresholds).is_empty() {
        EXIT_THRESHOLD
    } else {
        EXIT_OK
    }
}

fn mode(report: &BenchmarkReport, pointer: &str) -> String {
    report
        .config
        .pointer(pointer)
        .and_then(|v| v.as_str())
        .unwrap_or("-")
        .to_owned()
}

/// Side-by-side table of throughput, latency and anomaly counts.
pub fn compare_table(reports: &[BenchmarkReport]) -> String {
    let header = [
        "scenario",
        "transaction",
        "replication",
        "ordering",
        "tx/s",
        "p50",
        "p99",
        "aborts",
        "atom",
        "repl",
        "integ",
        "snap",
        "caus",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let a = &r.anomalies;
            vec![
                r.scenario.clone(),
                mode(r, "/consistency/transaction_mode"),
                mode(r, "/consistency/replication_mode"),
                mode(r, "/consistency/event_ordering"),
                format!("{:.1}", r.throughput),
                r.overall_latency.p50.to_string(),
                r.overall_latency.p99.to_string(),
                r.aborts.total.to_string(),
                a.atomicity_violations.to_string(),
                a.replication_anomalies.to_string(),
                a.integrity_violations.to_string(),
                a.snapshot_mismatches.to_string(),
                a.causality_violations.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header.map(String::from));
    line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in &rows {
        line(r);
    }
    out
}
