//! Throughput and latency statistics over the measurement stream.
//!
//! Time is logical: one tick per audit entry, `TICKS_PER_SECOND` ticks per
//! reported second.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::driver::{Completion, Measurement};
use crate::workload::TxType;

pub const TICKS_PER_SECOND: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no measured transactions")]
pub struct EmptyStream;

/// Nearest-rank percentile of an ascending slice; `p` in (0, 100].
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() || !(p > 0.0 && p <= 100.0) {
        return None;
    }
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Transactions per second over a window of logical ticks.
pub fn throughput(matched: u64, window_ticks: u64) -> f64 {
    matched as f64 * TICKS_PER_SECOND as f64 / window_ticks.max(1) as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl LatencySummary {
    pub fn from_unsorted(mut latencies: Vec<u64>) -> Self {
        latencies.sort_unstable();
        let pick = |p| percentile(&latencies, p).unwrap_or(0);
        Self {
            count: latencies.len() as u64,
            p50: pick(50.0),
            p90: pick(90.0),
            p99: pick(99.0),
            max: latencies.last().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub throughput: f64,
    pub window_ticks: u64,
    pub matched: u64,
    /// Latency in ticks of matched transactions, per type.
    pub latency: BTreeMap<TxType, LatencySummary>,
    pub overall: LatencySummary,
}

/// Statistics over matched, non-warm-up transactions.
pub fn compute_performance(measurements: &[Measurement]) -> Result<Performance, EmptyStream> {
    let measured: Vec<&Measurement> = measurements.iter().filter(|m| !m.warmup).collect();
    if measured.is_empty() {
        return Err(EmptyStream);
    }
    let start = measured.iter().map(|m| m.descriptor.submit_tick).min().unwrap_or(0);
    let end = measured.iter().map(|m| m.end_tick).max().unwrap_or(0);
    let window_ticks = end.saturating_sub(start);
    let matched: Vec<&&Measurement> = measured
        .iter()
        .filter(|m| m.completion == Completion::Matched)
        .collect();
    let mut per_type: BTreeMap<TxType, Vec<u64>> = BTreeMap::new();
    for m in &matched {
        per_type.entry(m.descriptor.tx_type).or_default().push(m.latency());
    }
    Ok(Performance {
        throughput: throughput(matched.len() as u64, window_ticks),
        window_ticks,
        matched: matched.len() as u64,
        overall: LatencySummary::from_unsorted(matched.iter().map(|m| m.latency()).collect()),
        latency: per_type
            .into_iter()
            .map(|(t, l)| (t, LatencySummary::from_unsorted(l)))
            .collect(),
    })
}
