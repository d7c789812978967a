//! Offline correctness checkers. Each is a pure function of the audit log
//! (plus dashboard captures or final stock where noted).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::audit::{Actor, AuditEntry, Detail, TxOutcome};
use crate::domain::{CustomerId, OrderId, OrderStatus, ProductKey, StockItem, Tid};
use crate::driver::DashboardCapture;
use crate::event::{EventId, EventType, Service};
use crate::money::Money;

pub const DEFAULT_REQUIRED_PAIRS: [(EventType, EventType); 1] =
    [(EventType::PaymentProcessed, EventType::ShipmentCreated)];

// ---- atomicity ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicityViolation {
    pub tid: Tid,
    pub outcome: Option<TxOutcome>,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicityReport {
    pub violations: Vec<AtomicityViolation>,
    /// Logical ticks from first reservation to last compensation, per compensated tid.
    pub compensation_latencies: Vec<(Tid, u64)>,
}

#[derive(Default)]
struct TidTrace {
    outcome: Option<TxOutcome>,
    reserved: BTreeMap<ProductKey, u64>,
    confirmed: BTreeMap<ProductKey, u64>,
    canceled: BTreeMap<ProductKey, u64>,
    first_reserve: Option<u64>,
    last_cancel: Option<u64>,
    order: Option<OrderId>,
    payment: Option<bool>,
    shipment: bool,
    decision: Option<u64>,
    released: Option<u64>,
    /// Logical times of stock, order-creation and payment writes.
    scoped_writes: Vec<u64>,
}

pub fn check_atomicity(audit: &[AuditEntry]) -> AtomicityReport {
    let mut traces: BTreeMap<Tid, TidTrace> = BTreeMap::new();
    let mut order_status: HashMap<OrderId, OrderStatus> = HashMap::new();
    for e in audit {
        let Some(tid) = e.tid.filter(|t| *t != Tid::INGEST) else {
            continue;
        };
        let t = e.logical_time;
        match &e.detail {
            Detail::StockReserved { key, qty } => {
                let tr = traces.entry(tid).or_default();
                *tr.reserved.entry(*key).or_default() += qty;
                tr.first_reserve.get_or_insert(t);
                tr.scoped_writes.push(t);
            }
            Detail::StockConfirmed { key, qty } => {
                let tr = traces.entry(tid).or_default();
                *tr.confirmed.entry(*key).or_default() += qty;
                tr.scoped_writes.push(t);
            }
            Detail::StockCanceled { key, qty } => {
                let tr = traces.entry(tid).or_default();
                *tr.canceled.entry(*key).or_default() += qty;
                tr.last_cancel = Some(t);
                tr.scoped_writes.push(t);
            }
            Detail::OrderCreated { order_id, .. } => {
                let tr = traces.entry(tid).or_default();
                tr.order = Some(*order_id);
                tr.scoped_writes.push(t);
                order_status.insert(*order_id, OrderStatus::Invoiced);
            }
            Detail::OrderStatusChanged { order_id, to, .. } => {
                order_status.insert(*order_id, *to);
            }
            Detail::PaymentRecorded { approved, .. } => {
                let tr = traces.entry(tid).or_default();
                tr.payment = Some(*approved);
                tr.scoped_writes.push(t);
            }
            Detail::ShipmentCreated { .. } => traces.entry(tid).or_default().shipment = true,
            Detail::TxDecision { .. } => traces.entry(tid).or_default().decision = Some(t),
            Detail::TxReleased { .. } => traces.entry(tid).or_default().released = Some(t),
            Detail::TxOutcome { outcome, .. } => {
                traces.entry(tid).or_default().outcome.get_or_insert(*outcome);
            }
            _ => {}
        }
    }

    let mut report = AtomicityReport::default();
    for (&tid, tr) in &traces {
        let mut reasons = Vec::new();
        let status = tr.order.and_then(|o| order_status.get(&o).copied());
        if tr.outcome == Some(TxOutcome::Committed) {
            for (key, &r) in &tr.reserved {
                let c = tr.confirmed.get(key).copied().unwrap_or(0);
                if c != r {
                    reasons.push(format!("{key}: reserved {r} but confirmed {c}"));
                }
            }
            if tr.canceled.values().any(|q| *q > 0) {
                reasons.push("committed checkout was compensated".into());
            }
            match status {
                None => reasons.push("committed checkout has no order".into()),
                Some(OrderStatus::Invoiced | OrderStatus::PaymentFailed) => {
                    reasons.push(format!("committed checkout's order is {status:?}"))
                }
                _ => {}
            }
            if tr.payment != Some(true) {
                reasons.push("committed checkout has no approved payment".into());
            }
        } else {
            for (key, &r) in &tr.reserved {
                let released = tr.canceled.get(key).copied().unwrap_or(0) + tr.confirmed.get(key).copied().unwrap_or(0);
                if r > released {
                    reasons.push(format!("{key}: {} units still reserved", r - released));
                }
            }
            if tr.confirmed.values().any(|q| *q > 0) {
                reasons.push("stock confirmed for a checkout that did not commit".into());
            }
            if let Some(s) = status.filter(|s| *s != OrderStatus::PaymentFailed) {
                reasons.push(format!("order left in {s:?}"));
            }
            if tr.payment == Some(true) {
                reasons.push("approved payment recorded".into());
            }
            if tr.shipment {
                reasons.push("shipment created".into());
            }
            if let (Some(a), Some(b)) = (tr.first_reserve, tr.last_cancel) {
                report.compensation_latencies.push((tid, b.saturating_sub(a)));
            }
        }
        if let Some(start) = tr.decision {
            let end = tr.released.unwrap_or(u64::MAX);
            if tr.scoped_writes.iter().any(|t| *t < start || *t > end) {
                reasons.push("writes visible outside the commit block".into());
            }
            if end != u64::MAX {
                let lo = audit.partition_point(|e| e.logical_time <= start);
                let hi = audit.partition_point(|e| e.logical_time < end);
                let intruders: BTreeSet<Tid> = audit[lo..hi.max(lo)]
                    .iter()
                    .filter_map(|e| e.tid)
                    .filter(|t| *t != tid)
                    .collect();
                if !intruders.is_empty() {
                    reasons.push(format!("commit block interleaved with {intruders:?}"));
                }
            }
        }
        if !reasons.is_empty() {
            report.violations.push(AtomicityViolation {
                tid,
                outcome: tr.outcome,
                reasons,
            });
        }
    }
    report
}

// ---- replication -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplicationAnomaly {
    /// A cart priced an item below a version the same customer already saw.
    CartRegression {
        customer_id: CustomerId,
        key: ProductKey,
        seen: u64,
        priced: u64,
        logical_time: u64,
    },
    /// The replica applied a version below one it had already applied.
    ReplicaRegression {
        key: ProductKey,
        from: u64,
        to: u64,
        logical_time: u64,
    },
    /// At quiescence the replica disagrees with the product service.
    Divergence {
        key: ProductKey,
        source_version: u64,
        replica_version: Option<u64>,
    },
}

pub fn check_replication(audit: &[AuditEntry]) -> Vec<ReplicationAnomaly> {
    let mut out = Vec::new();
    let mut seen: HashMap<(CustomerId, ProductKey), u64> = HashMap::new();
    let mut replica: BTreeMap<ProductKey, u64> = BTreeMap::new();
    let mut source: BTreeMap<ProductKey, u64> = BTreeMap::new();
    for e in audit {
        match &e.detail {
            Detail::CartItemAdded {
                customer_id,
                key,
                version,
                ..
            } => {
                let m = seen.entry((*customer_id, *key)).or_default();
                *m = (*m).max(*version);
            }
            Detail::CartPriced {
                customer_id,
                key,
                version,
                ..
            } => {
                let m = seen.entry((*customer_id, *key)).or_default();
                if *version < *m {
                    out.push(ReplicationAnomaly::CartRegression {
                        customer_id: *customer_id,
                        key: *key,
                        seen: *m,
                        priced: *version,
                        logical_time: e.logical_time,
                    });
                }
                *m = (*m).max(*version);
            }
            Detail::ReplicaApplied { key, version, .. } => {
                if let Some(prev) = replica.get(key).copied().filter(|p| version < p) {
                    out.push(ReplicationAnomaly::ReplicaRegression {
                        key: *key,
                        from: prev,
                        to: *version,
                        logical_time: e.logical_time,
                    });
                }
                let v = replica.entry(*key).or_default();
                *v = (*v).max(*version);
            }
            Detail::ProductCreated { key, version, .. }
            | Detail::ProductPriceChanged { key, version, .. }
            | Detail::ProductDeactivated { key, version } => {
                source.insert(*key, *version);
            }
            _ => {}
        }
    }
    for (key, &v) in &source {
        let r = replica.get(key).copied();
        if r != Some(v) {
            out.push(ReplicationAnomaly::Divergence {
                key: *key,
                source_version: v,
                replica_version: r,
            });
        }
    }
    out
}

// ---- integrity ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityViolation {
    pub key: ProductKey,
    pub logical_time: u64,
    pub reason: String,
}

/// Stock rows must reference a live product when created, and must be
/// deactivated once their product is deleted.
pub fn check_integrity(audit: &[AuditEntry]) -> Vec<IntegrityViolation> {
    let mut out = Vec::new();
    let mut products: HashMap<ProductKey, bool> = HashMap::new();
    let mut stock_active: BTreeMap<ProductKey, bool> = BTreeMap::new();
    for e in audit {
        match &e.detail {
            Detail::ProductCreated { key, .. } => {
                products.insert(*key, true);
            }
            Detail::ProductDeactivated { key, .. } => {
                products.insert(*key, false);
            }
            Detail::StockCreated { key, .. } => {
                if products.get(key) != Some(&true) {
                    out.push(IntegrityViolation {
                        key: *key,
                        logical_time: e.logical_time,
                        reason: "stock created without a live product".into(),
                    });
                }
                stock_active.insert(*key, true);
            }
            Detail::StockDeactivated { key } => {
                stock_active.insert(*key, false);
            }
            _ => {}
        }
    }
    let end = audit.last().map_or(0, |e| e.logical_time);
    for (key, active) in stock_active {
        if active && products.get(&key) == Some(&false) {
            out.push(IntegrityViolation {
                key,
                logical_time: end,
                reason: "active stock for a deleted product".into(),
            });
        }
    }
    out
}

// ---- snapshot ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMismatch {
    pub tid: Tid,
    pub seller_id: u64,
    pub aggregate: Money,
    pub tuple_sum: Money,
}

pub fn check_snapshot(dashboards: &[DashboardCapture]) -> Vec<SnapshotMismatch> {
    dashboards
        .iter()
        .filter_map(|d| {
            let tuple_sum: Money = d.tuples.iter().map(|r| r.amount).sum();
            (tuple_sum != d.aggregate).then_some(SnapshotMismatch {
                tid: d.tid,
                seller_id: d.seller_id,
                aggregate: d.aggregate,
                tuple_sum,
            })
        })
        .collect()
}

// ---- causality ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalityViolation {
    pub tid: Tid,
    pub consumer: Service,
    pub before: EventType,
    pub after: EventType,
    /// Logical time at which `after` reached the consumer.
    pub logical_time: u64,
}

/// For every required pair `(a, b)` and every consumer that both were sent
/// to, `a` of a tid must reach the consumer before `b` of the same tid.
pub fn check_causality(audit: &[AuditEntry], required: &[(EventType, EventType)]) -> Vec<CausalityViolation> {
    // (tid, event type) -> consumers the event was addressed to
    let mut addressed: HashMap<(Tid, EventType), HashSet<Service>> = HashMap::new();
    // (tid, consumer, event type) -> first delivery time
    let mut delivered: HashMap<(Tid, Service, EventType), u64> = HashMap::new();
    let mut order: Vec<(Tid, Service, EventType, u64)> = Vec::new();
    for e in audit {
        let Some(tid) = e.tid else { continue };
        match &e.detail {
            Detail::Published {
                event_type, targets, ..
            } => {
                addressed
                    .entry((tid, *event_type))
                    .or_default()
                    .extend(targets.iter().copied());
            }
            Detail::Delivered {
                event_type,
                target,
                duplicate: false,
                ..
            } if delivered.insert((tid, *target, *event_type), e.logical_time).is_none() => {
                order.push((tid, *target, *event_type, e.logical_time));
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (tid, consumer, ty, t) in order {
        for &(a, b) in required {
            if b != ty {
                continue;
            }
            let sent = addressed.get(&(tid, a)).is_some_and(|c| c.contains(&consumer));
            if !sent {
                continue;
            }
            let ok = delivered.get(&(tid, consumer, a)).is_some_and(|ta| *ta < t);
            if !ok {
                out.push(CausalityViolation {
                    tid,
                    consumer,
                    before: a,
                    after: b,
                    logical_time: t,
                });
            }
        }
    }
    out
}

// ---- conservation ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationViolation {
    pub key: ProductKey,
    pub initial: u64,
    pub available: u64,
    pub reserved: u64,
    pub confirmed: u64,
    pub reason: String,
}

/// Replays stock mutations and checks `initial = available + reserved +
/// confirmed` against the final stock rows.
pub fn check_conservation(audit: &[AuditEntry], final_stock: &[StockItem]) -> Vec<ConservationViolation> {
    #[derive(Default)]
    struct Ledger {
        initial: i128,
        available: i128,
        reserved: i128,
        confirmed: i128,
        negative: bool,
    }
    let mut ledgers: BTreeMap<ProductKey, Ledger> = BTreeMap::new();
    for e in audit {
        let (key, d_avail, d_res, d_conf) = match &e.detail {
            Detail::StockCreated { key, qty } => {
                let l = ledgers.entry(*key).or_default();
                l.initial += i128::from(*qty);
                (key, i128::from(*qty), 0, 0)
            }
            Detail::StockReserved { key, qty } => (key, -i128::from(*qty), i128::from(*qty), 0),
            Detail::StockConfirmed { key, qty } => (key, 0, -i128::from(*qty), i128::from(*qty)),
            Detail::StockCanceled { key, qty } => (key, i128::from(*qty), -i128::from(*qty), 0),
            _ => continue,
        };
        let l = ledgers.entry(*key).or_default();
        l.available += d_avail;
        l.reserved += d_res;
        l.confirmed += d_conf;
        l.negative |= l.available < 0 || l.reserved < 0;
    }
    let finals: HashMap<ProductKey, &StockItem> = final_stock.iter().map(|s| (s.key(), s)).collect();
    let mut out = Vec::new();
    for (key, l) in &ledgers {
        let to_u = |v: i128| u64::try_from(v.max(0)).unwrap_or(u64::MAX);
        let mut v = ConservationViolation {
            key: *key,
            initial: to_u(l.initial),
            available: to_u(l.available),
            reserved: to_u(l.reserved),
            confirmed: to_u(l.confirmed),
            reason: String::new(),
        };
        if l.negative {
            v.reason = "replay went negative".into();
        } else if let Some(s) = finals.get(key) {
            let total = i128::from(s.qty_available) + i128::from(s.qty_reserved) + l.confirmed;
            if total != l.initial {
                v.available = s.qty_available;
                v.reserved = s.qty_reserved;
                v.reason = format!("final rows hold {total}, expected {}", l.initial);
            } else if i128::from(s.qty_available) != l.available || i128::from(s.qty_reserved) != l.reserved {
                v.reason = format!(
                    "final rows ({}, {}) differ from replay ({}, {})",
                    s.qty_available, s.qty_reserved, l.available, l.reserved
                );
            }
        } else {
            v.reason = "stock row missing at the end of the run".into();
        }
        if !v.reason.is_empty() {
            out.push(v);
        }
    }
    for key in finals.keys().filter(|k| !ledgers.contains_key(k)) {
        let s = finals[key];
        out.push(ConservationViolation {
            key: *key,
            initial: 0,
            available: s.qty_available,
            reserved: s.qty_reserved,
            confirmed: 0,
            reason: "stock row without a creation entry".into(),
        });
    }
    out
}

// ---- driver-side invariants --------------------------------------------------

/// Customers whose carts were touched by more than one worker.
pub fn check_session_affinity(audit: &[AuditEntry]) -> Vec<(CustomerId, Vec<u32>)> {
    let mut owners: BTreeMap<CustomerId, BTreeSet<u32>> = BTreeMap::new();
    for e in audit {
        let Actor::Worker(w) = e.actor else { continue };
        let customer = match &e.detail {
            Detail::CartOpened { customer_id }
            | Detail::CartItemAdded { customer_id, .. }
            | Detail::CartPriced { customer_id, .. }
            | Detail::CartStatusChanged { customer_id, .. } => *customer_id,
            _ => continue,
        };
        owners.entry(customer).or_default().insert(w);
    }
    owners
        .into_iter()
        .filter(|(_, ws)| ws.len() > 1)
        .map(|(c, ws)| (c, ws.into_iter().collect()))
        .collect()
}

/// Cart items whose price does not match the product's price at that version.
pub fn check_cache_coherence(audit: &[AuditEntry]) -> Vec<(CustomerId, ProductKey, u64)> {
    let mut prices: HashMap<(ProductKey, u64), Money> = HashMap::new();
    let mut out = Vec::new();
    for e in audit {
        match &e.detail {
            Detail::ProductCreated { key, price, version } | Detail::ProductPriceChanged { key, price, version } => {
                prices.insert((*key, *version), *price);
            }
            Detail::CartItemAdded {
                customer_id,
                key,
                version,
                price,
                ..
            } if prices.get(&(*key, *version)) != Some(price) => {
                out.push((*customer_id, *key, *version));
            }
            _ => {}
        }
    }
    out
}

/// Orders whose logged status sequence leaves the order state machine.
pub fn check_order_paths(audit: &[AuditEntry]) -> Vec<OrderId> {
    let mut status: HashMap<OrderId, OrderStatus> = HashMap::new();
    let mut bad = BTreeSet::new();
    for e in audit {
        match &e.detail {
            Detail::OrderCreated { order_id, .. } => {
                if status.insert(*order_id, OrderStatus::Invoiced).is_some() {
                    bad.insert(*order_id);
                }
            }
            Detail::OrderStatusChanged { order_id, from, to } => match status.get(order_id) {
                Some(cur) if cur == from && from.can_transition(*to) => {
                    status.insert(*order_id, *to);
                }
                _ => {
                    bad.insert(*order_id);
                }
            },
            _ => {}
        }
    }
    bad.into_iter().collect()
}

/// Event ids whose side effects were applied more than once at one consumer.
pub fn check_exactly_once(audit: &[AuditEntry]) -> Vec<(EventId, Service)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in audit {
        if let (
            Some(id),
            Detail::Delivered {
                target,
                duplicate: false,
                ..
            },
        ) = (e.event_id, &e.detail)
        {
            if !seen.insert((id, *target)) {
                out.push((id, *target));
            }
        }
    }
    out
}

// ---- suite -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyCounts {
    pub atomicity_violations: u64,
    pub replication_anomalies: u64,
    pub integrity_violations: u64,
    pub snapshot_mismatches: u64,
    pub causality_violations: u64,
}

impl AnomalyCounts {
    pub fn total(&self) -> u64 {
        self.atomicity_violations
            + self.replication_anomalies
            + self.integrity_violations
            + self.snapshot_mismatches
            + self.causality_violations
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResults {
    pub atomicity: AtomicityReport,
    pub replication: Vec<ReplicationAnomaly>,
    pub integrity: Vec<IntegrityViolation>,
    pub snapshot: Vec<SnapshotMismatch>,
    pub causality: Vec<CausalityViolation>,
    pub conservation: Vec<ConservationViolation>,
    pub session_affinity: Vec<(CustomerId, Vec<u32>)>,
    pub cache_coherence: Vec<(CustomerId, ProductKey, u64)>,
    pub order_paths: Vec<OrderId>,
    pub exactly_once: Vec<(EventId, Service)>,
}

impl CheckResults {
    pub fn counts(&self) -> AnomalyCounts {
        AnomalyCounts {
            atomicity_violations: self.atomicity.violations.len() as u64,
            replication_anomalies: self.replication.len() as u64,
            integrity_violations: self.integrity.len() as u64,
            snapshot_mismatches: self.snapshot.len() as u64,
            causality_violations: self.causality.len() as u64,
        }
    }
}

pub fn run_all(
    audit: &[AuditEntry],
    dashboards: &[DashboardCapture],
    final_stock: &[StockItem],
    required_pairs: &[(EventType, EventType)],
) -> CheckResults {
    CheckResults {
        atomicity: check_atomicity(audit),
        replication: check_replication(audit),
        integrity: check_integrity(audit),
        snapshot: check_snapshot(dashboards),
        causality: check_causality(audit, required_pairs),
        conservation: check_conservation(audit, final_stock),
        session_affinity: check_session_affinity(audit),
        cache_coherence: check_cache_coherence(audit),
        order_paths: check_order_paths(audit),
        exactly_once: check_exactly_once(audit),
    }
}
