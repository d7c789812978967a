//! Append-only audit log. Every state mutation, event publish, event delivery
//! and injected fault lands here; all correctness checkers run offline on it.
//!
//! The log also serves as the runtime's logical clock: an entry's
//! `logical_time` is its 1-based position, so `now()` is the number of entries
//! appended so far.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::domain::{CartStatus, CustomerId, OrderId, OrderStatus, ProductKey, SellerId, ShipmentId, Tid};
use crate::event::{EntityKey, EventId, EventType, Service};
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    StateMutation,
    EventPublish,
    EventDeliver,
    FaultInjection,
    /// Alarms and bookkeeping that change no service state.
    Diagnostic,
}

/// Who produced an entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Actor {
    Worker(u32),
    Service(Service),
    Fabric,
    Coordinator,
    Driver,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Worker(id) => write!(f, "worker-{id}"),
            Actor::Service(s) => f.write_str(s.name()),
            Actor::Fabric => f.write_str("fabric"),
            Actor::Coordinator => f.write_str("coordinator"),
            Actor::Driver => f.write_str("driver"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(id) = s.strip_prefix("worker-") {
            return id.parse().map(Actor::Worker).map_err(|e| e.to_string());
        }
        match s {
            "fabric" => return Ok(Actor::Fabric),
            "coordinator" => return Ok(Actor::Coordinator),
            "driver" => return Ok(Actor::Driver),
            _ => {}
        }
        Service::ALL
            .iter()
            .find(|svc| svc.name() == s)
            .map(|svc| Actor::Service(*svc))
            .ok_or_else(|| format!("unknown actor {s:?}"))
    }
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxOutcome {
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomerCounter {
    SuccessPayments,
    FailedPayments,
    DeliveredPackages,
    AbandonedCarts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    DropThenRedeliver,
    Delay,
    CrashConsumerMidTransaction,
}

/// Typed body of an audit entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Detail {
    Phase {
        name: String,
    },
    SellerCreated {
        seller_id: SellerId,
    },
    CustomerCreated {
        customer_id: CustomerId,
    },
    ProductCreated {
        key: ProductKey,
        price: Money,
        version: u64,
    },
    ProductPriceChanged {
        key: ProductKey,
        price: Money,
        version: u64,
    },
    ProductDeactivated {
        key: ProductKey,
        version: u64,
    },
    StockCreated {
        key: ProductKey,
        qty: u64,
    },
    StockDeactivated {
        key: ProductKey,
    },
    StockReserved {
        key: ProductKey,
        qty: u64,
    },
    StockConfirmed {
        key: ProductKey,
        qty: u64,
    },
    StockCanceled {
        key: ProductKey,
        qty: u64,
    },
    OrphanCompensation {
        service: Service,
        action: String,
    },
    OrphanEvent {
        service: Service,
        event_type: EventType,
    },
    ReplicaApplied {
        key: ProductKey,
        version: u64,
        price: Option<Money>,
    },
    ReplicaBuffered {
        key: ProductKey,
        version: u64,
    },
    ReplicaDiscarded {
        key: ProductKey,
        version: u64,
    },
    ReplicaStall {
        key: ProductKey,
        awaiting: u64,
        buffered: usize,
    },
    CartOpened {
        customer_id: CustomerId,
    },
    CartItemAdded {
        customer_id: CustomerId,
        key: ProductKey,
        version: u64,
        price: Money,
        qty: u32,
    },
    CartPriced {
        customer_id: CustomerId,
        key: ProductKey,
        version: u64,
        price: Money,
    },
    CartStatusChanged {
        customer_id: CustomerId,
        from: CartStatus,
        to: CartStatus,
    },
    OrderCreated {
        order_id: OrderId,
        customer_id: CustomerId,
        invoice_number: String,
        total_amount: Money,
        created_at: u64,
    },
    OrderStatusChanged {
        order_id: OrderId,
        from: OrderStatus,
        to: OrderStatus,
    },
    PaymentRecorded {
        order_id: OrderId,
        approved: bool,
        amount: Money,
    },
    ShipmentCreated {
        shipment_id: ShipmentId,
        order_id: OrderId,
        created_at: u64,
        packages: u32,
    },
    PackageDelivered {
        shipment_id: ShipmentId,
        order_id: OrderId,
        package_id: u32,
        seller_id: SellerId,
    },
    CustomerStat {
        customer_id: CustomerId,
        counter: CustomerCounter,
        value: u64,
    },
    TxLocked {
        keys: Vec<ProductKey>,
    },
    TxLockWait {
        key: ProductKey,
        holder: Tid,
    },
    TxPrepared {
        participant: Service,
    },
    TxDecision {
        commit: bool,
        participants: Vec<Service>,
    },
    TxApplied {
        participant: Service,
    },
    TxReleased {
        keys: Vec<ProductKey>,
    },
    TxOutcome {
        outcome: TxOutcome,
        reason: Option<String>,
    },
    Published {
        event_type: EventType,
        source: Service,
        targets: Vec<Service>,
        deps: Vec<EventId>,
        entity: EntityKey,
        version: Option<u64>,
    },
    Delivered {
        event_type: EventType,
        source: Service,
        target: Service,
        duplicate: bool,
    },
    Fault {
        kind: FaultKind,
        event_type: EventType,
        target: Service,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub logical_time: u64,
    pub actor: Actor,
    pub kind: EntryKind,
    pub tid: Option<Tid>,
    pub event_id: Option<EventId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<String>,
    pub detail: Detail,
}

/// An entry before the log assigns its logical time.
#[derive(Debug, Clone)]
pub struct Record {
    pub actor: Actor,
    pub kind: EntryKind,
    pub tid: Option<Tid>,
    pub event_id: Option<EventId>,
    pub before: Option<String>,
    pub after: Option<String>,
    pub detail: Detail,
}

impl Record {
    pub fn new(actor: Actor, kind: EntryKind, detail: Detail) -> Self {
        Self {
            actor,
            kind,
            tid: None,
            event_id: None,
            before: None,
            after: None,
            detail,
        }
    }

    pub fn mutation(actor: Actor, tid: Tid, detail: Detail) -> Self {
        Self::new(actor, EntryKind::StateMutation, detail).tid(tid)
    }

    pub fn diagnostic(actor: Actor, detail: Detail) -> Self {
        Self::new(actor, EntryKind::Diagnostic, detail)
    }

    pub fn tid(mut self, tid: Tid) -> Self {
        self.tid = Some(tid);
        self
    }

    pub fn event(mut self, event_id: Option<EventId>) -> Self {
        self.event_id = event_id;
        self
    }

    pub fn digests<B: Serialize + ?Sized, A: Serialize + ?Sized>(
        mut self,
        before: Option<&B>,
        after: Option<&A>,
    ) -> Self {
        self.before = before.map(digest);
        self.after = after.map(digest);
        self
    }
}

/// Short stable digest of a value's JSON form.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("audit values serialize");
    let hash = Sha256::digest(&bytes);
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Logical time of the most recent entry (0 when empty).
    pub fn now(&self) -> u64 {
        self.entries.lock().len() as u64
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, record: Record) -> u64 {
        let mut entries = self.entries.lock();
        let t = entries.len() as u64 + 1;
        entries.push(Self::stamp(t, record));
        t
    }

    /// Appends records contiguously; no other entry can interleave.
    pub fn record_batch(&self, records: Vec<Record>) -> u64 {
        let mut entries = self.entries.lock();
        for record in records {
            let t = entries.len() as u64 + 1;
            entries.push(Self::stamp(t, record));
        }
        entries.len() as u64
    }

    fn stamp(logical_time: u64, r: Record) -> AuditEntry {
        AuditEntry {
            logical_time,
            actor: r.actor,
            kind: r.kind,
            tid: r.tid,
            event_id: r.event_id,
            before: r.before,
            after: r.after,
            detail: r.detail,
        }
    }

    pub fn snapshot(&self) -> Vec<AuditEntry> {
        self.entries.lock().clone()
    }

    pub fn take(&self) -> Vec<AuditEntry> {
        std::mem::take(&mut *self.entries.lock())
    }

    pub fn clear(&self) {
        self.entries.lock().clear();
    }
}

pub fn write_jsonl<W: Write>(entries: &[AuditEntry], mut out: W) -> io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Vec<AuditEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}
