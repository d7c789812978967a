//! Consistency regimes: transaction mode, product replication to carts, and
//! the per-key lock table used by two-phase commit.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::{OrderRecord, ProductKey, ShipmentRecord, Tid};
use crate::event::{EventId, Service};
use crate::fabric::EventOrdering;
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransactionMode {
    #[default]
    EventualSaga,
    Transactional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplicationMode {
    #[default]
    Eventual,
    Causal,
}

/// Last participant covered by the checkout transaction in transactional mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxBoundary {
    #[default]
    Payment,
    Shipment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub transaction_mode: TransactionMode,
    pub replication_mode: ReplicationMode,
    pub dashboard_snapshot: bool,
    pub event_ordering: EventOrdering,
    pub transaction_boundary: TxBoundary,
}

impl ConsistencyConfig {
    /// Every knob at its strictest setting.
    pub fn strict() -> Self {
        Self {
            transaction_mode: TransactionMode::Transactional,
            replication_mode: ReplicationMode::Causal,
            dashboard_snapshot: true,
            event_ordering: EventOrdering::Causal,
            transaction_boundary: TxBoundary::Payment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaEntry {
    /// `None` once the product is deleted.
    pub price: Option<Money>,
    pub version: u64,
    pub causal_token: Option<EventId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaUpdate {
    Price {
        price: Money,
        version: u64,
        token: Option<EventId>,
    },
    Delete {
        version: u64,
        token: Option<EventId>,
    },
}

impl ReplicaUpdate {
    pub fn version(&self) -> u64 {
        match self {
            ReplicaUpdate::Price { version, .. } | ReplicaUpdate::Delete { version, .. } => *version,
        }
    }

    fn into_entry(self) -> ReplicaEntry {
        match self {
            ReplicaUpdate::Price { price, version, token } => ReplicaEntry {
                price: Some(price),
                version,
                causal_token: token,
            },
            ReplicaUpdate::Delete { version, token } => ReplicaEntry {
                price: None,
                version,
                causal_token: token,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplicaEffect {
    Applied { version: u64, price: Option<Money> },
    Buffered { version: u64 },
    Discarded { version: u64 },
    Stall { awaiting: u64, buffered: usize },
}

/// Cart-side replica of product prices.
#[derive(Debug, Clone)]
pub struct Replica {
    mode: ReplicationMode,
    window: usize,
    entries: HashMap<ProductKey, ReplicaEntry>,
    buffers: HashMap<ProductKey, BTreeMap<u64, ReplicaUpdate>>,
}

impl Replica {
    pub fn new(mode: ReplicationMode, window: usize) -> Self {
        Self {
            mode,
            window,
            entries: HashMap::new(),
            buffers: HashMap::new(),
        }
    }

    pub fn seed(&mut self, key: ProductKey, price: Money, version: u64) {
        self.entries.insert(
            key,
            ReplicaEntry {
                price: Some(price),
                version,
                causal_token: None,
            },
        );
    }

    pub fn get(&self, key: &ProductKey) -> Option<&ReplicaEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ProductKey, &ReplicaEntry)> {
        self.entries.iter()
    }

    pub fn buffered(&self, key: &ProductKey) -> usize {
        self.buffers.get(key).map_or(0, BTreeMap::len)
    }

    pub fn apply(&mut self, key: ProductKey, update: ReplicaUpdate) -> Vec<ReplicaEffect> {
        let current = self.entries.get(&key).map_or(0, |e| e.version);
        let version = update.version();
        match self.mode {
            ReplicationMode::Eventual => {
                if version > current {
                    let entry = update.into_entry();
                    let effect = ReplicaEffect::Applied {
                        version,
                        price: entry.price,
                    };
                    self.entries.insert(key, entry);
                    vec![effect]
                } else {
                    vec![ReplicaEffect::Discarded { version }]
                }
            }
            ReplicationMode::Causal => {
                if version <= current {
                    return vec![ReplicaEffect::Discarded { version }];
                }
                if version > current + 1 {
                    let buffer = self.buffers.entry(key).or_default();
                    buffer.insert(version, update);
                    let mut out = vec![ReplicaEffect::Buffered { version }];
                    if buffer.len() > self.window {
                        out.push(ReplicaEffect::Stall {
                            awaiting: current + 1,
                            buffered: buffer.len(),
                        });
                    }
                    return out;
                }
                let mut out = Vec::new();
                let mut next = Some(update);
                while let Some(u) = next {
                    let v = u.version();
                    let entry = u.into_entry();
                    out.push(ReplicaEffect::Applied {
                        version: v,
                        price: entry.price,
                    });
                    self.entries.insert(key, entry);
                    next = self.buffers.get_mut(&key).and_then(|b| b.remove(&(v + 1)));
                }
                if self.buffers.get(&key).is_some_and(BTreeMap::is_empty) {
                    self.buffers.remove(&key);
                }
                out
            }
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.buffers.clear();
    }
}

/// Exclusive per-product locks held by transactions.
#[derive(Debug, Default)]
pub struct LockTable {
    holders: HashMap<ProductKey, Tid>,
}

impl LockTable {
    pub fn holder(&self, key: &ProductKey) -> Option<Tid> {
        self.holders.get(key).copied()
    }

    /// Takes every key or none. Returns the first conflicting key otherwise.
    pub fn try_lock_all(&mut self, tid: Tid, keys: &[ProductKey]) -> Result<(), (ProductKey, Tid)> {
        if let Some((key, holder)) = keys
            .iter()
            .find_map(|k| self.holders.get(k).filter(|h| **h != tid).map(|h| (*k, *h)))
        {
            return Err((key, holder));
        }
        for k in keys {
            self.holders.insert(*k, tid);
        }
        Ok(())
    }

    pub fn release(&mut self, tid: Tid) -> Vec<ProductKey> {
        let mut keys: Vec<ProductKey> = self
            .holders
            .iter()
            .filter(|(_, h)| **h == tid)
            .map(|(k, _)| *k)
            .collect();
        keys.sort();
        for k in &keys {
            self.holders.remove(k);
        }
        keys
    }

    pub fn is_empty(&self) -> bool {
        self.holders.is_empty()
    }
}

/// Writes a participant prepared but has not applied.
#[derive(Debug, Clone, Default)]
pub struct Staged {
    pub reserve: Vec<(ProductKey, u64)>,
    pub order: Option<OrderRecord>,
    pub shipment: Option<ShipmentRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct TxState {
    pub keys: Vec<ProductKey>,
    pub staged: Staged,
    pub prepared: Vec<Service>,
}

/// Two-phase-commit bookkeeping: locks plus staged writes per transaction.
#[derive(Debug, Default)]
pub struct Coordinator {
    pub locks: LockTable,
    txs: HashMap<Tid, TxState>,
}

impl Coordinator {
    pub fn tx(&mut self, tid: Tid) -> &mut TxState {
        self.txs.entry(tid).or_default()
    }

    pub fn get(&self, tid: Tid) -> Option<&TxState> {
        self.txs.get(&tid)
    }

    pub fn is_active(&self, tid: Tid) -> bool {
        self.txs.contains_key(&tid)
    }

    /// Ends the transaction, releasing its locks. Staged writes are returned
    /// so a commit can apply them.
    pub fn finish(&mut self, tid: Tid) -> (TxState, Vec<ProductKey>) {
        let state = self.txs.remove(&tid).unwrap_or_default();
        let keys = self.locks.release(tid);
        (state, keys)
    }

    pub fn clear(&mut self) {
        self.txs.clear();
        self.locks = LockTable::default();
    }

    pub fn active(&self) -> usize {
        self.txs.len()
    }
}
