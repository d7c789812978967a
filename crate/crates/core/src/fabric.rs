//! In-process event fabric.
//!
//! Transport is at-least-once; the fabric deduplicates by `(event_id,
//! consumer)` before a handler ever sees a delivery, so handler side effects
//! happen exactly once. Delivery is FIFO per `(source, target, entity key)`.
//! In [`EventOrdering::Causal`] mode an event is additionally held back at a
//! consumer until every event in its causal past that was addressed to that
//! consumer has been delivered there.
//!
//! Delivery is pull-based: whoever needs progress calls [`Fabric::begin`],
//! runs the handler, and reports back with [`Fabric::finish`] (or
//! [`Fabric::park`] when the handler cannot run yet). With a single pulling
//! thread the delivery order is a pure function of the seed.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::{Actor, AuditLog, Detail, EntryKind, FaultKind, Record};
use crate::event::{EntityKey, Event, EventId, EventType, Service};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventOrdering {
    #[default]
    Unordered,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeliveryConfig {
    pub ordering: EventOrdering,
    /// Upper bound of the random delay (in logical ticks) added to each delivery.
    pub max_artificial_delay: u64,
    pub reorder_probability: f64,
    pub seed: u64,
    /// Enables perturbations used only to seed checker experiments: reordering
    /// under causal ordering and bypassing per-entity FIFO when reordering.
    pub checker_seeding: bool,
}

impl Default for DeliveryConfig {
    fn default() -> Self {
        Self {
            ordering: EventOrdering::Unordered,
            max_artificial_delay: 0,
            reorder_probability: 0.0,
            seed: 0,
            checker_seeding: false,
        }
    }
}

impl DeliveryConfig {
    pub fn validate(&self) -> Result<(), FabricError> {
        if !(0.0..=1.0).contains(&self.reorder_probability) || self.reorder_probability.is_nan() {
            return Err(FabricError::InvalidConfig(format!(
                "reorder_probability {} outside [0,1]",
                self.reorder_probability
            )));
        }
        if self.ordering == EventOrdering::Causal && self.reorder_probability > 0.0 && !self.checker_seeding {
            return Err(FabricError::InvalidConfig(
                "reorder_probability must be 0 under CAUSAL ordering unless checker_seeding is set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("no service subscribes to {0}")]
    NoSubscribers(EventType),
    #[error("{target} is not subscribed to {event_type}")]
    UnknownTarget { event_type: EventType, target: Service },
    #[error("causal dependency cycle through {0:?}")]
    CausalCycle(Vec<EventId>),
    #[error("delivery stalled with {pending} pending deliveries")]
    Stalled { pending: usize },
    #[error("invalid delivery config: {0}")]
    InvalidConfig(String),
}

/// Subscription table: which services consume which event types.
#[derive(Debug, Clone, Default)]
pub struct Routing {
    subscriptions: BTreeMap<EventType, Vec<Service>>,
}

impl Routing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(mut self, event_type: EventType, service: Service) -> Self {
        let subs = self.subscriptions.entry(event_type).or_default();
        if !subs.contains(&service) {
            subs.push(service);
        }
        self
    }

    pub fn subscribers(&self, event_type: EventType) -> &[Service] {
        self.subscriptions.get(&event_type).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn targets(&self, event: &Event) -> Result<Vec<Service>, FabricError> {
        let subs = self.subscribers(event.event_type);
        match event.target_service {
            Some(target) if subs.contains(&target) => Ok(vec![target]),
            Some(target) => Err(FabricError::UnknownTarget {
                event_type: event.event_type,
                target,
            }),
            None if subs.is_empty() => Err(FabricError::NoSubscribers(event.event_type)),
            None => Ok(subs.to_vec()),
        }
    }
}

/// A fault armed against future deliveries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultRule {
    pub kind: FaultKind,
    #[serde(default)]
    pub event_type: Option<EventType>,
    #[serde(default)]
    pub target: Option<Service>,
    /// Fire on every n-th matching delivery.
    #[serde(default = "one")]
    pub every: u64,
    /// Stop after this many firings; unlimited when absent.
    #[serde(default)]
    pub times: Option<u64>,
    #[serde(default = "default_delay")]
    pub delay_ticks: u64,
}

fn one() -> u64 {
    1
}

fn default_delay() -> u64 {
    50
}

impl FaultRule {
    /// Perturbs the next matching delivery only.
    pub fn once(kind: FaultKind) -> Self {
        Self {
            kind,
            event_type: None,
            target: None,
            every: 1,
            times: Some(1),
            delay_ticks: default_delay(),
        }
    }

    pub fn on(mut self, event_type: EventType) -> Self {
        self.event_type = Some(event_type);
        self
    }

    pub fn at(mut self, target: Service) -> Self {
        self.target = Some(target);
        self
    }

    pub fn every(mut self, n: u64) -> Self {
        self.every = n.max(1);
        self
    }

    pub fn times(mut self, n: Option<u64>) -> Self {
        self.times = n;
        self
    }

    pub fn delay(mut self, ticks: u64) -> Self {
        self.delay_ticks = ticks;
        self
    }

    fn matches(&self, event_type: EventType, target: Service) -> bool {
        self.event_type.is_none_or(|t| t == event_type) && self.target.is_none_or(|t| t == target)
    }
}

#[derive(Debug)]
struct ArmedFault {
    rule: FaultRule,
    seen: u64,
    fired: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub event_id: EventId,
    pub targets: Vec<Service>,
}

type FifoKey = (Service, Service, EntityKey);

#[derive(Debug, Clone)]
struct Pending {
    event: Arc<Event>,
    consumer: Service,
    ready_at: u64,
    fifo: FifoKey,
    perturbed: bool,
}

/// A delivery handed to a consumer.
#[derive(Debug)]
pub struct Delivery {
    seq: u64,
    pending: Pending,
    epoch: u64,
    pub crash: bool,
}

impl Delivery {
    pub fn event(&self) -> &Arc<Event> {
        &self.pending.event
    }

    pub fn consumer(&self) -> Service {
        self.pending.consumer
    }
}

#[derive(Debug)]
pub enum Next {
    Deliver(Delivery),
    /// Nothing pending and nothing in flight.
    Idle,
    /// Work exists but none of it can be taken right now.
    Busy,
}

#[derive(Debug)]
struct EventMeta {
    targets: Vec<Service>,
    deps: Vec<EventId>,
    remaining: usize,
}

#[derive(Debug)]
struct State {
    rng: ChaCha8Rng,
    next_seq: u64,
    pending: BTreeMap<u64, Pending>,
    queues: HashMap<FifoKey, VecDeque<u64>>,
    busy: HashSet<(Service, EntityKey)>,
    parked: HashSet<u64>,
    published: HashSet<EventId>,
    delivered: HashSet<(EventId, Service)>,
    meta: HashMap<EventId, EventMeta>,
    stable: HashSet<EventId>,
    faults: Vec<ArmedFault>,
    in_flight: usize,
    /// Bumped by every unpark so a park racing with it does not stick.
    epoch: u64,
}

impl State {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_seq: 0,
            pending: BTreeMap::new(),
            queues: HashMap::new(),
            busy: HashSet::new(),
            parked: HashSet::new(),
            published: HashSet::new(),
            delivered: HashSet::new(),
            meta: HashMap::new(),
            stable: HashSet::new(),
            faults: Vec::new(),
            in_flight: 0,
            epoch: 0,
        }
    }

    fn enqueue(&mut self, pending: Pending) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queues.entry(pending.fifo).or_default().push_back(seq);
        self.pending.insert(seq, pending);
        seq
    }

    fn unlink(&mut self, seq: u64) -> Pending {
        let pending = self.pending.remove(&seq).expect("pending delivery");
        if let Some(queue) = self.queues.get_mut(&pending.fifo) {
            if let Some(pos) = queue.iter().position(|s| *s == seq) {
                queue.remove(pos);
            }
            if queue.is_empty() {
                self.queues.remove(&pending.fifo);
            }
        }
        pending
    }

    fn relink(&mut self, seq: u64, pending: Pending) {
        let queue = self.queues.entry(pending.fifo).or_default();
        let pos = queue.partition_point(|s| *s < seq);
        queue.insert(pos, seq);
        self.pending.insert(seq, pending);
    }

    /// True once `id` and its whole causal past are delivered everywhere.
    fn stabilize(&mut self, id: EventId) -> bool {
        if self.stable.contains(&id) {
            return true;
        }
        let deps = match self.meta.get(&id) {
            Some(m) if m.remaining == 0 => m.deps.clone(),
            _ => return false,
        };
        if deps.into_iter().all(|d| self.stabilize(d)) {
            self.meta.remove(&id);
            self.stable.insert(id);
            true
        } else {
            false
        }
    }

    /// Whether `dep` and its causal past addressed to `consumer` have been
    /// delivered to `consumer`.
    fn causally_delivered(&mut self, dep: EventId, consumer: Service) -> bool {
        if self.stabilize(dep) {
            return true;
        }
        let (addressed, deps) = match self.meta.get(&dep) {
            Some(m) => (m.targets.contains(&consumer), m.deps.clone()),
            None => return false,
        };
        if addressed && !self.delivered.contains(&(dep, consumer)) {
            return false;
        }
        deps.into_iter().all(|d| self.causally_delivered(d, consumer))
    }

    fn eligible(&mut self, seq: u64, causal: bool) -> bool {
        if self.parked.contains(&seq) {
            return false;
        }
        let p = &self.pending[&seq];
        if self.busy.contains(&(p.consumer, p.event.entity_key)) {
            return false;
        }
        if !causal {
            return true;
        }
        let consumer = p.consumer;
        let deps: Vec<EventId> = p.event.causal_deps.iter().copied().collect();
        deps.into_iter().all(|d| self.causally_delivered(d, consumer))
    }

    fn find_cycle(&self) -> Option<Vec<EventId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        fn visit(
            id: EventId,
            meta: &HashMap<EventId, EventMeta>,
            marks: &mut HashMap<EventId, Mark>,
            path: &mut Vec<EventId>,
        ) -> Option<Vec<EventId>> {
            match marks.get(&id) {
                Some(Mark::Done) => return None,
                Some(Mark::Open) => {
                    let start = path.iter().position(|p| *p == id).unwrap_or(0);
                    return Some(path[start..].to_vec());
                }
                None => {}
            }
            marks.insert(id, Mark::Open);
            path.push(id);
            if let Some(m) = meta.get(&id) {
                for d in &m.deps {
                    if let Some(cycle) = visit(*d, meta, marks, path) {
                        return Some(cycle);
                    }
                }
            }
            path.pop();
            marks.insert(id, Mark::Done);
            None
        }
        let mut marks = HashMap::new();
        let mut roots: Vec<EventId> = self.pending.values().map(|p| p.event.event_id).collect();
        roots.sort();
        roots.dedup();
        for id in roots {
            let mut path = Vec::new();
            if let Some(cycle) = visit(id, &self.meta, &mut marks, &mut path) {
                return Some(cycle);
            }
        }
        None
    }
}

pub struct Fabric {
    config: DeliveryConfig,
    routing: Routing,
    audit: Arc<AuditLog>,
    next_event_id: AtomicU64,
    state: Mutex<State>,
}

impl Fabric {
    pub fn new(config: DeliveryConfig, routing: Routing, audit: Arc<AuditLog>) -> Result<Self, FabricError> {
        config.validate()?;
        Ok(Self {
            state: Mutex::new(State::new(config.seed)),
            config,
            routing,
            audit,
            next_event_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &DeliveryConfig {
        &self.config
    }

    pub fn routing(&self) -> &Routing {
        &self.routing
    }

    pub fn next_event_id(&self) -> EventId {
        EventId(self.next_event_id.fetch_add(1, AtomicOrdering::Relaxed))
    }

    /// Drops every pending delivery and all dedup state.
    pub fn reset(&self) {
        let mut state = self.state.lock();
        *state = State::new(self.config.seed);
        self.next_event_id.store(1, AtomicOrdering::Relaxed);
    }

    pub fn inject_fault(&self, rule: FaultRule) {
        self.state.lock().faults.push(ArmedFault {
            rule,
            seen: 0,
            fired: 0,
        });
    }

    pub fn clear_faults(&self) {
        self.state.lock().faults.clear();
    }

    pub fn publish(&self, event: Event) -> Result<Ack, FabricError> {
        let targets = self.routing.targets(&event)?;
        if event.causal_deps.contains(&event.event_id) {
            return Err(FabricError::CausalCycle(vec![event.event_id]));
        }
        self.audit.record(
            Record::new(
                Actor::Service(event.source_service),
                EntryKind::EventPublish,
                Detail::Published {
                    event_type: event.event_type,
                    source: event.source_service,
                    targets: targets.clone(),
                    deps: event.causal_deps.iter().copied().collect(),
                    entity: event.entity_key,
                    version: event.product_version().map(|(_, v)| v),
                },
            )
            .tid(event.tid)
            .event(Some(event.event_id)),
        );

        let event = Arc::new(event);
        let mut state = self.state.lock();
        let now = self.audit.now();
        if state.published.insert(event.event_id) {
            state.meta.insert(
                event.event_id,
                EventMeta {
                    targets: targets.clone(),
                    deps: event.causal_deps.iter().copied().collect(),
                    remaining: targets.len(),
                },
            );
        }
        for &consumer in &targets {
            let delay = if self.config.max_artificial_delay > 0 {
                state.rng.random_range(0..=self.config.max_artificial_delay)
            } else {
                0
            };
            state.enqueue(Pending {
                event: Arc::clone(&event),
                consumer,
                ready_at: now + delay,
                fifo: (event.source_service, consumer, event.entity_key),
                perturbed: false,
            });
        }
        Ok(Ack {
            event_id: event.event_id,
            targets,
        })
    }

    /// Picks the next delivery, applying dedup, ordering rules and faults.
    pub fn begin(&self) -> Result<Next, FabricError> {
        let causal = self.config.ordering == EventOrdering::Causal;
        let p = self.config.reorder_probability;
        let mut state = self.state.lock();
        loop {
            let now = self.audit.now();
            let bypass_fifo = self.config.checker_seeding && p > 0.0 && state.rng.random_bool(p);
            let pool: Vec<u64> = if bypass_fifo {
                state.pending.keys().copied().collect()
            } else {
                let mut heads: Vec<u64> = state.queues.values().filter_map(|q| q.front().copied()).collect();
                heads.sort_unstable();
                heads
            };
            let mut candidates = Vec::with_capacity(pool.len());
            for seq in pool {
                if state.eligible(seq, causal) {
                    candidates.push(seq);
                }
            }

            if candidates.is_empty() {
                if state.pending.is_empty() {
                    return Ok(if state.in_flight == 0 { Next::Idle } else { Next::Busy });
                }
                if state.in_flight > 0 {
                    return Ok(Next::Busy);
                }
                if !state.parked.is_empty() {
                    // Parked work waits on a lock whose holder has nothing left to run.
                    return Err(FabricError::Stalled {
                        pending: state.pending.len(),
                    });
                }
                if let Some(cycle) = state.find_cycle() {
                    return Err(FabricError::CausalCycle(cycle));
                }
                return Err(FabricError::Stalled {
                    pending: state.pending.len(),
                });
            }

            let ready: Vec<u64> = {
                let earliest = candidates
                    .iter()
                    .map(|s| state.pending[s].ready_at.max(now))
                    .min()
                    .expect("non-empty");
                candidates
                    .into_iter()
                    .filter(|s| state.pending[s].ready_at.max(now) == earliest)
                    .collect()
            };
            let seq = if p > 0.0 && ready.len() > 1 && state.rng.random_bool(p) {
                let i = state.rng.random_range(0..ready.len());
                ready[i]
            } else {
                ready[0]
            };

            let (event_type, consumer, perturbed) = {
                let pd = &state.pending[&seq];
                (pd.event.event_type, pd.consumer, pd.perturbed)
            };
            let mut fired = None;
            if !perturbed {
                for armed in state.faults.iter_mut() {
                    if !armed.rule.matches(event_type, consumer) {
                        continue;
                    }
                    if armed.rule.times.is_some_and(|t| armed.fired >= t) {
                        continue;
                    }
                    armed.seen += 1;
                    if armed.seen % armed.rule.every == 0 {
                        armed.fired += 1;
                        fired = Some((armed.rule.kind, armed.rule.delay_ticks));
                        break;
                    }
                }
                state.faults.retain(|f| f.rule.times.is_none_or(|t| f.fired < t));
            }

            let mut crash = false;
            if let Some((kind, delay)) = fired {
                let event = Arc::clone(&state.pending[&seq].event);
                self.audit.record(
                    Record::new(
                        Actor::Fabric,
                        EntryKind::FaultInjection,
                        Detail::Fault {
                            kind,
                            event_type,
                            target: consumer,
                        },
                    )
                    .tid(event.tid)
                    .event(Some(event.event_id)),
                );
                let pd = state.pending.get_mut(&seq).expect("pending");
                pd.perturbed = true;
                match kind {
                    FaultKind::Delay => {
                        pd.ready_at = now + delay.max(1);
                        continue;
                    }
                    FaultKind::DropThenRedeliver => {
                        // The acknowledgement is lost, so the transport redelivers later.
                        let mut copy = pd.clone();
                        copy.ready_at = now + 1;
                        state.enqueue(copy);
                    }
                    FaultKind::CrashConsumerMidTransaction => crash = true,
                }
            }

            let pending = state.unlink(seq);
            let event_id = pending.event.event_id;
            if state.delivered.contains(&(event_id, consumer)) {
                self.audit.record(
                    Record::new(
                        Actor::Service(consumer),
                        EntryKind::EventDeliver,
                        Detail::Delivered {
                            event_type,
                            source: pending.event.source_service,
                            target: consumer,
                            duplicate: true,
                        },
                    )
                    .tid(pending.event.tid)
                    .event(Some(event_id)),
                );
                continue;
            }
            state.busy.insert((consumer, pending.event.entity_key));
            state.in_flight += 1;
            return Ok(Next::Deliver(Delivery {
                seq,
                pending,
                epoch: state.epoch,
                crash,
            }));
        }
    }

    /// Records that the consumer is about to process the delivery.
    pub fn acknowledge(&self, delivery: &Delivery) {
        let event = &delivery.pending.event;
        self.audit.record(
            Record::new(
                Actor::Service(delivery.pending.consumer),
                EntryKind::EventDeliver,
                Detail::Delivered {
                    event_type: event.event_type,
                    source: event.source_service,
                    target: delivery.pending.consumer,
                    duplicate: false,
                },
            )
            .tid(event.tid)
            .event(Some(event.event_id)),
        );
    }

    pub fn finish(&self, delivery: Delivery) {
        let mut state = self.state.lock();
        let event = &delivery.pending.event;
        let consumer = delivery.pending.consumer;
        state.delivered.insert((event.event_id, consumer));
        state.busy.remove(&(consumer, event.entity_key));
        state.in_flight -= 1;
        let done = match state.meta.get_mut(&event.event_id) {
            Some(m) => {
                m.remaining = m.remaining.saturating_sub(1);
                m.remaining == 0
            }
            None => false,
        };
        if done {
            state.stabilize(event.event_id);
        }
    }

    /// Returns a delivery the consumer could not process yet. It keeps its
    /// queue position and is skipped until [`Fabric::unpark_all`].
    pub fn park(&self, delivery: Delivery) {
        let mut state = self.state.lock();
        let Delivery {
            seq, pending, epoch, ..
        } = delivery;
        state.busy.remove(&(pending.consumer, pending.event.entity_key));
        state.in_flight -= 1;
        if epoch == state.epoch {
            state.parked.insert(seq);
        }
        state.relink(seq, pending);
    }

    /// Puts a delivery back unprocessed, e.g. after a consumer crash.
    pub fn retry(&self, delivery: Delivery) {
        let mut state = self.state.lock();
        let Delivery { seq, mut pending, .. } = delivery;
        state.busy.remove(&(pending.consumer, pending.event.entity_key));
        state.in_flight -= 1;
        pending.ready_at = self.audit.now() + 1;
        state.relink(seq, pending);
    }

    pub fn unpark_all(&self) {
        let mut state = self.state.lock();
        state.parked.clear();
        state.epoch += 1;
    }

    pub fn pending_len(&self) -> usize {
        self.state.lock().pending.len()
    }

    pub fn is_quiescent(&self) -> bool {
        let state = self.state.lock();
        state.pending.is_empty() && state.in_flight == 0
    }

    /// Delivers one event through `handler`. Returns whether a delivery happened.
    pub fn pump_with<F>(&self, mut handler: F) -> Result<Next, FabricError>
    where
        F: FnMut(&Delivery),
    {
        match self.begin()? {
            Next::Deliver(d) => {
                self.acknowledge(&d);
                handler(&d);
                let out = Next::Deliver(Delivery {
                    seq: d.seq,
                    pending: d.pending.clone(),
                    epoch: d.epoch,
                    crash: d.crash,
                });
                self.finish(d);
                Ok(out)
            }
            other => Ok(other),
        }
    }

    /// Delivers until nothing is pending. Single-threaded use only.
    pub fn drain_with<F>(&self, mut handler: F) -> Result<usize, FabricError>
    where
        F: FnMut(&Delivery),
    {
        let mut n = 0;
        loop {
            match self.pump_with(&mut handler)? {
                Next::Deliver(_) => n += 1,
                Next::Idle => return Ok(n),
                Next::Busy => std::thread::yield_now(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Tid;
    use crate::event::Payload;

    fn routing() -> Routing {
        Routing::new()
            .subscribe(EventType::PriceUpdated, Service::Cart)
            .subscribe(EventType::InvoiceIssued, Service::Payment)
            .subscribe(EventType::PaymentProcessed, Service::Shipment)
            .subscribe(EventType::PaymentProcessed, Service::Order)
            .subscribe(EventType::ShipmentCreated, Service::Order)
    }

    fn fabric(config: DeliveryConfig) -> (Fabric, Arc<AuditLog>) {
        let audit = Arc::new(AuditLog::new());
        (Fabric::new(config, routing(), Arc::clone(&audit)).unwrap(), audit)
    }

    fn ev(f: &Fabric, ty: EventType, src: Service, key: u64) -> Event {
        Event::new(
            f.next_event_id(),
            Tid(1),
            ty,
            src,
            EntityKey::Customer(key),
            Payload::Empty,
        )
    }

    #[test]
    fn single_subscriber_delivery() {
        let (f, _) = fabric(DeliveryConfig::default());
        f.publish(ev(&f, EventType::PriceUpdated, Service::Product, 1)).unwrap();
        let mut seen = Vec::new();
        f.drain_with(|d| seen.push((d.event().event_id, d.consumer()))).unwrap();
        assert_eq!(seen, [(EventId(1), Service::Cart)]);
    }

    #[test]
    fn duplicate_publish_is_handled_once() {
        let (f, audit) = fabric(DeliveryConfig::default());
        let e = ev(&f, EventType::PriceUpdated, Service::Product, 1);
        f.publish(e.clone()).unwrap();
        f.publish(e).unwrap();
        let mut calls = 0;
        f.drain_with(|_| calls += 1).unwrap();
        assert_eq!(calls, 1);
        let dups = audit
            .snapshot()
            .iter()
            .filter(|e| matches!(e.detail, Detail::Delivered { duplicate: true, .. }))
            .count();
        assert_eq!(dups, 1);
    }

    #[test]
    fn unknown_target_is_a_routing_error() {
        let (f, _) = fabric(DeliveryConfig::default());
        let e = ev(&f, EventType::PriceUpdated, Service::Product, 1).to(Service::Stock);
        assert!(matches!(f.publish(e), Err(FabricError::UnknownTarget { .. })));
        let e = ev(&f, EventType::CartCheckedOut, Service::Cart, 1);
        assert!(matches!(f.publish(e), Err(FabricError::NoSubscribers(_))));
    }

    #[test]
    fn causal_mode_holds_dependent_event() {
        let cfg = DeliveryConfig {
            ordering: EventOrdering::Causal,
            checker_seeding: true,
            reorder_probability: 1.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let (f, _) = fabric(DeliveryConfig { seed, ..cfg.clone() });
            let paid = ev(&f, EventType::PaymentProcessed, Service::Payment, 1);
            let paid_id = paid.event_id;
            let shipped = ev(&f, EventType::ShipmentCreated, Service::Shipment, 1).after(paid_id);
            // Publish the dependent first so FIFO alone would deliver it first.
            f.publish(shipped).unwrap();
            f.publish(paid).unwrap();
            let mut at_order = Vec::new();
            f.drain_with(|d| {
                if d.consumer() == Service::Order {
                    at_order.push(d.event().event_type);
                }
            })
            .unwrap();
            assert_eq!(at_order, [EventType::PaymentProcessed, EventType::ShipmentCreated]);
        }
    }

    #[test]
    fn unordered_with_full_reorder_may_swap_independent_events() {
        let mut swapped = false;
        for seed in 0..50 {
            let (f, _) = fabric(DeliveryConfig {
                reorder_probability: 1.0,
                seed,
                ..Default::default()
            });
            let a = ev(&f, EventType::PriceUpdated, Service::Product, 1);
            let b = ev(&f, EventType::PriceUpdated, Service::Product, 2);
            f.publish(a).unwrap();
            f.publish(b).unwrap();
            let mut order = Vec::new();
            f.drain_with(|d| order.push(d.event().event_id.0)).unwrap();
            if order == [2, 1] {
                swapped = true;
            }
        }
        assert!(swapped);
    }

    #[test]
    fn per_entity_fifo_survives_reordering() {
        let (f, _) = fabric(DeliveryConfig {
            reorder_probability: 1.0,
            seed: 3,
            ..Default::default()
        });
        for key in 0..5 {
            for _ in 0..20 {
                f.publish(ev(&f, EventType::PriceUpdated, Service::Product, key))
                    .unwrap();
            }
        }
        let mut last: HashMap<EntityKey, u64> = HashMap::new();
        f.drain_with(|d| {
            let e = d.event();
            let prev = last.insert(e.entity_key, e.event_id.0);
            assert!(prev.is_none_or(|p| p < e.event_id.0));
        })
        .unwrap();
    }

    #[test]
    fn ten_thousand_events_delivered_exactly_once_under_reorder() {
        let (f, _) = fabric(DeliveryConfig {
            reorder_probability: 0.3,
            seed: 11,
            max_artificial_delay: 5,
            ..Default::default()
        });
        f.inject_fault(FaultRule::once(FaultKind::DropThenRedeliver).every(7).times(None));
        let mut expected = HashMap::new();
        for i in 0..10_000u64 {
            let e = ev(&f, EventType::PriceUpdated, Service::Product, i % 97);
            expected.insert(e.event_id, 0u32);
            f.publish(e.clone()).unwrap();
            if i % 13 == 0 {
                f.publish(e).unwrap();
            }
        }
        f.drain_with(|d| *expected.get_mut(&d.event().event_id).unwrap() += 1)
            .unwrap();
        assert!(expected.values().all(|&n| n == 1));
    }

    #[test]
    fn causal_delivery_is_topological_for_random_dag() {
        use rand::seq::IteratorRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = DeliveryConfig {
            ordering: EventOrdering::Causal,
            reorder_probability: 0.5,
            checker_seeding: true,
            seed: 5,
            ..Default::default()
        };
        let (f, _) = fabric(cfg);
        let mut events = Vec::new();
        for i in 0..100u64 {
            // Distinct entities so per-entity FIFO does not fight the shuffled publish order.
            let mut e = ev(&f, EventType::PriceUpdated, Service::Product, i);
            let n_deps = rng.random_range(0..4.min(events.len() + 1));
            let deps = (0..events.len()).choose_multiple(&mut rng, n_deps);
            for j in deps {
                let d: &Event = &events[j];
                e = e.after(d.event_id);
            }
            events.push(e);
        }
        // Publish in a shuffled order so dependencies often arrive after dependents.
        let mut shuffled = events.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        for e in shuffled {
            f.publish(e).unwrap();
        }
        let mut position = HashMap::new();
        f.drain_with(|d| {
            let n = position.len();
            position.insert(d.event().event_id, n);
        })
        .unwrap();
        assert_eq!(position.len(), 100);
        for e in &events {
            for d in &e.causal_deps {
                assert!(position[d] < position[&e.event_id], "{d} after {}", e.event_id);
            }
        }
    }

    #[test]
    fn cycle_is_fatal() {
        let (f, _) = fabric(DeliveryConfig {
            ordering: EventOrdering::Causal,
            ..Default::default()
        });
        let a = ev(&f, EventType::PriceUpdated, Service::Product, 1);
        let b = ev(&f, EventType::PriceUpdated, Service::Product, 2);
        let (ida, idb) = (a.event_id, b.event_id);
        f.publish(a.after(idb)).unwrap();
        f.publish(b.after(ida)).unwrap();
        assert!(matches!(f.drain_with(|_| {}), Err(FabricError::CausalCycle(_))));
        let self_loop = ev(&f, EventType::PriceUpdated, Service::Product, 3);
        let id = self_loop.event_id;
        assert!(matches!(
            f.publish(self_loop.after(id)),
            Err(FabricError::CausalCycle(_))
        ));
    }

    #[test]
    fn causal_requires_zero_reorder_without_seeding_flag() {
        let cfg = DeliveryConfig {
            ordering: EventOrdering::Causal,
            reorder_probability: 0.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(DeliveryConfig {
            checker_seeding: true,
            ..cfg
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn same_seed_same_order() {
        let run = |seed| {
            let (f, audit) = fabric(DeliveryConfig {
                reorder_probability: 0.5,
                max_artificial_delay: 3,
                seed,
                ..Default::default()
            });
            for i in 0..200 {
                f.publish(ev(&f, EventType::PriceUpdated, Service::Product, i % 9))
                    .unwrap();
            }
            let mut order = Vec::new();
            f.drain_with(|d| order.push(d.event().event_id)).unwrap();
            (order, audit.snapshot())
        };
        assert_eq!(run(8), run(8));
        assert_ne!(run(8).0, run(9).0);
    }

    #[test]
    fn delay_fault_defers_delivery_and_is_audited() {
        let (f, audit) = fabric(DeliveryConfig::default());
        f.inject_fault(FaultRule::once(FaultKind::Delay).on(EventType::PriceUpdated).delay(100));
        let slow = ev(&f, EventType::PriceUpdated, Service::Product, 1);
        let fast = ev(&f, EventType::PriceUpdated, Service::Product, 2);
        f.publish(slow).unwrap();
        f.publish(fast).unwrap();
        let mut order = Vec::new();
        f.drain_with(|d| order.push(d.event().event_id.0)).unwrap();
        assert_eq!(order, [2, 1]);
        assert!(audit.snapshot().iter().any(|e| e.kind == EntryKind::FaultInjection));
    }

    #[test]
    fn crash_fault_flags_the_delivery() {
        let (f, _) = fabric(DeliveryConfig::default());
        f.inject_fault(FaultRule::once(FaultKind::CrashConsumerMidTransaction).at(Service::Cart));
        f.publish(ev(&f, EventType::PriceUpdated, Service::Product, 1)).unwrap();
        f.publish(ev(&f, EventType::PriceUpdated, Service::Product, 1)).unwrap();
        let mut crashes = Vec::new();
        f.drain_with(|d| crashes.push(d.crash)).unwrap();
        assert_eq!(crashes, [true, false]);
    }
}
