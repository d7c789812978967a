//! The marketplace runtime: service stores wired to the event fabric, with
//! checkout run either as an event-driven saga or as two-phase commit.
//!
//! Lock order, outermost first: coordinator, stock, order, payment, shipment.
//! Cart, product, customer and seller stores are never held together with
//! another store. Fabric and audit locks are always innermost.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::audit::{Actor, AuditLog, CustomerCounter, Detail, Record, TxOutcome};
use crate::consistency::{
    ConsistencyConfig, Coordinator, Replica, ReplicaEffect, ReplicaEntry, ReplicaUpdate, ReplicationMode,
    TransactionMode, TxBoundary,
};
use crate::dataset::Dataset;
use crate::domain::{
    CartItem, CustomerId, CustomerRecord, OrderId, OrderRecord, OrderStatus, PaymentInfo, ProductKey, ProductRecord,
    SellerId, ShipmentRecord, StockItem, Tid,
};
use crate::event::{
    AbortNotice, CheckoutRequest, CheckoutStage, EntityKey, Event, EventId, EventType, Invoice, PackageDelivery,
    Payload, PaymentResult, PriceUpdate, ProductDeletion, Reservation, ReservationFailure, Service,
};
use crate::fabric::{Delivery, DeliveryConfig, Fabric, FabricError, FaultRule, Next, Routing};
use crate::money::Money;
use crate::services::{
    CartService, CustomerService, DashboardRow, DeliveredPackage, OrderService, PaymentRecord, PaymentService,
    ProductService, ReservationPolicy, SellerService, ServiceError, ShipmentService, StockService,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub consistency: ConsistencyConfig,
    pub delivery: DeliveryConfig,
    pub reservation_policy: ReservationPolicy,
    /// Fault flag: stock ignores cancel requests in saga mode.
    pub disable_compensation: bool,
    /// Out-of-order versions a causal replica buffers before raising a stall alarm.
    pub replica_window: usize,
    /// Sellers served by one update-delivery request.
    pub delivery_sellers: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            consistency: ConsistencyConfig::default(),
            delivery: DeliveryConfig::default(),
            reservation_policy: ReservationPolicy::AllOrNothing,
            disable_compensation: false,
            replica_window: 64,
            delivery_sellers: 10,
        }
    }
}

/// Final result of a checkout, as seen by the cart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckoutOutcome {
    pub tid: Tid,
    pub outcome: TxOutcome,
    pub reason: Option<String>,
    pub logical_time: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dashboard {
    pub seller_id: SellerId,
    pub aggregate: Money,
    pub tuples: Vec<DashboardRow>,
}

/// Everything a quiescent marketplace holds, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub products: Vec<ProductRecord>,
    pub stock: Vec<StockItem>,
    pub orders: Vec<OrderRecord>,
    pub shipments: Vec<ShipmentRecord>,
    pub payments: Vec<PaymentRecord>,
    pub customers: Vec<CustomerRecord>,
    pub replica: BTreeMap<ProductKey, ReplicaEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pumped {
    Delivered,
    Busy,
    Idle,
}

enum Step {
    Done,
    Blocked,
}

struct CartState {
    store: CartService,
    replica: Replica,
}

pub fn routing(mode: TransactionMode) -> Routing {
    use EventType::*;
    use Service::*;
    let mut r = Routing::new()
        .subscribe(PriceUpdated, Cart)
        .subscribe(ProductDeleted, Stock)
        .subscribe(ProductDeleted, Cart)
        .subscribe(CartCheckedOut, Stock)
        .subscribe(StockReserved, Order)
        .subscribe(StockReserveFailed, Cart)
        .subscribe(InvoiceIssued, Payment)
        .subscribe(PaymentProcessed, Order)
        .subscribe(PaymentProcessed, Cart)
        .subscribe(PaymentProcessed, Customer)
        .subscribe(PaymentProcessed, Shipment)
        .subscribe(PaymentFailed, Cart)
        .subscribe(PaymentFailed, Customer)
        .subscribe(ShipmentCreated, Order)
        .subscribe(PackageDelivered, Order)
        .subscribe(PackageDelivered, Customer)
        .subscribe(CheckoutAborted, Cart);
    if mode == TransactionMode::EventualSaga {
        r = r
            .subscribe(PaymentProcessed, Stock)
            .subscribe(PaymentFailed, Order)
            .subscribe(PaymentFailed, Stock)
            .subscribe(CheckoutAborted, Stock)
            .subscribe(CheckoutAborted, Order);
    }
    r
}

/// Checkout step a crashed consumer was performing, if the crash happened
/// before the transaction outcome was decided.
fn crash_stage(event_type: EventType, consumer: Service) -> Option<CheckoutStage> {
    match (event_type, consumer) {
        (EventType::CartCheckedOut, Service::Stock) => Some(CheckoutStage::Stock),
        (EventType::StockReserved, Service::Order) => Some(CheckoutStage::Order),
        (EventType::InvoiceIssued, Service::Payment) => Some(CheckoutStage::Payment),
        _ => None,
    }
}

fn lines(items: &[CartItem]) -> Vec<(ProductKey, u64)> {
    items.iter().map(|i| (i.key(), u64::from(i.quantity))).collect()
}

pub struct Marketplace {
    config: RuntimeConfig,
    audit: Arc<AuditLog>,
    fabric: Fabric,
    coordinator: Mutex<Coordinator>,
    stock: Mutex<StockService>,
    order: Mutex<OrderService>,
    payment: Mutex<PaymentService>,
    shipment: Mutex<ShipmentService>,
    cart: Mutex<CartState>,
    product: Mutex<ProductService>,
    customer: Mutex<CustomerService>,
    seller: Mutex<SellerService>,
    outcomes: Mutex<HashMap<Tid, CheckoutOutcome>>,
    ingested: AtomicBool,
}

impl Marketplace {
    pub fn new(mut config: RuntimeConfig) -> Result<Self, FabricError> {
        config.delivery.ordering = config.consistency.event_ordering;
        let audit = Arc::new(AuditLog::new());
        let fabric = Fabric::new(
            config.delivery.clone(),
            routing(config.consistency.transaction_mode),
            Arc::clone(&audit),
        )?;
        Ok(Self {
            cart: Mutex::new(CartState {
                store: CartService::default(),
                replica: Replica::new(config.consistency.replication_mode, config.replica_window),
            }),
            config,
            audit,
            fabric,
            coordinator: Mutex::default(),
            stock: Mutex::default(),
            order: Mutex::default(),
            payment: Mutex::default(),
            shipment: Mutex::default(),
            product: Mutex::default(),
            customer: Mutex::default(),
            seller: Mutex::default(),
            outcomes: Mutex::default(),
            ingested: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn now(&self) -> u64 {
        self.audit.now()
    }

    pub fn inject_fault(&self, rule: FaultRule) {
        self.fabric.inject_fault(rule);
    }

    fn transactional(&self) -> bool {
        self.config.consistency.transaction_mode == TransactionMode::Transactional
    }

    /// Drops all service state, pending events and the audit log.
    pub fn reset(&self) {
        self.fabric.reset();
        self.coordinator.lock().clear();
        *self.stock.lock() = StockService::default();
        *self.order.lock() = OrderService::default();
        *self.payment.lock() = PaymentService::default();
        *self.shipment.lock() = ShipmentService::default();
        {
            let mut cart = self.cart.lock();
            cart.store.clear();
            cart.replica.clear();
        }
        *self.product.lock() = ProductService::default();
        *self.customer.lock() = CustomerService::default();
        *self.seller.lock() = SellerService::default();
        self.outcomes.lock().clear();
        self.audit.clear();
        self.ingested.store(false, Ordering::SeqCst);
    }

    pub fn ingest(&self, data: &Dataset) -> Result<(), ServiceError> {
        if self.ingested.swap(true, Ordering::SeqCst) {
            return Err(ServiceError::Ingest("already ingested; reset first".into()));
        }
        let result = self.ingest_inner(data);
        if result.is_err() {
            self.ingested.store(false, Ordering::SeqCst);
        }
        result
    }

    fn ingest_inner(&self, data: &Dataset) -> Result<(), ServiceError> {
        data.validate().map_err(ServiceError::Ingest)?;
        let mut out = Vec::new();
        let mut sellers = self.seller.lock();
        let mut customers = self.customer.lock();
        let mut products = self.product.lock();
        let mut stock = self.stock.lock();
        let mut cart = self.cart.lock();
        if !sellers.is_empty() {
            return Err(ServiceError::Ingest("services are not empty".into()));
        }
        for s in &data.sellers {
            sellers.insert(s.clone(), &mut out)?;
        }
        for c in &data.customers {
            customers.insert(c.clone(), &mut out)?;
        }
        for p in &data.products {
            products.insert(p.clone(), &mut out)?;
        }
        for item in &data.stock {
            let alive = products.get(&item.key()).is_some_and(|p| p.active);
            stock.insert(item.clone(), alive, &mut out)?;
        }
        for p in &data.products {
            cart.replica.seed(p.key(), p.price, p.version);
            out.push(Record::mutation(
                Actor::Service(Service::Cart),
                Tid::INGEST,
                Detail::ReplicaApplied {
                    key: p.key(),
                    version: p.version,
                    price: Some(p.price),
                },
            ));
        }
        self.audit.record_batch(out);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &self,
        tid: Tid,
        event_type: EventType,
        source: Service,
        entity: EntityKey,
        payload: Payload,
        deps: impl IntoIterator<Item = EventId>,
        target: Option<Service>,
    ) -> Result<EventId, ServiceError> {
        let mut event =
            Event::new(self.fabric.next_event_id(), tid, event_type, source, entity, payload).after_all(deps);
        event.target_service = target;
        let id = event.event_id;
        self.fabric.publish(event)?;
        Ok(id)
    }

    // ---- client operations -------------------------------------------------

    pub fn open_session(&self, worker: u32, tid: Tid, customer: CustomerId) -> Result<(), ServiceError> {
        self.require_customer(customer)?;
        let mut out = Vec::new();
        let mut cart = self.cart.lock();
        cart.store
            .open_session(Actor::Worker(worker), tid, customer, &mut out)?;
        self.audit.record_batch(out);
        Ok(())
    }

    pub fn add_item(&self, worker: u32, tid: Tid, customer: CustomerId, item: CartItem) -> Result<(), ServiceError> {
        self.require_customer(customer)?;
        let mut out = Vec::new();
        let mut cart = self.cart.lock();
        cart.store
            .add_item(Actor::Worker(worker), tid, customer, item, &mut out)?;
        self.audit.record_batch(out);
        Ok(())
    }

    fn require_customer(&self, customer: CustomerId) -> Result<(), ServiceError> {
        if self.customer.lock().contains(customer) {
            Ok(())
        } else {
            Err(ServiceError::NotFound(format!("customer {customer}")))
        }
    }

    /// Submits the cart. The outcome arrives asynchronously under `tid`.
    pub fn checkout(
        &self,
        worker: u32,
        tid: Tid,
        customer: CustomerId,
        payment: PaymentInfo,
    ) -> Result<(), ServiceError> {
        self.require_customer(customer)?;
        let actor = Actor::Worker(worker);
        let mut out = Vec::new();
        let mut guard = self.cart.lock();
        let CartState { store, replica } = &mut *guard;
        let cart = store.begin_checkout(actor, tid, customer, &mut out)?;
        let causal = self.config.consistency.replication_mode == ReplicationMode::Causal;
        for item in cart.items.iter_mut() {
            if let Some(ReplicaEntry {
                price: Some(price),
                version,
                ..
            }) = replica.get(&item.key())
            {
                // Causal replication never prices below what the session already saw.
                if !causal || *version >= item.applied_price_version {
                    item.unit_price = *price;
                    item.applied_price_version = *version;
                }
            }
            out.push(Record::mutation(
                actor,
                tid,
                Detail::CartPriced {
                    customer_id: customer,
                    key: item.key(),
                    version: item.applied_price_version,
                    price: item.unit_price,
                },
            ));
        }
        let request = CheckoutRequest {
            customer_id: customer,
            items: cart.items.clone(),
            payment,
            submitted_at: tid.0,
        };
        self.audit.record_batch(out);
        self.emit(
            tid,
            EventType::CartCheckedOut,
            Service::Cart,
            EntityKey::Customer(customer),
            Payload::Checkout(request),
            [],
            Some(Service::Stock),
        )?;
        Ok(())
    }

    pub fn outcome(&self, tid: Tid) -> Option<CheckoutOutcome> {
        self.outcomes.lock().get(&tid).cloned()
    }

    /// Pumps events until `tid` has an outcome, the fabric runs dry, or the
    /// log reaches `deadline`.
    pub fn await_outcome(&self, tid: Tid, deadline: u64) -> Result<Option<CheckoutOutcome>, ServiceError> {
        loop {
            if let Some(o) = self.outcome(tid) {
                return Ok(Some(o));
            }
            if self.audit.now() >= deadline {
                return Ok(None);
            }
            match self.pump()? {
                Pumped::Delivered => {}
                Pumped::Busy => std::thread::yield_now(),
                Pumped::Idle => return Ok(self.outcome(tid)),
            }
        }
    }

    pub fn update_price(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        price: Money,
        expected_version: Option<u64>,
    ) -> Result<ProductRecord, ServiceError> {
        let mut out = Vec::new();
        let mut products = self.product.lock();
        let (rec, prev) = products.update_price(Actor::Worker(worker), tid, key, price, expected_version, &mut out)?;
        self.audit.record_batch(out);
        let id = self.emit(
            tid,
            EventType::PriceUpdated,
            Service::Product,
            EntityKey::Product(key),
            Payload::Price(PriceUpdate {
                key,
                price,
                version: rec.version,
                causal_token: prev,
            }),
            prev,
            None,
        )?;
        products.set_last_event(key, id);
        Ok(rec)
    }

    pub fn delete_product(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        expected_version: Option<u64>,
    ) -> Result<ProductRecord, ServiceError> {
        let mut out = Vec::new();
        let mut products = self.product.lock();
        let (rec, prev) = products.delete(Actor::Worker(worker), tid, key, expected_version, &mut out)?;
        self.audit.record_batch(out);
        let id = self.emit(
            tid,
            EventType::ProductDeleted,
            Service::Product,
            EntityKey::Product(key),
            Payload::Deletion(ProductDeletion {
                key,
                version: rec.version,
                causal_token: prev,
            }),
            prev,
            None,
        )?;
        products.set_last_event(key, id);
        Ok(rec)
    }

    pub fn update_delivery(&self, worker: u32, tid: Tid) -> Result<Vec<DeliveredPackage>, ServiceError> {
        let mut out = Vec::new();
        let mut shipments = self.shipment.lock();
        let picks = shipments.select_for_delivery(self.config.delivery_sellers);
        let mut delivered = Vec::new();
        for (seller, shipment_id) in picks {
            delivered.extend(shipments.deliver(Actor::Worker(worker), tid, seller, shipment_id, tid.0, &mut out));
        }
        self.audit.record_batch(out);
        for p in &delivered {
            let dep = shipments.announced_by(p.shipment_id);
            self.emit(
                tid,
                EventType::PackageDelivered,
                Service::Shipment,
                EntityKey::Customer(p.customer_id),
                Payload::Package(PackageDelivery {
                    shipment_id: p.shipment_id,
                    order_id: p.order_id,
                    customer_id: p.customer_id,
                    package_id: p.package_id,
                    seller_id: p.seller_id,
                    product_id: p.product_id,
                    quantity: p.quantity,
                    delivered_at: tid.0,
                }),
                dep,
                None,
            )?;
        }
        Ok(delivered)
    }

    pub fn dashboard(&self, seller: SellerId) -> Result<Dashboard, ServiceError> {
        if !self.seller.lock().contains(seller) {
            return Err(ServiceError::NotFound(format!("seller {seller}")));
        }
        if self.config.consistency.dashboard_snapshot {
            let orders = self.order.lock();
            return Ok(Dashboard {
                seller_id: seller,
                aggregate: orders.dashboard_total(seller),
                tuples: orders.dashboard_rows(seller),
            });
        }
        // Two independent sub-queries; other work may run in between.
        let aggregate = self.order.lock().dashboard_total(seller);
        self.pump()?;
        let tuples = self.order.lock().dashboard_rows(seller);
        Ok(Dashboard {
            seller_id: seller,
            aggregate,
            tuples,
        })
    }

    // ---- delivery ----------------------------------------------------------

    pub fn pump(&self) -> Result<Pumped, ServiceError> {
        match self.fabric.begin()? {
            Next::Deliver(d) => {
                self.dispatch(d)?;
                Ok(Pumped::Delivered)
            }
            Next::Busy => Ok(Pumped::Busy),
            Next::Idle => Ok(Pumped::Idle),
        }
    }

    /// Delivers until the fabric is empty. Returns the number of deliveries.
    pub fn drain(&self) -> Result<usize, ServiceError> {
        let mut n = 0;
        loop {
            match self.pump()? {
                Pumped::Delivered => n += 1,
                Pumped::Busy => std::thread::yield_now(),
                Pumped::Idle => return Ok(n),
            }
        }
    }

    fn dispatch(&self, d: Delivery) -> Result<(), ServiceError> {
        if d.crash {
            match crash_stage(d.event().event_type, d.consumer()) {
                Some(stage) => {
                    self.fabric.acknowledge(&d);
                    let r = self.crash_abort(&d, stage);
                    self.fabric.finish(d);
                    return r;
                }
                None => {
                    self.fabric.retry(d);
                    return Ok(());
                }
            }
        }
        match self.handle(&d) {
            Ok(Step::Done) => {
                self.fabric.finish(d);
                Ok(())
            }
            Ok(Step::Blocked) => {
                self.fabric.park(d);
                Ok(())
            }
            Err(e) => {
                self.fabric.finish(d);
                Err(e)
            }
        }
    }

    fn handle(&self, d: &Delivery) -> Result<Step, ServiceError> {
        use EventType::*;
        let event = Arc::clone(d.event());
        match (d.consumer(), event.event_type) {
            (Service::Cart, PriceUpdated | ProductDeleted) => self.on_replica(d, &event),
            (Service::Cart, PaymentProcessed) => self.on_terminal(d, &event, TxOutcome::Committed),
            (Service::Cart, PaymentFailed | StockReserveFailed | CheckoutAborted) => {
                self.on_terminal(d, &event, TxOutcome::Aborted)
            }
            (Service::Stock, CartCheckedOut) => self.on_reserve(d, &event),
            (Service::Stock, ProductDeleted) => self.on_stock_delete(d, &event),
            (Service::Stock, PaymentProcessed) => self.on_stock_settle(d, &event, true),
            (Service::Stock, PaymentFailed | CheckoutAborted) => self.on_stock_settle(d, &event, false),
            (Service::Order, StockReserved) => self.on_create_order(d, &event),
            (Service::Order, PaymentProcessed) => self.on_order_paid(d, &event),
            (Service::Order, PaymentFailed | CheckoutAborted) => self.on_order_failed(d, &event),
            (Service::Order, ShipmentCreated) => self.on_order_shipped(d, &event),
            (Service::Order, PackageDelivered) => self.on_order_package(d, &event),
            (Service::Payment, InvoiceIssued) => self.on_invoice(d, &event),
            (Service::Shipment, PaymentProcessed) => self.on_ship(d, &event),
            (Service::Customer, PaymentProcessed) => self.on_customer(d, &event, CustomerCounter::SuccessPayments),
            (Service::Customer, PaymentFailed) => self.on_customer(d, &event, CustomerCounter::FailedPayments),
            (Service::Customer, PackageDelivered) => self.on_customer(d, &event, CustomerCounter::DeliveredPackages),
            (consumer, event_type) => {
                self.fabric.acknowledge(d);
                self.orphan_event(consumer, &event, event_type);
                Ok(Step::Done)
            }
        }
    }

    fn orphan_event(&self, service: Service, event: &Event, event_type: EventType) {
        self.audit.record(
            Record::diagnostic(Actor::Service(service), Detail::OrphanEvent { service, event_type })
                .tid(event.tid)
                .event(Some(event.event_id)),
        );
    }

    fn batch(&self, out: Vec<Record>, event: &Event) {
        let id = Some(event.event_id);
        self.audit.record_batch(
            out.into_iter()
                .map(|r| if r.event_id.is_none() { r.event(id) } else { r })
                .collect(),
        );
    }

    fn on_replica(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let (key, update) = match &event.payload {
            Payload::Price(p) => (
                p.key,
                ReplicaUpdate::Price {
                    price: p.price,
                    version: p.version,
                    token: Some(event.event_id),
                },
            ),
            Payload::Deletion(p) => (
                p.key,
                ReplicaUpdate::Delete {
                    version: p.version,
                    token: Some(event.event_id),
                },
            ),
            _ => return Ok(Step::Done),
        };
        let actor = Actor::Service(Service::Cart);
        let mut cart = self.cart.lock();
        let out = cart
            .replica
            .apply(key, update)
            .into_iter()
            .map(|effect| match effect {
                ReplicaEffect::Applied { version, price } => {
                    Record::mutation(actor, event.tid, Detail::ReplicaApplied { key, version, price })
                }
                ReplicaEffect::Buffered { version } => {
                    Record::diagnostic(actor, Detail::ReplicaBuffered { key, version }).tid(event.tid)
                }
                ReplicaEffect::Discarded { version } => {
                    Record::diagnostic(actor, Detail::ReplicaDiscarded { key, version }).tid(event.tid)
                }
                ReplicaEffect::Stall { awaiting, buffered } => Record::diagnostic(
                    actor,
                    Detail::ReplicaStall {
                        key,
                        awaiting,
                        buffered,
                    },
                )
                .tid(event.tid),
            })
            .collect();
        self.batch(out, event);
        Ok(Step::Done)
    }

    fn on_terminal(&self, d: &Delivery, event: &Event, outcome: TxOutcome) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Some(customer) = event.payload.customer_id() else {
            return Ok(Step::Done);
        };
        let reason = match &event.payload {
            Payload::ReservationFailure(f) => Some(format!(
                "insufficient stock: {}",
                f.failing.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            )),
            Payload::Payment(p) if !p.approved => Some("payment declined".into()),
            Payload::Abort(a) => Some(a.reason.clone()),
            _ => None,
        };
        let mut out = Vec::new();
        let mut cart = self.cart.lock();
        cart.store.finish_checkout(event.tid, customer, &mut out);
        let mut outcomes = self.outcomes.lock();
        if let std::collections::hash_map::Entry::Vacant(e) = outcomes.entry(event.tid) {
            out.push(
                Record::diagnostic(
                    Actor::Service(Service::Cart),
                    Detail::TxOutcome {
                        outcome,
                        reason: reason.clone(),
                    },
                )
                .tid(event.tid),
            );
            self.batch(out, event);
            e.insert(CheckoutOutcome {
                tid: event.tid,
                outcome,
                reason,
                logical_time: self.audit.now(),
            });
        } else {
            self.batch(out, event);
        }
        Ok(Step::Done)
    }

    fn checkout_of(event: &Event) -> Option<&CheckoutRequest> {
        match &event.payload {
            Payload::Checkout(c) => Some(c),
            Payload::Reservation(r) => Some(&r.checkout),
            Payload::ReservationFailure(r) => Some(&r.checkout),
            _ => None,
        }
    }

    fn on_reserve(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        let Some(req) = Self::checkout_of(event) else {
            self.fabric.acknowledge(d);
            return Ok(Step::Done);
        };
        let req = req.clone();
        let lines = lines(&req.items);
        let actor = Actor::Service(Service::Stock);
        let tid = event.tid;
        let mut coord_guard = None;
        if self.transactional() {
            let mut coord = self.coordinator.lock();
            let mut keys: Vec<ProductKey> = lines.iter().map(|(k, _)| *k).collect();
            keys.sort();
            keys.dedup();
            if let Err((key, holder)) = coord.locks.try_lock_all(tid, &keys) {
                self.audit.record(
                    Record::diagnostic(actor, Detail::TxLockWait { key, holder })
                        .tid(tid)
                        .event(Some(event.event_id)),
                );
                return Ok(Step::Blocked);
            }
            self.fabric.acknowledge(d);
            coord.tx(tid).keys = keys.clone();
            self.audit.record(
                Record::new(
                    Actor::Coordinator,
                    crate::audit::EntryKind::Diagnostic,
                    Detail::TxLocked { keys },
                )
                .tid(tid)
                .event(Some(event.event_id)),
            );
            coord_guard = Some(coord);
        } else {
            self.fabric.acknowledge(d);
        }

        let mut stock = self.stock.lock();
        if stock.has_reservation(tid) {
            return Ok(Step::Done);
        }
        match stock.check(&lines, self.config.reservation_policy) {
            Ok(confirmed) => {
                let reserve: Vec<(ProductKey, u64)> =
                    lines.iter().zip(&confirmed).map(|((k, _), q)| (*k, *q)).collect();
                if let Some(coord) = coord_guard.as_mut() {
                    let tx = coord.tx(tid);
                    tx.staged.reserve = reserve;
                    tx.prepared.push(Service::Stock);
                    self.audit.record(
                        Record::new(
                            Actor::Coordinator,
                            crate::audit::EntryKind::Diagnostic,
                            Detail::TxPrepared {
                                participant: Service::Stock,
                            },
                        )
                        .tid(tid)
                        .event(Some(event.event_id)),
                    );
                } else {
                    let mut out = Vec::new();
                    stock.reserve(actor, tid, &reserve, &mut out);
                    self.batch(out, event);
                }
                drop(stock);
                drop(coord_guard);
                self.emit(
                    tid,
                    EventType::StockReserved,
                    Service::Stock,
                    EntityKey::Customer(req.customer_id),
                    Payload::Reservation(Reservation {
                        confirmed: confirmed.iter().map(|q| *q as u32).collect(),
                        checkout: req,
                    }),
                    [event.event_id],
                    None,
                )?;
            }
            Err(failing) => {
                drop(stock);
                if let Some(mut coord) = coord_guard {
                    self.abort_tx(&mut coord, tid, event);
                    drop(coord);
                    self.fabric.unpark_all();
                }
                self.emit(
                    tid,
                    EventType::StockReserveFailed,
                    Service::Stock,
                    EntityKey::Customer(req.customer_id),
                    Payload::ReservationFailure(ReservationFailure { checkout: req, failing }),
                    [event.event_id],
                    None,
                )?;
            }
        }
        Ok(Step::Done)
    }

    /// Ends a transactional checkout without applying anything.
    fn abort_tx(&self, coord: &mut Coordinator, tid: Tid, event: &Event) {
        let (state, keys) = coord.finish(tid);
        let records = vec![
            Record::new(
                Actor::Coordinator,
                crate::audit::EntryKind::Diagnostic,
                Detail::TxDecision {
                    commit: false,
                    participants: state.prepared,
                },
            )
            .tid(tid)
            .event(Some(event.event_id)),
            Record::new(
                Actor::Coordinator,
                crate::audit::EntryKind::Diagnostic,
                Detail::TxReleased { keys },
            )
            .tid(tid)
            .event(Some(event.event_id)),
        ];
        self.audit.record_batch(records);
    }

    fn on_stock_delete(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        let Payload::Deletion(del) = &event.payload else {
            self.fabric.acknowledge(d);
            return Ok(Step::Done);
        };
        let actor = Actor::Service(Service::Stock);
        let _coord = if self.transactional() {
            let coord = self.coordinator.lock();
            if let Some(holder) = coord.locks.holder(&del.key) {
                self.audit.record(
                    Record::diagnostic(actor, Detail::TxLockWait { key: del.key, holder })
                        .tid(event.tid)
                        .event(Some(event.event_id)),
                );
                return Ok(Step::Blocked);
            }
            Some(coord)
        } else {
            None
        };
        self.fabric.acknowledge(d);
        let mut out = Vec::new();
        self.stock.lock().deactivate(actor, event.tid, del.key, &mut out);
        self.batch(out, event);
        Ok(Step::Done)
    }

    fn on_stock_settle(&self, d: &Delivery, event: &Event, confirm: bool) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let actor = Actor::Service(Service::Stock);
        let mut out = Vec::new();
        let mut stock = self.stock.lock();
        if confirm {
            stock.confirm(actor, event.tid, &mut out);
        } else if self.config.disable_compensation {
            out.push(
                Record::diagnostic(
                    actor,
                    Detail::OrphanCompensation {
                        service: Service::Stock,
                        action: "cancel skipped".into(),
                    },
                )
                .tid(event.tid),
            );
        } else {
            stock.cancel(actor, event.tid, &mut out);
        }
        self.batch(out, event);
        Ok(Step::Done)
    }

    fn on_create_order(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Payload::Reservation(res) = &event.payload else {
            return Ok(Step::Done);
        };
        let tid = event.tid;
        let actor = Actor::Service(Service::Order);
        let req = &res.checkout;
        let order = if self.transactional() {
            let mut coord = self.coordinator.lock();
            if !coord.is_active(tid) {
                self.orphan_event(Service::Order, event, event.event_type);
                return Ok(Step::Done);
            }
            let mut orders = self.order.lock();
            let order = orders.draft(req.customer_id, &req.items, &res.confirmed, req.submitted_at)?;
            let tx = coord.tx(tid);
            tx.staged.order = Some(order.clone());
            tx.prepared.push(Service::Order);
            self.audit.record(
                Record::new(
                    Actor::Coordinator,
                    crate::audit::EntryKind::Diagnostic,
                    Detail::TxPrepared {
                        participant: Service::Order,
                    },
                )
                .tid(tid)
                .event(Some(event.event_id)),
            );
            order
        } else {
            let mut orders = self.order.lock();
            if orders.by_tid(tid).is_some() {
                return Ok(Step::Done);
            }
            let order = orders.draft(req.customer_id, &req.items, &res.confirmed, req.submitted_at)?;
            let mut out = Vec::new();
            orders.insert(actor, tid, order.clone(), &mut out);
            self.batch(out, event);
            order
        };
        self.emit(
            tid,
            EventType::InvoiceIssued,
            Service::Order,
            EntityKey::Customer(req.customer_id),
            Payload::Invoice(Invoice {
                order,
                payment: req.payment.clone(),
            }),
            [event.event_id],
            Some(Service::Payment),
        )?;
        Ok(Step::Done)
    }

    fn order_id_of(event: &Event) -> Option<OrderId> {
        match &event.payload {
            Payload::Payment(p) => Some(p.order.order_id),
            Payload::Shipment(s) => Some(s.order_id),
            Payload::Package(p) => Some(p.order_id),
            Payload::Abort(a) => a.order_id,
            _ => None,
        }
    }

    fn on_order_paid(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Some(order_id) = Self::order_id_of(event) else {
            return Ok(Step::Done);
        };
        let mut orders = self.order.lock();
        match orders.get(order_id).map(|o| o.status) {
            Some(OrderStatus::Invoiced) => {
                let mut out = Vec::new();
                orders.transition(
                    Actor::Service(Service::Order),
                    event.tid,
                    order_id,
                    OrderStatus::PaymentProcessed,
                    &mut out,
                )?;
                self.batch(out, event);
            }
            Some(_) => {}
            None => self.orphan_event(Service::Order, event, event.event_type),
        }
        Ok(Step::Done)
    }

    fn on_order_failed(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let mut orders = self.order.lock();
        let order_id = Self::order_id_of(event).or_else(|| orders.by_tid(event.tid).map(|o| o.order_id));
        if let Some(order_id) = order_id {
            if orders.get(order_id).map(|o| o.status) == Some(OrderStatus::Invoiced) {
                let mut out = Vec::new();
                orders.transition(
                    Actor::Service(Service::Order),
                    event.tid,
                    order_id,
                    OrderStatus::PaymentFailed,
                    &mut out,
                )?;
                self.batch(out, event);
            }
        }
        Ok(Step::Done)
    }

    fn on_order_shipped(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Payload::Shipment(s) = &event.payload else {
            return Ok(Step::Done);
        };
        let actor = Actor::Service(Service::Order);
        let mut orders = self.order.lock();
        let Some(status) = orders.get(s.order_id).map(|o| o.status) else {
            self.orphan_event(Service::Order, event, event.event_type);
            return Ok(Step::Done);
        };
        if matches!(status, OrderStatus::PaymentFailed) {
            self.orphan_event(Service::Order, event, event.event_type);
            return Ok(Step::Done);
        }
        let mut out = Vec::new();
        orders.set_package_count(s.order_id, s.packages.len() as u32);
        if status < OrderStatus::InTransit {
            orders.advance_to(actor, event.tid, s.order_id, OrderStatus::InTransit, &mut out)?;
        }
        if orders.get(s.order_id).map(|o| o.status) == Some(OrderStatus::InTransit) && orders.all_delivered(s.order_id)
        {
            orders.transition(actor, event.tid, s.order_id, OrderStatus::Delivered, &mut out)?;
        }
        self.batch(out, event);
        Ok(Step::Done)
    }

    fn on_order_package(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Some(order_id) = Self::order_id_of(event) else {
            return Ok(Step::Done);
        };
        let mut orders = self.order.lock();
        orders.note_delivery(order_id);
        if orders.get(order_id).map(|o| o.status) == Some(OrderStatus::InTransit) && orders.all_delivered(order_id) {
            let mut out = Vec::new();
            orders.transition(
                Actor::Service(Service::Order),
                event.tid,
                order_id,
                OrderStatus::Delivered,
                &mut out,
            )?;
            self.batch(out, event);
        }
        Ok(Step::Done)
    }

    fn on_invoice(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Payload::Invoice(inv) = &event.payload else {
            return Ok(Step::Done);
        };
        let tid = event.tid;
        let approved = inv.payment.approve;
        let customer = inv.order.customer_id;
        let mut order = inv.order.clone();

        if self.transactional() {
            let mut coord = self.coordinator.lock();
            if !coord.is_active(tid) {
                self.orphan_event(Service::Payment, event, event.event_type);
                return Ok(Step::Done);
            }
            if !approved {
                self.abort_tx(&mut coord, tid, event);
                drop(coord);
                self.fabric.unpark_all();
            } else {
                order = self.commit(&mut coord, tid, event, inv)?;
                drop(coord);
                self.fabric.unpark_all();
            }
        } else {
            let mut out = Vec::new();
            self.payment.lock().record(
                Actor::Service(Service::Payment),
                tid,
                PaymentRecord {
                    order_id: order.order_id,
                    amount: order.total_amount,
                    method: inv.payment.method.clone(),
                    approved,
                },
                &mut out,
            );
            self.batch(out, event);
        }

        let paid = self.emit(
            tid,
            if approved {
                EventType::PaymentProcessed
            } else {
                EventType::PaymentFailed
            },
            Service::Payment,
            EntityKey::Customer(customer),
            Payload::Payment(PaymentResult {
                order: order.clone(),
                approved,
            }),
            [event.event_id],
            None,
        )?;
        if approved && self.transactional() && self.config.consistency.transaction_boundary == TxBoundary::Shipment {
            let mut shipments = self.shipment.lock();
            if let Some(s) = shipments.for_order(order.order_id).cloned() {
                let id = self.emit(
                    tid,
                    EventType::ShipmentCreated,
                    Service::Shipment,
                    EntityKey::Customer(customer),
                    Payload::Shipment(s.clone()),
                    [paid],
                    Some(Service::Order),
                )?;
                shipments.set_announced_by(s.shipment_id, id);
            }
        }
        Ok(Step::Done)
    }

    /// Applies every staged write of `tid` in one contiguous audit block.
    fn commit(
        &self,
        coord: &mut Coordinator,
        tid: Tid,
        event: &Event,
        inv: &Invoice,
    ) -> Result<OrderRecord, ServiceError> {
        let (state, keys) = coord.finish(tid);
        let mut participants = state.prepared.clone();
        participants.push(Service::Payment);
        let with_shipment = self.config.consistency.transaction_boundary == TxBoundary::Shipment;
        if with_shipment {
            participants.push(Service::Shipment);
        }
        let actor = Actor::Coordinator;
        let diag = |detail| {
            Record::new(actor, crate::audit::EntryKind::Diagnostic, detail)
                .tid(tid)
                .event(Some(event.event_id))
        };
        let mut stock = self.stock.lock();
        let mut orders = self.order.lock();
        let mut payments = self.payment.lock();
        let mut shipments = with_shipment.then(|| self.shipment.lock());

        let mut out = vec![
            diag(Detail::TxPrepared {
                participant: Service::Payment,
            }),
            diag(Detail::TxDecision {
                commit: true,
                participants,
            }),
        ];
        stock.reserve(actor, tid, &state.staged.reserve, &mut out);
        stock.confirm(actor, tid, &mut out);
        out.push(diag(Detail::TxApplied {
            participant: Service::Stock,
        }));

        let order = state.staged.order.clone().unwrap_or_else(|| inv.order.clone());
        let order_id = order.order_id;
        orders.insert(actor, tid, order, &mut out);
        orders.transition(actor, tid, order_id, OrderStatus::PaymentProcessed, &mut out)?;
        out.push(diag(Detail::TxApplied {
            participant: Service::Order,
        }));

        let committed = orders.get(order_id).cloned().expect("order just inserted");
        payments.record(
            actor,
            tid,
            PaymentRecord {
                order_id,
                amount: committed.total_amount,
                method: inv.payment.method.clone(),
                approved: true,
            },
            &mut out,
        );
        out.push(diag(Detail::TxApplied {
            participant: Service::Payment,
        }));

        if let Some(shipments) = shipments.as_mut() {
            if let Some(s) = shipments.draft(&committed)? {
                orders.set_package_count(order_id, s.packages.len() as u32);
                orders.advance_to(actor, tid, order_id, OrderStatus::InTransit, &mut out)?;
                shipments.insert(actor, tid, s, &mut out);
            }
            out.push(diag(Detail::TxApplied {
                participant: Service::Shipment,
            }));
        }
        out.push(diag(Detail::TxReleased { keys }));
        self.batch(out, event);
        Ok(committed)
    }

    fn on_ship(&self, d: &Delivery, event: &Event) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Payload::Payment(p) = &event.payload else {
            return Ok(Step::Done);
        };
        let mut shipments = self.shipment.lock();
        let Some(s) = shipments.draft(&p.order)? else {
            return Ok(Step::Done);
        };
        let mut out = Vec::new();
        shipments.insert(Actor::Service(Service::Shipment), event.tid, s.clone(), &mut out);
        self.batch(out, event);
        let id = self.emit(
            event.tid,
            EventType::ShipmentCreated,
            Service::Shipment,
            EntityKey::Customer(s.customer_id),
            Payload::Shipment(s.clone()),
            [event.event_id],
            Some(Service::Order),
        )?;
        shipments.set_announced_by(s.shipment_id, id);
        Ok(Step::Done)
    }

    fn on_customer(&self, d: &Delivery, event: &Event, counter: CustomerCounter) -> Result<Step, ServiceError> {
        self.fabric.acknowledge(d);
        let Some(customer) = event.payload.customer_id() else {
            return Ok(Step::Done);
        };
        let mut out = Vec::new();
        if self.customer.lock().bump(event.tid, customer, counter, &mut out) {
            self.batch(out, event);
        } else {
            self.orphan_event(Service::Customer, event, event.event_type);
        }
        Ok(Step::Done)
    }

    /// A participant died mid-checkout before the outcome was decided.
    fn crash_abort(&self, d: &Delivery, stage: CheckoutStage) -> Result<(), ServiceError> {
        let event = d.event();
        let tid = event.tid;
        let Some(customer) = event.payload.customer_id() else {
            return Ok(());
        };
        let order_id = match &event.payload {
            Payload::Invoice(i) => Some(i.order.order_id),
            _ => None,
        };
        let mut targets = vec![Service::Cart];
        if self.transactional() {
            let mut coord = self.coordinator.lock();
            self.abort_tx(&mut coord, tid, event);
            drop(coord);
            self.fabric.unpark_all();
        } else {
            match stage {
                CheckoutStage::Order => targets.push(Service::Stock),
                CheckoutStage::Payment => targets.extend([Service::Stock, Service::Order]),
                _ => {}
            }
        }
        for target in targets {
            self.emit(
                tid,
                EventType::CheckoutAborted,
                d.consumer(),
                EntityKey::Customer(customer),
                Payload::Abort(AbortNotice {
                    customer_id: customer,
                    stage,
                    reason: format!("{} crashed", d.consumer()),
                    order_id,
                }),
                [event.event_id],
                Some(target),
            )?;
        }
        Ok(())
    }

    // ---- inspection --------------------------------------------------------

    pub fn snapshot(&self) -> StateSnapshot {
        let mut products: Vec<_> = self.product.lock().all().cloned().collect();
        products.sort_by_key(ProductRecord::key);
        let mut stock: Vec<_> = self.stock.lock().all().cloned().collect();
        stock.sort_by_key(StockItem::key);
        let mut orders: Vec<_> = self.order.lock().all().cloned().collect();
        orders.sort_by_key(|o| o.order_id);
        let shipments: Vec<_> = self.shipment.lock().all().cloned().collect();
        let mut payments: Vec<_> = self.payment.lock().all().cloned().collect();
        payments.sort_by_key(|p| p.order_id);
        let mut customers: Vec<_> = self.customer.lock().all().cloned().collect();
        customers.sort_by_key(|c| c.customer_id);
        let replica = self
            .cart
            .lock()
            .replica
            .entries()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        StateSnapshot {
            products,
            stock,
            orders,
            shipments,
            payments,
            customers,
            replica,
        }
    }

    pub fn stock_item(&self, key: &ProductKey) -> Option<StockItem> {
        self.stock.lock().get(key).cloned()
    }

    pub fn product(&self, key: &ProductKey) -> Option<ProductRecord> {
        self.product.lock().get(key).cloned()
    }

    pub fn cart(&self, customer: CustomerId) -> Option<crate::domain::Cart> {
        self.cart.lock().store.get(customer).cloned()
    }

    pub fn order_for(&self, tid: Tid) -> Option<OrderRecord> {
        self.order.lock().by_tid(tid).cloned()
    }

    pub fn shipment_for(&self, order_id: OrderId) -> Option<ShipmentRecord> {
        self.shipment.lock().for_order(order_id).cloned()
    }

    pub fn customer(&self, id: CustomerId) -> Option<CustomerRecord> {
        self.customer.lock().get(id).cloned()
    }

    pub fn orphan_compensations(&self) -> u64 {
        self.stock.lock().orphan_compensations
    }

    pub fn active_transactions(&self) -> usize {
        self.coordinator.lock().active()
    }

    /// Sellers that currently have an undelivered package.
    pub fn sellers_with_pending_packages(&self) -> HashSet<SellerId> {
        self.shipment
            .lock()
            .all()
            .flat_map(|s| s.packages.iter().filter(|p| !p.delivered).map(|p| p.seller_id))
            .collect()
    }
}
