//! Private state of the eight marketplace services.
//!
//! Each store is a plain struct; mutators append the audit records describing
//! what they changed to a caller-supplied buffer so the runtime decides when
//! (and how contiguously) they hit the log.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::audit::{digest, Actor, CustomerCounter, Detail, Record};
use crate::domain::{
    assemble_packages, compute_order_total, next_invoice_number, Cart, CartItem, CartStatus, CustomerId,
    CustomerRecord, DomainError, OrderId, OrderItem, OrderRecord, OrderStatus, ProductKey, ProductRecord, SellerId,
    SellerRecord, ShipmentId, ShipmentRecord, ShipmentStatus, StockItem, Tid,
};
use crate::event::{EventId, Service};
use crate::fabric::FabricError;
use crate::money::Money;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("ingestion failed: {0}")]
    Ingest(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    /// The request never reached the services (remote clients only).
    #[error("transport: {0}")]
    Transport(String),
}

impl From<DomainError> for ServiceError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::InvalidInput(m) => ServiceError::InvalidRequest(m),
            DomainError::IllegalState(m) => ServiceError::Conflict(m),
        }
    }
}

fn svc(s: Service) -> Actor {
    Actor::Service(s)
}

#[derive(Debug, Default)]
pub struct ProductService {
    products: HashMap<ProductKey, ProductRecord>,
    /// Event that last changed each product; the next update follows it causally.
    last_event: HashMap<ProductKey, EventId>,
}

impl ProductService {
    pub fn insert(&mut self, p: ProductRecord, out: &mut Vec<Record>) -> Result<(), ServiceError> {
        let key = p.key();
        if self.products.contains_key(&key) {
            return Err(ServiceError::Ingest(format!("duplicate product {key}")));
        }
        out.push(
            Record::mutation(
                svc(Service::Product),
                Tid::INGEST,
                Detail::ProductCreated {
                    key,
                    price: p.price,
                    version: p.version,
                },
            )
            .digests(None::<&()>, Some(&p)),
        );
        self.products.insert(key, p);
        Ok(())
    }

    pub fn get(&self, key: &ProductKey) -> Option<&ProductRecord> {
        self.products.get(key)
    }

    pub fn all(&self) -> impl Iterator<Item = &ProductRecord> {
        self.products.values()
    }

    fn active_mut(
        &mut self,
        key: ProductKey,
        expected_version: Option<u64>,
    ) -> Result<&mut ProductRecord, ServiceError> {
        let p = self
            .products
            .get_mut(&key)
            .filter(|p| p.active)
            .ok_or_else(|| ServiceError::NotFound(format!("product {key}")))?;
        if let Some(v) = expected_version.filter(|v| *v != p.version) {
            return Err(ServiceError::Conflict(format!(
                "product {key} at version {}, expected {v}",
                p.version
            )));
        }
        Ok(p)
    }

    /// Returns the updated record and the event it follows.
    pub fn update_price(
        &mut self,
        actor: Actor,
        tid: Tid,
        key: ProductKey,
        price: Money,
        expected_version: Option<u64>,
        out: &mut Vec<Record>,
    ) -> Result<(ProductRecord, Option<EventId>), ServiceError> {
        if price.is_negative() {
            return Err(ServiceError::InvalidRequest("negative price".into()));
        }
        let p = self.active_mut(key, expected_version)?;
        let before = digest(&*p);
        p.price = price;
        p.version += 1;
        let mut r = Record::mutation(
            actor,
            tid,
            Detail::ProductPriceChanged {
                key,
                price,
                version: p.version,
            },
        );
        r.before = Some(before);
        r.after = Some(digest(&*p));
        out.push(r);
        let rec = p.clone();
        Ok((rec, self.last_event.get(&key).copied()))
    }

    pub fn delete(
        &mut self,
        actor: Actor,
        tid: Tid,
        key: ProductKey,
        expected_version: Option<u64>,
        out: &mut Vec<Record>,
    ) -> Result<(ProductRecord, Option<EventId>), ServiceError> {
        let p = self.active_mut(key, expected_version)?;
        let before = digest(&*p);
        p.active = false;
        p.version += 1;
        let mut r = Record::mutation(
            actor,
            tid,
            Detail::ProductDeactivated {
                key,
                version: p.version,
            },
        );
        r.before = Some(before);
        r.after = Some(digest(&*p));
        out.push(r);
        let rec = p.clone();
        Ok((rec, self.last_event.get(&key).copied()))
    }

    pub fn set_last_event(&mut self, key: ProductKey, id: EventId) {
        self.last_event.insert(key, id);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReservationPolicy {
    #[default]
    AllOrNothing,
    /// Reserve whatever is available per line; fail only if nothing is.
    Partial,
}

#[derive(Debug, Default)]
pub struct StockService {
    items: HashMap<ProductKey, StockItem>,
    reservations: HashMap<Tid, Vec<(ProductKey, u64)>>,
    pub orphan_compensations: u64,
}

impl StockService {
    pub fn insert(&mut self, item: StockItem, product_alive: bool, out: &mut Vec<Record>) -> Result<(), ServiceError> {
        let key = item.key();
        if self.items.contains_key(&key) {
            return Err(ServiceError::Ingest(format!("duplicate stock item {key}")));
        }
        if !product_alive {
            return Err(ServiceError::Ingest(format!("stock item {key} has no product")));
        }
        out.push(
            Record::mutation(
                svc(Service::Stock),
                Tid::INGEST,
                Detail::StockCreated {
                    key,
                    qty: item.qty_available,
                },
            )
            .digests(None::<&()>, Some(&item)),
        );
        self.items.insert(key, item);
        Ok(())
    }

    pub fn get(&self, key: &ProductKey) -> Option<&StockItem> {
        self.items.get(key)
    }

    pub fn all(&self) -> impl Iterator<Item = &StockItem> {
        self.items.values()
    }

    pub fn has_reservation(&self, tid: Tid) -> bool {
        self.reservations.contains_key(&tid)
    }

    /// Quantity that would be reserved per line, or the failing keys.
    pub fn check(&self, lines: &[(ProductKey, u64)], policy: ReservationPolicy) -> Result<Vec<u64>, Vec<ProductKey>> {
        let mut confirmed = Vec::with_capacity(lines.len());
        let mut failing = Vec::new();
        for (key, qty) in lines {
            let avail = self.items.get(key).filter(|i| i.active).map_or(0, |i| i.qty_available);
            match policy {
                ReservationPolicy::AllOrNothing if avail < *qty => failing.push(*key),
                ReservationPolicy::AllOrNothing => confirmed.push(*qty),
                ReservationPolicy::Partial => {
                    if avail < *qty {
                        failing.push(*key);
                    }
                    confirmed.push(avail.min(*qty));
                }
            }
        }
        let nothing = confirmed.iter().all(|q| *q == 0);
        match policy {
            ReservationPolicy::AllOrNothing if !failing.is_empty() => Err(failing),
            ReservationPolicy::Partial if nothing => Err(failing),
            _ => Ok(confirmed),
        }
    }

    fn adjust(
        &mut self,
        actor: Actor,
        tid: Tid,
        key: ProductKey,
        detail: Detail,
        f: impl FnOnce(&mut StockItem),
        out: &mut Vec<Record>,
    ) {
        let item = self.items.get_mut(&key).expect("stock item checked before adjust");
        let before = digest(&*item);
        f(item);
        item.version += 1;
        let mut r = Record::mutation(actor, tid, detail);
        r.before = Some(before);
        r.after = Some(digest(&*item));
        out.push(r);
    }

    pub fn reserve(&mut self, actor: Actor, tid: Tid, lines: &[(ProductKey, u64)], out: &mut Vec<Record>) {
        let mut held = Vec::new();
        for &(key, qty) in lines.iter().filter(|(_, q)| *q > 0) {
            self.adjust(
                actor,
                tid,
                key,
                Detail::StockReserved { key, qty },
                |i| {
                    i.qty_available -= qty;
                    i.qty_reserved += qty;
                },
                out,
            );
            held.push((key, qty));
        }
        self.reservations.insert(tid, held);
    }

    fn take_reservation(
        &mut self,
        actor: Actor,
        tid: Tid,
        action: &str,
        out: &mut Vec<Record>,
    ) -> Option<Vec<(ProductKey, u64)>> {
        let r = self.reservations.remove(&tid);
        if r.is_none() {
            self.orphan_compensations += 1;
            out.push(
                Record::diagnostic(
                    actor,
                    Detail::OrphanCompensation {
                        service: Service::Stock,
                        action: action.into(),
                    },
                )
                .tid(tid),
            );
        }
        r
    }

    /// Makes a reservation permanent. `false` when no reservation exists.
    pub fn confirm(&mut self, actor: Actor, tid: Tid, out: &mut Vec<Record>) -> bool {
        let Some(lines) = self.take_reservation(actor, tid, "confirm", out) else {
            return false;
        };
        for (key, qty) in lines {
            self.adjust(
                actor,
                tid,
                key,
                Detail::StockConfirmed { key, qty },
                |i| i.qty_reserved -= qty,
                out,
            );
        }
        true
    }

    pub fn cancel(&mut self, actor: Actor, tid: Tid, out: &mut Vec<Record>) -> bool {
        let Some(lines) = self.take_reservation(actor, tid, "cancel", out) else {
            return false;
        };
        for (key, qty) in lines {
            self.adjust(
                actor,
                tid,
                key,
                Detail::StockCanceled { key, qty },
                |i| {
                    i.qty_reserved -= qty;
                    i.qty_available += qty;
                },
                out,
            );
        }
        true
    }

    pub fn deactivate(&mut self, actor: Actor, tid: Tid, key: ProductKey, out: &mut Vec<Record>) -> bool {
        match self.items.get(&key) {
            Some(i) if i.active => {
                self.adjust(
                    actor,
                    tid,
                    key,
                    Detail::StockDeactivated { key },
                    |i| i.active = false,
                    out,
                );
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Default)]
pub struct CartService {
    carts: HashMap<CustomerId, Cart>,
}

impl CartService {
    pub fn get(&self, customer: CustomerId) -> Option<&Cart> {
        self.carts.get(&customer)
    }

    fn set_status(cart: &mut Cart, actor: Actor, tid: Tid, to: CartStatus, out: &mut Vec<Record>) {
        if cart.status != to {
            out.push(Record::mutation(
                actor,
                tid,
                Detail::CartStatusChanged {
                    customer_id: cart.customer_id,
                    from: cart.status,
                    to,
                },
            ));
            cart.status = to;
        }
    }

    /// Starts a fresh, empty cart for the customer.
    pub fn open_session(
        &mut self,
        actor: Actor,
        tid: Tid,
        customer: CustomerId,
        out: &mut Vec<Record>,
    ) -> Result<(), ServiceError> {
        let cart = self.carts.entry(customer).or_insert_with(|| {
            out.push(Record::mutation(
                actor,
                tid,
                Detail::CartOpened { customer_id: customer },
            ));
            Cart::new(customer)
        });
        if cart.status == CartStatus::CheckingOut {
            return Err(ServiceError::Conflict(format!("cart {customer} is checking out")));
        }
        cart.items.clear();
        Self::set_status(cart, actor, tid, CartStatus::Open, out);
        Ok(())
    }

    pub fn add_item(
        &mut self,
        actor: Actor,
        tid: Tid,
        customer: CustomerId,
        item: CartItem,
        out: &mut Vec<Record>,
    ) -> Result<(), ServiceError> {
        let cart = self.carts.entry(customer).or_insert_with(|| {
            out.push(Record::mutation(
                actor,
                tid,
                Detail::CartOpened { customer_id: customer },
            ));
            Cart::new(customer)
        });
        let detail = Detail::CartItemAdded {
            customer_id: customer,
            key: item.key(),
            version: item.applied_price_version,
            price: item.unit_price,
            qty: item.quantity,
        };
        cart.upsert(item)?;
        out.push(Record::mutation(actor, tid, detail));
        Ok(())
    }

    /// Moves the cart to CHECKING_OUT and returns its items for pricing.
    pub fn begin_checkout(
        &mut self,
        actor: Actor,
        tid: Tid,
        customer: CustomerId,
        out: &mut Vec<Record>,
    ) -> Result<&mut Cart, ServiceError> {
        let cart = self
            .carts
            .get_mut(&customer)
            .ok_or_else(|| ServiceError::InvalidRequest(format!("cart {customer} is empty")))?;
        match cart.status {
            CartStatus::Open if cart.items.is_empty() => {
                Err(ServiceError::InvalidRequest(format!("cart {customer} is empty")))
            }
            CartStatus::Open => {
                Self::set_status(cart, actor, tid, CartStatus::CheckingOut, out);
                Ok(cart)
            }
            s => Err(ServiceError::Conflict(format!("cart {customer} is {s:?}"))),
        }
    }

    /// Closes the checkout. Returns `false` when the cart was not checking out.
    pub fn finish_checkout(&mut self, tid: Tid, customer: CustomerId, out: &mut Vec<Record>) -> bool {
        match self.carts.get_mut(&customer) {
            Some(cart) if cart.status == CartStatus::CheckingOut => {
                Self::set_status(cart, svc(Service::Cart), tid, CartStatus::CheckedOut, out);
                true
            }
            _ => false,
        }
    }

    pub fn clear(&mut self) {
        self.carts.clear();
    }
}

/// A dashboard row: one order item of one seller's in-progress order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DashboardRow {
    pub order_id: OrderId,
    pub seller_id: SellerId,
    pub product_id: u64,
    pub quantity: u32,
    pub unit_price: Money,
    pub discount: Money,
    pub amount: Money,
}

#[derive(Debug, Default)]
pub struct OrderService {
    orders: HashMap<OrderId, OrderRecord>,
    by_tid: HashMap<Tid, OrderId>,
    tid_of: HashMap<OrderId, Tid>,
    sequence: HashMap<CustomerId, u64>,
    next_order_id: OrderId,
    /// In-progress rows per seller, keyed by (order, line).
    seller_rows: HashMap<SellerId, BTreeMap<(OrderId, usize), DashboardRow>>,
    seller_totals: HashMap<SellerId, Money>,
    /// Packages delivered per order, possibly ahead of the shipment notice.
    delivered: HashMap<OrderId, u32>,
    package_counts: HashMap<OrderId, u32>,
}

impl OrderService {
    pub fn get(&self, id: OrderId) -> Option<&OrderRecord> {
        self.orders.get(&id)
    }

    pub fn by_tid(&self, tid: Tid) -> Option<&OrderRecord> {
        self.by_tid.get(&tid).and_then(|id| self.orders.get(id))
    }

    pub fn all(&self) -> impl Iterator<Item = &OrderRecord> {
        self.orders.values()
    }

    /// Builds (but does not store) the order for a confirmed reservation.
    pub fn draft(
        &mut self,
        customer: CustomerId,
        items: &[CartItem],
        confirmed: &[u32],
        created_at: u64,
    ) -> Result<OrderRecord, ServiceError> {
        let items: Vec<OrderItem> = items
            .iter()
            .zip(confirmed)
            .filter(|(_, q)| **q > 0)
            .map(|(i, q)| OrderItem::from_cart(i, *q))
            .collect();
        let totals = compute_order_total(&items)?;
        self.next_order_id += 1;
        let seq = self.sequence.entry(customer).or_insert(0);
        *seq += 1;
        Ok(OrderRecord {
            order_id: self.next_order_id,
            invoice_number: next_invoice_number(customer, *seq),
            customer_id: customer,
            items,
            total_amount: totals.total_amount,
            total_freight: totals.total_freight,
            total_discount: totals.total_discount,
            status: OrderStatus::Invoiced,
            created_at,
        })
    }

    pub fn insert(&mut self, actor: Actor, tid: Tid, order: OrderRecord, out: &mut Vec<Record>) {
        out.push(
            Record::mutation(
                actor,
                tid,
                Detail::OrderCreated {
                    order_id: order.order_id,
                    customer_id: order.customer_id,
                    invoice_number: order.invoice_number.clone(),
                    total_amount: order.total_amount,
                    created_at: order.created_at,
                },
            )
            .digests(None::<&()>, Some(&order)),
        );
        self.by_tid.insert(tid, order.order_id);
        self.tid_of.insert(order.order_id, tid);
        self.index(&order);
        self.orders.insert(order.order_id, order);
    }

    pub fn tid_of(&self, order_id: OrderId) -> Option<Tid> {
        self.tid_of.get(&order_id).copied()
    }

    fn index(&mut self, order: &OrderRecord) {
        for (line, item) in order.items.iter().enumerate() {
            let row = DashboardRow {
                order_id: order.order_id,
                seller_id: item.seller_id,
                product_id: item.product_id,
                quantity: item.quantity,
                unit_price: item.unit_price,
                discount: item.discount(),
                amount: item.amount(),
            };
            let present = self.seller_rows.entry(item.seller_id).or_default();
            let in_progress = order.status.in_progress();
            let had = present.contains_key(&(order.order_id, line));
            let total = self.seller_totals.entry(item.seller_id).or_insert(Money::ZERO);
            match (had, in_progress) {
                (false, true) => {
                    *total += row.amount;
                    present.insert((order.order_id, line), row);
                }
                (true, false) => {
                    *total = *total - row.amount;
                    present.remove(&(order.order_id, line));
                }
                _ => {}
            }
        }
    }

    /// Applies a status transition. `Ok(false)` when the order is already at
    /// or past `to` (redelivery), an error when the move is illegal.
    pub fn transition(
        &mut self,
        actor: Actor,
        tid: Tid,
        order_id: OrderId,
        to: OrderStatus,
        out: &mut Vec<Record>,
    ) -> Result<bool, ServiceError> {
        let order = self
            .orders
            .get_mut(&order_id)
            .ok_or_else(|| ServiceError::NotFound(format!("order {order_id}")))?;
        if order.status == to {
            return Ok(false);
        }
        let before = digest(&*order);
        let from = order.transition(to)?;
        let mut r = Record::mutation(actor, tid, Detail::OrderStatusChanged { order_id, from, to });
        r.before = Some(before);
        r.after = Some(digest(&*order));
        out.push(r);
        let snapshot = order.clone();
        self.index(&snapshot);
        Ok(true)
    }

    /// Walks the order forward to `to` along the happy path.
    pub fn advance_to(
        &mut self,
        actor: Actor,
        tid: Tid,
        order_id: OrderId,
        to: OrderStatus,
        out: &mut Vec<Record>,
    ) -> Result<(), ServiceError> {
        use OrderStatus::*;
        const PATH: [OrderStatus; 5] = [Invoiced, PaymentProcessed, ReadyForShipment, InTransit, Delivered];
        let current = self
            .orders
            .get(&order_id)
            .ok_or_else(|| ServiceError::NotFound(format!("order {order_id}")))?
            .status;
        let (Some(from), Some(target)) = (
            PATH.iter().position(|s| *s == current),
            PATH.iter().position(|s| *s == to),
        ) else {
            return Err(ServiceError::Conflict(format!(
                "order {order_id}: {current:?} -> {to:?}"
            )));
        };
        for step in PATH.iter().take(target + 1).skip(from + 1) {
            self.transition(actor, tid, order_id, *step, out)?;
        }
        Ok(())
    }

    pub fn set_package_count(&mut self, order_id: OrderId, n: u32) {
        self.package_counts.insert(order_id, n);
    }

    pub fn note_delivery(&mut self, order_id: OrderId) {
        *self.delivered.entry(order_id).or_insert(0) += 1;
    }

    pub fn all_delivered(&self, order_id: OrderId) -> bool {
        match self.package_counts.get(&order_id) {
            Some(n) => self.delivered.get(&order_id).copied().unwrap_or(0) >= *n,
            None => false,
        }
    }

    pub fn dashboard_total(&self, seller: SellerId) -> Money {
        self.seller_totals.get(&seller).copied().unwrap_or(Money::ZERO)
    }

    pub fn dashboard_rows(&self, seller: SellerId) -> Vec<DashboardRow> {
        self.seller_rows
            .get(&seller)
            .map(|rows| rows.values().cloned().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub order_id: OrderId,
    pub amount: Money,
    pub method: String,
    pub approved: bool,
}

#[derive(Debug, Default)]
pub struct PaymentService {
    payments: HashMap<OrderId, PaymentRecord>,
}

impl PaymentService {
    pub fn get(&self, order_id: OrderId) -> Option<&PaymentRecord> {
        self.payments.get(&order_id)
    }

    pub fn all(&self) -> impl Iterator<Item = &PaymentRecord> {
        self.payments.values()
    }

    /// `false` if this order was already paid (redelivery).
    pub fn record(&mut self, actor: Actor, tid: Tid, p: PaymentRecord, out: &mut Vec<Record>) -> bool {
        if self.payments.contains_key(&p.order_id) {
            return false;
        }
        out.push(Record::mutation(
            actor,
            tid,
            Detail::PaymentRecorded {
                order_id: p.order_id,
                approved: p.approved,
                amount: p.amount,
            },
        ));
        self.payments.insert(p.order_id, p);
        true
    }
}

#[derive(Debug, Default)]
pub struct ShipmentService {
    shipments: BTreeMap<ShipmentId, ShipmentRecord>,
    by_order: HashMap<OrderId, ShipmentId>,
    /// Event that announced each shipment.
    announced_by: HashMap<ShipmentId, EventId>,
    next_id: ShipmentId,
}

/// A package chosen for delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredPackage {
    pub shipment_id: ShipmentId,
    pub order_id: OrderId,
    pub customer_id: CustomerId,
    pub package_id: u32,
    pub seller_id: SellerId,
    pub product_id: u64,
    pub quantity: u32,
}

impl ShipmentService {
    pub fn for_order(&self, order_id: OrderId) -> Option<&ShipmentRecord> {
        self.by_order.get(&order_id).and_then(|id| self.shipments.get(id))
    }

    pub fn all(&self) -> impl Iterator<Item = &ShipmentRecord> {
        self.shipments.values()
    }

    pub fn announced_by(&self, id: ShipmentId) -> Option<EventId> {
        self.announced_by.get(&id).copied()
    }

    pub fn set_announced_by(&mut self, id: ShipmentId, event: EventId) {
        self.announced_by.insert(id, event);
    }

    /// Builds the shipment for a paid order; `None` if one already exists.
    pub fn draft(&mut self, order: &OrderRecord) -> Result<Option<ShipmentRecord>, ServiceError> {
        if self.by_order.contains_key(&order.order_id) {
            return Ok(None);
        }
        let mut ready = order.clone();
        ready.status = OrderStatus::ReadyForShipment;
        let packages = assemble_packages(&ready)?;
        self.next_id += 1;
        Ok(Some(ShipmentRecord {
            shipment_id: self.next_id,
            order_id: order.order_id,
            customer_id: order.customer_id,
            packages,
            status: ShipmentStatus::Approved,
            created_at: order.created_at,
        }))
    }

    pub fn insert(&mut self, actor: Actor, tid: Tid, s: ShipmentRecord, out: &mut Vec<Record>) {
        out.push(
            Record::mutation(
                actor,
                tid,
                Detail::ShipmentCreated {
                    shipment_id: s.shipment_id,
                    order_id: s.order_id,
                    created_at: s.created_at,
                    packages: s.packages.len() as u32,
                },
            )
            .digests(None::<&()>, Some(&s)),
        );
        self.by_order.insert(s.order_id, s.shipment_id);
        self.shipments.insert(s.shipment_id, s);
    }

    /// Up to `limit` sellers ordered by their oldest shipment with an
    /// undelivered package of theirs, each paired with that shipment.
    pub fn select_for_delivery(&self, limit: usize) -> Vec<(SellerId, ShipmentId)> {
        let mut oldest: BTreeMap<SellerId, (u64, ShipmentId)> = BTreeMap::new();
        for s in self.shipments.values() {
            for p in s.packages.iter().filter(|p| !p.delivered) {
                let cand = (s.created_at, s.shipment_id);
                oldest
                    .entry(p.seller_id)
                    .and_modify(|cur| *cur = (*cur).min(cand))
                    .or_insert(cand);
            }
        }
        let mut ranked: Vec<(u64, ShipmentId, SellerId)> =
            oldest.into_iter().map(|(seller, (t, id))| (t, id, seller)).collect();
        ranked.sort();
        ranked.truncate(limit);
        ranked.into_iter().map(|(_, id, seller)| (seller, id)).collect()
    }

    /// Marks the seller's undelivered packages in the shipment as delivered.
    pub fn deliver(
        &mut self,
        actor: Actor,
        tid: Tid,
        seller: SellerId,
        shipment_id: ShipmentId,
        at: u64,
        out: &mut Vec<Record>,
    ) -> Vec<DeliveredPackage> {
        let Some(s) = self.shipments.get_mut(&shipment_id) else {
            return Vec::new();
        };
        let before = digest(&*s);
        let mut done = Vec::new();
        for p in s.packages.iter_mut().filter(|p| p.seller_id == seller && !p.delivered) {
            p.deliver(at);
            done.push(DeliveredPackage {
                shipment_id,
                order_id: s.order_id,
                customer_id: s.customer_id,
                package_id: p.package_id,
                seller_id: seller,
                product_id: p.product_id,
                quantity: p.quantity,
            });
        }
        s.refresh_status();
        let after = digest(&*s);
        for (i, d) in done.iter().enumerate() {
            let mut r = Record::mutation(
                actor,
                tid,
                Detail::PackageDelivered {
                    shipment_id,
                    order_id: d.order_id,
                    package_id: d.package_id,
                    seller_id: seller,
                },
            );
            if i == 0 {
                r.before = Some(before.clone());
            }
            if i + 1 == done.len() {
                r.after = Some(after.clone());
            }
            out.push(r);
        }
        done
    }
}

#[derive(Debug, Default)]
pub struct CustomerService {
    customers: HashMap<CustomerId, CustomerRecord>,
}

impl CustomerService {
    pub fn insert(&mut self, c: CustomerRecord, out: &mut Vec<Record>) -> Result<(), ServiceError> {
        if self.customers.contains_key(&c.customer_id) {
            return Err(ServiceError::Ingest(format!("duplicate customer {}", c.customer_id)));
        }
        out.push(Record::mutation(
            svc(Service::Customer),
            Tid::INGEST,
            Detail::CustomerCreated {
                customer_id: c.customer_id,
            },
        ));
        self.customers.insert(c.customer_id, c);
        Ok(())
    }

    pub fn get(&self, id: CustomerId) -> Option<&CustomerRecord> {
        self.customers.get(&id)
    }

    pub fn all(&self) -> impl Iterator<Item = &CustomerRecord> {
        self.customers.values()
    }

    pub fn contains(&self, id: CustomerId) -> bool {
        self.customers.contains_key(&id)
    }

    /// `false` for an unknown customer.
    pub fn bump(&mut self, tid: Tid, id: CustomerId, counter: CustomerCounter, out: &mut Vec<Record>) -> bool {
        let Some(c) = self.customers.get_mut(&id) else {
            return false;
        };
        let slot = match counter {
            CustomerCounter::SuccessPayments => &mut c.stats.success_payments,
            CustomerCounter::FailedPayments => &mut c.stats.failed_payments,
            CustomerCounter::DeliveredPackages => &mut c.stats.delivered_packages,
            CustomerCounter::AbandonedCarts => &mut c.stats.abandoned_carts,
        };
        *slot += 1;
        out.push(Record::mutation(
            svc(Service::Customer),
            tid,
            Detail::CustomerStat {
                customer_id: id,
                counter,
                value: *slot,
            },
        ));
        true
    }
}

#[derive(Debug, Default)]
pub struct SellerService {
    sellers: HashMap<SellerId, SellerRecord>,
}

impl SellerService {
    pub fn insert(&mut self, s: SellerRecord, out: &mut Vec<Record>) -> Result<(), ServiceError> {
        if self.sellers.contains_key(&s.seller_id) {
            return Err(ServiceError::Ingest(format!("duplicate seller {}", s.seller_id)));
        }
        out.push(Record::mutation(
            svc(Service::Seller),
            Tid::INGEST,
            Detail::SellerCreated { seller_id: s.seller_id },
        ));
        self.sellers.insert(s.seller_id, s);
        Ok(())
    }

    pub fn contains(&self, id: SellerId) -> bool {
        self.sellers.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.sellers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sellers.is_empty()
    }
}
