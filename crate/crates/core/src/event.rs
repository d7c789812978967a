//! Typed events exchanged between services.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{
    CartItem, CustomerId, OrderId, OrderRecord, PaymentInfo, ProductId, ProductKey, SellerId, ShipmentId,
    ShipmentRecord, Tid,
};
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Service {
    Cart,
    Product,
    Stock,
    Order,
    Payment,
    Shipment,
    Customer,
    Seller,
}

impl Service {
    pub const ALL: [Service; 8] = [
        Service::Cart,
        Service::Product,
        Service::Stock,
        Service::Order,
        Service::Payment,
        Service::Shipment,
        Service::Customer,
        Service::Seller,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Service::Cart => "cart",
            Service::Product => "product",
            Service::Stock => "stock",
            Service::Order => "order",
            Service::Payment => "payment",
            Service::Shipment => "shipment",
            Service::Customer => "customer",
            Service::Seller => "seller",
        }
    }
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventType {
    PriceUpdated,
    ProductDeleted,
    StockReserved,
    StockReserveFailed,
    InvoiceIssued,
    PaymentProcessed,
    PaymentFailed,
    ShipmentCreated,
    PackageDelivered,
    CartCheckedOut,
    /// Emitted by a participant that could not finish its checkout step.
    CheckoutAborted,
}

impl EventType {
    pub const ALL: [EventType; 11] = [
        EventType::PriceUpdated,
        EventType::ProductDeleted,
        EventType::StockReserved,
        EventType::StockReserveFailed,
        EventType::InvoiceIssued,
        EventType::PaymentProcessed,
        EventType::PaymentFailed,
        EventType::ShipmentCreated,
        EventType::PackageDelivered,
        EventType::CartCheckedOut,
        EventType::CheckoutAborted,
    ];
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The keyed entity an event addresses at its consumer. Delivery is FIFO per
/// (source, target, entity key).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "entity", content = "id", rename_all = "lowercase")]
pub enum EntityKey {
    Product(ProductKey),
    Customer(CustomerId),
    Order(OrderId),
    Seller(SellerId),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceUpdate {
    pub key: ProductKey,
    pub price: Money,
    pub version: u64,
    /// Event id of the update this one directly follows, if any.
    pub causal_token: Option<EventId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductDeletion {
    pub key: ProductKey,
    pub version: u64,
    pub causal_token: Option<EventId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckoutRequest {
    pub customer_id: CustomerId,
    pub items: Vec<CartItem>,
    pub payment: PaymentInfo,
    pub submitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub checkout: CheckoutRequest,
    /// Confirmed quantity per cart line, in cart order.
    pub confirmed: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationFailure {
    pub checkout: CheckoutRequest,
    pub failing: Vec<ProductKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invoice {
    pub order: OrderRecord,
    pub payment: PaymentInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentResult {
    pub order: OrderRecord,
    pub approved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageDelivery {
    pub shipment_id: ShipmentId,
    pub order_id: OrderId,
    pub customer_id: CustomerId,
    pub package_id: u32,
    pub seller_id: SellerId,
    pub product_id: ProductId,
    pub quantity: u32,
    pub delivered_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckoutStage {
    Cart,
    Stock,
    Order,
    Payment,
    Shipment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortNotice {
    pub customer_id: CustomerId,
    pub stage: CheckoutStage,
    pub reason: String,
    pub order_id: Option<OrderId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Payload {
    Price(PriceUpdate),
    Deletion(ProductDeletion),
    Checkout(CheckoutRequest),
    Reservation(Reservation),
    ReservationFailure(ReservationFailure),
    Invoice(Invoice),
    Payment(PaymentResult),
    Shipment(ShipmentRecord),
    Package(PackageDelivery),
    Abort(AbortNotice),
    Empty,
}

impl Payload {
    pub fn customer_id(&self) -> Option<CustomerId> {
        match self {
            Payload::Checkout(c) => Some(c.customer_id),
            Payload::Reservation(r) => Some(r.checkout.customer_id),
            Payload::ReservationFailure(r) => Some(r.checkout.customer_id),
            Payload::Invoice(i) => Some(i.order.customer_id),
            Payload::Payment(p) => Some(p.order.customer_id),
            Payload::Shipment(s) => Some(s.customer_id),
            Payload::Package(p) => Some(p.customer_id),
            Payload::Abort(a) => Some(a.customer_id),
            Payload::Price(_) | Payload::Deletion(_) | Payload::Empty => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: EventId,
    pub tid: Tid,
    pub event_type: EventType,
    pub payload: Payload,
    pub causal_deps: BTreeSet<EventId>,
    pub source_service: Service,
    /// `None` fans the event out to every subscriber of its type.
    pub target_service: Option<Service>,
    pub entity_key: EntityKey,
}

impl Event {
    pub fn new(
        event_id: EventId,
        tid: Tid,
        event_type: EventType,
        source_service: Service,
        entity_key: EntityKey,
        payload: Payload,
    ) -> Self {
        Self {
            event_id,
            tid,
            event_type,
            payload,
            causal_deps: BTreeSet::new(),
            source_service,
            target_service: None,
            entity_key,
        }
    }

    pub fn after(mut self, dep: EventId) -> Self {
        self.causal_deps.insert(dep);
        self
    }

    pub fn after_all(mut self, deps: impl IntoIterator<Item = EventId>) -> Self {
        self.causal_deps.extend(deps);
        self
    }

    pub fn to(mut self, target: Service) -> Self {
        self.target_service = Some(target);
        self
    }

    /// Product version carried by replication events.
    pub fn product_version(&self) -> Option<(ProductKey, u64)> {
        match &self.payload {
            Payload::Price(p) => Some((p.key, p.version)),
            Payload::Deletion(d) => Some((d.key, d.version)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_json_uses_listed_field_names() {
        let e = Event::new(
            EventId(3),
            Tid(9),
            EventType::PriceUpdated,
            Service::Product,
            EntityKey::Product(ProductKey::new(1, 2)),
            Payload::Price(PriceUpdate {
                key: ProductKey::new(1, 2),
                price: Money::from_cents(1250),
                version: 4,
                causal_token: Some(EventId(1)),
            }),
        )
        .after(EventId(1))
        .to(Service::Cart);
        let v = serde_json::to_value(&e).unwrap();
        for field in [
            "event_id",
            "tid",
            "event_type",
            "payload",
            "causal_deps",
            "source_service",
            "target_service",
        ] {
            assert!(v.get(field).is_some(), "missing {field}");
        }
        assert_eq!(v["event_type"], "PriceUpdated");
        assert_eq!(v["target_service"], "cart");
        assert_eq!(v["payload"]["value"]["price"], "12.50");
        let back: Event = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }
}
