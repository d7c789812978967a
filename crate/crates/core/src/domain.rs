//! Marketplace domain values and the pure computations shared by every service.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::money::Money;

pub type SellerId = u64;
pub type ProductId = u64;
pub type CustomerId = u64;
pub type OrderId = u64;
pub type ShipmentId = u64;

/// Transaction identifier. Allocated from one global counter by the driver and
/// carried unchanged through every event of a business transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tid(pub u64);

impl Tid {
    /// Tid used for records created during ingestion.
    pub const INGEST: Tid = Tid(0);
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProductKey {
    pub seller_id: SellerId,
    pub product_id: ProductId,
}

impl ProductKey {
    pub const fn new(seller_id: SellerId, product_id: ProductId) -> Self {
        Self { seller_id, product_id }
    }
}

impl fmt::Display for ProductKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.seller_id, self.product_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("illegal state: {0}")]
    IllegalState(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub seller_id: SellerId,
    pub product_id: ProductId,
    pub name: String,
    pub price: Money,
    pub freight_value: Money,
    pub version: u64,
    pub active: bool,
}

impl ProductRecord {
    pub fn key(&self) -> ProductKey {
        ProductKey::new(self.seller_id, self.product_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StockItem {
    pub seller_id: SellerId,
    pub product_id: ProductId,
    pub qty_available: u64,
    pub qty_reserved: u64,
    pub version: u64,
    pub active: bool,
}

impl StockItem {
    pub fn key(&self) -> ProductKey {
        ProductKey::new(self.seller_id, self.product_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CartStatus {
    Open,
    CheckingOut,
    CheckedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartItem {
    pub seller_id: SellerId,
    pub product_id: ProductId,
    pub unit_price: Money,
    pub freight_value: Money,
    pub quantity: u32,
    pub applied_price_version: u64,
    #[serde(default)]
    pub voucher: Money,
}

impl CartItem {
    pub fn key(&self) -> ProductKey {
        ProductKey::new(self.seller_id, self.product_id)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.quantity == 0 {
            return Err(DomainError::InvalidInput("cart item quantity must be >= 1".into()));
        }
        if self.unit_price.is_negative() || self.freight_value.is_negative() {
            return Err(DomainError::InvalidInput("negative price".into()));
        }
        if self.voucher.is_negative() {
            return Err(DomainError::InvalidInput("negative voucher".into()));
        }
        if self.applied_price_version == 0 {
            return Err(DomainError::InvalidInput("price version must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cart {
    pub customer_id: CustomerId,
    pub items: Vec<CartItem>,
    pub status: CartStatus,
}

impl Cart {
    pub fn new(customer_id: CustomerId) -> Self {
        Self {
            customer_id,
            items: Vec::new(),
            status: CartStatus::Open,
        }
    }

    /// Inserts the item, replacing any line for the same product.
    pub fn upsert(&mut self, item: CartItem) -> Result<(), DomainError> {
        if self.status != CartStatus::Open {
            return Err(DomainError::IllegalState(format!(
                "cart {} is {:?}",
                self.customer_id, self.status
            )));
        }
        item.validate()?;
        match self.items.iter_mut().find(|i| i.key() == item.key()) {
            Some(line) => *line = item,
            None => self.items.push(item),
        }
        Ok(())
    }
}

/// A cart line after stock confirmation. `quantity` is the confirmed quantity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderItem {
    pub seller_id: SellerId,
    pub product_id: ProductId,
    pub unit_price: Money,
    pub freight_value: Money,
    pub quantity: u32,
    pub requested_quantity: u32,
    pub applied_price_version: u64,
    pub voucher: Money,
}

impl OrderItem {
    pub fn from_cart(item: &CartItem, confirmed: u32) -> Self {
        Self {
            seller_id: item.seller_id,
            product_id: item.product_id,
            unit_price: item.unit_price,
            freight_value: item.freight_value,
            quantity: confirmed,
            requested_quantity: item.quantity,
            applied_price_version: item.applied_price_version,
            voucher: item.voucher,
        }
    }

    pub fn key(&self) -> ProductKey {
        ProductKey::new(self.seller_id, self.product_id)
    }

    pub fn subtotal(&self) -> Money {
        self.unit_price * self.quantity
    }

    /// Voucher applied to this line, capped at the line subtotal.
    pub fn discount(&self) -> Money {
        self.voucher.min(self.subtotal()).max(Money::ZERO)
    }

    /// Amount payable for this line once its discount is applied.
    pub fn amount(&self) -> Money {
        self.subtotal() - self.discount()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrderStatus {
    Invoiced,
    PaymentProcessed,
    PaymentFailed,
    ReadyForShipment,
    InTransit,
    Delivered,
}

impl OrderStatus {
    pub fn can_transition(self, to: OrderStatus) -> bool {
        use OrderStatus::*;
        matches!(
            (self, to),
            (Invoiced, PaymentProcessed)
                | (Invoiced, PaymentFailed)
                | (PaymentProcessed, ReadyForShipment)
                | (ReadyForShipment, InTransit)
                | (InTransit, Delivered)
        )
    }

    /// Statuses counted as "in progress" by the seller dashboard.
    pub fn in_progress(self) -> bool {
        use OrderStatus::*;
        matches!(self, Invoiced | PaymentProcessed | ReadyForShipment | InTransit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub order_id: OrderId,
    pub invoice_number: String,
    pub customer_id: CustomerId,
    pub items: Vec<OrderItem>,
    pub total_amount: Money,
    pub total_freight: Money,
    pub total_discount: Money,
    pub status: OrderStatus,
    pub created_at: u64,
}

impl OrderRecord {
    pub fn transition(&mut self, to: OrderStatus) -> Result<OrderStatus, DomainError> {
        if !self.status.can_transition(to) {
            return Err(DomainError::IllegalState(format!(
                "order {}: {:?} -> {:?}",
                self.order_id, self.status, to
            )));
        }
        Ok(std::mem::replace(&mut self.status, to))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShipmentStatus {
    Approved,
    DeliveryInProgress,
    Concluded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Package {
    pub package_id: u32,
    pub seller_id: SellerId,
    pub product_id: ProductId,
    pub quantity: u32,
    pub delivered: bool,
    pub delivered_at: Option<u64>,
}

impl Package {
    pub fn deliver(&mut self, at: u64) {
        self.delivered = true;
        self.delivered_at = Some(at);
    }
}

/// One shipment per order; packages carry their own seller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShipmentRecord {
    pub shipment_id: ShipmentId,
    pub order_id: OrderId,
    pub customer_id: CustomerId,
    pub packages: Vec<Package>,
    pub status: ShipmentStatus,
    pub created_at: u64,
}

impl ShipmentRecord {
    pub fn refresh_status(&mut self) {
        let delivered = self.packages.iter().filter(|p| p.delivered).count();
        self.status = if delivered == self.packages.len() {
            ShipmentStatus::Concluded
        } else if delivered > 0 {
            ShipmentStatus::DeliveryInProgress
        } else {
            ShipmentStatus::Approved
        };
    }

    pub fn has_undelivered_for(&self, seller: SellerId) -> bool {
        self.packages.iter().any(|p| p.seller_id == seller && !p.delivered)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomerStats {
    pub success_payments: u64,
    pub failed_payments: u64,
    pub delivered_packages: u64,
    pub abandoned_carts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomerRecord {
    pub customer_id: CustomerId,
    pub name: String,
    pub address: String,
    pub stats: CustomerStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SellerRecord {
    pub seller_id: SellerId,
    pub name: String,
}

/// Payment instructions supplied with a checkout. Approval is decided by the
/// driver so that services stay deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentInfo {
    pub method: String,
    pub approve: bool,
}

impl Default for PaymentInfo {
    fn default() -> Self {
        Self {
            method: "CREDIT_CARD".into(),
            approve: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderTotals {
    pub total_amount: Money,
    pub total_freight: Money,
    pub total_discount: Money,
}

pub fn compute_order_total(items: &[OrderItem]) -> Result<OrderTotals, DomainError> {
    if items.is_empty() {
        return Err(DomainError::InvalidInput("order has no items".into()));
    }
    if let Some(bad) = items.iter().find(|i| i.quantity == 0) {
        return Err(DomainError::InvalidInput(format!(
            "item {} has zero quantity",
            bad.key()
        )));
    }
    let mut totals = OrderTotals {
        total_amount: Money::ZERO,
        total_freight: Money::ZERO,
        total_discount: Money::ZERO,
    };
    for item in items {
        totals.total_amount += item.amount();
        totals.total_freight += item.freight_value * item.quantity;
        totals.total_discount += item.discount();
    }
    Ok(totals)
}

pub fn next_invoice_number(customer_id: CustomerId, order_sequence: u64) -> String {
    format!("{customer_id}-{order_sequence}")
}

/// One package per order item, numbered from 1 in item order.
pub fn assemble_packages(order: &OrderRecord) -> Result<Vec<Package>, DomainError> {
    if order.status != OrderStatus::ReadyForShipment {
        return Err(DomainError::IllegalState(format!(
            "order {} is {:?}, expected READY_FOR_SHIPMENT",
            order.order_id, order.status
        )));
    }
    Ok(order
        .items
        .iter()
        .zip(1u32..)
        .map(|(item, package_id)| Package {
            package_id,
            seller_id: item.seller_id,
            product_id: item.product_id,
            quantity: item.quantity,
            delivered: false,
            delivered_at: None,
        })
        .collect())
}
