//! Workload configuration and transaction types.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxType {
    Checkout,
    PriceUpdate,
    ProductDelete,
    UpdateDelivery,
    Dashboard,
}

impl TxType {
    pub const ALL: [TxType; 5] = [
        TxType::Checkout,
        TxType::PriceUpdate,
        TxType::ProductDelete,
        TxType::UpdateDelivery,
        TxType::Dashboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TxType::Checkout => "checkout",
            TxType::PriceUpdate => "price_update",
            TxType::ProductDelete => "product_delete",
            TxType::UpdateDelivery => "update_delivery",
            TxType::Dashboard => "dashboard",
        }
    }
}

impl fmt::Display for TxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransactionRatio {
    pub checkout: f64,
    pub price_update: f64,
    pub product_delete: f64,
    pub update_delivery: f64,
    pub dashboard: f64,
}

impl Default for TransactionRatio {
    fn default() -> Self {
        Self {
            checkout: 0.30,
            price_update: 0.30,
            product_delete: 0.02,
            update_delivery: 0.03,
            dashboard: 0.35,
        }
    }
}

impl TransactionRatio {
    pub fn only(ty: TxType) -> Self {
        let mut r = Self {
            checkout: 0.0,
            price_update: 0.0,
            product_delete: 0.0,
            update_delivery: 0.0,
            dashboard: 0.0,
        };
        *r.weight_mut(ty) = 1.0;
        r
    }

    pub fn weight(&self, ty: TxType) -> f64 {
        match ty {
            TxType::Checkout => self.checkout,
            TxType::PriceUpdate => self.price_update,
            TxType::ProductDelete => self.product_delete,
            TxType::UpdateDelivery => self.update_delivery,
            TxType::Dashboard => self.dashboard,
        }
    }

    fn weight_mut(&mut self, ty: TxType) -> &mut f64 {
        match ty {
            TxType::Checkout => &mut self.checkout,
            TxType::PriceUpdate => &mut self.price_update,
            TxType::ProductDelete => &mut self.product_delete,
            TxType::UpdateDelivery => &mut self.update_delivery,
            TxType::Dashboard => &mut self.dashboard,
        }
    }

    pub fn weights(&self) -> [f64; 5] {
        TxType::ALL.map(|t| self.weight(t))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid workload config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub num_customers: u64,
    pub num_sellers: u64,
    pub products_per_seller: u64,
    /// Extra products per seller held back as replacements for deleted ones.
    pub spare_products_per_seller: u64,
    pub zipf_skew: f64,
    pub transaction_ratio: TransactionRatio,
    pub concurrency_level: u32,
    pub transaction_count: Option<u64>,
    /// Measured run length in logical ticks; alternative to `transaction_count`.
    pub duration_ticks: Option<u64>,
    pub warmup: u64,
    pub payment_failure_ratio: f64,
    pub seed: u64,
    pub min_price: Money,
    pub max_price: Money,
    pub initial_stock: u64,
    pub min_cart_items: u32,
    pub max_cart_items: u32,
    pub max_quantity: u32,
    pub voucher_probability: f64,
    pub timeout_ticks: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            num_customers: 1000,
            num_sellers: 10,
            products_per_seller: 100,
            spare_products_per_seller: 10,
            zipf_skew: 1.0,
            transaction_ratio: TransactionRatio::default(),
            concurrency_level: 4,
            transaction_count: Some(10_000),
            duration_ticks: None,
            warmup: 0,
            payment_failure_ratio: 0.0,
            seed: 42,
            min_price: Money::from_cents(100),
            max_price: Money::from_cents(10_000),
            initial_stock: 100_000,
            min_cart_items: 1,
            max_cart_items: 4,
            max_quantity: 3,
            voucher_probability: 0.1,
            timeout_ticks: 10_000,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if self.num_customers == 0 || self.num_sellers == 0 || self.products_per_seller == 0 {
            return fail("customer, seller and product counts must be positive".into());
        }
        if self.concurrency_level == 0 {
            return fail("concurrency_level must be positive".into());
        }
        if u64::from(self.concurrency_level) > self.num_customers {
            return fail(format!(
                "concurrency_level {} exceeds num_customers {}",
                self.concurrency_level, self.num_customers
            ));
        }
        if !(self.zipf_skew.is_finite() && self.zipf_skew >= 0.0) {
            return fail(format!("zipf_skew {} must be a finite value >= 0", self.zipf_skew));
        }
        let weights = self.transaction_ratio.weights();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("transaction_ratio weights must be non-negative".into());
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("transaction_ratio weights sum to {sum}, expected 1"));
        }
        match (self.transaction_count, self.duration_ticks) {
            (Some(0), _) | (_, Some(0)) => return fail("run length must be positive".into()),
            (Some(_), Some(_)) => return fail("set transaction_count or duration_ticks, not both".into()),
            (None, None) => return fail("one of transaction_count or duration_ticks is required".into()),
            _ => {}
        }
        for (name, p) in [
            ("payment_failure_ratio", self.payment_failure_ratio),
            ("voucher_probability", self.voucher_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.min_price.is_negative() || self.min_price > self.max_price {
            return fail(format!(
                "price range {}..{} is empty or negative",
                self.min_price, self.max_price
            ));
        }
        if self.min_cart_items == 0 || self.min_cart_items > self.max_cart_items {
            return fail("cart item range must satisfy 1 <= min <= max".into());
        }
        if self.max_quantity == 0 {
            return fail("max_quantity must be positive".into());
        }
        if self.timeout_ticks == 0 {
            return fail("timeout_ticks must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        WorkloadConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_ratio_and_affinity() {
        let mut c = WorkloadConfig::default();
        c.transaction_ratio.checkout = 0.5;
        assert!(c.validate().is_err());

        let c = WorkloadConfig {
            num_customers: 2,
            concurrency_level: 3,
            ..WorkloadConfig::default()
        };
        assert!(c.validate().unwrap_err().0.contains("concurrency_level"));
    }

    #[test]
    fn rejects_zero_counts() {
        let c = WorkloadConfig {
            num_sellers: 0,
            ..WorkloadConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn only_puts_all_weight_on_one_type() {
        let r = TransactionRatio::only(TxType::Checkout);
        assert_eq!(r.weights(), [1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
