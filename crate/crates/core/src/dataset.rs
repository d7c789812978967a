//! Synthetic marketplace data.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CustomerRecord, CustomerStats, ProductKey, ProductRecord, SellerRecord, StockItem};
use crate::money::Money;
use crate::workload::{ConfigError, WorkloadConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub sellers: Vec<SellerRecord>,
    pub customers: Vec<CustomerRecord>,
    pub products: Vec<ProductRecord>,
    pub stock: Vec<StockItem>,
    /// Products in popularity order; index 0 is rank 1.
    pub ranked: Vec<ProductKey>,
    /// Replacement products, handed out in order as ranked products are deleted.
    pub spares: Vec<ProductKey>,
}

impl Dataset {
    /// Checks for duplicate keys and stock rows without a product.
    pub fn validate(&self) -> Result<(), String> {
        let mut sellers = HashSet::new();
        for s in &self.sellers {
            if !sellers.insert(s.seller_id) {
                return Err(format!("duplicate seller {}", s.seller_id));
            }
        }
        let mut customers = HashSet::new();
        for c in &self.customers {
            if !customers.insert(c.customer_id) {
                return Err(format!("duplicate customer {}", c.customer_id));
            }
        }
        let mut products = HashSet::new();
        for p in &self.products {
            if !sellers.contains(&p.seller_id) {
                return Err(format!("product {} has unknown seller", p.key()));
            }
            if !products.insert(p.key()) {
                return Err(format!("duplicate product {}", p.key()));
            }
        }
        let mut stock = HashSet::new();
        for s in &self.stock {
            if !products.contains(&s.key()) {
                return Err(format!("stock item {} has no product", s.key()));
            }
            if !stock.insert(s.key()) {
                return Err(format!("duplicate stock item {}", s.key()));
            }
        }
        Ok(())
    }

    pub fn initial_stock(&self, key: &ProductKey) -> Option<u64> {
        self.stock.iter().find(|s| s.key() == *key).map(|s| s.qty_available)
    }
}

pub fn generate_data(config: &WorkloadConfig) -> Result<Dataset, ConfigError> {
    if config.num_customers == 0 || config.num_sellers == 0 || config.products_per_seller == 0 {
        return Err(ConfigError(
            "customer, seller and product counts must be positive".into(),
        ));
    }
    if config.min_price.is_negative() || config.min_price > config.max_price {
        return Err(ConfigError("price range is empty or negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sellers = (1..=config.num_sellers)
        .map(|seller_id| SellerRecord {
            seller_id,
            name: format!("seller-{seller_id}"),
        })
        .collect();
    let customers = (1..=config.num_customers)
        .map(|customer_id| CustomerRecord {
            customer_id,
            name: format!("customer-{customer_id}"),
            address: format!("{customer_id} Market Street"),
            stats: CustomerStats::default(),
        })
        .collect();

    let per_seller = config.products_per_seller + config.spare_products_per_seller;
    let mut products = Vec::new();
    let mut stock = Vec::new();
    let mut ranked = Vec::new();
    let mut spares = Vec::new();
    // Spares are interleaved across sellers so replacements spread evenly.
    for product_id in 1..=per_seller {
        for seller_id in 1..=config.num_sellers {
            let price = Money::from_cents(rng.random_range(config.min_price.cents()..=config.max_price.cents()));
            let freight = Money::from_cents(rng.random_range(0..=price.cents() / 10));
            products.push(ProductRecord {
                seller_id,
                product_id,
                name: format!("product-{seller_id}-{product_id}"),
                price,
                freight_value: freight,
                version: 1,
                active: true,
            });
            stock.push(StockItem {
                seller_id,
                product_id,
                qty_available: config.initial_stock,
                qty_reserved: 0,
                version: 1,
                active: true,
            });
            let key = ProductKey::new(seller_id, product_id);
            if product_id <= config.products_per_seller {
                ranked.push(key);
            } else {
                spares.push(key);
            }
        }
    }
    ranked.shuffle(&mut rng);
    products.sort_by_key(ProductRecord::key);
    stock.sort_by_key(StockItem::key);
    Ok(Dataset {
        sellers,
        customers,
        products,
        stock,
        ranked,
        spares,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorkloadConfig {
        WorkloadConfig {
            num_customers: 4,
            num_sellers: 2,
            products_per_seller: 3,
            spare_products_per_seller: 0,
            ..WorkloadConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let d = generate_data(&small()).unwrap();
        assert_eq!(
            (d.sellers.len(), d.products.len(), d.stock.len(), d.customers.len()),
            (2, 6, 6, 4)
        );
        assert_eq!(d.ranked.len(), 6);
        assert!(d.spares.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = serde_json::to_vec(&generate_data(&small()).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_data(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stock_references_products() {
        let c = WorkloadConfig {
            spare_products_per_seller: 2,
            ..small()
        };
        let d = generate_data(&c).unwrap();
        d.validate().unwrap();
        let keys: HashSet<_> = d.products.iter().map(ProductRecord::key).collect();
        assert!(d.stock.iter().all(|s| keys.contains(&s.key())));
        assert_eq!(d.spares.len(), 4);
    }

    #[test]
    fn prices_within_range() {
        let c = WorkloadConfig {
            min_price: Money::from_cents(500),
            max_price: Money::from_cents(600),
            ..small()
        };
        let d = generate_data(&c).unwrap();
        assert!(d.products.iter().all(|p| (500..=600).contains(&p.price.cents())));
    }

    #[test]
    fn zero_counts_rejected() {
        let c = WorkloadConfig {
            num_customers: 0,
            ..small()
        };
        assert!(generate_data(&c).is_err());
    }

    #[test]
    fn validate_flags_duplicates_and_dangling_stock() {
        let mut d = generate_data(&small()).unwrap();
        d.stock.push(StockItem {
            product_id: 99,
            ..d.stock[0].clone()
        });
        assert!(d.validate().unwrap_err().contains("no product"));
        let mut d2 = generate_data(&small()).unwrap();
        d2.customers.push(d2.customers[0].clone());
        assert!(d2.validate().unwrap_err().contains("duplicate customer"));
    }
}
