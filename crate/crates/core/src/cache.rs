//! Driver-side product cache. Readers load an immutable snapshot per key;
//! writers replace it with compare-and-swap on the version.

use std::collections::HashMap;
use std::sync::Arc;

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};

use crate::domain::{ProductKey, ProductRecord};
use crate::money::Money;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub price: Money,
    pub freight_value: Money,
    pub version: u64,
    pub active: bool,
}

impl From<&ProductRecord> for CacheEntry {
    fn from(p: &ProductRecord) -> Self {
        Self {
            price: p.price,
            freight_value: p.freight_value,
            version: p.version,
            active: p.active,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CasError {
    #[error("unknown product {0}")]
    Unknown(ProductKey),
    #[error("version moved to {current}")]
    Retry { current: u64 },
}

#[derive(Debug, Default)]
pub struct ProductInputCache {
    entries: HashMap<ProductKey, ArcSwap<CacheEntry>>,
}

impl ProductInputCache {
    pub fn new<'a>(products: impl IntoIterator<Item = &'a ProductRecord>) -> Self {
        Self {
            entries: products
                .into_iter()
                .map(|p| (p.key(), ArcSwap::from_pointee(CacheEntry::from(p))))
                .collect(),
        }
    }

    pub fn get(&self, key: &ProductKey) -> Option<Arc<CacheEntry>> {
        self.entries.get(key).map(ArcSwap::load_full)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Installs `next` iff the cached version is still `expected_version`.
    pub fn cas(&self, key: &ProductKey, expected_version: u64, next: CacheEntry) -> Result<(), CasError> {
        let slot = self.entries.get(key).ok_or(CasError::Unknown(*key))?;
        let current = slot.load_full();
        if current.version != expected_version {
            return Err(CasError::Retry {
                current: current.version,
            });
        }
        let prev = slot.compare_and_swap(&current, Arc::new(next));
        if Arc::ptr_eq(&prev, &current) {
            Ok(())
        } else {
            Err(CasError::Retry { current: prev.version })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache() -> (ProductInputCache, ProductKey) {
        let p = ProductRecord {
            seller_id: 1,
            product_id: 1,
            name: "p".into(),
            price: Money::from_cents(100),
            freight_value: Money::ZERO,
            version: 3,
            active: true,
        };
        (ProductInputCache::new([&p]), p.key())
    }

    #[test]
    fn cas_succeeds_on_matching_version() {
        let (c, k) = cache();
        let mut next = (*c.get(&k).unwrap()).clone();
        next.version = 4;
        c.cas(&k, 3, next).unwrap();
        assert_eq!(c.get(&k).unwrap().version, 4);
    }

    #[test]
    fn cas_asks_for_retry_on_stale_version() {
        let (c, k) = cache();
        let mut next = (*c.get(&k).unwrap()).clone();
        next.version = 4;
        c.cas(&k, 3, next.clone()).unwrap();
        assert_eq!(c.cas(&k, 3, next), Err(CasError::Retry { current: 4 }));
        assert!(matches!(
            c.cas(&ProductKey::new(9, 9), 1, c.get(&k).unwrap().as_ref().clone()),
            Err(CasError::Unknown(_))
        ));
    }
}
