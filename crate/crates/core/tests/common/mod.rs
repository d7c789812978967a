#![allow(dead_code)]

use std::path::{Path, PathBuf};

use marketplace::audit::TxOutcome;
use marketplace::consistency::ConsistencyConfig;
use marketplace::dataset::{generate_data, Dataset};
use marketplace::domain::{CartItem, CustomerId, PaymentInfo, ProductKey, Tid};
use marketplace::experiment::ExperimentSpec;
use marketplace::fabric::DeliveryConfig;
use marketplace::runtime::{CheckoutOutcome, Marketplace, RuntimeConfig};
use marketplace::workload::WorkloadConfig;

pub fn spec_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}

pub fn load_spec(name: &str) -> ExperimentSpec {
    ExperimentSpec::from_path(&spec_path(name)).unwrap()
}

pub fn workload(sellers: u64, products: u64, customers: u64) -> WorkloadConfig {
    WorkloadConfig {
        num_sellers: sellers,
        products_per_seller: products,
        spare_products_per_seller: 2,
        num_customers: customers,
        concurrency_level: 1,
        ..WorkloadConfig::default()
    }
}

/// A marketplace ingested with the dataset generated from `w`.
pub fn market(consistency: ConsistencyConfig, delivery: DeliveryConfig, w: &WorkloadConfig) -> (Marketplace, Dataset) {
    let m = Marketplace::new(RuntimeConfig {
        consistency,
        delivery,
        ..RuntimeConfig::default()
    })
    .unwrap();
    let data = generate_data(w).unwrap();
    m.ingest(&data).unwrap();
    (m, data)
}

/// Cart line priced from the product service's current record.
pub fn line(m: &Marketplace, key: ProductKey, quantity: u32) -> CartItem {
    let p = m.product(&key).unwrap();
    CartItem {
        seller_id: key.seller_id,
        product_id: key.product_id,
        unit_price: p.price,
        freight_value: p.freight_value,
        quantity,
        applied_price_version: p.version,
        voucher: marketplace::money::Money::ZERO,
    }
}

/// Opens a session, adds the lines, checks out and waits for the outcome.
pub fn checkout(
    m: &Marketplace,
    worker: u32,
    tid: u64,
    customer: CustomerId,
    lines: &[(ProductKey, u32)],
    approve: bool,
) -> CheckoutOutcome {
    let tid = Tid(tid);
    m.open_session(worker, tid, customer).unwrap();
    for &(key, qty) in lines {
        m.add_item(worker, tid, customer, line(m, key, qty)).unwrap();
    }
    let payment = PaymentInfo {
        approve,
        ..PaymentInfo::default()
    };
    m.checkout(worker, tid, customer, payment).unwrap();
    let deadline = m.now() + 1_000_000;
    m.await_outcome(tid, deadline).unwrap().unwrap_or(CheckoutOutcome {
        tid,
        outcome: TxOutcome::Aborted,
        reason: Some("no outcome".into()),
        logical_time: m.now(),
    })
}
