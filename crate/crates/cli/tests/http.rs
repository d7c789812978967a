use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::sync::Arc;

use serde_json::{json, Value};

use marketplace::dataset::{generate_data, Dataset};
use marketplace::domain::{PaymentInfo, Tid};
use marketplace::driver::{Driver, MarketplaceClient};
use marketplace::runtime::{Marketplace, RuntimeConfig};
use marketplace::services::ServiceError;
use marketplace::workload::WorkloadConfig;
use marketplace_bench::client::HttpClient;
use marketplace_bench::server::{self, ServerHandle};

fn small() -> WorkloadConfig {
    WorkloadConfig {
        num_customers: 12,
        num_sellers: 3,
        products_per_seller: 6,
        spare_products_per_seller: 2,
        concurrency_level: 1,
        transaction_count: Some(300),
        seed: 9,
        ..WorkloadConfig::default()
    }
}

fn ingested(w: &WorkloadConfig) -> (Arc<Marketplace>, Dataset) {
    let m = Arc::new(Marketplace::new(RuntimeConfig::default()).unwrap());
    let data = generate_data(w).unwrap();
    m.ingest(&data).unwrap();
    (m, data)
}

fn serve(m: Arc<Marketplace>) -> ServerHandle {
    server::spawn(m, SocketAddr::from((Ipv4Addr::LOCALHOST, 0))).unwrap()
}

#[test]
fn dashboard_answers_with_rows_and_aggregate() {
    let (m, _) = ingested(&small());
    let handle = serve(m);
    let resp = reqwest::blocking::get(format!("{}/seller/1/dashboard", handle.url())).unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().unwrap();
    assert_eq!(body["seller_id"], 1);
    assert!(body["tuples"].as_array().unwrap().is_empty());

    let resp = reqwest::blocking::get(format!("{}/seller/99/dashboard", handle.url())).unwrap();
    assert_eq!(resp.status(), 404);
    handle.stop().unwrap();
}

#[test]
fn checkout_of_an_empty_cart_is_rejected() {
    let (m, _) = ingested(&small());
    let handle = serve(m);
    let http = reqwest::blocking::Client::new();
    let caller = json!({"worker": 0, "tid": 1});
    let resp = http
        .post(format!("{}/session/1", handle.url()))
        .json(&caller)
        .send()
        .unwrap();
    assert!(resp.status().is_success());
    let mut body = caller.clone();
    body["payment"] = serde_json::to_value(PaymentInfo::default()).unwrap();
    let resp = http
        .post(format!("{}/cart/1/checkout", handle.url()))
        .json(&body)
        .send()
        .unwrap();
    assert_eq!(resp.status(), 422);
    let err: Value = resp.json().unwrap();
    assert!(err["message"].as_str().unwrap().contains("empty"), "{err}");

    let client = HttpClient::new(handle.url());
    let e = client.checkout(0, Tid(1), 1, PaymentInfo::default()).unwrap_err();
    assert!(matches!(e, ServiceError::InvalidRequest(_)), "{e:?}");
}

#[test]
fn busy_port_is_reported() {
    let taken = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
    let (m, _) = ingested(&small());
    assert!(server::spawn(m, taken.local_addr().unwrap()).is_err());

    let spec = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/saga.toml");
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_marketplace-bench"))
        .args(["serve", "--spec", spec.to_str().unwrap(), "--port"])
        .arg(taken.local_addr().unwrap().port().to_string())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn http_and_in_process_runs_agree() {
    let w = small();
    let (local, data) = ingested(&w);
    let driver = Driver::new(&*local, w.clone(), &data).unwrap();
    driver.run_workload().unwrap();
    let direct = driver.output();

    let (remote, data) = ingested(&w);
    let handle = serve(remote.clone());
    let driver = Driver::new(HttpClient::new(handle.url()), w, &data).unwrap();
    driver.run_workload().unwrap();
    let over_http = driver.output();
    let client = driver.client();

    assert_eq!(direct.measurements, over_http.measurements);
    assert_eq!(direct.dashboards, over_http.dashboards);
    assert_eq!(direct.accounting, over_http.accounting);
    assert_eq!(local.audit().snapshot(), client.audit().unwrap());
    assert_eq!(local.snapshot().stock, client.stock().unwrap());
    assert_eq!(local.snapshot(), remote.snapshot());
}
