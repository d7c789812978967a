//! Blocking HTTP client that lets the driver run against the HTTP front.

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use marketplace::audit::AuditEntry;
use marketplace::domain::{CartItem, CustomerId, PaymentInfo, ProductKey, ProductRecord, SellerId, StockItem, Tid};
use marketplace::driver::MarketplaceClient;
use marketplace::money::Money;
use marketplace::runtime::{CheckoutOutcome, Dashboard};
use marketplace::services::{DeliveredPackage, ServiceError};

use crate::server::{AddItemBody, Caller, CheckoutBody, ErrorBody, PriceBody};

#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: Client,
}

fn transport(e: reqwest::Error) -> ServiceError {
    ServiceError::Transport(e.to_string())
}

impl HttpClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_owned(),
            http: Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> Result<reqwest::blocking::Response, ServiceError> {
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let message = resp
            .json::<ErrorBody>()
            .map(|b| b.message)
            .unwrap_or_else(|e| format!("status {status}: {e}"));
        Err(match status {
            StatusCode::NOT_FOUND => ServiceError::NotFound(message),
            StatusCode::CONFLICT => ServiceError::Conflict(message),
            StatusCode::UNPROCESSABLE_ENTITY => ServiceError::InvalidRequest(message),
            _ => ServiceError::Transport(message),
        })
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ServiceError> {
        self.send(req)?.json().map_err(transport)
    }

    pub fn audit(&self) -> Result<Vec<AuditEntry>, ServiceError> {
        self.json(self.http.get(self.url("/admin/audit")))
    }

    pub fn stock(&self) -> Result<Vec<StockItem>, ServiceError> {
        self.json(self.http.get(self.url("/admin/stock")))
    }

    pub fn delivered(&self, worker: u32, tid: Tid) -> Result<Vec<DeliveredPackage>, ServiceError> {
        self.json(
            self.http
                .patch(self.url("/shipment/deliver"))
                .json(&Caller { worker, tid: tid.0 }),
        )
    }
}

impl MarketplaceClient for HttpClient {
    fn now(&self) -> u64 {
        self.json(self.http.get(self.url("/now"))).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "clock read failed");
            0
        })
    }

    fn open_session(&self, worker: u32, tid: Tid, customer: CustomerId) -> Result<(), ServiceError> {
        let req = self
            .http
            .post(self.url(&format!("/session/{customer}")))
            .json(&Caller { worker, tid: tid.0 });
        self.send(req).map(|_| ())
    }

    fn add_item(&self, worker: u32, tid: Tid, customer: CustomerId, item: CartItem) -> Result<(), ServiceError> {
        let body = AddItemBody {
            caller: Caller { worker, tid: tid.0 },
            item,
        };
        let req = self.http.post(self.url(&format!("/cart/{customer}/item"))).json(&body);
        self.send(req).map(|_| ())
    }

    fn checkout(&self, worker: u32, tid: Tid, customer: CustomerId, payment: PaymentInfo) -> Result<(), ServiceError> {
        let body = CheckoutBody {
            caller: Caller { worker, tid: tid.0 },
            payment,
        };
        let req = self
            .http
            .post(self.url(&format!("/cart/{customer}/checkout")))
            .json(&body);
        self.send(req).map(|_| ())
    }

    fn await_outcome(&self, tid: Tid, deadline: u64) -> Result<Option<CheckoutOutcome>, ServiceError> {
        self.json(
            self.http
                .get(self.url(&format!("/outcome/{}", tid.0)))
                .query(&[("deadline", deadline)]),
        )
    }

    fn update_price(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        price: Money,
        expected_version: u64,
    ) -> Result<ProductRecord, ServiceError> {
        let body = PriceBody {
            caller: Caller { worker, tid: tid.0 },
            price,
            expected_version: Some(expected_version),
        };
        let path = format!("/product/{}/{}/price", key.seller_id, key.product_id);
        self.json(self.http.patch(self.url(&path)).json(&body))
    }

    fn delete_product(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        expected_version: u64,
    ) -> Result<ProductRecord, ServiceError> {
        let path = format!("/product/{}/{}", key.seller_id, key.product_id);
        let req = self.http.delete(self.url(&path)).query(&[
            ("worker", u64::from(worker)),
            ("tid", tid.0),
            ("expected_version", expected_version),
        ]);
        self.json(req)
    }

    fn update_delivery(&self, worker: u32, tid: Tid) -> Result<usize, ServiceError> {
        self.delivered(worker, tid).map(|d| d.len())
    }

    fn dashboard(&self, _worker: u32, _tid: Tid, seller: SellerId) -> Result<Dashboard, ServiceError> {
        self.json(self.http.get(self.url(&format!("/seller/{seller}/dashboard"))))
    }

    fn drain(&self) -> Result<(), ServiceError> {
        self.json::<usize>(self.http.post(self.url("/admin/drain"))).map(|_| ())
    }
}
