//! HTTP/JSON front over one in-process marketplace.
//!
//! Handlers run the blocking service calls on the blocking pool; routing
//! inside the marketplace is the same fabric the in-process driver uses.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use marketplace::domain::{CartItem, CustomerId, PaymentInfo, ProductKey, SellerId, Tid};
use marketplace::money::Money;
use marketplace::runtime::Marketplace;
use marketplace::services::ServiceError;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Caller {
    #[serde(default)]
    pub worker: u32,
    #[serde(default)]
    pub tid: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddItemBody {
    #[serde(flatten)]
    pub caller: Caller,
    pub item: CartItem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckoutBody {
    #[serde(flatten)]
    pub caller: Caller,
    #[serde(default)]
    pub payment: PaymentInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceBody {
    #[serde(flatten)]
    pub caller: Caller,
    pub price: Money,
    pub expected_version: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeleteQuery {
    #[serde(default)]
    pub worker: u32,
    #[serde(default)]
    pub tid: u64,
    pub expected_version: Option<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutcomeQuery {
    pub deadline: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Accepted {
    pub tid: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message) = match self.0 {
            ServiceError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ServiceError::Conflict(m) => (StatusCode::CONFLICT, "conflict", m),
            ServiceError::InvalidRequest(m) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", m),
            other => (StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        };
        let body = ErrorBody {
            kind: kind.into(),
            message,
        };
        (status, Json(body)).into_response()
    }
}

type Shared = State<Arc<Marketplace>>;
type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(market: Arc<Marketplace>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Marketplace) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&market))
        .await
        .map_err(|e| ApiError(ServiceError::Transport(e.to_string())))?
        .map_err(ApiError)
}

async fn now(State(m): Shared) -> Json<u64> {
    Json(m.now())
}

async fn open_session(
    State(m): Shared,
    Path(customer): Path<CustomerId>,
    Json(c): Json<Caller>,
) -> ApiResult<StatusCode> {
    blocking(m, move |m| m.open_session(c.worker, Tid(c.tid), customer)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn add_item(
    State(m): Shared,
    Path(customer): Path<CustomerId>,
    Json(b): Json<AddItemBody>,
) -> ApiResult<StatusCode> {
    blocking(m, move |m| {
        m.add_item(b.caller.worker, Tid(b.caller.tid), customer, b.item)
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn checkout(
    State(m): Shared,
    Path(customer): Path<CustomerId>,
    Json(b): Json<CheckoutBody>,
) -> ApiResult<(StatusCode, Json<Accepted>)> {
    let tid = b.caller.tid;
    blocking(m, move |m| m.checkout(b.caller.worker, Tid(tid), customer, b.payment)).await?;
    Ok((StatusCode::ACCEPTED, Json(Accepted { tid })))
}

async fn outcome(
    State(m): Shared,
    Path(tid): Path<u64>,
    Query(q): Query<OutcomeQuery>,
) -> ApiResult<impl IntoResponse> {
    let o = blocking(m, move |m| m.await_outcome(Tid(tid), q.deadline)).await?;
    Ok(Json(o))
}

async fn update_price(
    State(m): Shared,
    Path((seller, product)): Path<(SellerId, u64)>,
    Json(b): Json<PriceBody>,
) -> ApiResult<impl IntoResponse> {
    let key = ProductKey::new(seller, product);
    let rec = blocking(m, move |m| {
        m.update_price(b.caller.worker, Tid(b.caller.tid), key, b.price, b.expected_version)
    })
    .await?;
    Ok(Json(rec))
}

async fn delete_product(
    State(m): Shared,
    Path((seller, product)): Path<(SellerId, u64)>,
    Query(q): Query<DeleteQuery>,
) -> ApiResult<impl IntoResponse> {
    let key = ProductKey::new(seller, product);
    let rec = blocking(m, move |m| {
        m.delete_product(q.worker, Tid(q.tid), key, q.expected_version)
    })
    .await?;
    Ok(Json(rec))
}

async fn deliver(State(m): Shared, Json(c): Json<Caller>) -> ApiResult<impl IntoResponse> {
    let delivered = blocking(m, move |m| m.update_delivery(c.worker, Tid(c.tid))).await?;
    Ok(Json(delivered))
}

async fn dashboard(State(m): Shared, Path(seller): Path<SellerId>) -> ApiResult<impl IntoResponse> {
    let d = blocking(m, move |m| m.dashboard(seller)).await?;
    Ok(Json(d))
}

async fn drain(State(m): Shared) -> ApiResult<impl IntoResponse> {
    let n = blocking(m, |m| m.drain()).await?;
    Ok(Json(n))
}

async fn audit(State(m): Shared) -> impl IntoResponse {
    Json(m.audit().snapshot())
}

async fn stock(State(m): Shared) -> impl IntoResponse {
    Json(m.snapshot().stock)
}

pub fn router(market: Arc<Marketplace>) -> Router {
    Router::new()
        .route("/now", get(now))
        .route("/session/{customer}", post(open_session))
        .route("/cart/{customer}/item", post(add_item))
        .route("/cart/{customer}/checkout", post(checkout))
        .route("/outcome/{tid}", get(outcome))
        .route("/product/{seller}/{product}/price", patch(update_price))
        .route("/product/{seller}/{product}", delete(delete_product))
        .route("/shipment/deliver", patch(deliver))
        .route("/seller/{seller}/dashboard", get(dashboard))
        .route("/admin/drain", post(drain))
        .route("/admin/audit", get(audit))
        .route("/admin/stock", get(stock))
        .with_state(market)
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(std::io::Error::other("server thread panicked")),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

/// Binds `addr` and serves on a background thread. Binding errors (such as
/// a busy port) are returned before the thread starts serving.
pub fn spawn(market: Arc<Marketplace>, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            axum::serve(listener, router(market))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
