//! Closed-loop workload driver. Each worker owns a disjoint slice of customers,
//! submits one transaction at a time and waits for its outcome (or timeout)
//! before drawing the next.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::TxOutcome;
use crate::cache::{CacheEntry, ProductInputCache};
use crate::dataset::Dataset;
use crate::domain::{CartItem, CustomerId, PaymentInfo, ProductKey, ProductRecord, SellerId, Tid};
use crate::money::Money;
use crate::runtime::{CheckoutOutcome, Dashboard, Marketplace};
use crate::sampler::{Exhausted, KeySampler};
use crate::services::{DashboardRow, ServiceError};
use crate::workload::{ConfigError, TxType, WorkloadConfig};

/// Attempts a price update makes against concurrent writers before giving up.
const MAX_CAS_ATTEMPTS: usize = 8;

/// The operations the driver needs from a marketplace deployment.
pub trait MarketplaceClient: Sync {
    /// Current logical time.
    fn now(&self) -> u64;
    fn open_session(&self, worker: u32, tid: Tid, customer: CustomerId) -> Result<(), ServiceError>;
    fn add_item(&self, worker: u32, tid: Tid, customer: CustomerId, item: CartItem) -> Result<(), ServiceError>;
    fn checkout(&self, worker: u32, tid: Tid, customer: CustomerId, payment: PaymentInfo) -> Result<(), ServiceError>;
    fn await_outcome(&self, tid: Tid, deadline: u64) -> Result<Option<CheckoutOutcome>, ServiceError>;
    fn update_price(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        price: Money,
        expected_version: u64,
    ) -> Result<ProductRecord, ServiceError>;
    fn delete_product(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        expected_version: u64,
    ) -> Result<ProductRecord, ServiceError>;
    /// Returns the number of packages delivered.
    fn update_delivery(&self, worker: u32, tid: Tid) -> Result<usize, ServiceError>;
    fn dashboard(&self, worker: u32, tid: Tid, seller: SellerId) -> Result<Dashboard, ServiceError>;
    /// Delivers every pending event.
    fn drain(&self) -> Result<(), ServiceError>;
}

macro_rules! forward_client {
    ($($ty:ty),*) => {$(
        impl<T: MarketplaceClient + Send + ?Sized> MarketplaceClient for $ty {
            fn now(&self) -> u64 {
                (**self).now()
            }
            fn open_session(&self, worker: u32, tid: Tid, customer: CustomerId) -> Result<(), ServiceError> {
                (**self).open_session(worker, tid, customer)
            }
            fn add_item(&self, worker: u32, tid: Tid, customer: CustomerId, item: CartItem) -> Result<(), ServiceError> {
                (**self).add_item(worker, tid, customer, item)
            }
            fn checkout(&self, worker: u32, tid: Tid, customer: CustomerId, payment: PaymentInfo) -> Result<(), ServiceError> {
                (**self).checkout(worker, tid, customer, payment)
            }
            fn await_outcome(&self, tid: Tid, deadline: u64) -> Result<Option<CheckoutOutcome>, ServiceError> {
                (**self).await_outcome(tid, deadline)
            }
            fn update_price(&self, worker: u32, tid: Tid, key: ProductKey, price: Money, expected_version: u64) -> Result<ProductRecord, ServiceError> {
                (**self).update_price(worker, tid, key, price, expected_version)
            }
            fn delete_product(&self, worker: u32, tid: Tid, key: ProductKey, expected_version: u64) -> Result<ProductRecord, ServiceError> {
                (**self).delete_product(worker, tid, key, expected_version)
            }
            fn update_delivery(&self, worker: u32, tid: Tid) -> Result<usize, ServiceError> {
                (**self).update_delivery(worker, tid)
            }
            fn dashboard(&self, worker: u32, tid: Tid, seller: SellerId) -> Result<Dashboard, ServiceError> {
                (**self).dashboard(worker, tid, seller)
            }
            fn drain(&self) -> Result<(), ServiceError> {
                (**self).drain()
            }
        }
    )*};
}

forward_client!(&T, std::sync::Arc<T>);

impl MarketplaceClient for Marketplace {
    fn now(&self) -> u64 {
        Marketplace::now(self)
    }

    fn open_session(&self, worker: u32, tid: Tid, customer: CustomerId) -> Result<(), ServiceError> {
        Marketplace::open_session(self, worker, tid, customer)
    }

    fn add_item(&self, worker: u32, tid: Tid, customer: CustomerId, item: CartItem) -> Result<(), ServiceError> {
        Marketplace::add_item(self, worker, tid, customer, item)
    }

    fn checkout(&self, worker: u32, tid: Tid, customer: CustomerId, payment: PaymentInfo) -> Result<(), ServiceError> {
        Marketplace::checkout(self, worker, tid, customer, payment)
    }

    fn await_outcome(&self, tid: Tid, deadline: u64) -> Result<Option<CheckoutOutcome>, ServiceError> {
        Marketplace::await_outcome(self, tid, deadline)
    }

    fn update_price(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        price: Money,
        expected_version: u64,
    ) -> Result<ProductRecord, ServiceError> {
        Marketplace::update_price(self, worker, tid, key, price, Some(expected_version))
    }

    fn delete_product(
        &self,
        worker: u32,
        tid: Tid,
        key: ProductKey,
        expected_version: u64,
    ) -> Result<ProductRecord, ServiceError> {
        Marketplace::delete_product(self, worker, tid, key, Some(expected_version))
    }

    fn update_delivery(&self, worker: u32, tid: Tid) -> Result<usize, ServiceError> {
        Marketplace::update_delivery(self, worker, tid).map(|d| d.len())
    }

    fn dashboard(&self, _worker: u32, _tid: Tid, seller: SellerId) -> Result<Dashboard, ServiceError> {
        Marketplace::dashboard(self, seller)
    }

    fn drain(&self) -> Result<(), ServiceError> {
        Marketplace::drain(self).map(|_| ())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Exhausted(#[from] Exhausted),
    #[error("worker {0} panicked")]
    WorkerPanicked(u32),
    #[error("runtime failure: {0}")]
    Runtime(#[from] ServiceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionDescriptor {
    pub tid: Tid,
    pub tx_type: TxType,
    pub submit_tick: u64,
    pub worker_id: u32,
    pub input: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    Matched,
    Aborted,
    TimedOut,
}

/// One line of the raw measurement stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    #[serde(flatten)]
    pub descriptor: TransactionDescriptor,
    pub completion: Completion,
    pub end_tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default)]
    pub warmup: bool,
}

impl Measurement {
    pub fn latency(&self) -> u64 {
        self.end_tick.saturating_sub(self.descriptor.submit_tick)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DashboardCapture {
    pub tid: Tid,
    pub worker_id: u32,
    pub seller_id: SellerId,
    pub aggregate: Money,
    pub tuples: Vec<DashboardRow>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub submitted: u64,
    pub matched: u64,
    pub aborted: u64,
    pub timed_out: u64,
    pub pending: u64,
    pub orphan_results: u64,
    pub duplicate_results: u64,
}

impl Accounting {
    pub fn balanced(&self) -> bool {
        self.pending == 0 && self.submitted == self.matched + self.aborted + self.timed_out
    }
}

#[derive(Debug, Clone, Copy)]
enum MatchState {
    Pending,
    Done(Completion),
}

/// Pairs submitted tids with their asynchronous results.
#[derive(Debug, Default)]
pub struct ResultMatcher {
    state: Mutex<HashMap<Tid, (MatchState, bool)>>,
    orphans: AtomicU64,
    duplicates: AtomicU64,
}

impl ResultMatcher {
    pub fn submit(&self, tid: Tid, warmup: bool) {
        self.state.lock().insert(tid, (MatchState::Pending, warmup));
    }

    /// Records the first completion for `tid`; later ones are counted and ignored.
    pub fn complete(&self, tid: Tid, completion: Completion) -> bool {
        let mut state = self.state.lock();
        match state.get_mut(&tid) {
            None => {
                self.orphans.fetch_add(1, Ordering::Relaxed);
                false
            }
            Some((MatchState::Done(_), _)) => {
                self.duplicates.fetch_add(1, Ordering::Relaxed);
                false
            }
            Some((s @ MatchState::Pending, _)) => {
                *s = MatchState::Done(completion);
                true
            }
        }
    }

    /// Accounting over measured (non-warm-up) transactions.
    pub fn accounting(&self) -> Accounting {
        let mut a = Accounting {
            orphan_results: self.orphans.load(Ordering::Relaxed),
            duplicate_results: self.duplicates.load(Ordering::Relaxed),
            ..Accounting::default()
        };
        for (state, warmup) in self.state.lock().values() {
            if *warmup {
                continue;
            }
            a.submitted += 1;
            match state {
                MatchState::Pending => a.pending += 1,
                MatchState::Done(Completion::Matched) => a.matched += 1,
                MatchState::Done(Completion::Aborted) => a.aborted += 1,
                MatchState::Done(Completion::TimedOut) => a.timed_out += 1,
            }
        }
        a
    }

    pub fn clear(&self) {
        self.state.lock().clear();
        self.orphans.store(0, Ordering::Relaxed);
        self.duplicates.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub measurements: Vec<Measurement>,
    pub dashboards: Vec<DashboardCapture>,
    pub accounting: Accounting,
}

struct Outcome {
    input: String,
    completion: Completion,
    end_tick: Option<u64>,
    reason: Option<String>,
}

impl Outcome {
    fn new(input: String, completion: Completion) -> Self {
        Self {
            input,
            completion,
            end_tick: None,
            reason: None,
        }
    }

    fn aborted(input: String, reason: impl Into<String>) -> Self {
        Self {
            reason: Some(reason.into()),
            ..Self::new(input, Completion::Aborted)
        }
    }
}

/// Service errors that abort one transaction; the rest stop the run.
fn soft(e: ServiceError) -> Result<String, DriverError> {
    match e {
        ServiceError::NotFound(_) | ServiceError::Conflict(_) | ServiceError::InvalidRequest(_) => Ok(e.to_string()),
        other => Err(other.into()),
    }
}

pub struct Driver<C: MarketplaceClient> {
    client: C,
    config: WorkloadConfig,
    cache: ProductInputCache,
    sampler: RwLock<KeySampler>,
    next_tid: AtomicU64,
    phase: AtomicU64,
    stop: AtomicBool,
    matcher: ResultMatcher,
    measurements: Mutex<Vec<Measurement>>,
    dashboards: Mutex<Vec<DashboardCapture>>,
}

impl<C: MarketplaceClient> Driver<C> {
    /// Builds a driver for an already ingested marketplace.
    pub fn new(client: C, config: WorkloadConfig, dataset: &Dataset) -> Result<Self, DriverError> {
        config.validate()?;
        Ok(Self {
            client,
            cache: ProductInputCache::new(&dataset.products),
            sampler: RwLock::new(KeySampler::new(
                config.zipf_skew,
                dataset.ranked.clone(),
                dataset.spares.clone(),
            )),
            config,
            next_tid: AtomicU64::new(0),
            phase: AtomicU64::new(0),
            stop: AtomicBool::new(false),
            matcher: ResultMatcher::default(),
            measurements: Mutex::default(),
            dashboards: Mutex::default(),
        })
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.config
    }

    pub fn client(&self) -> &C {
        &self.client
    }

    pub fn cache(&self) -> &ProductInputCache {
        &self.cache
    }

    pub fn matcher(&self) -> &ResultMatcher {
        &self.matcher
    }

    /// Runs `config.warmup` checkouts excluded from statistics, then drains.
    pub fn warmup(&self) -> Result<(), DriverError> {
        if self.config.warmup == 0 {
            return Ok(());
        }
        let only_checkout = WeightedIndex::new(crate::workload::TransactionRatio::only(TxType::Checkout).weights())
            .expect("one positive weight");
        self.run_phase(Some(self.config.warmup), None, &only_checkout, true)?;
        self.client.drain()?;
        Ok(())
    }

    /// Runs the measured workload and drains the fabric afterwards.
    pub fn run_workload(&self) -> Result<(), DriverError> {
        let mix = WeightedIndex::new(self.config.transaction_ratio.weights())
            .map_err(|e| ConfigError(format!("transaction_ratio: {e}")))?;
        let deadline = self.config.duration_ticks.map(|d| self.client.now() + d);
        self.run_phase(self.config.transaction_count, deadline, &mix, false)?;
        self.client.drain()?;
        Ok(())
    }

    pub fn output(&self) -> RunOutput {
        let mut measurements = self.measurements.lock().clone();
        measurements.sort_by_key(|m| m.descriptor.tid);
        let mut dashboards = self.dashboards.lock().clone();
        dashboards.sort_by_key(|d| d.tid);
        RunOutput {
            measurements,
            dashboards,
            accounting: self.matcher.accounting(),
        }
    }

    fn run_phase(
        &self,
        count: Option<u64>,
        deadline: Option<u64>,
        mix: &WeightedIndex<f64>,
        warmup: bool,
    ) -> Result<(), DriverError> {
        let phase = self.phase.fetch_add(1, Ordering::SeqCst);
        let limit = count.map(|n| self.next_tid.load(Ordering::SeqCst) + n);
        self.stop.store(false, Ordering::SeqCst);
        let workers = self.config.concurrency_level;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| scope.spawn(move || self.worker(w, phase, limit, deadline, mix, warmup)))
                .collect();
            let mut first = None;
            for (w, h) in handles.into_iter().enumerate() {
                let r = h.join().unwrap_or(Err(DriverError::WorkerPanicked(w as u32)));
                if let Err(e) = r {
                    self.stop.store(true, Ordering::SeqCst);
                    first.get_or_insert(e);
                }
            }
            first.map_or(Ok(()), Err)
        })
    }

    fn next_tid(&self, limit: Option<u64>) -> Option<Tid> {
        self.next_tid
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |t| match limit {
                Some(l) if t >= l => None,
                _ => Some(t + 1),
            })
            .ok()
            .map(|t| Tid(t + 1))
    }

    fn worker(
        &self,
        w: u32,
        phase: u64,
        limit: Option<u64>,
        deadline: Option<u64>,
        mix: &WeightedIndex<f64>,
        warmup: bool,
    ) -> Result<(), DriverError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(phase << 32 | u64::from(w));
        let workers = u64::from(self.config.concurrency_level);
        let owned: Vec<CustomerId> = (1..=self.config.num_customers)
            .filter(|c| (c - 1) % workers == u64::from(w))
            .collect();
        let r = self.worker_loop(w, &owned, limit, deadline, mix, warmup, &mut rng);
        if r.is_err() {
            self.stop.store(true, Ordering::SeqCst);
        }
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn worker_loop(
        &self,
        w: u32,
        owned: &[CustomerId],
        limit: Option<u64>,
        deadline: Option<u64>,
        mix: &WeightedIndex<f64>,
        warmup: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), DriverError> {
        loop {
            if self.stop.load(Ordering::SeqCst) || deadline.is_some_and(|d| self.client.now() >= d) {
                return Ok(());
            }
            let Some(tid) = self.next_tid(limit) else {
                return Ok(());
            };
            let ty = TxType::ALL[mix.sample(rng)];
            self.matcher.submit(tid, warmup);
            let submit_tick = self.client.now();
            let outcome = match ty {
                TxType::Checkout => self.checkout(w, tid, owned, submit_tick, rng)?,
                TxType::PriceUpdate => self.price_update(w, tid, rng)?,
                TxType::ProductDelete => self.product_delete(w, tid, rng)?,
                TxType::UpdateDelivery => match self.client.update_delivery(w, tid) {
                    Ok(n) => Outcome::new(format!("packages={n}"), Completion::Matched),
                    Err(e) => Outcome::aborted(String::new(), soft(e)?),
                },
                TxType::Dashboard => self.dashboard(w, tid, rng)?,
            };
            let end_tick = outcome.end_tick.unwrap_or_else(|| self.client.now());
            self.matcher.complete(tid, outcome.completion);
            self.measurements.lock().push(Measurement {
                descriptor: TransactionDescriptor {
                    tid,
                    tx_type: ty,
                    submit_tick,
                    worker_id: w,
                    input: outcome.input,
                },
                completion: outcome.completion,
                end_tick,
                reason: outcome.reason,
                warmup,
            });
        }
    }

    fn checkout(
        &self,
        w: u32,
        tid: Tid,
        owned: &[CustomerId],
        submit_tick: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Outcome, DriverError> {
        let customer = owned[rng.random_range(0..owned.len())];
        let wanted = rng.random_range(self.config.min_cart_items..=self.config.max_cart_items) as usize;
        let mut items: Vec<CartItem> = Vec::with_capacity(wanted);
        for _ in 0..wanted * 4 {
            if items.len() == wanted {
                break;
            }
            let (_, key) = self.sampler.read().sample(rng)?;
            if items.iter().any(|i| i.key() == key) {
                continue;
            }
            let Some(entry) = self.cache.get(&key) else { continue };
            if !entry.active {
                continue;
            }
            let quantity = rng.random_range(1..=self.config.max_quantity);
            let subtotal = entry.price * quantity;
            let voucher = if rng.random_bool(self.config.voucher_probability) {
                Money::from_cents(rng.random_range(0..=subtotal.cents() / 10))
            } else {
                Money::ZERO
            };
            items.push(CartItem {
                seller_id: key.seller_id,
                product_id: key.product_id,
                unit_price: entry.price,
                freight_value: entry.freight_value,
                quantity,
                applied_price_version: entry.version,
                voucher,
            });
        }
        let approve = !rng.random_bool(self.config.payment_failure_ratio);
        let input = format!("customer={customer} items={} approve={approve}", items.len());

        if let Err(e) = self.client.open_session(w, tid, customer) {
            return Ok(Outcome::aborted(input, soft(e)?));
        }
        for item in items {
            if let Err(e) = self.client.add_item(w, tid, customer, item) {
                return Ok(Outcome::aborted(input, soft(e)?));
            }
        }
        let payment = PaymentInfo {
            approve,
            ..PaymentInfo::default()
        };
        if let Err(e) = self.client.checkout(w, tid, customer, payment) {
            return Ok(Outcome::aborted(input, soft(e)?));
        }
        let deadline = submit_tick + self.config.timeout_ticks;
        Ok(match self.client.await_outcome(tid, deadline)? {
            Some(o) => Outcome {
                input,
                completion: match o.outcome {
                    TxOutcome::Committed => Completion::Matched,
                    TxOutcome::Aborted => Completion::Aborted,
                },
                end_tick: Some(o.logical_time),
                reason: o.reason,
            },
            None => Outcome {
                end_tick: Some(deadline),
                reason: Some("timed out".into()),
                ..Outcome::new(input, Completion::TimedOut)
            },
        })
    }

    fn price_update(&self, w: u32, tid: Tid, rng: &mut ChaCha8Rng) -> Result<Outcome, DriverError> {
        let (_, key) = self.sampler.read().sample(rng)?;
        let price = Money::from_cents(rng.random_range(self.config.min_price.cents()..=self.config.max_price.cents()));
        let input = format!("product={key} price={price}");
        for _ in 0..MAX_CAS_ATTEMPTS {
            let Some(entry) = self.cache.get(&key) else {
                return Ok(Outcome::aborted(input, "unknown product"));
            };
            if !entry.active {
                return Ok(Outcome::aborted(input, "product deleted"));
            }
            match self.client.update_price(w, tid, key, price, entry.version) {
                Ok(rec) => {
                    let next = CacheEntry {
                        price,
                        version: rec.version,
                        ..(*entry).clone()
                    };
                    let installed = self.cache.cas(&key, entry.version, next);
                    debug_assert!(installed.is_ok(), "service accepted a stale version");
                    return Ok(Outcome::new(input, Completion::Matched));
                }
                Err(ServiceError::Conflict(_)) => std::thread::yield_now(),
                Err(e) => return Ok(Outcome::aborted(input, soft(e)?)),
            }
        }
        Ok(Outcome::aborted(input, "version conflict"))
    }

    fn product_delete(&self, w: u32, tid: Tid, rng: &mut ChaCha8Rng) -> Result<Outcome, DriverError> {
        let (_, key) = self.sampler.read().sample(rng)?;
        let input = format!("product={key}");
        for _ in 0..MAX_CAS_ATTEMPTS {
            let Some(entry) = self.cache.get(&key) else {
                return Ok(Outcome::aborted(input, "unknown product"));
            };
            if !entry.active {
                return Ok(Outcome::aborted(input, "product deleted"));
            }
            match self.client.delete_product(w, tid, key, entry.version) {
                Ok(rec) => {
                    let next = CacheEntry {
                        version: rec.version,
                        active: false,
                        ..(*entry).clone()
                    };
                    let installed = self.cache.cas(&key, entry.version, next);
                    debug_assert!(installed.is_ok(), "service accepted a stale version");
                    self.sampler.write().on_delete(key);
                    return Ok(Outcome::new(input, Completion::Matched));
                }
                Err(ServiceError::Conflict(_)) => std::thread::yield_now(),
                Err(e) => return Ok(Outcome::aborted(input, soft(e)?)),
            }
        }
        Ok(Outcome::aborted(input, "version conflict"))
    }

    fn dashboard(&self, w: u32, tid: Tid, rng: &mut ChaCha8Rng) -> Result<Outcome, DriverError> {
        let seller = rng.random_range(1..=self.config.num_sellers);
        let input = format!("seller={seller}");
        match self.client.dashboard(w, tid, seller) {
            Ok(d) => {
                self.dashboards.lock().push(DashboardCapture {
                    tid,
                    worker_id: w,
                    seller_id: d.seller_id,
                    aggregate: d.aggregate,
                    tuples: d.tuples,
                });
                Ok(Outcome::new(input, Completion::Matched))
            }
            Err(e) => Ok(Outcome::aborted(input, soft(e)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matcher_pairs_out_of_order_results() {
        let m = ResultMatcher::default();
        for t in 1..=3 {
            m.submit(Tid(t), false);
        }
        for t in [2, 1, 3] {
            assert!(m.complete(Tid(t), Completion::Matched));
        }
        let a = m.accounting();
        assert_eq!((a.matched, a.orphan_results), (3, 0));
        assert!(a.balanced());
    }

    #[test]
    fn matcher_ignores_duplicates_and_counts_orphans() {
        let m = ResultMatcher::default();
        m.submit(Tid(2), false);
        assert!(m.complete(Tid(2), Completion::Aborted));
        assert!(!m.complete(Tid(2), Completion::Matched));
        assert!(!m.complete(Tid(9), Completion::Matched));
        let a = m.accounting();
        assert_eq!(
            (a.aborted, a.matched, a.duplicate_results, a.orphan_results),
            (1, 0, 1, 1)
        );
    }

    #[test]
    fn warmup_is_excluded_from_accounting() {
        let m = ResultMatcher::default();
        m.submit(Tid(1), true);
        m.submit(Tid(2), false);
        m.complete(Tid(1), Completion::Matched);
        assert_eq!(m.accounting().pending, 1);
        m.complete(Tid(2), Completion::TimedOut);
        let a = m.accounting();
        assert_eq!((a.submitted, a.timed_out), (1, 1));
        assert!(a.balanced());
    }

    fn small_run(mode: crate::consistency::TransactionMode, workers: u32) -> (RunOutput, usize) {
        use crate::consistency::ConsistencyConfig;
        use crate::runtime::RuntimeConfig;
        let config = WorkloadConfig {
            num_customers: 40,
            num_sellers: 4,
            products_per_seller: 10,
            concurrency_level: workers,
            transaction_count: Some(600),
            warmup: 20,
            payment_failure_ratio: 0.1,
            ..WorkloadConfig::default()
        };
        let data = crate::dataset::generate_data(&config).unwrap();
        let m = Marketplace::new(RuntimeConfig {
            consistency: ConsistencyConfig {
                transaction_mode: mode,
                ..ConsistencyConfig::default()
            },
            ..RuntimeConfig::default()
        })
        .unwrap();
        m.ingest(&data).unwrap();
        let d = Driver::new(&m, config, &data).unwrap();
        d.warmup().unwrap();
        d.run_workload().unwrap();
        (d.output(), m.audit().len())
    }

    #[test]
    fn concurrent_run_balances_in_both_modes() {
        for mode in [
            crate::consistency::TransactionMode::EventualSaga,
            crate::consistency::TransactionMode::Transactional,
        ] {
            let (out, _) = small_run(mode, 4);
            assert!(out.accounting.balanced(), "{mode:?} {:?}", out.accounting);
            assert_eq!(out.accounting.submitted, 600);
            assert!(out.measurements.iter().filter(|m| m.warmup).count() == 20);
            assert!(out.accounting.matched > 300, "{:?}", out.accounting);
        }
    }

    #[test]
    fn single_worker_runs_repeat_exactly() {
        let mode = crate::consistency::TransactionMode::EventualSaga;
        let a = small_run(mode, 1);
        let b = small_run(mode, 1);
        assert_eq!(a, b);
    }
}
