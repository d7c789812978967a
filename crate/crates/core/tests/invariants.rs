mod common;

use proptest::prelude::*;

use marketplace::audit::FaultKind;
use marketplace::consistency::{Replica, ReplicaEffect, ReplicaUpdate, ReplicationMode, TransactionMode};
use marketplace::domain::ProductKey;
use marketplace::event::EventType;
use marketplace::experiment::{Experiment, ExperimentSpec};
use marketplace::fabric::{EventOrdering, FaultRule};
use marketplace::money::Money;

use common::workload;

#[derive(Debug, Clone)]
struct Scenario {
    transactional: bool,
    causal_replica: bool,
    causal_events: bool,
    snapshot: bool,
    reorder: f64,
    delay: u64,
    decline: f64,
    drop_every: Option<u64>,
    crash: Option<(EventType, u64)>,
    seed: u64,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    let crash_step = prop_oneof![
        Just(EventType::CartCheckedOut),
        Just(EventType::StockReserved),
        Just(EventType::InvoiceIssued),
        Just(EventType::PaymentProcessed),
    ];
    (
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
        (
            prop_oneof![Just(0.0), 0.0..0.5],
            0u64..40,
            prop_oneof![Just(0.0), 0.0..0.3],
        ),
        proptest::option::of(2u64..6),
        proptest::option::of((crash_step, 3u64..12)),
        any::<u64>(),
    )
        .prop_map(
            |(
                (transactional, causal_replica, causal_events, snapshot),
                (reorder, delay, decline),
                drop_every,
                crash,
                seed,
            )| Scenario {
                transactional,
                causal_replica,
                causal_events,
                snapshot,
                reorder: if causal_events { 0.0 } else { reorder },
                delay,
                decline,
                drop_every,
                crash,
                seed,
            },
        )
}

fn build(s: &Scenario) -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.scenario = "invariants".into();
    spec.workload = workload(3, 8, 24);
    spec.workload.concurrency_level = 3;
    spec.workload.transaction_count = Some(250);
    spec.workload.warmup = 10;
    spec.workload.seed = s.seed;
    spec.workload.payment_failure_ratio = s.decline;
    spec.consistency.transaction_mode = if s.transactional {
        TransactionMode::Transactional
    } else {
        TransactionMode::EventualSaga
    };
    spec.consistency.replication_mode = if s.causal_replica {
        ReplicationMode::Causal
    } else {
        ReplicationMode::Eventual
    };
    spec.consistency.event_ordering = if s.causal_events {
        EventOrdering::Causal
    } else {
        EventOrdering::Unordered
    };
    spec.consistency.dashboard_snapshot = s.snapshot;
    spec.delivery.reorder_probability = s.reorder;
    spec.delivery.max_artificial_delay = s.delay;
    if let Some(n) = s.drop_every {
        spec.faults
            .push(FaultRule::once(FaultKind::DropThenRedeliver).every(n).times(None));
    }
    if let Some((ty, n)) = s.crash {
        spec.faults.push(
            FaultRule::once(FaultKind::CrashConsumerMidTransaction)
                .on(ty)
                .every(n)
                .times(None),
        );
    }
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn runs_preserve_structural_invariants(s in scenario()) {
        let done = Experiment::execute(build(&s), None).unwrap();
        let r = &done.report;
        prop_assert!(r.valid, "{:?}", r.error);
        let a = r.accounting;
        prop_assert_eq!(a.submitted, a.matched + a.aborted + a.timed_out);
        prop_assert_eq!(a.pending, 0);
        let c = done.checks.as_ref().unwrap();
        prop_assert!(c.conservation.is_empty(), "{:?}", c.conservation);
        prop_assert!(c.session_affinity.is_empty());
        prop_assert!(c.cache_coherence.is_empty());
        prop_assert!(c.order_paths.is_empty(), "{:?}", c.order_paths);
        prop_assert!(c.exactly_once.is_empty(), "{:?}", c.exactly_once);
        prop_assert!(c.integrity.is_empty());
        prop_assert!(c.atomicity.violations.is_empty(), "{:?}", c.atomicity.violations);
        if s.causal_replica {
            prop_assert_eq!(r.anomalies.replication_anomalies, 0);
        }
        if s.causal_events {
            prop_assert_eq!(r.anomalies.causality_violations, 0);
        }
        if s.snapshot {
            prop_assert_eq!(r.anomalies.snapshot_mismatches, 0);
        }
        for p in &done.state.products {
            prop_assert_eq!(done.state.replica[&p.key()].version, p.version);
        }
    }

    #[test]
    fn replicas_never_regress_and_converge(mut versions in prop::collection::vec(1u64..30, 1..60), causal in any::<bool>()) {
        let mode = if causal { ReplicationMode::Causal } else { ReplicationMode::Eventual };
        let key = ProductKey::new(1, 1);
        let mut replica = Replica::new(mode, 64);
        replica.seed(key, Money::from_cents(1), 1);
        // Every version from 2 to the maximum arrives at least once.
        let top = versions.iter().copied().max().unwrap().max(2);
        versions.extend(2..=top);
        let mut last = 1;
        for v in versions {
            let effects = replica.apply(key, ReplicaUpdate::Price { price: Money::from_cents(v as i64), version: v, token: None });
            for e in effects {
                if let ReplicaEffect::Applied { version, .. } = e {
                    prop_assert!(version > last);
                    last = version;
                }
            }
            prop_assert_eq!(replica.get(&key).unwrap().version, last);
        }
        prop_assert_eq!(last, top);
        prop_assert_eq!(replica.get(&key).unwrap().price, Some(Money::from_cents(top as i64)));
        prop_assert_eq!(replica.buffered(&key), 0);
    }
}
