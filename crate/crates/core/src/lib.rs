//! Event-driven marketplace runtime with switchable consistency modes, a
//! workload driver and offline correctness checkers.
pub mod audit;
pub mod cache;
pub mod checkers;
pub mod consistency;
pub mod dataset;
pub mod domain;
pub mod driver;
pub mod event;
pub mod experiment;
pub mod fabric;
pub mod metrics;
pub mod money;
pub mod report;
pub mod runtime;
pub mod sampler;
pub mod services;
pub mod workload;
