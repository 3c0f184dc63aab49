//! Deterministic discrete-event simulator for resource-burning Sybil
//! defenses under churn.
//!
//! The crate models a serialized stream of ID joins and departures drawn
//! from real-trace ingestion or synthetic session-length churn, runs an
//! admission/purge defense with an adaptive entrance cost driven by a
//! running good-join-rate estimate, and audits the population and committee
//! invariants the design is supposed to keep. Baseline defenses (flat-cost
//! admission, periodic neighbor testing, and a closed-form periodic-work
//! bound) run under the same traces and adversaries for spend-rate
//! comparison.
//!
//! Entry points: [`trace`] builds event streams, [`runner::run_single`]
//! executes one simulation, [`sweep`] orchestrates T-sweeps and writes the
//! CSV outputs, and the `ergo-sim` binary exposes the CLI.

pub mod adversary;
pub mod baseline;
pub mod committee;
pub mod config;
pub mod defense;
pub mod estimator;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod sweep;
pub mod trace;
