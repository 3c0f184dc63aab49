//! Budgeted adversary: injects bad IDs under a spend rate T and optionally
//! retains bad IDs through purges subject to the kappa-fraction round bound.
//!
//! Budget is implicit: at time t the adversary has accrued T*(t - t0) units
//! and has spent an integer number of units, all of which are ledgered, so
//! conservation (ledgered spend = T*elapsed - remaining budget) holds
//! exactly by construction.

use serde::{Deserialize, Serialize};

use crate::model::Uid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Greedily submit a join whenever the accrued budget covers the current
    /// entrance cost.
    SteadyJoin,
    /// Accumulate for a fixed period, then submit joins until the budget no
    /// longer covers the next cost.
    BurstJoin { burst_period_s: f64 },
    /// No adversary actions.
    None,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdversaryConfig {
    /// Spend rate T in challenge-units per second.
    pub spend_rate: f64,
    pub strategy: Strategy,
    /// Pay 1 unit per retained bad ID at purges (off in the sweep setup:
    /// there the adversary only solves challenges to add IDs).
    pub respond_to_purges: bool,
    pub kappa: f64,
}

impl AdversaryConfig {
    pub fn passive(kappa: f64) -> Self {
        AdversaryConfig {
            spend_rate: 0.0,
            strategy: Strategy::None,
            respond_to_purges: false,
            kappa,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdversaryState {
    pub t0: f64,
    /// All units ever spent (joins, wasted refused attempts, retention).
    pub spent: u64,
    pub next_burst: f64,
}

impl AdversaryState {
    pub fn new(t0: f64) -> Self {
        AdversaryState {
            t0,
            spent: 0,
            next_burst: t0,
        }
    }

    pub fn budget(&self, cfg: &AdversaryConfig, now: f64) -> f64 {
        cfg.spend_rate * (now - self.t0) - self.spent as f64
    }

    /// Earliest time the accrued budget covers `cost` more units, or None if
    /// the spend rate is zero.
    pub fn time_affording(&self, cfg: &AdversaryConfig, cost: u64) -> Option<f64> {
        if cfg.spend_rate <= 0.0 {
            return None;
        }
        Some(self.t0 + (self.spent + cost) as f64 / cfg.spend_rate)
    }

    pub fn pay(&mut self, units: u64) {
        self.spent += units;
    }

    /// How many bad IDs survive a purge: up to the kappa-fraction of the
    /// challenges issued, bounded by the live bad population and by what the
    /// remaining budget can pay for (1 unit each).
    pub fn retention_quota(
        &self,
        cfg: &AdversaryConfig,
        purge_size: u64,
        bad_alive: u64,
        now: f64,
    ) -> u64 {
        if !cfg.respond_to_purges {
            return 0;
        }
        let kappa_cap = (cfg.kappa * purge_size as f64).floor() as u64;
        let budget_cap = self.budget(cfg, now).max(0.0).floor() as u64;
        bad_alive.min(kappa_cap).min(budget_cap)
    }
}

/// Uid allocator for adversary-minted IDs; a dedicated range keeps goodness
/// decidable from the uid for auditing.
#[derive(Clone, Copy, Debug)]
pub struct BadUidAlloc {
    next: Uid,
}

impl BadUidAlloc {
    pub fn new(base: Uid) -> Self {
        BadUidAlloc { next: base }
    }

    pub fn next_uid(&mut self) -> Uid {
        let u = self.next;
        self.next += 1;
        u
    }

    pub fn peek(&self) -> Uid {
        self.next
    }
}
