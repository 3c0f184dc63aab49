//! Single-run simulation engine: merges the good-ID trace, adversary
//! actions, periodic test ticks, and mirrored bad churn into one serialized
//! event stream, drives the configured defense and the estimator, and
//! audits every invariant the analysis relies on.
//!
//! Bad IDs join fresh and leave only at purges, so the live bad population
//! is a contiguous uid cohort plus an explicitly retained list; membership
//! trackers stay O(1) per event. For constant-entrance-cost defenses the
//! adversary's join bursts advance in exact closed-form blocks (the next
//! purge/estimator/fraction boundary is an integer threshold crossing), which
//! is what makes T = 2^20 sweeps take seconds instead of hours. A config
//! flag forces the per-event path so tests can pin the two to each other.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adversary::{AdversaryConfig, AdversaryState, BadUidAlloc, Strategy};
use crate::baseline::{remp_good_spend_rate, sybilcontrol_tick};
use crate::committee::{elect_committee, CommitteeAudit, CommitteeState};
use crate::defense::{DefensePolicy, ErgoDefense, PurgeDecision};
use crate::estimator::{EstimateNumerator, GoodJEst, IntervalRecord};
use crate::metrics::{
    build_ratio_series, compute_spend_rates, detect_epochs, estimate_alpha, estimate_beta,
    default_window_grid, theorem2_envelope_check, AlphaEstimate, BetaEstimate, EpochRecord,
    GoodEvent, RatioSample, SpendRates,
};
use crate::model::{
    CostLedger, EventPayload, IdKind, IndexedSet, SimConfig, Uid, BAD_UID_BASE, MIRROR_UID_BASE,
};
use crate::trace::{sample_session, ChurnTrace, TraceSource};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseKind {
    Ergo { policy: DefensePolicy },
    CCom,
    SybilControl { test_period_s: f64 },
    Remp { t_max: f64 },
}

impl DefenseKind {
    pub fn name(&self) -> String {
        match self {
            DefenseKind::Ergo { policy } => {
                if let Some(p) = policy.h4_classifier {
                    format!("ERGO-SF({})", (p * 100.0).round() as u64)
                } else if policy.h3_invariant_purge {
                    "ERGO-CH2".into()
                } else if policy.h2_symmetric_diff_purge || policy.h1_align_estimate {
                    "ERGO-CH1".into()
                } else {
                    "ERGO".into()
                }
            }
            DefenseKind::CCom => "CCom".into(),
            DefenseKind::SybilControl { .. } => "SybilControl".into(),
            DefenseKind::Remp { t_max } => format!("REMP-{t_max:.0}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub defense: DefenseKind,
    pub adversary: AdversaryConfig,
    /// Committee constant C; None disables the decentralized-mode audit.
    pub committee_c: Option<f64>,
    /// Hold a bad fraction by mirroring good joins with this probability
    /// mass f (each good join spawns a bad one with prob f/(1-f)).
    pub mirror_bad_fraction: Option<f64>,
    /// Session model for mirrored bad IDs (usually the trace's own source).
    pub mirror_session_source: Option<TraceSource>,
    pub estimator_numerator: EstimateNumerator,
    /// Override the estimator's initialization window; default is the time
    /// the bootstrap population would have taken to form at the trace's
    /// nominal join rate.
    pub init_duration_override: Option<f64>,
    pub collect_details: bool,
    /// Disable the constant-cost block fast path (equivalence testing).
    pub force_per_event: bool,
}

impl RunConfig {
    pub fn new(sim: SimConfig, defense: DefenseKind, adversary: AdversaryConfig) -> Self {
        RunConfig {
            sim,
            defense,
            adversary,
            committee_c: None,
            mirror_bad_fraction: None,
            mirror_session_source: None,
            estimator_numerator: EstimateNumerator::CurrentSize,
            init_duration_override: None,
            collect_details: false,
            force_per_event: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("trace error: {0}")]
    Trace(String),
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub time: f64,
    pub what: String,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterationRow {
    pub iter: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub size_at_tau: u64,
    pub joins: u64,
    pub departs: u64,
    pub purge_cost: u64,
    pub entrance_cost_good: u64,
    pub entrance_cost_bad: u64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IntervalRow {
    pub interval: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub size: u64,
    pub estimate: f64,
    pub true_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutput {
    pub defense: String,
    pub horizon: f64,
    pub rates: SpendRates,
    pub good_entrance: u64,
    pub good_purge: u64,
    pub good_periodic: u64,
    pub good_total: u64,
    pub adversary_total: u64,
    pub max_bad_fraction: f64,
    pub min_good_population: u64,
    pub purge_count: u64,
    pub interval_count: u64,
    pub good_joins: u64,
    pub good_departs: u64,
    pub bad_joins_admitted: u64,
    pub bad_attempts: u64,
    pub false_refusals_good: u64,
    /// Mean entrance cost charged to good IDs (xi).
    pub mean_entrance_cost_good: f64,
    pub lemma7_violations: u64,
    pub lemma8_violations: u64,
    pub lemma8_windows: u64,
    /// SybilControl: first time the bad fraction reached 1/6.
    pub cutoff_time: Option<f64>,
    /// REMP: whether T stayed within t_max.
    pub remp_valid: Option<bool>,
    pub budget_conservation_ok: bool,
    pub suppressed_departures: u64,
    pub staggered_departures: u64,
    pub gamma_equivalent: f64,
    pub violations: Vec<Violation>,
    pub alpha: Option<AlphaEstimate>,
    pub beta: Option<BetaEstimate>,
    pub envelope_violations: Option<usize>,
    pub ratio_min: Option<f64>,
    pub ratio_max: Option<f64>,
    #[serde(skip)]
    pub epochs: Vec<EpochRecord>,
    #[serde(skip)]
    pub ratio_series: Vec<RatioSample>,
    #[serde(skip)]
    pub intervals: Vec<IntervalRow>,
    #[serde(skip)]
    pub iterations: Vec<IterationRow>,
    #[serde(skip)]
    pub committee_audits: Vec<CommitteeAudit>,
    #[serde(skip)]
    pub ledger_samples: Vec<crate::model::LedgerSample>,
}

impl RunOutput {
    pub fn failed(&self) -> bool {
        !self.violations.is_empty()
    }
}

/// Sub-interval monitor: within every window of length 1/J-hat (cut at
/// estimate updates and purges), bad joins must not exceed
/// floor(sqrt(2 * adversary spend in the window)).
struct SubIntervalMonitor {
    active: bool,
    seg_start: f64,
    window_len: f64,
    widx: u64,
    joins: u64,
    spend: u64,
    pub windows: u64,
    pub violations: u64,
    pub first_violation: Option<f64>,
}

impl SubIntervalMonitor {
    fn new(active: bool) -> Self {
        SubIntervalMonitor {
            active,
            seg_start: 0.0,
            window_len: f64::INFINITY,
            widx: 0,
            joins: 0,
            spend: 0,
            windows: 0,
            violations: 0,
            first_violation: None,
        }
    }

    fn close_window(&mut self, at: f64) {
        if self.joins == 0 && self.spend == 0 {
            return;
        }
        self.windows += 1;
        // joins <= floor(sqrt(2*spend))  <=>  joins^2 <= 2*spend
        if (self.joins as u128).pow(2) > 2 * self.spend as u128 {
            self.violations += 1;
            self.first_violation.get_or_insert(at);
        }
        self.joins = 0;
        self.spend = 0;
    }

    fn advance(&mut self, t: f64) {
        if !self.active || !self.window_len.is_finite() {
            return;
        }
        let idx = ((t - self.seg_start) / self.window_len).floor().max(0.0) as u64;
        if idx > self.widx {
            self.close_window(t);
            self.widx = idx;
        }
    }

    fn on_bad_join(&mut self, t: f64, cost: u64) {
        if !self.active {
            return;
        }
        self.advance(t);
        self.joins += 1;
        self.spend += cost;
    }

    fn on_spend(&mut self, t: f64, cost: u64) {
        if !self.active {
            return;
        }
        self.advance(t);
        self.spend += cost;
    }

    /// New segment at an estimate update or purge.
    fn reset(&mut self, t: f64, estimate: f64) {
        if !self.active {
            return;
        }
        self.close_window(t);
        self.seg_start = t;
        self.window_len = if estimate > 0.0 { 1.0 / estimate } else { f64::INFINITY };
        self.widx = 0;
    }
}

struct MirrorPool {
    set: IndexedSet,
    joined: HashMap<Uid, f64>,
    /// Scheduled departures (time, uid), min-heap by time.
    departures: std::collections::BinaryHeap<std::cmp::Reverse<(u64, Uid)>>,
}

impl MirrorPool {
    fn new() -> Self {
        MirrorPool {
            set: IndexedSet::new(),
            joined: HashMap::new(),
            departures: std::collections::BinaryHeap::new(),
        }
    }

    fn next_departure(&self) -> Option<f64> {
        self.departures
            .peek()
            .map(|std::cmp::Reverse((bits, _))| f64::from_bits(*bits))
    }
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    trace: &'a ChurnTrace,
    now: f64,
    last_event_time: f64,
    good: IndexedSet,
    good_joined: HashMap<Uid, f64>,
    // Live adversary cohort: uids [cohort_base, cohort_base+count), all
    // joined since the last purge. Times kept only when retention sampling
    // needs them.
    cohort_base: Uid,
    cohort_count: u64,
    cohort_times: Vec<f64>,
    track_bad_times: bool,
    retained: Vec<(Uid, f64)>,
    /// Cohort length at the estimator's snapshot (O(1) eviction split).
    est_snap_cohort_len: u64,
    initial_good: u64,
    mirror: MirrorPool,
    mirror_spent: u64,
    alloc_bad: BadUidAlloc,
    alloc_mirror: BadUidAlloc,
    ledger: CostLedger,
    estimator: GoodJEst,
    defense: Option<ErgoDefense>,
    adversary: AdversaryState,
    committee: Option<CommitteeState>,
    rng: ChaCha12Rng,
    refused_good: HashSet<Uid>,
    good_events: Vec<GoodEvent>,
    intervals: Vec<IntervalRecord>,
    iterations: Vec<IterationRow>,
    committee_audits: Vec<CommitteeAudit>,
    violations: Vec<Violation>,
    monitor: SubIntervalMonitor,
    max_bad_fraction: f64,
    min_good: u64,
    purge_count: u64,
    good_joins: u64,
    good_departs: u64,
    bad_joins_admitted: u64,
    bad_attempts: u64,
    lemma7_violations: u64,
    cutoff_time: Option<f64>,
    sc_bad_alive: u64,
    next_sample: f64,
    sample_step: f64,
    expect_invariant: bool,
}

/// Run one full simulation to the horizon. Deterministic in
/// (trace, config): identical inputs give identical outputs.
pub fn run_single(trace: &ChurnTrace, cfg: &RunConfig) -> Result<RunOutput, RunError> {
    cfg.sim.validate().map_err(|e| RunError::Config(e.to_string()))?;
    if let DefenseKind::Ergo { policy } = &cfg.defense {
        policy.validate().map_err(|e| RunError::Config(e.to_string()))?;
    }
    if let DefenseKind::Remp { t_max } = cfg.defense {
        return remp_run(cfg, t_max);
    }
    Engine::new(trace, cfg)?.run()
}

fn remp_run(cfg: &RunConfig, t_max: f64) -> Result<RunOutput, RunError> {
    let rate = remp_good_spend_rate(cfg.sim.kappa, t_max)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let horizon = cfg.sim.horizon.max(1.0);
    let t = cfg.adversary.spend_rate;
    Ok(RunOutput {
        defense: cfg.defense.name(),
        horizon,
        rates: SpendRates {
            good_spend_rate: rate,
            adversary_spend_rate_observed: t,
            entrance_rate: 0.0,
            purge_rate: 0.0,
            periodic_rate: rate,
        },
        good_entrance: 0,
        good_purge: 0,
        good_periodic: (rate * horizon) as u64,
        good_total: (rate * horizon) as u64,
        adversary_total: (t * horizon) as u64,
        max_bad_fraction: 0.0,
        min_good_population: 0,
        purge_count: 0,
        interval_count: 0,
        good_joins: 0,
        good_departs: 0,
        bad_joins_admitted: 0,
        bad_attempts: 0,
        false_refusals_good: 0,
        mean_entrance_cost_good: 0.0,
        lemma7_violations: 0,
        lemma8_violations: 0,
        lemma8_windows: 0,
        cutoff_time: None,
        remp_valid: Some(t <= t_max),
        budget_conservation_ok: true,
        suppressed_departures: 0,
        staggered_departures: 0,
        gamma_equivalent: 0.0,
        violations: Vec::new(),
        alpha: None,
        beta: None,
        envelope_violations: None,
        ratio_min: None,
        ratio_max: None,
        epochs: Vec::new(),
        ratio_series: Vec::new(),
        intervals: Vec::new(),
        iterations: Vec::new(),
        committee_audits: Vec::new(),
        ledger_samples: Vec::new(),
    })
}

impl<'a> Engine<'a> {
    fn new(trace: &'a ChurnTrace, cfg: &'a RunConfig) -> Result<Self, RunError> {
        let defense = match &cfg.defense {
            DefenseKind::Ergo { policy } => Some(ErgoDefense::new(*policy, false, cfg.sim.kappa)),
            DefenseKind::CCom => Some(ErgoDefense::new(DefensePolicy::base(), true, cfg.sim.kappa)),
            DefenseKind::SybilControl { .. } => None,
            DefenseKind::Remp { .. } => unreachable!("handled analytically"),
        };
        let h1 = matches!(&cfg.defense, DefenseKind::Ergo { policy } if policy.h1_align_estimate);
        // Lemma-8 monitoring only makes sense for the ramping entrance-cost
        // rule; constant-cost defenses violate it by construction.
        let monitor_active =
            matches!(&cfg.defense, DefenseKind::Ergo { .. }) && cfg.mirror_bad_fraction.is_none();
        let mut engine = Engine {
            cfg,
            trace,
            now: 0.0,
            last_event_time: f64::NEG_INFINITY,
            good: IndexedSet::new(),
            good_joined: HashMap::new(),
            cohort_base: BAD_UID_BASE,
            cohort_count: 0,
            cohort_times: Vec::new(),
            track_bad_times: cfg.adversary.respond_to_purges,
            retained: Vec::new(),
            est_snap_cohort_len: 0,
            initial_good: 0,
            mirror: MirrorPool::new(),
            mirror_spent: 0,
            alloc_bad: BadUidAlloc::new(BAD_UID_BASE),
            alloc_mirror: BadUidAlloc::new(MIRROR_UID_BASE),
            ledger: CostLedger::new(),
            estimator: GoodJEst::new(h1, cfg.estimator_numerator),
            defense,
            adversary: AdversaryState::new(0.0),
            committee: None,
            rng: ChaCha12Rng::seed_from_u64(cfg.sim.rng_seed),
            refused_good: HashSet::new(),
            good_events: Vec::new(),
            intervals: Vec::new(),
            iterations: Vec::new(),
            committee_audits: Vec::new(),
            violations: Vec::new(),
            monitor: SubIntervalMonitor::new(monitor_active),
            max_bad_fraction: 0.0,
            min_good: u64::MAX,
            purge_count: 0,
            good_joins: 0,
            good_departs: 0,
            bad_joins_admitted: 0,
            bad_attempts: 0,
            lemma7_violations: 0,
            cutoff_time: None,
            sc_bad_alive: 0,
            next_sample: 0.0,
            sample_step: (cfg.sim.horizon / 100.0).max(1.0),
            expect_invariant: !matches!(cfg.defense, DefenseKind::SybilControl { .. }),
        };
        engine.next_sample = engine.sample_step;
        engine.bootstrap()?;
        Ok(engine)
    }

    fn bootstrap(&mut self) -> Result<(), RunError> {
        for id in &self.trace.initial_ids {
            self.good.insert(id.uid);
            self.good_joined.insert(id.uid, id.joined_at);
        }
        // Negative-time rows are pre-start membership (file convention).
        for ev in self.trace.events.iter().take_while(|e| e.time < 0.0) {
            match ev.payload {
                EventPayload::Join(id) => {
                    self.good.insert(id.uid);
                    self.good_joined.insert(id.uid, ev.time);
                }
                EventPayload::Depart(uid) => {
                    if !self.good.remove(uid) {
                        return Err(RunError::Trace(format!(
                            "bootstrap departure of unknown uid {uid}"
                        )));
                    }
                    self.good_joined.remove(&uid);
                }
            }
        }
        let size = self.good.len() as u64;
        self.initial_good = size;
        self.min_good = size.min(self.min_good);
        if size > 0 {
            // System initialization: every bootstrap member solves one
            // 1-hard challenge.
            self.ledger.charge_good_entrance(size);
            let dur = self.init_duration(size);
            self.estimator
                .init(0.0, size, dur)
                .map_err(|e| RunError::Config(e.to_string()))?;
            self.monitor.reset(0.0, self.estimator.current_estimate().unwrap_or(0.0));
        }
        if let Some(d) = self.defense.as_mut() {
            d.begin_iteration(0.0, size, 0);
        }
        if let Some(c) = self.cfg.committee_c {
            match self.elect(c, 0) {
                Ok(cs) => self.committee = Some(cs),
                Err(e) => self.violations.push(Violation {
                    time: 0.0,
                    what: format!("initial committee election failed: {e}"),
                }),
            }
        }
        Ok(())
    }

    fn init_duration(&self, size: u64) -> f64 {
        if let Some(d) = self.cfg.init_duration_override {
            return d;
        }
        let nominal = self.trace.nominal_join_rate;
        if nominal > 0.0 {
            (size as f64 / nominal).max(self.cfg.sim.round_len)
        } else {
            self.cfg.sim.round_len
        }
    }

    fn bad_total(&self) -> u64 {
        self.cohort_count + self.retained.len() as u64 + self.mirror.set.len() as u64 + self.sc_bad_alive
    }

    fn member_count(&self) -> u64 {
        self.good.len() as u64 + self.bad_total()
    }

    fn bad_fraction(&self) -> f64 {
        let total = self.member_count();
        if total == 0 {
            0.0
        } else {
            self.bad_total() as f64 / total as f64
        }
    }

    fn check_fraction(&mut self, t: f64) {
        let f = self.bad_fraction();
        if f > self.max_bad_fraction {
            self.max_bad_fraction = f;
        }
        if f >= 1.0 / 6.0 {
            if self.cutoff_time.is_none() {
                self.cutoff_time = Some(t);
            }
            if self.expect_invariant
                && !self
                    .violations
                    .iter()
                    .any(|v| v.what.starts_with("population invariant"))
            {
                self.violations.push(Violation {
                    time: t,
                    what: format!(
                        "population invariant breached: bad fraction {f:.4} >= 1/6 \
                         (|B|={}, |S|={})",
                        self.bad_total(),
                        self.member_count()
                    ),
                });
            }
        }
    }

    fn serialize_time(&mut self, t: f64) -> f64 {
        let t = if t > self.last_event_time {
            t
        } else {
            self.last_event_time.next_up()
        };
        self.last_event_time = t;
        self.now = t;
        t
    }

    fn elect(&mut self, c: f64, iteration: u64) -> Result<CommitteeState, crate::committee::CommitteeError> {
        let n_good = self.good.len() as u64;
        let n_ret = self.retained.len() as u64;
        let n_cohort = self.cohort_count;
        let n_mirror = self.mirror.set.len() as u64;
        let good = &self.good;
        let retained = &self.retained;
        let cohort_base = self.cohort_base;
        let mirror = &self.mirror.set;
        let member_at = |i: u64| -> Uid {
            if i < n_good {
                good.get(i as usize).expect("good index")
            } else if i < n_good + n_ret {
                retained[(i - n_good) as usize].0
            } else if i < n_good + n_ret + n_cohort {
                cohort_base + (i - n_good - n_ret)
            } else {
                mirror.get((i - n_good - n_ret - n_cohort) as usize).expect("mirror index")
            }
        };
        let total = n_good + n_ret + n_cohort + n_mirror;
        elect_committee(total, member_at, c, iteration, &mut self.rng)
    }

    /// Estimator/interval bookkeeping plus the purge trigger; call after
    /// every membership change.
    fn post_change(&mut self, t: f64) {
        if !self.estimator.initialized() {
            return;
        }
        match self.estimator.on_membership_change(t) {
            Ok(Some(record)) => {
                self.intervals.push(record);
                self.est_snap_cohort_len = self.cohort_count;
                self.monitor.reset(t, record.estimate_set);
            }
            Ok(None) => {}
            Err(e) => self.violations.push(Violation {
                time: t,
                what: format!("estimator: {e}"),
            }),
        }
        let est = self.estimator.current_estimate().unwrap_or(0.0);
        let fire = match self.defense.as_ref() {
            Some(d) => d.purge_decision(t, self.member_count(), est) == PurgeDecision::Fire,
            None => false,
        };
        if fire {
            self.purge(t);
        }
    }

    fn purge(&mut self, t: f64) {
        // End-of-iteration committee audit happens on the pre-purge state.
        let iter_index = self.defense.as_ref().map_or(0, |d| d.iter.iteration_index);
        if let Some(cs) = &self.committee {
            self.committee_audits.push(cs.audit(iter_index));
        }
        // Interval-overlap monitor: the closing iteration may intersect at
        // most two estimator intervals.
        if let Some(d) = self.defense.as_ref() {
            let touched = self.estimator.interval_index() - d.iter.interval_index_at_tau + 1;
            if touched > 2 {
                self.lemma7_violations += 1;
            }
        }
        let size_before = self.member_count();
        let good_n = self.good.len() as u64;
        self.ledger.charge_good_purge(good_n);

        // Adversary retention under the kappa-fraction round bound.
        let quota = self
            .adversary
            .retention_quota(&self.cfg.adversary, size_before, self.cohort_count + self.retained.len() as u64, t);
        let retained_new: Vec<(Uid, f64)> = if quota > 0 {
            let pool = self.cohort_count + self.retained.len() as u64;
            let mut picked: HashSet<u64> = HashSet::with_capacity(quota as usize);
            for j in (pool - quota)..pool {
                let x = self.rng.gen_range(0..=j);
                if !picked.insert(x) {
                    picked.insert(j);
                }
            }
            let mut v: Vec<(Uid, f64)> = picked
                .into_iter()
                .map(|i| {
                    if i < self.cohort_count {
                        let joined = if self.track_bad_times {
                            self.cohort_times[i as usize]
                        } else {
                            t
                        };
                        (self.cohort_base + i, joined)
                    } else {
                        self.retained[(i - self.cohort_count) as usize]
                    }
                })
                .collect();
            v.sort_by_key(|&(uid, _)| uid);
            self.adversary.pay(quota);
            self.ledger.charge_adversary(quota);
            self.monitor.on_spend(t, quota);
            v
        } else {
            Vec::new()
        };

        // Estimator bookkeeping for the eviction, split by snapshot age.
        // A live bad ID was in the snapshot iff it joined at or before the
        // snapshot time (retained IDs were members continuously).
        let snap_t = self.estimator.snapshot_time().unwrap_or(f64::NEG_INFINITY);
        let evicted_in_snap = {
            let cohort_in = self.est_snap_cohort_len;
            let retained_in = self
                .retained
                .iter()
                .filter(|&&(_, j)| j <= snap_t)
                .count() as u64;
            let mirror_in = self
                .mirror
                .joined
                .values()
                .filter(|&&j| j <= snap_t)
                .count() as u64;
            let kept_in = retained_new
                .iter()
                .filter(|&&(_, j)| j <= snap_t)
                .count() as u64;
            (cohort_in + retained_in + mirror_in).saturating_sub(kept_in)
        };
        let total_evicted =
            self.cohort_count + self.retained.len() as u64 + self.mirror.set.len() as u64
                - retained_new.len() as u64;
        let evicted_newer = total_evicted - evicted_in_snap;
        self.estimator.note_remove_counts(evicted_in_snap, evicted_newer);

        // Committee members that were purged leave their seats.
        if let Some(cs) = self.committee.as_mut() {
            let keep: HashSet<Uid> = retained_new.iter().map(|&(u, _)| u).collect();
            let victims: Vec<Uid> = {
                let mut v = Vec::new();
                for uid in self.cohort_base..self.cohort_base + self.cohort_count {
                    if cs.contains(uid) && !keep.contains(&uid) {
                        v.push(uid);
                    }
                }
                for &(uid, _) in &self.retained {
                    if cs.contains(uid) && !keep.contains(&uid) {
                        v.push(uid);
                    }
                }
                for uid in self.mirror.set.iter() {
                    if cs.contains(uid) {
                        v.push(uid);
                    }
                }
                v
            };
            for uid in victims {
                cs.on_departure(uid);
            }
        }

        // Reset the bad pools.
        self.cohort_base = self.alloc_bad.peek();
        self.cohort_count = 0;
        self.cohort_times.clear();
        self.est_snap_cohort_len = 0;
        self.retained = retained_new;
        self.mirror.set = IndexedSet::new();
        self.mirror.joined.clear();
        self.mirror.departures.clear();

        // Heuristic 1: a pending estimate update lands now, measured over
        // the post-purge membership.
        match self.estimator.apply_deferred(t) {
            Ok(Some(record)) => {
                self.intervals.push(record);
                self.monitor.reset(t, record.estimate_set);
            }
            Ok(None) => {}
            Err(e) => self.violations.push(Violation {
                time: t,
                what: format!("estimator (deferred): {e}"),
            }),
        }
        // The eviction itself moves the symmetric difference; without H1
        // the trigger may be due right at the purge instant.
        if self.estimator.interval_start().is_some_and(|s| s < t) {
            if let Ok(Some(record)) = self.estimator.on_membership_change(t) {
                self.intervals.push(record);
                self.monitor.reset(t, record.estimate_set);
            }
        }
        self.est_snap_cohort_len = 0;

        let after = self.member_count();
        if let Some(d) = self.defense.as_mut() {
            if self.cfg.collect_details {
                self.iterations.push(IterationRow {
                    iter: d.iter.iteration_index,
                    start_s: d.iter.tau,
                    end_s: t,
                    size_at_tau: d.iter.size_at_tau,
                    joins: d.iter.joins,
                    departs: d.iter.departs,
                    purge_cost: good_n,
                    entrance_cost_good: d.entrance_good_this_iter,
                    entrance_cost_bad: d.entrance_bad_this_iter,
                });
            }
            d.advance_iteration_index();
            let idx = self.estimator.interval_index();
            d.begin_iteration(t, after, idx);
        }
        self.monitor
            .reset(t, self.estimator.current_estimate().unwrap_or(0.0));
        self.purge_count += 1;

        // New committee elected by the old one at each iteration end.
        if let Some(c) = self.cfg.committee_c {
            match self.elect(c, iter_index + 1) {
                Ok(cs) => self.committee = Some(cs),
                Err(e) => self.violations.push(Violation {
                    time: t,
                    what: format!("committee election failed: {e}"),
                }),
            }
        }
        self.check_fraction(t);
    }

    fn good_join(&mut self, t: f64, uid: Uid) {
        let t = self.serialize_time(t);
        // Deferred initialization: an empty-start trace boots the system at
        // its first join (the joiner pays the 1-hard init challenge).
        if !self.estimator.initialized() {
            self.good.insert(uid);
            self.good_joined.insert(uid, t);
            self.good_joins += 1;
            self.ledger.charge_good_entrance(1);
            let nominal = self.trace.nominal_join_rate.max(1e-9);
            let _ = self.estimator.init(t, 1, 1.0 / nominal);
            if let Some(d) = self.defense.as_mut() {
                d.begin_iteration(t, 1, self.estimator.interval_index());
            }
            self.good_events.push(GoodEvent {
                time: t,
                join: true,
                uid,
                joined_at: t,
            });
            return;
        }
        let est = self.estimator.current_estimate().unwrap_or(0.0);
        let admitted = match self.defense.as_mut() {
            Some(d) => match d.admit(IdKind::Good, t, est, &mut self.ledger, &mut self.rng) {
                Ok(out) => out.admitted,
                Err(e) => {
                    self.violations.push(Violation {
                        time: t,
                        what: format!("admit failed: {e}"),
                    });
                    false
                }
            },
            None => {
                // SybilControl: hardness-1 join challenge.
                self.ledger.charge_good_entrance(1);
                true
            }
        };
        if !admitted {
            self.refused_good.insert(uid);
            return;
        }
        self.good.insert(uid);
        self.good_joined.insert(uid, t);
        self.good_joins += 1;
        self.estimator.note_join();
        self.good_events.push(GoodEvent {
            time: t,
            join: true,
            uid,
            joined_at: t,
        });
        self.monitor.advance(t);
        self.post_change(t);
        self.maybe_mirror_join(t);
    }

    /// Estimate-experiment support: spawn a mirrored bad join alongside a
    /// good one with probability f/(1-f), unbudgeted but ledgered.
    fn maybe_mirror_join(&mut self, t: f64) {
        let Some(f) = self.cfg.mirror_bad_fraction else {
            return;
        };
        let p = f / (1.0 - f);
        if !self.rng.gen_bool(p.min(1.0)) {
            return;
        }
        let t = self.serialize_time(t);
        let est = self.estimator.current_estimate().unwrap_or(0.0);
        let cost = match self.defense.as_mut() {
            Some(d) => match d.admit(IdKind::Bad, t, est, &mut self.ledger, &mut self.rng) {
                Ok(out) if out.admitted => out.charged,
                _ => return, // classifier refusal: mirror join lost
            },
            None => {
                self.ledger.charge_adversary(1);
                1
            }
        };
        self.mirror_spent += cost;
        let uid = self.alloc_mirror.next_uid();
        self.mirror.set.insert(uid);
        self.mirror.joined.insert(uid, t);
        if let Some(src) = &self.cfg.mirror_session_source {
            let dep = t + sample_session(src, &mut self.rng);
            if dep < self.cfg.sim.horizon {
                self.mirror
                    .departures
                    .push(std::cmp::Reverse((dep.to_bits(), uid)));
            }
        }
        self.estimator.note_join();
        self.check_fraction(t);
        self.post_change(t);
    }

    fn good_depart(&mut self, t: f64, uid: Uid) -> Result<(), RunError> {
        if self.refused_good.remove(&uid) {
            return Ok(()); // the join was refused; nothing to depart
        }
        let t = self.serialize_time(t);
        if !self.good.remove(uid) {
            return Err(RunError::Trace(format!("departure of unknown uid {uid}")));
        }
        let joined = self.good_joined.remove(&uid).unwrap_or(0.0);
        self.good_departs += 1;
        self.estimator.note_remove(joined);
        if let Some(d) = self.defense.as_mut() {
            d.note_departure(joined);
        }
        if let Some(cs) = self.committee.as_mut() {
            cs.on_departure(uid);
        }
        self.good_events.push(GoodEvent {
            time: t,
            join: false,
            uid,
            joined_at: joined,
        });
        self.min_good = self.min_good.min(self.good.len() as u64);
        self.monitor.advance(t);
        self.check_fraction(t);
        self.post_change(t);
        Ok(())
    }

    fn mirror_depart(&mut self, t: f64, uid: Uid) {
        if !self.mirror.set.remove(uid) {
            return; // evicted at a purge before its session ended
        }
        let t = self.serialize_time(t);
        let joined = self.mirror.joined.remove(&uid).unwrap_or(t);
        self.estimator.note_remove(joined);
        if let Some(d) = self.defense.as_mut() {
            d.note_departure(joined);
        }
        if let Some(cs) = self.committee.as_mut() {
            cs.on_departure(uid);
        }
        self.post_change(t);
    }

    /// One budgeted bad join attempt at time t (entrance-cost defenses).
    /// Refused attempts still burn the quoted cost from the budget.
    fn adversary_attempt(&mut self, t: f64) {
        let t = self.serialize_time(t);
        let est = self.estimator.current_estimate().unwrap_or(0.0);
        let d = self.defense.as_mut().expect("entrance-cost path");
        let quote = match d.entrance_cost(t, est) {
            Ok(q) => q,
            Err(_) => return,
        };
        self.bad_attempts += 1;
        let out = d
            .admit(IdKind::Bad, t, est, &mut self.ledger, &mut self.rng)
            .expect("estimate already validated");
        self.adversary.pay(quote);
        if out.admitted {
            debug_assert_eq!(out.charged, quote);
            let uid = self.alloc_bad.next_uid();
            debug_assert_eq!(uid, self.cohort_base + self.cohort_count);
            self.cohort_count += 1;
            if self.track_bad_times {
                self.cohort_times.push(t);
            }
            self.bad_joins_admitted += 1;
            self.estimator.note_join();
            self.monitor.on_bad_join(t, quote);
            self.check_fraction(t);
            self.post_change(t);
        } else {
            // Solve-then-classify: the attempt's challenge was still burned.
            self.ledger.charge_adversary(quote);
            self.monitor.on_spend(t, quote);
        }
    }

    /// Earliest affordable join instant for the steady strategy, given the
    /// current window contents. Joins happen at the first moment the budget
    /// covers the quote at that moment.
    fn next_steady_join(&self) -> Option<f64> {
        if !matches!(self.cfg.adversary.strategy, Strategy::SteadyJoin) {
            return None;
        }
        if self.cfg.adversary.spend_rate <= 0.0 || !self.estimator.initialized() {
            return None;
        }
        let d = self.defense.as_ref()?;
        let est = self.estimator.current_estimate().ok()?;
        let q_now = d.entrance_cost(self.now, est).ok()?;
        let t1 = self.adversary.time_affording(&self.cfg.adversary, q_now)?;
        let t1 = t1.max(self.now);
        // The window may have drained by t1; requote once. The requote is
        // never more expensive, so affordability at t1 still holds.
        let q_t1 = d.entrance_cost(t1, est).ok()?;
        if q_t1 >= q_now {
            return Some(t1);
        }
        let t2 = self.adversary.time_affording(&self.cfg.adversary, q_t1)?;
        Some(t2.max(self.now))
    }

    /// Burst strategy: at each burst boundary spend the whole accrued budget
    /// greedily.
    fn run_burst(&mut self, t_burst: f64) {
        let mut guard = 0u64;
        loop {
            let est = match self.estimator.current_estimate() {
                Ok(e) => e,
                Err(_) => return,
            };
            let Some(d) = self.defense.as_ref() else { return };
            let Ok(quote) = d.entrance_cost(self.now.max(t_burst), est) else {
                return;
            };
            if self.adversary.budget(&self.cfg.adversary, t_burst) < quote as f64 {
                return;
            }
            self.adversary_attempt(t_burst);
            guard += 1;
            if guard > 10_000_000 {
                self.violations.push(Violation {
                    time: t_burst,
                    what: "burst join loop guard tripped".into(),
                });
                return;
            }
        }
    }

    /// Closed-form block of constant-cost bad joins up to `boundary`:
    /// advances counters to the next purge / estimator trigger / fraction
    /// crossing without materializing each event. Exact equivalent of the
    /// per-event path.
    fn flat_cost_block(&mut self, boundary: f64) {
        let rate = self.cfg.adversary.spend_rate;
        if rate <= 0.0 || !matches!(self.cfg.adversary.strategy, Strategy::SteadyJoin) {
            return;
        }
        loop {
            if !self.estimator.initialized() {
                return;
            }
            let next = self.adversary.time_affording(&self.cfg.adversary, 1).unwrap();
            if next >= boundary || next > self.cfg.sim.horizon {
                return;
            }
            // Joins landing strictly before the boundary: join i arrives at
            // t0 + (spent+i)/rate, so exclude the boundary instant itself to
            // match the per-event path.
            let cap = rate * (boundary.min(self.cfg.sim.horizon) - self.adversary.t0);
            let mut max_total = cap.floor();
            if max_total == cap {
                max_total -= 1.0;
            }
            let n_afford = (max_total.max(0.0) as u64).saturating_sub(self.adversary.spent);
            if n_afford == 0 {
                return;
            }
            let n_purge = self
                .defense
                .as_ref()
                .map_or(u64::MAX, |d| d.joins_until_default_trigger());
            let n_trigger = self.estimator.joins_until_trigger().unwrap_or(u64::MAX).max(1);
            // First crossing of bad fraction 1/6: 6(B + j) >= (S + j).
            let n_frac = {
                let b = self.bad_total();
                let s = self.member_count();
                if 6 * b >= s {
                    1
                } else {
                    ((s - 6 * b) as f64 / 5.0).ceil() as u64
                }
            };
            let n = n_afford.min(n_purge).min(n_trigger).min(n_frac).max(1);

            // Apply the block. Join i lands when the budget first covers
            // spent + i units.
            let t_last = self.adversary.t0 + (self.adversary.spent + n) as f64 / rate;
            self.adversary.pay(n);
            self.ledger.charge_adversary(n);
            self.bad_attempts += n;
            self.bad_joins_admitted += n;
            if self.track_bad_times {
                for i in 1..=n {
                    let ti = self.adversary.t0
                        + (self.adversary.spent - n + i) as f64 / rate;
                    self.cohort_times.push(ti);
                }
            }
            debug_assert_eq!(
                self.alloc_bad.peek(),
                self.cohort_base + self.cohort_count
            );
            for _ in 0..n {
                self.alloc_bad.next_uid();
            }
            self.cohort_count += n;
            self.estimator.note_joins(n);
            if let Some(d) = self.defense.as_mut() {
                d.bulk_admitted_joins(n);
            }
            let t_last = self.serialize_time(t_last);
            self.check_fraction(t_last);
            // Routing trigger and purge crossings through post_change keeps
            // the estimator/purge ordering identical to the per-event path.
            if n == n_trigger || n == n_purge {
                self.post_change(t_last);
            }
        }
    }

    /// SybilControl's adversary: constant-cost joins between test ticks.
    /// Bursting and steady joining coincide here (every join costs 1).
    fn sybilcontrol_block(&mut self, boundary: f64) {
        let rate = self.cfg.adversary.spend_rate;
        if rate <= 0.0 || matches!(self.cfg.adversary.strategy, Strategy::None) {
            return;
        }
        loop {
            let next = self.adversary.time_affording(&self.cfg.adversary, 1).unwrap();
            if next >= boundary || next > self.cfg.sim.horizon {
                return;
            }
            let cap = rate * (boundary.min(self.cfg.sim.horizon) - self.adversary.t0);
            let mut max_total = cap.floor();
            if max_total == cap {
                max_total -= 1.0;
            }
            let n_afford = (max_total.max(0.0) as u64).saturating_sub(self.adversary.spent);
            if n_afford == 0 {
                return;
            }
            let n_frac = {
                let b = self.bad_total();
                let s = self.member_count();
                if 6 * b >= s || self.cutoff_time.is_some() {
                    n_afford
                } else {
                    (((s - 6 * b) as f64 / 5.0).ceil() as u64).min(n_afford)
                }
            };
            let n = n_frac.max(1);
            let t_last = self.adversary.t0 + (self.adversary.spent + n) as f64 / rate;
            self.adversary.pay(n);
            self.ledger.charge_adversary(n);
            self.sc_bad_alive += n;
            self.bad_attempts += n;
            self.bad_joins_admitted += n;
            let t_last = self.serialize_time(t_last);
            self.check_fraction(t_last);
        }
    }

    fn sybilcontrol_tick_at(&mut self, t: f64) {
        let t = self.serialize_time(t);
        sybilcontrol_tick(self.good.len() as u64, &mut self.ledger);
        // Keep-alive: the adversary pays 1 per bad ID it keeps; the rest
        // fail the test and drop out.
        let afford = self.adversary.budget(&self.cfg.adversary, t).max(0.0).floor() as u64;
        let keep = self.sc_bad_alive.min(afford);
        if keep > 0 {
            self.adversary.pay(keep);
            self.ledger.charge_adversary(keep);
        }
        self.sc_bad_alive = keep;
        self.check_fraction(t);
    }

    fn run(mut self) -> Result<RunOutput, RunError> {
        let horizon = self.cfg.sim.horizon;
        let body_start = self
            .trace
            .events
            .partition_point(|e| e.time < 0.0);
        let mut cursor = body_start;
        let sc_period = match self.cfg.defense {
            DefenseKind::SybilControl { test_period_s } => Some(test_period_s),
            _ => None,
        };
        let mut next_tick = sc_period.unwrap_or(f64::INFINITY);
        let flat_block = !self.cfg.force_per_event
            && matches!(self.cfg.defense, DefenseKind::CCom)
            && matches!(self.cfg.adversary.strategy, Strategy::SteadyJoin)
            && self.cfg.mirror_bad_fraction.is_none();

        loop {
            let t_trace = self
                .trace
                .events
                .get(cursor)
                .map_or(f64::INFINITY, |e| e.time);
            let t_mirror = self.mirror.next_departure().unwrap_or(f64::INFINITY);
            let t_tick = next_tick;
            let t_sample = self.next_sample;
            let boundary = t_trace.min(t_mirror).min(t_tick).min(t_sample).min(horizon);

            // Adversary activity strictly before the boundary.
            if sc_period.is_some() {
                self.sybilcontrol_block(boundary);
            } else if flat_block {
                self.flat_cost_block(boundary);
            } else {
                match self.cfg.adversary.strategy {
                    Strategy::SteadyJoin => loop {
                        match self.next_steady_join() {
                            Some(t) if t < boundary && t <= horizon => self.adversary_attempt(t),
                            _ => break,
                        }
                    },
                    Strategy::BurstJoin { burst_period_s } => {
                        while self.adversary.next_burst < boundary
                            && self.adversary.next_burst <= horizon
                        {
                            let tb = self.adversary.next_burst;
                            if self.estimator.initialized() {
                                self.run_burst(tb.max(self.now));
                            }
                            self.adversary.next_burst = tb + burst_period_s;
                        }
                    }
                    Strategy::None => {}
                }
            }

            if boundary >= horizon {
                break;
            }
            if boundary == t_trace {
                let ev = self.trace.events[cursor];
                cursor += 1;
                match ev.payload {
                    EventPayload::Join(id) => self.good_join(ev.time, id.uid),
                    EventPayload::Depart(uid) => self.good_depart(ev.time, uid)?,
                }
            } else if boundary == t_mirror {
                // A purge during the adversary phase may have cleared the
                // mirror pool; if so the boundary is stale and the next loop
                // turn recomputes it.
                if let Some(std::cmp::Reverse((bits, uid))) = self.mirror.departures.pop() {
                    self.mirror_depart(f64::from_bits(bits), uid);
                }
            } else if boundary == t_tick {
                self.sybilcontrol_tick_at(t_tick);
                next_tick = t_tick + sc_period.unwrap();
            } else {
                self.ledger.sample(t_sample);
                self.next_sample = t_sample + self.sample_step;
            }
        }

        self.finish(horizon)
    }

    fn finish(mut self, horizon: f64) -> Result<RunOutput, RunError> {
        self.ledger.sample(horizon);
        self.monitor.reset(horizon, 0.0);
        // Overlap monitor for the final (unfinished) iteration.
        if let Some(d) = self.defense.as_ref() {
            let touched = self.estimator.interval_index() - d.iter.interval_index_at_tau + 1;
            if touched > 2 {
                self.lemma7_violations += 1;
            }
        }
        if self.lemma7_violations > 0 {
            self.violations.push(Violation {
                time: horizon,
                what: format!(
                    "iteration/interval overlap monitor: {} iterations intersected more than two intervals",
                    self.lemma7_violations
                ),
            });
        }
        if self.monitor.violations > 0 {
            self.violations.push(Violation {
                time: self.monitor.first_violation.unwrap_or(horizon),
                what: format!(
                    "sub-interval spend monitor: {} windows with bad joins above floor(sqrt(2*spend))",
                    self.monitor.violations
                ),
            });
        }
        let budget_ok =
            self.ledger.adversary_total == self.adversary.spent + self.mirror_spent;
        if !budget_ok {
            self.violations.push(Violation {
                time: horizon,
                what: format!(
                    "budget conservation broken: ledger {} vs spent {}",
                    self.ledger.adversary_total,
                    self.adversary.spent + self.mirror_spent
                ),
            });
        }

        let epochs = detect_epochs(self.initial_good, &self.good_events, horizon);
        let alpha = estimate_alpha(&epochs).ok();
        let beta = {
            let grid: Vec<f64> = epochs
                .iter()
                .filter(|e| e.complete)
                .flat_map(|e| default_window_grid(e.end - e.start))
                .collect();
            if grid.is_empty() {
                None
            } else {
                estimate_beta(&epochs, &self.good_events, &grid).ok()
            }
        };
        let ratio_series = build_ratio_series(&self.intervals, &epochs);
        let envelope_violations = match (alpha.as_ref(), beta.as_ref()) {
            (Some(a), Some(b)) => Some(theorem2_envelope_check(&ratio_series, a.alpha, b.beta)),
            _ => None,
        };
        let ratio_min = ratio_series.iter().map(|s| s.ratio).fold(None, |m: Option<f64>, r| {
            Some(m.map_or(r, |m| m.min(r)))
        });
        let ratio_max = ratio_series.iter().map(|s| s.ratio).fold(None, |m: Option<f64>, r| {
            Some(m.map_or(r, |m| m.max(r)))
        });

        let good_joins_admitted = self.good_joins;
        let mean_xi = if good_joins_admitted > 0 {
            self.ledger.good_entrance as f64 / good_joins_admitted as f64
        } else {
            0.0
        };
        let total_events = self.good_joins + self.good_departs + self.bad_joins_admitted;
        let gamma_equivalent = if total_events > 1 && self.cfg.sim.n0 >= 2 {
            (total_events as f64).ln() / (self.cfg.sim.n0 as f64).ln()
        } else {
            0.0
        };

        // Interval rows with the audited true good join rate.
        let join_times: Vec<f64> = self
            .good_events
            .iter()
            .filter(|e| e.join)
            .map(|e| e.time)
            .collect();
        let interval_rows: Vec<IntervalRow> = self
            .intervals
            .iter()
            .map(|iv| {
                let a = join_times.partition_point(|&t| t <= iv.start);
                let b = join_times.partition_point(|&t| t <= iv.end);
                let dur = iv.end - iv.start;
                IntervalRow {
                    interval: iv.index,
                    start_s: iv.start,
                    end_s: iv.end,
                    size: iv.size_at_end,
                    estimate: iv.estimate_set,
                    true_rate: if dur > 0.0 { (b - a) as f64 / dur } else { 0.0 },
                }
            })
            .collect();

        Ok(RunOutput {
            defense: self.cfg.defense.name(),
            horizon,
            rates: compute_spend_rates(&self.ledger, horizon.max(1e-9)),
            good_entrance: self.ledger.good_entrance,
            good_purge: self.ledger.good_purge,
            good_periodic: self.ledger.good_periodic,
            good_total: self.ledger.good_total(),
            adversary_total: self.ledger.adversary_total,
            max_bad_fraction: self.max_bad_fraction,
            min_good_population: if self.min_good == u64::MAX { 0 } else { self.min_good },
            purge_count: self.purge_count,
            interval_count: self.estimator.interval_index(),
            good_joins: self.good_joins,
            good_departs: self.good_departs,
            bad_joins_admitted: self.bad_joins_admitted,
            bad_attempts: self.bad_attempts,
            false_refusals_good: self.defense.as_ref().map_or(0, |d| d.false_refusals_good),
            mean_entrance_cost_good: mean_xi,
            lemma7_violations: self.lemma7_violations,
            lemma8_violations: self.monitor.violations,
            lemma8_windows: self.monitor.windows,
            cutoff_time: self.cutoff_time,
            remp_valid: None,
            budget_conservation_ok: budget_ok,
            suppressed_departures: self.trace.suppressed_departures,
            staggered_departures: self.trace.staggered_departures,
            gamma_equivalent,
            violations: self.violations,
            alpha,
            beta,
            envelope_violations,
            ratio_min,
            ratio_max,
            epochs,
            ratio_series,
            intervals: interval_rows,
            iterations: self.iterations,
            committee_audits: self.committee_audits,
            ledger_samples: self.ledger.samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate, TraceSpec};

    fn gnutella_spec(pop: usize, duration: f64, seed: u64) -> TraceSpec {
        TraceSpec {
            source: TraceSource::ExponentialSession {
                mean_hours: 2.3,
                arrival_rate_per_s: 1.0,
            },
            initial_population: pop,
            duration,
            seed,
        }
    }

    fn base_cfg(defense: DefenseKind, t: f64, horizon: f64, seed: u64) -> RunConfig {
        let sim = SimConfig {
            rng_seed: seed,
            horizon,
            ..SimConfig::default()
        };
        let adv = AdversaryConfig {
            spend_rate: t,
            strategy: if t > 0.0 { Strategy::SteadyJoin } else { Strategy::None },
            respond_to_purges: false,
            kappa: sim.kappa,
        };
        RunConfig::new(sim, defense, adv)
    }

    #[test]
    fn no_adversary_means_no_bad_ids() {
        let trace = generate(&gnutella_spec(500, 2_000.0, 1), &SimConfig::default()).unwrap();
        let cfg = base_cfg(
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            0.0,
            2_000.0,
            1,
        );
        let out = run_single(&trace, &cfg).unwrap();
        assert_eq!(out.max_bad_fraction, 0.0);
        assert_eq!(out.bad_joins_admitted, 0);
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert!(out.purge_count > 0, "churn alone must drive purges");
    }

    #[test]
    fn runs_are_deterministic() {
        let trace = generate(&gnutella_spec(300, 1_500.0, 7), &SimConfig::default()).unwrap();
        let cfg = base_cfg(
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            64.0,
            1_500.0,
            7,
        );
        let a = run_single(&trace, &cfg).unwrap();
        let b = run_single(&trace, &cfg).unwrap();
        assert_eq!(a.good_total, b.good_total);
        assert_eq!(a.adversary_total, b.adversary_total);
        assert_eq!(a.purge_count, b.purge_count);
        assert_eq!(a.max_bad_fraction, b.max_bad_fraction);
        assert_eq!(a.bad_joins_admitted, b.bad_joins_admitted);
    }

    #[test]
    fn population_invariant_holds_under_attack() {
        let trace = generate(&gnutella_spec(500, 2_000.0, 3), &SimConfig::default()).unwrap();
        for defense in [
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            DefenseKind::CCom,
        ] {
            let cfg = base_cfg(defense, 1024.0, 2_000.0, 3);
            let out = run_single(&trace, &cfg).unwrap();
            assert!(
                out.max_bad_fraction < 1.0 / 6.0,
                "{}: max bad fraction {}",
                out.defense,
                out.max_bad_fraction
            );
            assert!(out.violations.is_empty(), "{}: {:?}", out.defense, out.violations);
            assert!(out.budget_conservation_ok);
        }
    }

    #[test]
    fn ccom_block_path_matches_per_event_path() {
        let trace = generate(&gnutella_spec(400, 1_000.0, 11), &SimConfig::default()).unwrap();
        for t in [7.0, 64.0, 300.0] {
            let mut cfg = base_cfg(DefenseKind::CCom, t, 1_000.0, 11);
            let fast = run_single(&trace, &cfg).unwrap();
            cfg.force_per_event = true;
            let slow = run_single(&trace, &cfg).unwrap();
            assert_eq!(fast.adversary_total, slow.adversary_total, "T={t}");
            assert_eq!(fast.bad_joins_admitted, slow.bad_joins_admitted, "T={t}");
            assert_eq!(fast.good_total, slow.good_total, "T={t}");
            assert_eq!(fast.purge_count, slow.purge_count, "T={t}");
            assert_eq!(fast.interval_count, slow.interval_count, "T={t}");
            assert!((fast.max_bad_fraction - slow.max_bad_fraction).abs() < 1e-12, "T={t}");
        }
    }

    #[test]
    fn ergo_beats_ccom_under_heavy_attack() {
        let trace = generate(&gnutella_spec(500, 1_000.0, 5), &SimConfig::default()).unwrap();
        let t = 16_384.0;
        let ergo = run_single(
            &trace,
            &base_cfg(DefenseKind::Ergo { policy: DefensePolicy::base() }, t, 1_000.0, 5),
        )
        .unwrap();
        let ccom = run_single(&trace, &base_cfg(DefenseKind::CCom, t, 1_000.0, 5)).unwrap();
        assert!(
            ergo.rates.good_spend_rate * 2.0 < ccom.rates.good_spend_rate,
            "ergo {} vs ccom {}",
            ergo.rates.good_spend_rate,
            ccom.rates.good_spend_rate
        );
    }

    #[test]
    fn sybilcontrol_reports_cutoff_under_attack() {
        let trace = generate(&gnutella_spec(300, 500.0, 9), &SimConfig::default()).unwrap();
        let cfg = base_cfg(
            DefenseKind::SybilControl { test_period_s: 0.5 },
            2_000.0,
            500.0,
            9,
        );
        let out = run_single(&trace, &cfg).unwrap();
        assert!(out.cutoff_time.is_some(), "a 2000/s attack must swamp 300 ids");
        assert!(out.good_periodic > 0);
        assert!(out.budget_conservation_ok);
        // SybilControl keeps no invariant; crossing 1/6 is reported, not a
        // violation.
        assert!(out.violations.is_empty(), "{:?}", out.violations);
    }

    #[test]
    fn remp_rows_are_analytic() {
        let trace = ChurnTrace::default();
        let mut cfg = base_cfg(DefenseKind::Remp { t_max: 1e7 }, 1024.0, 10_000.0, 0);
        cfg.adversary.strategy = Strategy::SteadyJoin;
        let out = run_single(&trace, &cfg).unwrap();
        assert!((out.rates.good_spend_rate - 1.7e8).abs() / 1.7e8 < 1e-12);
        assert_eq!(out.remp_valid, Some(true));
        let mut cfg2 = cfg.clone();
        cfg2.adversary.spend_rate = 2e7;
        let out2 = run_single(&trace, &cfg2).unwrap();
        assert_eq!(out2.remp_valid, Some(false));
    }

    #[test]
    fn retention_respects_kappa_bound() {
        let trace = generate(&gnutella_spec(400, 1_000.0, 13), &SimConfig::default()).unwrap();
        let mut cfg = base_cfg(
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            256.0,
            1_000.0,
            13,
        );
        cfg.adversary.respond_to_purges = true;
        let out = run_single(&trace, &cfg).unwrap();
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert!(out.max_bad_fraction < 1.0 / 6.0);
        assert!(out.budget_conservation_ok);
    }

    #[test]
    fn committee_stays_good_majority() {
        let trace = generate(&gnutella_spec(2_000, 2_000.0, 21), &SimConfig::default()).unwrap();
        let mut cfg = base_cfg(
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            128.0,
            2_000.0,
            21,
        );
        cfg.adversary.respond_to_purges = true;
        cfg.committee_c = Some(32.0);
        let out = run_single(&trace, &cfg).unwrap();
        assert!(!out.committee_audits.is_empty());
        for audit in &out.committee_audits {
            assert!(audit.majority_ok, "audit {audit:?}");
        }
    }

    #[test]
    fn mirror_fraction_is_held_near_target() {
        let spec = gnutella_spec(1_000, 4_000.0, 31);
        let trace = generate(&spec, &SimConfig::default()).unwrap();
        let mut cfg = base_cfg(
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            0.0,
            4_000.0,
            31,
        );
        cfg.mirror_bad_fraction = Some(1.0 / 24.0);
        cfg.mirror_session_source = Some(spec.source.clone());
        let out = run_single(&trace, &cfg).unwrap();
        assert!(out.max_bad_fraction > 0.0);
        assert!(out.max_bad_fraction < 1.0 / 6.0);
        assert!(out.budget_conservation_ok);
    }

    #[test]
    fn estimate_stays_in_envelope_without_attack() {
        let trace = generate(&gnutella_spec(2_000, 20_000.0, 41), &SimConfig::default()).unwrap();
        let cfg = base_cfg(
            DefenseKind::Ergo { policy: DefensePolicy::base() },
            0.0,
            20_000.0,
            41,
        );
        let out = run_single(&trace, &cfg).unwrap();
        assert!(out.interval_count >= 1);
        assert_eq!(out.envelope_violations, Some(0));
        assert!(out.ratio_max.unwrap() < 10.0, "ratio max {:?}", out.ratio_max);
        assert!(out.ratio_min.unwrap() > 0.05, "ratio min {:?}", out.ratio_min);
    }
}
