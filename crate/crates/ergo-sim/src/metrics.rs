//! Post-run analysis: epoch detection over the good-ID stream, alpha/beta
//! smoothness estimation, spend rates, and the estimate-ratio series with
//! its envelope check.
//!
//! Epoch boundaries fall at the earliest event where the good set's
//! symmetric difference against the epoch-start good set reaches
//! ceil((3/4)|G(start)|). The detector is incremental; brute-force
//! recomputation backs it in the oracle suite.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::estimator::IntervalRecord;
use crate::model::{ChangeTracker, CostLedger, EventPayload, Uid};
use crate::trace::ChurnTrace;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least two complete epochs, have {0}")]
    InsufficientEpochs(usize),
    #[error("not enough data: {0}")]
    InsufficientData(String),
}

/// One good join/depart as the audit stream records it. `joined_at` of a
/// departure is the departing ID's join time (classifies it against
/// snapshots in O(1)).
#[derive(Clone, Copy, Debug)]
pub struct GoodEvent {
    pub time: f64,
    pub join: bool,
    pub uid: Uid,
    pub joined_at: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRecord {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub good_joins: u64,
    /// Good join rate: joins in the epoch over its duration.
    pub rho: f64,
    /// False for the trailing epoch cut off by the horizon.
    pub complete: bool,
}

/// Partition [0, horizon] into epochs. `initial_good` is |G(0)|; events must
/// be strictly time-ordered with times in (0, horizon].
pub fn detect_epochs(initial_good: u64, events: &[GoodEvent], horizon: f64) -> Vec<EpochRecord> {
    let mut epochs = Vec::new();
    let mut tracker = ChangeTracker::new(0.0, initial_good);
    let mut start = 0.0;
    let mut joins = 0u64;
    for ev in events {
        if ev.join {
            tracker.note_join();
            joins += 1;
        } else {
            tracker.note_remove(ev.joined_at);
        }
        if tracker.fires_three_quarters_of_snap() {
            let dur = ev.time - start;
            epochs.push(EpochRecord {
                index: epochs.len(),
                start,
                end: ev.time,
                good_joins: joins,
                rho: if dur > 0.0 { joins as f64 / dur } else { 0.0 },
                complete: true,
            });
            start = ev.time;
            joins = 0;
            tracker.reset(ev.time);
        }
    }
    let dur = horizon - start;
    epochs.push(EpochRecord {
        index: epochs.len(),
        start,
        end: horizon,
        good_joins: joins,
        rho: if dur > 0.0 { joins as f64 / dur } else { 0.0 },
        complete: false,
    });
    epochs
}

/// Replay a raw trace into the audit-stream form (for `trace analyze`,
/// which has no defense in the loop). Returns |G(0)| after pre-start
/// bootstrap rows, the event stream, and the time span covered.
pub fn good_events_from_trace(trace: &ChurnTrace) -> (u64, Vec<GoodEvent>, f64) {
    let mut joined: HashMap<Uid, f64> = trace
        .initial_ids
        .iter()
        .map(|id| (id.uid, id.joined_at))
        .collect();
    let mut events = Vec::new();
    let mut initial = trace.initial_ids.len() as i64;
    let mut end = 0.0f64;
    for ev in &trace.events {
        if ev.time < 0.0 {
            match ev.payload {
                EventPayload::Join(id) => {
                    joined.insert(id.uid, ev.time);
                    initial += 1;
                }
                EventPayload::Depart(uid) => {
                    joined.remove(&uid);
                    initial -= 1;
                }
            }
            continue;
        }
        end = end.max(ev.time);
        match ev.payload {
            EventPayload::Join(id) => {
                joined.insert(id.uid, ev.time);
                events.push(GoodEvent {
                    time: ev.time,
                    join: true,
                    uid: id.uid,
                    joined_at: ev.time,
                });
            }
            EventPayload::Depart(uid) => {
                let j = joined.remove(&uid).unwrap_or(0.0);
                events.push(GoodEvent {
                    time: ev.time,
                    join: false,
                    uid,
                    joined_at: j,
                });
            }
        }
    }
    (initial.max(0) as u64, events, end)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    pub pairs_used: usize,
    /// Consecutive pairs skipped because one epoch had zero good joins.
    pub zero_rate_pairs_skipped: usize,
}

/// Smallest alpha satisfying the between-epoch smoothness definition on this
/// trace: max over consecutive complete epochs of max(r_i/r_{i-1}, r_{i-1}/r_i).
pub fn estimate_alpha(epochs: &[EpochRecord]) -> Result<AlphaEstimate, MetricsError> {
    let complete: Vec<&EpochRecord> = epochs.iter().filter(|e| e.complete).collect();
    if complete.len() < 2 {
        return Err(MetricsError::InsufficientEpochs(complete.len()));
    }
    let mut alpha: f64 = 1.0;
    let mut used = 0;
    let mut skipped = 0;
    for w in complete.windows(2) {
        let (a, b) = (w[0].rho, w[1].rho);
        if a <= 0.0 || b <= 0.0 {
            skipped += 1;
            continue;
        }
        alpha = alpha.max(b / a).max(a / b);
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::InsufficientEpochs(0));
    }
    Ok(AlphaEstimate {
        alpha,
        pairs_used: used,
        zero_rate_pairs_skipped: skipped,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BetaEstimate {
    pub beta: f64,
    pub windows_checked: usize,
    pub zero_rate_epochs_skipped: usize,
}

/// Default geometric grid of window lengths for one epoch: 8 points from
/// 1 s up to a quarter of the epoch.
pub fn default_window_grid(epoch_duration: f64) -> Vec<f64> {
    let hi = (epoch_duration / 4.0).max(2.0);
    let lo = 1.0_f64.min(hi / 2.0);
    let n = 8;
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}

/// Smallest beta making every sampled window satisfy the within-epoch
/// smoothness inequalities (join lower/upper, departure upper). Sampling a
/// grid rather than all window lengths makes this a lower bound on the true
/// beta.
pub fn estimate_beta(
    epochs: &[EpochRecord],
    events: &[GoodEvent],
    grid: &[f64],
) -> Result<BetaEstimate, MetricsError> {
    if grid.is_empty() {
        return Err(MetricsError::InsufficientData("empty window grid".into()));
    }
    let mut beta: f64 = 1.0;
    let mut windows = 0;
    let mut skipped = 0;
    for epoch in epochs.iter().filter(|e| e.complete) {
        let joins: Vec<f64> = events
            .iter()
            .filter(|e| e.join && e.time > epoch.start && e.time <= epoch.end)
            .map(|e| e.time)
            .collect();
        let departs: Vec<f64> = events
            .iter()
            .filter(|e| !e.join && e.time > epoch.start && e.time <= epoch.end)
            .map(|e| e.time)
            .collect();
        if epoch.rho <= 0.0 {
            // Zero-join epochs make the departure bound unsatisfiable.
            if !departs.is_empty() {
                skipped += 1;
            }
            continue;
        }
        let dur = epoch.end - epoch.start;
        for &len in grid {
            if len <= 0.0 || len > dur {
                continue;
            }
            windows += 1;
            let expected = len * epoch.rho;
            let max_joins = max_count_in_window(&joins, len);
            let min_joins = min_count_in_window(&joins, len, epoch.start, epoch.end);
            let max_departs = max_count_in_window(&departs, len);
            // ceil(beta * expected) >= max_joins
            if max_joins > 0 {
                beta = beta.max(nudge_up((max_joins - 1) as f64 / expected, |b| {
                    (b * expected).ceil() as u64 >= max_joins
                }));
            }
            if max_departs > 0 {
                beta = beta.max(nudge_up((max_departs - 1) as f64 / expected, |b| {
                    (b * expected).ceil() as u64 >= max_departs
                }));
            }
            // floor(expected / beta) <= min_joins
            beta = beta.max(nudge_up(expected / (min_joins + 1) as f64, |b| {
                (expected / b).floor() as u64 <= min_joins
            }));
        }
    }
    Ok(BetaEstimate {
        beta: beta.max(1.0),
        windows_checked: windows,
        zero_rate_epochs_skipped: skipped,
    })
}

/// Smallest b >= max(candidate, 1) satisfying `ok`, found by bumping the
/// candidate across floor/ceil boundaries.
fn nudge_up(candidate: f64, ok: impl Fn(f64) -> bool) -> f64 {
    let mut b = candidate.max(1.0);
    let mut guard = 0;
    while !ok(b) && guard < 64 {
        b = (b * (1.0 + 1e-12)).max(b + f64::EPSILON);
        guard += 1;
    }
    b
}

/// Max event count over any window of length `len` (windows end at events).
fn max_count_in_window(times: &[f64], len: f64) -> u64 {
    let mut best = 0u64;
    let mut lo = 0usize;
    for hi in 0..times.len() {
        while times[hi] - times[lo] > len {
            lo += 1;
        }
        best = best.max((hi - lo + 1) as u64);
    }
    best
}

/// Min event count over windows [x, x+len] inside [start, end], evaluated at
/// event granularity: window starts just after each event plus the epoch
/// ends.
fn min_count_in_window(times: &[f64], len: f64, start: f64, end: f64) -> u64 {
    if end - start < len {
        return 0;
    }
    let count_in = |lo: f64| -> u64 {
        let hi = lo + len;
        let a = times.partition_point(|&t| t <= lo);
        let b = times.partition_point(|&t| t <= hi);
        (b - a) as u64
    };
    let mut best = count_in(start).min(count_in(end - len));
    for &t in times {
        if t + len <= end {
            best = best.min(count_in(t));
        }
        if best == 0 {
            break;
        }
    }
    best
}

/// Substitute estimates back into the smoothness inequalities (self-check).
pub fn verify_smoothness(
    epochs: &[EpochRecord],
    events: &[GoodEvent],
    grid: &[f64],
    alpha: f64,
    beta: f64,
) -> bool {
    let complete: Vec<&EpochRecord> = epochs.iter().filter(|e| e.complete).collect();
    for w in complete.windows(2) {
        let (a, b) = (w[0].rho, w[1].rho);
        if a <= 0.0 || b <= 0.0 {
            continue;
        }
        if b > alpha * a * (1.0 + 1e-9) || b < a / alpha * (1.0 - 1e-9) {
            return false;
        }
    }
    for epoch in &complete {
        if epoch.rho <= 0.0 {
            continue;
        }
        let joins: Vec<f64> = events
            .iter()
            .filter(|e| e.join && e.time > epoch.start && e.time <= epoch.end)
            .map(|e| e.time)
            .collect();
        let departs: Vec<f64> = events
            .iter()
            .filter(|e| !e.join && e.time > epoch.start && e.time <= epoch.end)
            .map(|e| e.time)
            .collect();
        for &len in grid {
            if len <= 0.0 || len > epoch.end - epoch.start {
                continue;
            }
            let expected = len * epoch.rho;
            let upper = (beta * expected).ceil() as u64;
            let lower = (expected / beta).floor() as u64;
            if max_count_in_window(&joins, len) > upper
                || max_count_in_window(&departs, len) > upper
                || min_count_in_window(&joins, len, epoch.start, epoch.end) < lower
            {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpendRates {
    pub good_spend_rate: f64,
    pub adversary_spend_rate_observed: f64,
    pub entrance_rate: f64,
    pub purge_rate: f64,
    pub periodic_rate: f64,
}

pub fn compute_spend_rates(ledger: &CostLedger, horizon: f64) -> SpendRates {
    debug_assert!(horizon > 0.0);
    SpendRates {
        good_spend_rate: ledger.good_total() as f64 / horizon,
        adversary_spend_rate_observed: ledger.adversary_total as f64 / horizon,
        entrance_rate: ledger.good_entrance as f64 / horizon,
        purge_rate: ledger.good_purge as f64 / horizon,
        periodic_rate: ledger.good_periodic as f64 / horizon,
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RatioSample {
    pub time: f64,
    pub estimate: f64,
    pub true_rho: f64,
    pub ratio: f64,
}

/// Estimate/true-rate series sampled at every estimate update and at every
/// epoch start once the first interval has closed. rho comes from the epoch
/// containing the sample time.
pub fn build_ratio_series(
    intervals: &[IntervalRecord],
    epochs: &[EpochRecord],
) -> Vec<RatioSample> {
    let Some(first) = intervals.first() else {
        return Vec::new();
    };
    let first_end = first.end;
    let rho_at = |t: f64| -> f64 {
        epochs
            .iter()
            .find(|e| t > e.start && t <= e.end)
            .or(epochs.last())
            .map_or(0.0, |e| e.rho)
    };
    let estimate_in_force = |t: f64| -> Option<f64> {
        let idx = intervals.partition_point(|iv| iv.end <= t);
        if idx == 0 {
            None // before the first update
        } else {
            Some(intervals[idx - 1].estimate_set)
        }
    };
    let mut samples = Vec::new();
    let mut push = |time: f64, estimate: f64, true_rho: f64| {
        if true_rho > 0.0 {
            samples.push(RatioSample {
                time,
                estimate,
                true_rho,
                ratio: estimate / true_rho,
            });
        }
    };
    for iv in intervals {
        push(iv.end, iv.estimate_set, rho_at(iv.end));
    }
    // Epoch-start samples capture the in-force estimate against the NEW
    // epoch's rate (the boundary instant itself closes the old epoch).
    for ep in epochs.iter().skip(1) {
        if ep.start > first_end {
            if let Some(est) = estimate_in_force(ep.start) {
                push(ep.start, est, ep.rho);
            }
        }
    }
    samples.sort_by(|a, b| a.time.total_cmp(&b.time));
    samples
}

/// Theorem-2 style envelope bounds for the measured alpha/beta.
pub fn theorem2_envelope(alpha: f64, beta: f64) -> (f64, f64) {
    let a4 = alpha.powi(4);
    (
        1.0 / (418.0 * a4 * beta.powi(3)),
        267.0 * a4 * beta.powi(5),
    )
}

/// Count ratio samples outside the envelope.
pub fn theorem2_envelope_check(samples: &[RatioSample], alpha: f64, beta: f64) -> usize {
    let (lo, hi) = theorem2_envelope(alpha, beta);
    samples
        .iter()
        .filter(|s| s.ratio < lo || s.ratio > hi)
        .count()
}
