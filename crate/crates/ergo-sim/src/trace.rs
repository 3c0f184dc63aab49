//! Good-ID churn traces: synthesis from session-length models and ingestion
//! of timestamped join/depart CSV files.
//!
//! Two synthetic sources are supported: Weibull session lengths with Poisson
//! arrivals sized to hold the population near its initial value, and
//! exponential sessions with an explicit Poisson arrival rate. File traces
//! use the CSV schema `time_s,event,id` (header optional); rows with negative
//! timestamps are a bootstrap convention for "present before the run starts"
//! and are turned into initial membership by the runner.
//!
//! Generators enforce the model-side churn constraints: the good population
//! never drops below n0 (departures are suppressed and retried a round
//! later), and per-round good departures never exceed eps*|G| (excess
//! departures are staggered into later rounds). Both adjustments are counted
//! and reported.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, Weibull};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::model::{Event, EventPayload, IdKind, Identity, SimConfig, Uid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    File {
        path: String,
    },
    Weibull {
        shape: f64,
        scale_hours: f64,
    },
    ExponentialSession {
        mean_hours: f64,
        arrival_rate_per_s: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub source: TraceSource,
    pub initial_population: usize,
    /// Trace length in seconds.
    pub duration: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: timestamps decrease")]
    Order { line: usize },
    #[error("invalid trace config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A time-ordered good-ID event stream plus the initial membership.
#[derive(Clone, Debug, Default)]
pub struct ChurnTrace {
    pub initial_ids: Vec<Identity>,
    pub events: Vec<Event>,
    /// Nominal good join rate (IDs/second) of the source; used to size the
    /// estimator's idealized initialization window.
    pub nominal_join_rate: f64,
    pub suppressed_departures: u64,
    pub staggered_departures: u64,
}

impl ChurnTrace {
    pub fn event_count(&self) -> usize {
        self.events.len()
    }
}

/// Mean session length in seconds implied by a synthetic source.
pub fn mean_session_seconds(source: &TraceSource) -> Result<f64, TraceError> {
    match source {
        TraceSource::Weibull { shape, scale_hours } => {
            if *shape <= 0.0 || *scale_hours <= 0.0 {
                return Err(TraceError::Config("weibull parameters must be positive".into()));
            }
            Ok(scale_hours * 3600.0 * gamma(1.0 + 1.0 / shape))
        }
        TraceSource::ExponentialSession { mean_hours, .. } => {
            if *mean_hours <= 0.0 {
                return Err(TraceError::Config("session mean must be positive".into()));
            }
            Ok(mean_hours * 3600.0)
        }
        TraceSource::File { .. } => Err(TraceError::Config(
            "file sources have no parametric session model".into(),
        )),
    }
}

/// Draw one session length in seconds.
pub fn sample_session<R: Rng>(source: &TraceSource, rng: &mut R) -> f64 {
    match source {
        TraceSource::Weibull { shape, scale_hours } => {
            let w = Weibull::new(scale_hours * 3600.0, *shape).expect("validated");
            w.sample(rng)
        }
        TraceSource::ExponentialSession { mean_hours, .. } => {
            let e = Exp::new(1.0 / (mean_hours * 3600.0)).expect("validated");
            e.sample(rng)
        }
        TraceSource::File { .. } => unreachable!("file sources are not sampled"),
    }
}

/// Remaining session length for a member of a long-running (stationary)
/// population: the equilibrium residual distribution with CDF
/// (1/m) * integral_0^v S(u) du. Starting the initial cohort from fresh
/// session draws instead would inject a die-off transient that breaks the
/// stationarity the arrival-rate sizing aims for (severe for heavy-tailed
/// sessions).
///
/// For Weibull(shape k, scale c) the residual is c * G^(1/k) with
/// G ~ Gamma(1/k, 1): P(c*G^(1/k) <= v) = gamma_lr(1/k, (v/c)^k), which is
/// exactly the equilibrium CDF. Exponential sessions are memoryless, so the
/// residual is a fresh draw.
pub fn sample_initial_residual<R: Rng>(source: &TraceSource, rng: &mut R) -> f64 {
    match source {
        TraceSource::Weibull { shape, scale_hours } => {
            let g = Gamma::new(1.0 / shape, 1.0).expect("validated");
            let u: f64 = rng.gen();
            scale_hours * 3600.0 * g.inverse_cdf(u).powf(1.0 / shape)
        }
        _ => sample_session(source, rng),
    }
}

/// Arrival rate (joins/second) used by the generator.
pub fn arrival_rate(spec: &TraceSpec) -> Result<f64, TraceError> {
    match &spec.source {
        TraceSource::ExponentialSession {
            arrival_rate_per_s, ..
        } => {
            if *arrival_rate_per_s <= 0.0 {
                return Err(TraceError::Config("arrival rate must be positive".into()));
            }
            Ok(*arrival_rate_per_s)
        }
        // Rate that keeps the expected population near the initial value.
        TraceSource::Weibull { .. } => {
            Ok(spec.initial_population as f64 / mean_session_seconds(&spec.source)?)
        }
        TraceSource::File { .. } => Err(TraceError::Config(
            "file sources carry their own event stream".into(),
        )),
    }
}

/// Synthesize a trace. Pure function of (spec, sim): identical inputs yield
/// identical event lists.
pub fn generate(spec: &TraceSpec, sim: &SimConfig) -> Result<ChurnTrace, TraceError> {
    if matches!(spec.source, TraceSource::File { .. }) {
        return Err(TraceError::Config("use ingest_trace_file for file sources".into()));
    }
    if spec.initial_population < sim.n0 {
        return Err(TraceError::Config(format!(
            "initial_population {} below n0 {}",
            spec.initial_population, sim.n0
        )));
    }
    if spec.duration < 0.0 {
        return Err(TraceError::Config("duration must be non-negative".into()));
    }
    let rate = arrival_rate(spec)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let mut initial_ids = Vec::with_capacity(spec.initial_population);
    // Min-heap of pending departures (time, uid).
    let mut departures: BinaryHeap<Reverse<(OrdF64, Uid)>> = BinaryHeap::new();
    for uid in 0..spec.initial_population as Uid {
        initial_ids.push(Identity {
            uid,
            kind: IdKind::Good,
            joined_at: 0.0,
        });
        let dep = sample_initial_residual(&spec.source, &mut rng);
        if dep < spec.duration {
            departures.push(Reverse((OrdF64(dep), uid)));
        }
    }

    let mut events = Vec::new();
    let mut next_uid = spec.initial_population as Uid;
    let mut alive = spec.initial_population as u64;
    let mut suppressed = 0u64;
    let mut staggered = 0u64;
    let mut last_time = 0.0f64;
    let mut round_idx = u64::MAX;
    let mut departs_this_round = 0u64;

    let arrival_gap = Exp::new(rate).map_err(|e| TraceError::Config(e.to_string()))?;
    let mut next_arrival = arrival_gap.sample(&mut rng);

    loop {
        let next_dep = departures.peek().map(|Reverse((t, _))| t.0);
        let (t, is_arrival) = match next_dep {
            Some(d) if d <= next_arrival => (d, false),
            _ => (next_arrival, true),
        };
        if t >= spec.duration {
            break;
        }
        if is_arrival {
            let emit = strictly_after(t, last_time);
            let uid = next_uid;
            next_uid += 1;
            events.push(Event::join(
                emit,
                Identity {
                    uid,
                    kind: IdKind::Good,
                    joined_at: emit,
                },
            ));
            alive += 1;
            last_time = emit;
            let dep = emit + sample_session(&spec.source, &mut rng);
            if dep < spec.duration {
                departures.push(Reverse((OrdF64(dep), uid)));
            }
            next_arrival += arrival_gap.sample(&mut rng);
        } else {
            let Reverse((_, uid)) = departures.pop().expect("peeked");
            // n0 floor: retry one round later.
            if alive <= sim.n0 as u64 {
                suppressed += 1;
                departures.push(Reverse((OrdF64(t + sim.round_len), uid)));
                continue;
            }
            // Per-round cap on good departures.
            let round = (t / sim.round_len) as u64;
            if round != round_idx {
                round_idx = round;
                departs_this_round = 0;
            }
            if (departs_this_round + 1) as f64 > sim.epsilon * alive as f64 {
                staggered += 1;
                departures.push(Reverse((OrdF64(t + sim.round_len), uid)));
                continue;
            }
            let emit = strictly_after(t, last_time);
            events.push(Event::depart(emit, uid));
            alive -= 1;
            departs_this_round += 1;
            last_time = emit;
        }
    }

    Ok(ChurnTrace {
        initial_ids,
        events,
        nominal_join_rate: rate,
        suppressed_departures: suppressed,
        staggered_departures: staggered,
    })
}

fn strictly_after(t: f64, last: f64) -> f64 {
    if t > last {
        t
    } else {
        last.next_up()
    }
}

#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("no NaN times")
    }
}

/// Parse a trace CSV. Second-resolution timestamp collisions are resolved by
/// deterministic sub-second offsets: the k-th event sharing a raw timestamp
/// gets +k*1e-6 s.
pub fn ingest_trace_file(path: &Path, limit: Option<usize>) -> Result<ChurnTrace, TraceError> {
    let text = std::fs::read_to_string(path)?;
    ingest_trace_str(&text, limit)
}

pub fn ingest_trace_str(text: &str, limit: Option<usize>) -> Result<ChurnTrace, TraceError> {
    let mut events = Vec::new();
    let mut alias: HashMap<&str, Uid> = HashMap::new();
    let mut next_uid: Uid = 0;
    let mut prev_raw = f64::NEG_INFINITY;
    let mut dup_k = 0u64;
    let mut last_emitted = f64::NEG_INFINITY;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(time_s), Some(kind), Some(id)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(TraceError::Parse {
                line: lineno,
                msg: format!("expected `time,event,id`, got `{line}`"),
            });
        };
        let raw: f64 = match time_s.parse() {
            Ok(v) => v,
            // A non-numeric first field on the first data line is a header.
            Err(_) if events.is_empty() && prev_raw == f64::NEG_INFINITY => continue,
            Err(e) => {
                return Err(TraceError::Parse {
                    line: lineno,
                    msg: format!("bad timestamp `{time_s}`: {e}"),
                })
            }
        };
        if raw < prev_raw {
            return Err(TraceError::Order { line: lineno });
        }
        if raw == prev_raw {
            dup_k += 1;
        } else {
            dup_k = 0;
            prev_raw = raw;
        }
        let mut t = raw + dup_k as f64 * 1e-6;
        if t <= last_emitted {
            t = last_emitted.next_up();
        }
        last_emitted = t;

        match kind {
            "join" => {
                if alias.contains_key(id) {
                    return Err(TraceError::Parse {
                        line: lineno,
                        msg: format!("id {id} joined twice without departing"),
                    });
                }
                let uid = next_uid;
                next_uid += 1;
                alias.insert(id, uid);
                events.push(Event::join(
                    t,
                    Identity {
                        uid,
                        kind: IdKind::Good,
                        joined_at: t,
                    },
                ));
            }
            "depart" => {
                let Some(uid) = alias.remove(id) else {
                    return Err(TraceError::Parse {
                        line: lineno,
                        msg: format!("departure of id {id} that never joined"),
                    });
                };
                events.push(Event::depart(t, uid));
            }
            other => {
                return Err(TraceError::Parse {
                    line: lineno,
                    msg: format!("unknown event kind `{other}`"),
                })
            }
        }
        if let Some(max) = limit {
            if events.len() >= max {
                break;
            }
        }
    }

    // Nominal rate from the non-negative-time body of the trace.
    let mut first_t = f64::INFINITY;
    let mut last_t = f64::NEG_INFINITY;
    let mut joins = 0u64;
    for ev in &events {
        if ev.time < 0.0 {
            continue;
        }
        first_t = first_t.min(ev.time);
        last_t = last_t.max(ev.time);
        if matches!(ev.payload, EventPayload::Join(_)) {
            joins += 1;
        }
    }
    let span = (last_t - first_t).max(1.0);
    let nominal = if joins == 0 { 1.0 } else { joins as f64 / span };

    Ok(ChurnTrace {
        initial_ids: Vec::new(),
        events,
        nominal_join_rate: nominal,
        suppressed_departures: 0,
        staggered_departures: 0,
    })
}

/// Serialize a trace to the CSV schema. Initial members are written as join
/// rows in the second before t=0 so ingestion reconstructs them as pre-start
/// bootstrap membership.
pub fn export_csv(trace: &ChurnTrace) -> String {
    let mut out = String::new();
    out.push_str("time_s,event,id\n");
    for (k, id) in trace.initial_ids.iter().enumerate() {
        let t = -1.0 + k as f64 * 1e-6;
        let _ = writeln!(out, "{},join,g{}", t, id.uid);
    }
    for ev in &trace.events {
        match ev.payload {
            EventPayload::Join(id) => {
                let _ = writeln!(out, "{},join,g{}", ev.time, id.uid);
            }
            EventPayload::Depart(uid) => {
                let _ = writeln!(out, "{},depart,g{}", ev.time, uid);
            }
        }
    }
    out
}
