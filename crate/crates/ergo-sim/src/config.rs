//! Experiment configuration: a JSON-compatible schema consumed by the CLI,
//! with flag overrides layered on top.

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, Strategy};
use crate::defense::DefensePolicy;
use crate::estimator::EstimateNumerator;
use crate::model::SimConfig;
use crate::runner::DefenseKind;
use crate::trace::{TraceSource, TraceSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Default adversary sweep: T in powers of two over [2^0, 2^20].
pub fn default_sweep_t() -> Vec<f64> {
    (0..=20).map(|k| (1u64 << k) as f64).collect()
}

fn default_horizon() -> f64 {
    10_000.0
}

fn default_repeats() -> u32 {
    3
}

fn default_remp_t_max() -> f64 {
    1e7
}

fn default_sc_period() -> f64 {
    crate::baseline::SYBILCONTROL_TEST_PERIOD_S
}

fn default_accuracy() -> f64 {
    0.98
}

fn default_defenses() -> Vec<String> {
    vec!["ergo".into()]
}

fn default_strategy() -> Strategy {
    Strategy::SteadyJoin
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub trace: TraceSpec,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<String>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub respond_to_purges: bool,
    #[serde(default = "default_sweep_t")]
    pub sweep_t: Vec<f64>,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub committee_c: Option<f64>,
    #[serde(default = "default_remp_t_max")]
    pub remp_t_max: f64,
    #[serde(default = "default_sc_period")]
    pub sybilcontrol_period_s: f64,
    #[serde(default = "default_accuracy")]
    pub classifier_accuracy: f64,
    #[serde(default)]
    pub estimator_numerator: EstimateNumerator,
    #[serde(default)]
    pub init_duration_s: Option<f64>,
}

impl ExperimentConfig {
    /// Gnutella-style default: exponential sessions, 1 arrival/s.
    pub fn example() -> Self {
        ExperimentConfig {
            trace: TraceSpec {
                source: TraceSource::ExponentialSession {
                    mean_hours: 2.3,
                    arrival_rate_per_s: 1.0,
                },
                initial_population: 10_000,
                duration: default_horizon(),
                seed: 1,
            },
            sim: SimConfig::default(),
            defenses: vec!["ergo".into(), "ccom".into()],
            strategy: default_strategy(),
            respond_to_purges: false,
            sweep_t: default_sweep_t(),
            horizon_s: default_horizon(),
            repeats: default_repeats(),
            committee_c: None,
            remp_t_max: default_remp_t_max(),
            sybilcontrol_period_s: default_sc_period(),
            classifier_accuracy: default_accuracy(),
            estimator_numerator: EstimateNumerator::default(),
            init_duration_s: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sim.validate().map_err(|e| e.to_string())?;
        if self.sweep_t.is_empty() {
            return Err("sweep_t must be nonempty".into());
        }
        if self.horizon_s <= 0.0 {
            return Err("horizon_s must be positive".into());
        }
        if self.repeats == 0 {
            return Err("repeats must be at least 1".into());
        }
        for name in &self.defenses {
            parse_defense(name, self)?;
        }
        Ok(())
    }

    pub fn adversary(&self, spend_rate: f64) -> AdversaryConfig {
        AdversaryConfig {
            spend_rate,
            strategy: if spend_rate > 0.0 { self.strategy } else { Strategy::None },
            respond_to_purges: self.respond_to_purges,
            kappa: self.sim.kappa,
        }
    }
}

/// Defense preset names as they appear on the CLI and in sweep rows.
pub fn parse_defense(name: &str, cfg: &ExperimentConfig) -> Result<DefenseKind, String> {
    let lower = name.to_ascii_lowercase();
    let kind = match lower.as_str() {
        "ergo" => DefenseKind::Ergo {
            policy: DefensePolicy::base(),
        },
        "ergo-ch1" => DefenseKind::Ergo {
            policy: DefensePolicy::ch1(),
        },
        "ergo-ch2" => DefenseKind::Ergo {
            policy: DefensePolicy::ch2(),
        },
        "ergo-sf" => DefenseKind::Ergo {
            policy: DefensePolicy::sf(cfg.classifier_accuracy),
        },
        "ergo-sf92" | "ergo-sf(92)" => DefenseKind::Ergo {
            policy: DefensePolicy::sf(0.92),
        },
        "ergo-sf98" | "ergo-sf(98)" => DefenseKind::Ergo {
            policy: DefensePolicy::sf(0.98),
        },
        "ccom" => DefenseKind::CCom,
        "sybilcontrol" => DefenseKind::SybilControl {
            test_period_s: cfg.sybilcontrol_period_s,
        },
        "remp" => DefenseKind::Remp {
            t_max: cfg.remp_t_max,
        },
        _ => {
            return Err(format!(
                "unknown defense `{name}` (expected ergo, ergo-ch1, ergo-ch2, \
                 ergo-sf, ergo-sf92, ergo-sf98, ccom, sybilcontrol, remp)"
            ))
        }
    };
    if let DefenseKind::Ergo { policy } = &kind {
        policy.validate().map_err(|e| e.to_string())?;
    }
    Ok(kind)
}

/// Short label for a trace source, used in sweep rows (comma-free so CSV
/// columns stay aligned).
pub fn trace_label(spec: &TraceSpec) -> String {
    match &spec.source {
        TraceSource::File { path } => format!("file:{}", path.replace(',', ";")),
        TraceSource::Weibull { shape, scale_hours } => {
            format!("weibull({shape};{scale_hours}h)")
        }
        TraceSource::ExponentialSession {
            mean_hours,
            arrival_rate_per_s,
        } => format!("exp({mean_hours}h;{arrival_rate_per_s}/s)"),
    }
}
