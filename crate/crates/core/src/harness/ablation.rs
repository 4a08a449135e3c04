//! Ablation suite: the full configuration against four reduced ones.
//!
//! Every variant is trained from the same base ensemble on the same
//! preference data and scored on quality (win-rate against the untrained
//! base), latency (bench profile in the variant's execution mode) and
//! attribution accuracy (fault injection on outputs sampled from the
//! trained ensemble).

use serde::{Deserialize, Serialize};

use super::bench::{run_latency_bench, BenchProfile};
use super::report::Report;
use super::task::SyntheticTask;
use super::{eval_attribution, eval_winrate, gen_preference_dataset, EvalOptions, FaultSource, HarnessError};
use crate::drpo::{train, TrainConfig};
use crate::orchestrator::{ExecutionMode, InterfaceMode};
use crate::reward::attribution::{AttributionConfig, Attributor, ByContribution, ByIntegrated};
use crate::reward::Mixing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoContribution,
    Sequential,
    AdHoc,
    JointOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoContribution,
        Variant::Sequential,
        Variant::AdHoc,
        Variant::JointOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoContribution => "no-contribution",
            Variant::Sequential => "sequential",
            Variant::AdHoc => "ad-hoc",
            Variant::JointOnly => "joint-only",
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::NoContribution => {
                cfg.alpha = 1.0;
                cfg.beta = 0.0;
                cfg.learnable_temperature = false;
            }
            Variant::AdHoc => cfg.interface = InterfaceMode::AdHoc,
            Variant::JointOnly => cfg.skip_phase1 = true,
            Variant::Full | Variant::Sequential => {}
        }
        cfg
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            mode: match self {
                Variant::Sequential => ExecutionMode::Sequential,
                _ => ExecutionMode::Parallel,
            },
            interface: match self {
                Variant::AdHoc => InterfaceMode::AdHoc,
                _ => InterfaceMode::Canonical,
            },
        }
    }

    /// Attributor and reward mixing this variant can use to localize faults.
    pub fn attribution(&self) -> (Box<dyn Attributor>, AttributionConfig) {
        let opts = self.eval_options();
        match self {
            Variant::NoContribution => (
                Box::new(ByIntegrated),
                AttributionConfig {
                    mixing: Mixing::fixed(1.0, 0.0),
                    interface: opts.interface,
                    ..AttributionConfig::default()
                },
            ),
            _ => (
                Box::new(ByContribution),
                AttributionConfig {
                    interface: opts.interface,
                    ..AttributionConfig::default()
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub dataset_size: usize,
    pub noise: f64,
    pub winrate_contexts: usize,
    pub attribution_trials: usize,
    pub severity: f64,
    pub bench: BenchProfile,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset_size: 4000,
            noise: 0.0,
            winrate_contexts: 500,
            attribution_trials: 200,
            severity: 0.8,
            bench: {
                let mut p = BenchProfile::preset("table3").expect("bundled preset");
                p.repetitions = 3;
                p
            },
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub win_rate: f64,
    pub latency_ms: f64,
    pub attribution_accuracy: f64,
}

/// Trains and evaluates every [`Variant`]; returns per-variant results and
/// a report with deltas against the full configuration.
pub fn run_ablation_suite(
    task: &SyntheticTask,
    cfg: &AblationConfig,
) -> Result<(Vec<AblationResult>, Report), HarnessError> {
    let data = gen_preference_dataset(task, cfg.dataset_size, cfg.noise, cfg.seed)?;
    let base = task.base_ensemble();
    let held_out = task.contexts("heldout", cfg.winrate_contexts, cfg.seed);
    let bench = run_latency_bench(&cfg.bench, cfg.seed)?;
    let parallel_ms = bench.get("measured_parallel_ms").expect("bench reports parallel time");
    let sequential_ms = bench.get("measured_sequential_ms").expect("bench reports sequential time");

    let mut results = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut ens = task.base_ensemble();
        train(&mut ens, &task.rm, &data, &variant.train_config(&cfg.train))?;
        let opts = variant.eval_options();
        let win_rate = eval_winrate(&ens, &base, &task.rm, &held_out, cfg.seed, opts)?;
        let (attributor, acfg) = variant.attribution();
        let attr = eval_attribution(
            task,
            FaultSource::Sampled(&ens),
            cfg.attribution_trials,
            cfg.severity,
            cfg.seed,
            attributor.as_ref(),
            &acfg,
        )?;
        results.push(AblationResult {
            variant,
            win_rate,
            latency_ms: if opts.mode == ExecutionMode::Sequential {
                sequential_ms
            } else {
                parallel_ms
            },
            attribution_accuracy: attr.accuracy,
        });
    }

    let mut report = Report::new("ablation", cfg.seed);
    let full = results[0].clone();
    for r in &results {
        let name = r.variant.name();
        let rows = [
            ("win_rate", r.win_rate, full.win_rate, cfg.winrate_contexts, false),
            ("latency_ms", r.latency_ms, full.latency_ms, cfg.bench.repetitions, true),
            (
                "attribution_accuracy",
                r.attribution_accuracy,
                full.attribution_accuracy,
                cfg.attribution_trials,
                false,
            ),
        ];
        for (metric, value, baseline, reps, timing) in rows {
            let m = if timing {
                report.push_timing(format!("{name}/{metric}"), value, reps)
            } else {
                report.push(format!("{name}/{metric}"), value, reps)
            };
            m.baseline = Some(baseline);
            m.delta = Some(value - baseline);
        }
    }
    Ok((results, report))
}
