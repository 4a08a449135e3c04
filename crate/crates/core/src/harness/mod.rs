//! Experiment harness: synthetic tasks, preference data, fault injection
//! and the evaluation suites (latency, ablation, attribution).

pub mod ablation;
pub mod bench;
pub mod report;
pub mod task;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::drpo::{PreferenceTriple, TrainError};
use crate::hashing::derive_seed;
use crate::orchestrator::{
    compose, run, Context, EmittedOutput, Ensemble, ExecutionMode, InterfaceMode, OrchestratorError, RunError,
    RunOptions,
};
use crate::reward::attribution::{attribute_errors, AttributionConfig, Attributor};
use crate::reward::{score_solution, RewardError, Scorer};

pub use ablation::{run_ablation_suite, AblationConfig, AblationResult, Variant};
pub use bench::{run_latency_bench, BenchProfile};
pub use report::{Metric, Report};
pub use task::{SyntheticTask, TaskConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("label noise {0} is outside [0, 1)")]
    InvalidNoise(f64),
    #[error("fault severity {0} is outside (0, 1]")]
    InvalidSeverity(f64),
    #[error("no output from module `{0}`")]
    UnknownModuleOutput(String),
    #[error("output of module `{0}` has no text to corrupt")]
    UncorruptibleOutput(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Preference triples over uniformly sampled template pairs, labelled by the
/// task's reward model on the full composition. With probability `noise`
/// the label is flipped. Pairs whose scores tie are redrawn.
pub fn gen_preference_dataset(
    task: &SyntheticTask,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<PreferenceTriple>, HarnessError> {
    if !(0.0..1.0).contains(&noise) {
        return Err(HarnessError::InvalidNoise(noise));
    }
    if n == 0 {
        return Err(HarnessError::ZeroCount("dataset size"));
    }
    let ens = task.base_ensemble();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataset"));
    let vocab = task.config.vocab;
    let k = task.config.modules;
    let mut out = Vec::with_capacity(n);
    for ctx in task.contexts("train", n, seed) {
        let (a, b) = loop {
            let pa: Vec<usize> = (0..k).map(|_| rng.random_range(0..vocab)).collect();
            let pb: Vec<usize> = (0..k).map(|_| rng.random_range(0..vocab)).collect();
            let a = task.outputs_for(&ctx, &pa)?;
            let b = task.outputs_for(&ctx, &pb)?;
            let sa = score_solution(&task.rm, &compose(&ens, &a)?)?;
            let sb = score_solution(&task.rm, &compose(&ens, &b)?)?;
            if sa > sb {
                break (a, b);
            } else if sb > sa {
                break (b, a);
            }
        };
        let (winning, losing) = if rng.random::<f64>() < noise { (b, a) } else { (a, b) };
        out.push(PreferenceTriple {
            ctx,
            winning,
            losing,
        });
    }
    Ok(out)
}

/// Replaces `round(severity · n)` (at least one) of the `n` words in module
/// `module_id`'s text with distinct noise words. Other outputs are untouched.
pub fn inject_fault(
    outputs: &[EmittedOutput],
    module_id: &str,
    severity: f64,
    noise: &[String],
    seed: u64,
) -> Result<Vec<EmittedOutput>, HarnessError> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(HarnessError::InvalidSeverity(severity));
    }
    let idx = outputs
        .iter()
        .position(|o| o.module_id == module_id)
        .ok_or_else(|| HarnessError::UnknownModuleOutput(module_id.to_string()))?;
    let target = &outputs[idx];
    let Some(Value::String(text)) = target.output.content.get("text") else {
        return Err(HarnessError::UncorruptibleOutput(module_id.to_string()));
    };
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let n = words.len();
    let m = ((severity * n as f64).round() as usize).clamp(1, n.max(1)).min(noise.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    let fillers: Vec<&String> = noise.choose_multiple(&mut rng, m).collect();
    for (&p, f) in positions.iter().take(m).zip(fillers) {
        words[p] = f.clone();
    }
    let mut corrupted = target.output.clone();
    corrupted.content.insert("text".into(), Value::String(words.join(" ")));
    let mut out = outputs.to_vec();
    out[idx] = EmittedOutput::new(module_id, corrupted)?;
    Ok(out)
}

/// How evaluation runs sample and compose outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: ExecutionMode,
    pub interface: InterfaceMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::Parallel,
            interface: InterfaceMode::Canonical,
        }
    }
}

/// Fraction of contexts where `a`'s composed solution outscores `b`'s;
/// exact ties count one half. Both ensembles use the same per-context seed.
pub fn eval_winrate(
    a: &Ensemble,
    b: &Ensemble,
    rm: &dyn Scorer,
    contexts: &[Context],
    seed: u64,
    opts: EvalOptions,
) -> Result<f64, HarnessError> {
    if contexts.is_empty() {
        return Err(HarnessError::ZeroCount("contexts"));
    }
    let run_opts = RunOptions {
        interface: opts.interface,
    };
    let mut wins = 0.0;
    for (j, ctx) in contexts.iter().enumerate() {
        let s = derive_seed(seed, &format!("winrate/{j}"));
        let ra = score_solution(rm, &run(a, ctx, s, opts.mode, run_opts)?.solution)?;
        let rb = score_solution(rm, &run(b, ctx, s, opts.mode, run_opts)?.solution)?;
        if ra > rb {
            wins += 1.0;
        } else if ra == rb {
            wins += 0.5;
        }
    }
    Ok(wins / contexts.len() as f64)
}

/// Chance-corrected agreement between two label sequences; 1 when they agree
/// everywhere.
pub fn cohen_kappa(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "label sequences must align");
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    if agree == 1.0 {
        return 1.0;
    }
    let classes = a.iter().chain(b).copied().max().map_or(0, |m| m + 1);
    let mut pa = vec![0.0; classes];
    let mut pb = vec![0.0; classes];
    for (&x, &y) in a.iter().zip(b) {
        pa[x] += 1.0 / n;
        pb[y] += 1.0 / n;
    }
    let chance: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    (agree - chance) / (1.0 - chance)
}

/// Where un-faulted outputs come from in an attribution trial.
#[derive(Clone, Copy)]
pub enum FaultSource<'a> {
    /// Every module emits its target template.
    Targets,
    /// Outputs sampled from this ensemble.
    Sampled(&'a Ensemble),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMetrics {
    pub trials: usize,
    pub repetitions: usize,
    /// Suspect equals the faulty module, averaged over repetitions.
    pub accuracy: f64,
    /// Flagged modules that are the faulty one; 0 when nothing is flagged.
    pub precision: f64,
    /// Share of healthy modules that got flagged.
    pub false_attribution_rate: f64,
    /// Agreement of suspect labels between the two repetitions.
    pub kappa: f64,
}

pub const ATTRIBUTION_REPETITIONS: usize = 2;

/// Fault-injection trials. Each trial fixes a context and a faulty module
/// from `seed`; the two repetitions differ only in the corruption and
/// ranking seeds.
pub fn eval_attribution(
    task: &SyntheticTask,
    source: FaultSource<'_>,
    trials: usize,
    severity: f64,
    seed: u64,
    attributor: &dyn Attributor,
    config: &AttributionConfig,
) -> Result<AttributionMetrics, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::ZeroCount("trials"));
    }
    let ens = task.base_ensemble();
    let k = task.config.modules;
    let mut labels = vec![Vec::with_capacity(trials); ATTRIBUTION_REPETITIONS];
    let (mut hits, mut tp, mut fp) = (0usize, 0usize, 0usize);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("trial/{t}")));
        let faulty = rng.random_range(0..k);
        let ctx = Context::new(format!("attribution problem {t}"), format!("attr-{seed}-{t}"))?;
        let clean = match source {
            FaultSource::Targets => task.target_outputs(&ctx)?,
            FaultSource::Sampled(e) => {
                run(e, &ctx, rng.random(), ExecutionMode::Sequential, RunOptions::default())?.outputs
            }
        };
        let faulty_id = &task.module_ids[faulty];
        for (rep, rep_labels) in labels.iter_mut().enumerate() {
            let corrupted = inject_fault(
                &clean,
                faulty_id,
                severity,
                &task.noise,
                derive_seed(seed, &format!("rep{rep}/fault/{t}")),
            )?;
            let a = attribute_errors(
                &task.rm,
                &ens,
                &corrupted,
                &ctx,
                attributor,
                config,
                derive_seed(seed, &format!("rep{rep}/rank/{t}")),
            )?;
            let suspect = ens.index_of(a.top()).expect("ranked ids are registered");
            hits += usize::from(suspect == faulty);
            for id in &a.flagged {
                if id == faulty_id {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            rep_labels.push(suspect);
        }
    }
    let runs = (trials * ATTRIBUTION_REPETITIONS) as f64;
    Ok(AttributionMetrics {
        trials,
        repetitions: ATTRIBUTION_REPETITIONS,
        accuracy: hits as f64 / runs,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        false_attribution_rate: if k > 1 { fp as f64 / (runs * (k - 1) as f64) } else { 0.0 },
        kappa: cohen_kappa(&labels[0], &labels[1]),
    })
}
