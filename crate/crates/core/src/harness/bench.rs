//! Sequential vs. parallel latency benchmark with simulated module delays.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::report::Report;
use super::task::text_output;
use super::HarnessError;
use crate::orchestrator::generators::{FixedText, SimulatedLatency, WaitMode};
use crate::orchestrator::{run, Context, Ensemble, ExecutionMode, ModuleSpec, Role, RunOptions};

const TABLE3: &str = include_str!("../../presets/table3.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchProfile {
    pub name: String,
    pub latencies_ms: Vec<f64>,
    pub integration_ms: f64,
    pub repetitions: usize,
    #[serde(default = "default_wait")]
    pub wait: WaitMode,
}

fn default_wait() -> WaitMode {
    WaitMode::Sleep
}

impl BenchProfile {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "table3" => Some(Self::from_toml(TABLE3).expect("bundled preset parses")),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["table3"]
    }

    pub fn homogeneous(k: usize, t_ms: f64, integration_ms: f64, repetitions: usize) -> Self {
        Self {
            name: format!("homogeneous-{k}x{t_ms}"),
            latencies_ms: vec![t_ms; k],
            integration_ms,
            repetitions,
            wait: WaitMode::Sleep,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let p: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if self.latencies_ms.is_empty() {
            return Err("profile has no modules".into());
        }
        if !self.latencies_ms.iter().all(|&t| ok(t)) || !ok(self.integration_ms) {
            return Err("latencies must be finite and non-negative".into());
        }
        if self.repetitions == 0 {
            return Err("at least one repetition is required".into());
        }
        Ok(())
    }

    pub fn predicted_sequential_ms(&self) -> f64 {
        self.latencies_ms.iter().sum::<f64>() + self.integration_ms
    }

    pub fn predicted_parallel_ms(&self) -> f64 {
        self.latencies_ms.iter().cloned().fold(0.0, f64::max) + self.integration_ms
    }

    pub fn predicted_speedup(&self) -> f64 {
        self.predicted_sequential_ms() / self.predicted_parallel_ms()
    }

    /// Speedup when the sequential side is charged module time only.
    pub fn predicted_speedup_modules_only(&self) -> f64 {
        self.latencies_ms.iter().sum::<f64>() / self.predicted_parallel_ms()
    }

    /// Ensemble of constant-output modules delayed per the profile.
    pub fn ensemble(&self) -> Ensemble {
        let mut e = Ensemble::new();
        e.integration_latency = Duration::from_secs_f64(self.integration_ms / 1e3);
        for (i, &t) in self.latencies_ms.iter().enumerate() {
            let role = Role::STANDARD[i % Role::STANDARD.len()].clone();
            let inner = Arc::new(FixedText {
                output: text_output(role.as_str(), &format!("step {i} done")),
            });
            e.register(
                ModuleSpec::new(format!("s{}", i + 1), role),
                Arc::new(SimulatedLatency {
                    delay: Duration::from_secs_f64(t / 1e3),
                    mode: self.wait,
                    inner,
                }),
            )
            .expect("bench modules have unique ids");
        }
        e
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Medians of sequential and parallel wall time, next to the predictions.
pub fn run_latency_bench(profile: &BenchProfile, seed: u64) -> Result<Report, HarnessError> {
    profile.validate().map_err(HarnessError::InvalidTask)?;
    let ens = profile.ensemble();
    let ctx = Context::new("latency benchmark", "bench")?;
    let mut seq = Vec::with_capacity(profile.repetitions);
    let mut par = Vec::with_capacity(profile.repetitions);
    for rep in 0..profile.repetitions {
        let s = seed.wrapping_add(rep as u64);
        seq.push(run(&ens, &ctx, s, ExecutionMode::Sequential, RunOptions::default())?.trace.wall_ms);
        par.push(run(&ens, &ctx, s, ExecutionMode::Parallel, RunOptions::default())?.trace.wall_ms);
    }
    let t_seq = median(&mut seq);
    let t_par = median(&mut par);
    let reps = profile.repetitions;
    let mut r = Report::new(format!("bench-{}", profile.name), seed);
    r.push("modules", profile.latencies_ms.len() as f64, reps);
    r.push("predicted_sequential_ms", profile.predicted_sequential_ms(), reps);
    r.push("predicted_parallel_ms", profile.predicted_parallel_ms(), reps);
    r.push("predicted_speedup", profile.predicted_speedup(), reps);
    r.push("predicted_speedup_modules_only", profile.predicted_speedup_modules_only(), reps);
    let m = r.push_timing("measured_sequential_ms", t_seq, reps);
    m.baseline = Some(profile.predicted_sequential_ms());
    m.delta = Some(t_seq - profile.predicted_sequential_ms());
    let m = r.push_timing("measured_parallel_ms", t_par, reps);
    m.baseline = Some(profile.predicted_parallel_ms());
    m.delta = Some(t_par - profile.predicted_parallel_ms());
    let m = r.push_timing("measured_speedup", t_seq / t_par, reps);
    m.baseline = Some(profile.predicted_speedup());
    m.delta = Some(t_seq / t_par - profile.predicted_speedup());
    Ok(r)
}
