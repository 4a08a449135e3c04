//! The six workflows and their file outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use modrl_core::drpo::{train, Checkpoint, Phase, PreferenceTriple};
use modrl_core::harness::ablation::{run_ablation_suite, AblationConfig};
use modrl_core::harness::bench::{run_latency_bench, BenchProfile};
use modrl_core::harness::report::Report;
use modrl_core::harness::task::{SyntheticTask, TaskConfig};
use modrl_core::harness::{eval_attribution, eval_winrate, gen_preference_dataset, EvalOptions, FaultSource};
use modrl_core::hashing::sha256_hex;
use modrl_core::orchestrator::Ensemble;
use modrl_core::reward::attribution::{AttributionConfig, AttributorRegistry};
use modrl_core::reward::{Scorer, ScorerRegistry};
use serde::Serialize;

use crate::config::{CliConfig, Settings, Source};
use crate::CliError;

pub const COMMANDS: [&str; 6] = ["gen-data", "train", "eval", "bench", "ablate", "attribute"];

pub const DATASET: &str = "dataset.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const HISTORY: &str = "history.jsonl";

/// Per-command manifest file, so runs sharing a directory keep theirs.
pub fn manifest_name(command: &str) -> String {
    format!("manifest-{command}.json")
}

/// Digest identifying the engine build that produced a run.
pub fn engine_digest() -> String {
    sha256_hex(format!("modrl-core {}", modrl_core::VERSION).as_bytes())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    engine_version: &'a str,
    engine_digest: String,
    /// Resolved settings without the output directory.
    config: serde_json::Value,
    provenance: &'a std::collections::BTreeMap<String, Source>,
    outputs: Vec<String>,
    error: Option<String>,
}

/// Runs `cfg.command`, then writes the manifest. Returns every file written.
pub fn run_command(cfg: &CliConfig) -> Result<Vec<PathBuf>, CliError> {
    if !COMMANDS.contains(&cfg.command.as_str()) {
        return Err(CliError::UnknownCommand(cfg.command.clone()));
    }
    let out = cfg.out();
    fs::create_dir_all(out).map_err(CliError::engine)?;
    let result = match cfg.command.as_str() {
        "gen-data" => gen_data(&cfg.settings, out),
        "train" => train_cmd(&cfg.settings, out),
        "eval" => eval_cmd(&cfg.settings, out),
        "bench" => bench_cmd(&cfg.settings, out),
        "ablate" => ablate_cmd(&cfg.settings, out),
        "attribute" => attribute_cmd(&cfg.settings, out),
        _ => unreachable!("command list checked above"),
    };
    let mut config = serde_json::to_value(&cfg.settings).expect("settings serialize");
    if let Some(map) = config.as_object_mut() {
        map.remove("out");
    }
    let manifest = Manifest {
        command: &cfg.command,
        seed: cfg.seed(),
        engine_version: modrl_core::VERSION,
        engine_digest: engine_digest(),
        config,
        provenance: &cfg.provenance,
        outputs: result
            .as_ref()
            .map(|files| files.iter().filter_map(|f| f.file_name()).map(|n| n.to_string_lossy().into_owned()).collect())
            .unwrap_or_default(),
        error: result.as_ref().err().map(ToString::to_string),
    };
    let path = out.join(manifest_name(&cfg.command));
    write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    let mut files = result?;
    files.push(path);
    Ok(files)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Engine(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|_| CliError::FileNotFound(path.to_path_buf()))
}

fn write_report(report: &Report, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    report.write(out).map_err(CliError::engine)
}

fn task(config: &TaskConfig) -> Result<SyntheticTask, CliError> {
    SyntheticTask::new(config.clone()).map_err(CliError::engine)
}

fn scorer(s: &Settings, task: &SyntheticTask) -> Result<Arc<dyn Scorer>, CliError> {
    if s.scorer.name == "ground-truth" {
        return Ok(Arc::new(task.rm.clone()));
    }
    let registry = ScorerRegistry::with_builtins();
    if !registry.names().any(|n| n == s.scorer.name) {
        return Err(CliError::Usage(format!(
            "unknown scorer `{}` (known: ground-truth, {})",
            s.scorer.name,
            registry.names().collect::<Vec<_>>().join(", ")
        )));
    }
    if s.scorer.params.is_empty() {
        return Err(CliError::Usage(format!("scorer `{}` needs scorer.params", s.scorer.name)));
    }
    let params = read(Path::new(&s.scorer.params))?;
    registry
        .build(&s.scorer.name, &params)
        .expect("name checked above")
        .map_err(CliError::Parse)
}

fn load_checkpoint(path: &Path, task: &SyntheticTask) -> Result<Ensemble, CliError> {
    let ckpt = Checkpoint::from_json(&read(path)?).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let mut ens = task.base_ensemble();
    ckpt.apply(&mut ens).map_err(CliError::engine)?;
    Ok(ens)
}

fn bench_profile(s: &Settings) -> Result<BenchProfile, CliError> {
    let mut profile = if s.bench.profile.is_empty() {
        BenchProfile::preset(&s.preset).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown preset `{}` (known: {})",
                s.preset,
                BenchProfile::preset_names().join(", ")
            ))
        })?
    } else {
        let path = Path::new(&s.bench.profile);
        BenchProfile::from_toml(&read(path)?).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?
    };
    if s.bench.repetitions > 0 {
        profile.repetitions = s.bench.repetitions;
    }
    Ok(profile)
}

fn dataset(s: &Settings, task: &SyntheticTask) -> Result<Vec<PreferenceTriple>, CliError> {
    if s.data.path.is_empty() {
        return gen_preference_dataset(task, s.data.size, s.data.noise, s.seed).map_err(CliError::engine);
    }
    let path = Path::new(&s.data.path);
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Parse(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn gen_data(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let task = task(&s.task)?;
    let data = gen_preference_dataset(&task, s.data.size, s.data.noise, s.seed).map_err(CliError::engine)?;
    let mut lines = String::new();
    for t in &data {
        lines.push_str(&serde_json::to_string(t).expect("triples serialize"));
        lines.push('\n');
    }
    let path = out.join(DATASET);
    write(&path, lines)?;
    let mut report = Report::new("gen-data", s.seed);
    report.push("triples", data.len() as f64, 1);
    report.push("noise", s.data.noise, 1);
    let mut files = vec![path];
    files.extend(write_report(&report, out)?);
    Ok(files)
}

fn train_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let task = task(&s.task)?;
    let rm = scorer(s, &task)?;
    let data = dataset(s, &task)?;
    let mut ens = task.base_ensemble();
    let start = Instant::now();
    let outcome = train(&mut ens, rm.as_ref(), &data, &s.train).map_err(CliError::engine)?;
    let train_ms = start.elapsed().as_secs_f64() * 1e3;

    let ckpt = Checkpoint::capture(&ens, &outcome, &s.train);
    let ckpt_path = out.join(CHECKPOINT);
    write(&ckpt_path, ckpt.to_json())?;
    let hist_path = out.join(HISTORY);
    write(&hist_path, outcome.history.to_jsonl())?;

    let held_out = task.contexts("heldout", s.eval.contexts, s.seed);
    let opts = EvalOptions {
        mode: s.eval.mode,
        interface: s.eval.interface,
    };
    let win_rate = eval_winrate(&ens, &task.base_ensemble(), rm.as_ref(), &held_out, s.seed, opts)
        .map_err(CliError::engine)?;
    let mut report = Report::new("train", s.seed);
    report.push("triples", data.len() as f64, 1);
    report.push("win_rate_vs_base", win_rate, s.eval.contexts).baseline = Some(0.5);
    report.push("phase1_passes", outcome.history.count(Phase::ModuleWise) as f64, s.train.epochs);
    report.push("phase2_steps", outcome.history.count(Phase::Joint) as f64, s.train.epochs);
    if let Some(g) = outcome.history.records.iter().rev().find_map(|r| r.global_reward) {
        report.push("final_global_reward", g, 1);
    }
    report.push("tau_local", outcome.temperatures.tau_local, 1);
    report.push("tau_contrib", outcome.temperatures.tau_contrib, 1);
    report.push_timing("train_ms", train_ms, 1);
    let mut files = vec![ckpt_path, hist_path];
    files.extend(write_report(&report, out)?);
    Ok(files)
}

fn eval_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let task = task(&s.task)?;
    let rm = scorer(s, &task)?;
    let path = if s.eval.checkpoint.is_empty() {
        out.join(CHECKPOINT)
    } else {
        PathBuf::from(&s.eval.checkpoint)
    };
    let ens = load_checkpoint(&path, &task)?;
    let held_out = task.contexts("heldout", s.eval.contexts, s.seed);
    let opts = EvalOptions {
        mode: s.eval.mode,
        interface: s.eval.interface,
    };
    let base = task.base_ensemble();
    let vs_base = eval_winrate(&ens, &base, rm.as_ref(), &held_out, s.seed, opts).map_err(CliError::engine)?;
    let vs_target =
        eval_winrate(&ens, &task.target_ensemble(), rm.as_ref(), &held_out, s.seed, opts).map_err(CliError::engine)?;
    let mut report = Report::new("eval", s.seed);
    report.push("win_rate_vs_base", vs_base, s.eval.contexts).baseline = Some(0.5);
    report.push("win_rate_vs_target", vs_target, s.eval.contexts);
    write_report(&report, out)
}

fn bench_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let profile = bench_profile(s)?;
    let report = run_latency_bench(&profile, s.seed).map_err(CliError::engine)?;
    write_report(&report, out)
}

fn ablate_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let task = task(&s.task)?;
    let mut bench = bench_profile(s)?;
    bench.repetitions = s.ablate.bench_repetitions.max(1);
    let cfg = AblationConfig {
        train: s.train.clone(),
        dataset_size: s.data.size,
        noise: s.data.noise,
        winrate_contexts: s.eval.contexts,
        attribution_trials: s.attribute.trials,
        severity: s.attribute.severity,
        bench,
        seed: s.seed,
    };
    let (_, report) = run_ablation_suite(&task, &cfg).map_err(CliError::engine)?;
    write_report(&report, out)
}

fn attribute_cmd(s: &Settings, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let registry = AttributorRegistry::with_builtins();
    let attributor = registry.get(&s.attribute.attributor).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown attributor `{}` (known: {})",
            s.attribute.attributor,
            registry.names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let control = registry.get("random").expect("builtin random attributor");
    let task = task(&TaskConfig {
        modules: s.attribute.modules,
        ..s.task.clone()
    })?;
    let sampled = if s.attribute.checkpoint.is_empty() {
        None
    } else {
        Some(load_checkpoint(Path::new(&s.attribute.checkpoint), &task)?)
    };
    let source = sampled.as_ref().map_or(FaultSource::Targets, FaultSource::Sampled);
    let acfg = AttributionConfig {
        flag_threshold: s.attribute.flag_threshold,
        ..AttributionConfig::default()
    };
    let a = &s.attribute;
    let mut report = Report::new("attribution", s.seed);
    for (name, attr) in [(a.attributor.as_str(), attributor.as_ref()), ("random", control.as_ref())] {
        let m = eval_attribution(&task, source, a.trials, a.severity, s.seed, attr, &acfg).map_err(CliError::engine)?;
        report.push(format!("{name}/accuracy"), m.accuracy, m.trials);
        report.push(format!("{name}/precision"), m.precision, m.trials);
        report.push(format!("{name}/false_attribution_rate"), m.false_attribution_rate, m.trials);
        report.push(format!("{name}/kappa"), m.kappa, m.trials);
    }
    write_report(&report, out)
}
