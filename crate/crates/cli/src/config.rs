//! Layered run configuration: defaults, then a TOML file, then flags.
//!
//! Every leaf key carries the layer that set it. Keys are dotted paths
//! (`train.eta`, `attribute.trials`); a key not present in the defaults is
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use modrl_core::drpo::TrainConfig;
use modrl_core::harness::task::TaskConfig;
use modrl_core::orchestrator::{ExecutionMode, InterfaceMode};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Number of preference triples generated when no dataset file is given.
    pub size: usize,
    pub noise: f64,
    /// JSONL dataset to train on instead of generating one.
    pub path: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            size: 4000,
            noise: 0.0,
            path: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub contexts: usize,
    /// Checkpoint to evaluate; empty means `<out>/checkpoint.json`.
    pub checkpoint: String,
    pub mode: ExecutionMode,
    pub interface: InterfaceMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            contexts: 500,
            checkpoint: String::new(),
            mode: ExecutionMode::Parallel,
            interface: InterfaceMode::Canonical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeSettings {
    pub modules: usize,
    pub trials: usize,
    pub severity: f64,
    pub attributor: String,
    /// Sample un-faulted outputs from this checkpoint instead of the targets.
    pub checkpoint: String,
    pub flag_threshold: f64,
}

impl Default for AttributeSettings {
    fn default() -> Self {
        Self {
            modules: 4,
            trials: 200,
            severity: 0.8,
            attributor: "contribution".into(),
            checkpoint: String::new(),
            flag_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// TOML profile file; takes precedence over the preset.
    pub profile: String,
    /// Overrides the profile's repetition count when non-zero.
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub bench_repetitions: usize,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self { bench_repetitions: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSettings {
    /// `ground-truth` uses the task's own reward model.
    pub name: String,
    /// JSON parameter file for registry scorers.
    pub params: String,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        Self {
            name: "ground-truth".into(),
            params: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    pub preset: String,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub eval: EvalSettings,
    pub attribute: AttributeSettings,
    pub bench: BenchSettings,
    pub ablate: AblateSettings,
    pub scorer: ScorerSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("out"),
            preset: "table3".into(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            data: DataSettings::default(),
            eval: EvalSettings::default(),
            attribute: AttributeSettings::default(),
            bench: BenchSettings::default(),
            ablate: AblateSettings::default(),
            scorer: ScorerSettings::default(),
        }
    }
}

/// Keys owned by another key: the training seed follows the master seed.
const DERIVED_KEYS: &[&str] = &["train.seed"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub settings: Settings,
    pub overrides: Vec<(String, String)>,
    pub provenance: BTreeMap<String, Source>,
}

impl CliConfig {
    pub fn seed(&self) -> u64 {
        self.settings.seed
    }

    pub fn out(&self) -> &Path {
        &self.settings.out
    }

    pub fn preset(&self) -> &str {
        &self.settings.preset
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.provenance.get(key).copied()
    }
}

/// Flag values given on the command line, in application order.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<String>,
    /// Raw `key=value` pairs from `--set`.
    pub set: Vec<String>,
}

impl FlagOverrides {
    fn pairs(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut pairs = Vec::new();
        if let Some(s) = self.seed {
            pairs.push(("seed".to_string(), s.to_string()));
        }
        if let Some(o) = &self.out {
            pairs.push(("out".to_string(), toml_string(&o.to_string_lossy())));
        }
        if let Some(p) = &self.preset {
            pairs.push(("preset".to_string(), toml_string(p)));
        }
        for raw in &self.set {
            let (k, v) = raw
                .split_once('=')
                .ok_or_else(|| CliError::Parse(format!("--set expects key=value, got `{raw}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }
}

fn toml_string(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn defaults_table() -> Table {
    let mut t = Table::try_from(Settings::default()).expect("defaults serialize to TOML");
    for key in DERIVED_KEYS {
        let (section, leaf) = key.split_once('.').expect("derived keys are dotted");
        if let Some(Value::Table(s)) = t.get_mut(section) {
            s.remove(leaf);
        }
    }
    t
}

fn leaves(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => leaves(inner, &key, out),
            _ => out.push(key),
        }
    }
}

/// Writes `layer` into `base`, recording `source` for each leaf it sets.
fn overlay(
    base: &mut Table,
    layer: &Table,
    prefix: &str,
    source: Source,
    provenance: &mut BTreeMap<String, Source>,
) -> Result<(), CliError> {
    for (k, v) in layer {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = base.get_mut(k).ok_or_else(|| CliError::UnknownKey(key.clone()))?;
        match (slot, v) {
            (Value::Table(b), Value::Table(l)) => overlay(b, l, &key, source, provenance)?,
            (Value::Table(_), _) => return Err(CliError::Parse(format!("`{key}` is a section, not a value"))),
            (_, Value::Table(_)) => return Err(CliError::Parse(format!("`{key}` is a value, not a section"))),
            (slot, v) => {
                *slot = match (&*slot, v) {
                    (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
                    _ => v.clone(),
                };
                provenance.insert(key, source);
            }
        }
    }
    Ok(())
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_flag_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn nest(key: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut t = Table::new();
    t.insert(leaf.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

/// Resolves defaults, then `path` (if any), then `flags`.
pub fn load_config(command: &str, path: Option<&Path>, flags: &FlagOverrides) -> Result<CliConfig, CliError> {
    let mut merged = defaults_table();
    let mut provenance = BTreeMap::new();
    let mut keys = Vec::new();
    leaves(&merged, "", &mut keys);
    for k in keys {
        provenance.insert(k, Source::Default);
    }

    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|_| CliError::FileNotFound(p.to_path_buf()))?;
        let file: Table = toml::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?;
        overlay(&mut merged, &file, "", Source::File, &mut provenance)?;
    }

    let overrides = flags.pairs()?;
    for (k, raw) in &overrides {
        if k.is_empty() || k.split('.').any(str::is_empty) {
            return Err(CliError::Parse(format!("malformed key `{k}`")));
        }
        overlay(&mut merged, &nest(k, parse_flag_value(raw)), "", Source::Flag, &mut provenance)?;
    }

    let mut settings: Settings = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
    settings.train.seed = settings.seed;
    Ok(CliConfig {
        command: command.to_string(),
        config_path: path.map(Path::to_path_buf),
        settings,
        overrides,
        provenance,
    })
}
