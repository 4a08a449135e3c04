//! Module generators and the registry that builds them by kind name.
//!
//! Every generator is a pure function of `(context, parameters, seed)`.
//! Built-in kinds:
//!
//! * `toy-policy` samples a template from a tabular categorical policy.
//! * `fixed-text` always emits the same output.
//! * `simulated-latency` wraps another kind and holds the caller for a
//!   configured duration (sleep or busy-wait) before delegating.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};
use thiserror::Error;

use super::Context;
use crate::policy::{bucket_of, sample_categorical, CannedTemplates, IndexedBank, LogitTable, TemplateBank};
use crate::schema::ModuleOutput;

pub trait Generator: Send + Sync {
    fn kind(&self) -> &str;

    fn generate(&self, ctx: &Context, params: &LogitTable, seed: u64) -> Result<ModuleOutput, String>;

    /// The underlying policy, for generators that are trainable.
    fn policy(&self) -> Option<&PolicyGenerator> {
        None
    }

    /// Fresh parameters for this generator.
    fn initial_params(&self) -> LogitTable {
        LogitTable::empty()
    }
}

/// Samples template indices from a bucketed logit table.
pub struct PolicyGenerator {
    pub buckets: usize,
    pub bank: Arc<dyn TemplateBank>,
}

impl PolicyGenerator {
    pub fn new(buckets: usize, bank: Arc<dyn TemplateBank>) -> Self {
        let bank: Arc<dyn TemplateBank> = Arc::new(IndexedBank::new(bank, buckets));
        Self { buckets, bank }
    }

    pub fn vocab(&self) -> usize {
        self.bank.vocab()
    }

    pub fn bucket(&self, ctx: &Context) -> usize {
        bucket_of(&ctx.context_id, self.buckets)
    }

    /// Template index sampled for `ctx` under `params` and `seed`.
    pub fn sample_index(&self, ctx: &Context, params: &LogitTable, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_categorical(&params.probs(self.bucket(ctx)), &mut rng)
    }
}

impl Generator for PolicyGenerator {
    fn kind(&self) -> &str {
        "toy-policy"
    }

    fn generate(&self, ctx: &Context, params: &LogitTable, seed: u64) -> Result<ModuleOutput, String> {
        if params.buckets != self.buckets || params.vocab != self.vocab() {
            return Err(format!(
                "parameter table is {}x{}, policy expects {}x{}",
                params.buckets,
                params.vocab,
                self.buckets,
                self.vocab()
            ));
        }
        let t = self.sample_index(ctx, params, seed);
        Ok(self.bank.render(self.bucket(ctx), t))
    }

    fn policy(&self) -> Option<&PolicyGenerator> {
        Some(self)
    }

    fn initial_params(&self) -> LogitTable {
        LogitTable::zeros(self.buckets, self.vocab())
    }
}

/// Emits a constant output regardless of context.
pub struct FixedText {
    pub output: ModuleOutput,
}

impl Generator for FixedText {
    fn kind(&self) -> &str {
        "fixed-text"
    }

    fn generate(&self, _ctx: &Context, _params: &LogitTable, _seed: u64) -> Result<ModuleOutput, String> {
        Ok(self.output.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaitMode {
    Sleep,
    BusyWait,
}

/// Adds a fixed delay in front of another generator.
pub struct SimulatedLatency {
    pub delay: Duration,
    pub mode: WaitMode,
    pub inner: Arc<dyn Generator>,
}

impl Generator for SimulatedLatency {
    fn kind(&self) -> &str {
        "simulated-latency"
    }

    fn generate(&self, ctx: &Context, params: &LogitTable, seed: u64) -> Result<ModuleOutput, String> {
        match self.mode {
            WaitMode::Sleep => std::thread::sleep(self.delay),
            WaitMode::BusyWait => {
                let start = Instant::now();
                while start.elapsed() < self.delay {
                    std::hint::spin_loop();
                }
            }
        }
        self.inner.generate(ctx, params, seed)
    }

    fn policy(&self) -> Option<&PolicyGenerator> {
        self.inner.policy()
    }

    fn initial_params(&self) -> LogitTable {
        self.inner.initial_params()
    }
}

/// Generator description as it appears in an ensemble definition file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorSpec {
    pub kind: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("unknown generator kind `{0}`")]
    UnknownKind(String),
    #[error("generator `{kind}`: bad parameter `{param}`: {reason}")]
    BadParam {
        kind: String,
        param: String,
        reason: String,
    },
}

/// What a factory knows about the module it is building for.
pub struct BuildContext<'a> {
    pub module_id: &'a str,
    pub role_tag: &'a str,
}

type Factory =
    Box<dyn Fn(&toml::Table, &BuildContext<'_>, &GeneratorRegistry) -> Result<Arc<dyn Generator>, RegistryError> + Send + Sync>;

/// Generator factories keyed by kind name.
pub struct GeneratorRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for GeneratorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl GeneratorRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("toy-policy", build_toy_policy);
        reg.register("fixed-text", build_fixed_text);
        reg.register("simulated-latency", build_simulated_latency);
        reg
    }

    pub fn register<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&toml::Table, &BuildContext<'_>, &GeneratorRegistry) -> Result<Arc<dyn Generator>, RegistryError>
            + Send
            + Sync
            + 'static,
    {
        self.factories.insert(kind.to_string(), Box::new(factory));
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &GeneratorSpec, cx: &BuildContext<'_>) -> Result<Arc<dyn Generator>, RegistryError> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| RegistryError::UnknownKind(spec.kind.clone()))?;
        factory(&spec.params, cx, self)
    }
}

fn bad(kind: &str, param: &str, reason: impl Into<String>) -> RegistryError {
    RegistryError::BadParam {
        kind: kind.into(),
        param: param.into(),
        reason: reason.into(),
    }
}

fn get_usize(params: &toml::Table, kind: &str, key: &str, default: usize) -> Result<usize, RegistryError> {
    match params.get(key) {
        None => Ok(default),
        Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
        Some(_) => Err(bad(kind, key, "expected a non-negative integer")),
    }
}

fn get_f64(params: &toml::Table, kind: &str, key: &str, default: f64) -> Result<f64, RegistryError> {
    match params.get(key) {
        None => Ok(default),
        Some(toml::Value::Integer(i)) => Ok(*i as f64),
        Some(toml::Value::Float(f)) => Ok(*f),
        Some(_) => Err(bad(kind, key, "expected a number")),
    }
}

fn build_toy_policy(
    params: &toml::Table,
    cx: &BuildContext<'_>,
    _reg: &GeneratorRegistry,
) -> Result<Arc<dyn Generator>, RegistryError> {
    let buckets = get_usize(params, "toy-policy", "buckets", 16)?;
    let vocab = get_usize(params, "toy-policy", "vocab", 32)?;
    if buckets == 0 {
        return Err(bad("toy-policy", "buckets", "must be at least 1"));
    }
    if vocab < 2 {
        return Err(bad("toy-policy", "vocab", "must be at least 2"));
    }
    let bank = CannedTemplates {
        role: cx.role_tag.to_string(),
        vocab,
    };
    Ok(Arc::new(PolicyGenerator::new(buckets, Arc::new(bank))))
}

fn build_fixed_text(
    params: &toml::Table,
    cx: &BuildContext<'_>,
    _reg: &GeneratorRegistry,
) -> Result<Arc<dyn Generator>, RegistryError> {
    let text = match params.get("text") {
        Some(toml::Value::String(s)) => s.clone(),
        None => format!("{} output", cx.role_tag),
        Some(_) => return Err(bad("fixed-text", "text", "expected a string")),
    };
    let confidence = get_f64(params, "fixed-text", "confidence", 1.0)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(bad("fixed-text", "confidence", "must lie in [0, 1]"));
    }
    let mut content = Map::new();
    content.insert("text".into(), Value::String(text));
    Ok(Arc::new(FixedText {
        output: ModuleOutput::new(cx.role_tag, content, confidence),
    }))
}

fn build_simulated_latency(
    params: &toml::Table,
    cx: &BuildContext<'_>,
    reg: &GeneratorRegistry,
) -> Result<Arc<dyn Generator>, RegistryError> {
    let delay_ms = get_f64(params, "simulated-latency", "delay_ms", 0.0)?;
    if !(delay_ms >= 0.0 && delay_ms.is_finite()) {
        return Err(bad("simulated-latency", "delay_ms", "must be finite and non-negative"));
    }
    let mode = match params.get("wait") {
        None => WaitMode::Sleep,
        Some(toml::Value::String(s)) if s == "sleep" => WaitMode::Sleep,
        Some(toml::Value::String(s)) if s == "busy" => WaitMode::BusyWait,
        Some(_) => return Err(bad("simulated-latency", "wait", "expected \"sleep\" or \"busy\"")),
    };
    let inner_kind = match params.get("inner") {
        None => "fixed-text".to_string(),
        Some(toml::Value::String(s)) if s == "simulated-latency" => {
            return Err(bad("simulated-latency", "inner", "cannot nest simulated-latency"))
        }
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(bad("simulated-latency", "inner", "expected a kind name")),
    };
    let inner_params = match params.get("inner_params") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => return Err(bad("simulated-latency", "inner_params", "expected a table")),
    };
    let inner = reg.build(
        &GeneratorSpec {
            kind: inner_kind,
            params: inner_params,
        },
        cx,
    )?;
    Ok(Arc::new(SimulatedLatency {
        delay: Duration::from_secs_f64(delay_ms / 1000.0),
        mode,
        inner,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> Context {
        Context::new("solve it", "c1").unwrap()
    }

    fn cx() -> BuildContext<'static> {
        BuildContext {
            module_id: "m1",
            role_tag: "parse",
        }
    }

    #[test]
    fn builtins_are_registered() {
        let reg = GeneratorRegistry::with_builtins();
        let kinds: Vec<_> = reg.kinds().collect();
        assert_eq!(kinds, ["fixed-text", "simulated-latency", "toy-policy"]);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let reg = GeneratorRegistry::with_builtins();
        let err = reg
            .build(
                &GeneratorSpec {
                    kind: "oracle".into(),
                    params: Default::default(),
                },
                &cx(),
            )
            .err()
            .unwrap();
        assert_eq!(err, RegistryError::UnknownKind("oracle".into()));
    }

    #[test]
    fn toy_policy_is_deterministic_in_seed() {
        let reg = GeneratorRegistry::with_builtins();
        let params: toml::Table = toml::from_str("buckets = 4\nvocab = 8").unwrap();
        let g = reg
            .build(
                &GeneratorSpec {
                    kind: "toy-policy".into(),
                    params,
                },
                &cx(),
            )
            .unwrap();
        let theta = g.initial_params();
        assert_eq!((theta.buckets, theta.vocab), (4, 8));
        let a = g.generate(&ctx(), &theta, 11).unwrap();
        let b = g.generate(&ctx(), &theta, 11).unwrap();
        assert_eq!(a, b);
        assert!(g.policy().is_some());
        assert!(g.generate(&ctx(), &LogitTable::zeros(2, 8), 11).is_err());
    }

    #[test]
    fn simulated_latency_waits_then_delegates() {
        let reg = GeneratorRegistry::with_builtins();
        let params: toml::Table = toml::from_str("delay_ms = 20\nwait = \"busy\"\ninner = \"fixed-text\"\n[inner_params]\ntext = \"hi\"").unwrap();
        let g = reg
            .build(
                &GeneratorSpec {
                    kind: "simulated-latency".into(),
                    params,
                },
                &cx(),
            )
            .unwrap();
        let start = Instant::now();
        let out = g.generate(&ctx(), &LogitTable::empty(), 0).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(20));
        assert_eq!(out.content["text"], Value::String("hi".into()));
    }

    #[test]
    fn bad_params_are_reported() {
        let reg = GeneratorRegistry::with_builtins();
        let params: toml::Table = toml::from_str("vocab = 1").unwrap();
        let err = reg
            .build(
                &GeneratorSpec {
                    kind: "toy-policy".into(),
                    params,
                },
                &cx(),
            )
            .err()
            .unwrap();
        assert!(matches!(err, RegistryError::BadParam { .. }));
    }
}
