//! Ensemble registry, parallel/sequential execution and composition.
//!
//! All modules receive the same [`Context`]. Each invocation gets its own
//! derived seed and a fresh isolation token, and generators share no mutable
//! state, so the set of outputs does not depend on scheduling. Composition
//! orders segments topologically by declared dependencies (ties broken by
//! registration index) and never looks at completion timing.

pub mod config;
pub mod generators;

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::derive_seed;
use crate::policy::LogitTable;
use crate::schema::{canonical_form, validate_output, CanonicalDocument, ModuleOutput, SchemaError};
pub use generators::{Generator, GeneratorRegistry, GeneratorSpec, PolicyGenerator};

/// Sentinel that replaces an ablated module's document.
pub const ABLATED: &str = "∅";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub problem_statement: String,
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    pub context_id: String,
}

impl Context {
    pub fn new(problem_statement: impl Into<String>, context_id: impl Into<String>) -> Result<Self, OrchestratorError> {
        Self::with_constraints(problem_statement, BTreeMap::new(), context_id)
    }

    pub fn with_constraints(
        problem_statement: impl Into<String>,
        constraints: BTreeMap<String, String>,
        context_id: impl Into<String>,
    ) -> Result<Self, OrchestratorError> {
        let problem_statement = problem_statement.into();
        if problem_statement.trim().is_empty() {
            return Err(OrchestratorError::EmptyProblemStatement);
        }
        Ok(Self {
            problem_statement,
            constraints,
            context_id: context_id.into(),
        })
    }

    /// Text form used when the context is concatenated with an output.
    pub fn render(&self) -> String {
        let mut s = self.problem_statement.clone();
        for (k, v) in &self.constraints {
            s.push('\n');
            s.push_str(k);
            s.push_str(": ");
            s.push_str(v);
        }
        s
    }
}

/// Module role. The nine named roles cover the standard specializations;
/// anything else is carried as a custom tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Role {
    Parse,
    Semantic,
    Entity,
    FactCheck,
    Style,
    Quality,
    Compute,
    Verify,
    Integrate,
    Custom(String),
}

impl Role {
    pub const STANDARD: [Role; 9] = [
        Role::Parse,
        Role::Semantic,
        Role::Entity,
        Role::FactCheck,
        Role::Style,
        Role::Quality,
        Role::Compute,
        Role::Verify,
        Role::Integrate,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            Role::Parse => "parse",
            Role::Semantic => "semantic",
            Role::Entity => "entity",
            Role::FactCheck => "factcheck",
            Role::Style => "style",
            Role::Quality => "quality",
            Role::Compute => "compute",
            Role::Verify => "verify",
            Role::Integrate => "integrate",
            Role::Custom(s) => s,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Role::STANDARD
            .iter()
            .find(|r| r.as_str() == s)
            .cloned()
            .unwrap_or_else(|| Role::Custom(s.to_string())))
    }
}

impl From<String> for Role {
    fn from(s: String) -> Self {
        s.parse().unwrap()
    }
}

impl From<Role> for String {
    fn from(r: Role) -> Self {
        r.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub module_id: String,
    pub role_tag: Role,
    #[serde(default)]
    pub declared_dependencies: Vec<String>,
}

impl ModuleSpec {
    pub fn new(module_id: impl Into<String>, role_tag: Role) -> Self {
        Self {
            module_id: module_id.into(),
            role_tag,
            declared_dependencies: Vec::new(),
        }
    }

    pub fn depends_on(mut self, deps: &[&str]) -> Self {
        self.declared_dependencies = deps.iter().map(|d| d.to_string()).collect();
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("module id `{0}` is already registered")]
    DuplicateModuleId(String),
    #[error("registering `{0}` would create a dependency cycle")]
    CyclicDependency(String),
    #[error("ensemble has no modules")]
    EmptyEnsemble,
    #[error("no output supplied for module `{0}`")]
    MissingOutput(String),
    #[error("output supplied for unregistered module `{0}`")]
    UnknownModuleOutput(String),
    #[error("more than one output supplied for module `{0}`")]
    DuplicateOutput(String),
    #[error("problem statement must be non-empty")]
    EmptyProblemStatement,
    #[error("module `{module_id}` emitted an invalid output: {source}")]
    InvalidOutput { module_id: String, source: SchemaError },
    #[error("parameter table for `{0}` does not match its generator")]
    ParamsMismatch(String),
}

/// One registered module.
#[derive(Clone)]
pub struct ModuleEntry {
    pub spec: ModuleSpec,
    pub generator: Arc<dyn Generator>,
    pub params: LogitTable,
}

/// The registered modules, in registration order.
#[derive(Clone, Default)]
pub struct Ensemble {
    entries: Vec<ModuleEntry>,
    order: Vec<usize>,
    /// Simulated integration cost charged to every composition during a run.
    pub integration_latency: Duration,
}

impl fmt::Debug for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ensemble")
            .field("modules", &self.entries.iter().map(|e| &e.spec).collect::<Vec<_>>())
            .finish()
    }
}

impl Ensemble {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ModuleEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ModuleEntry {
        &self.entries[i]
    }

    pub fn module_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.spec.module_id.clone()).collect()
    }

    pub fn index_of(&self, module_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.spec.module_id == module_id)
    }

    /// Registration indices in composition order.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn params(&self, i: usize) -> &LogitTable {
        &self.entries[i].params
    }

    pub fn params_mut(&mut self, i: usize) -> &mut LogitTable {
        &mut self.entries[i].params
    }

    pub fn set_params(&mut self, i: usize, params: LogitTable) -> Result<(), OrchestratorError> {
        let entry = &mut self.entries[i];
        let expected = entry.generator.initial_params();
        if (expected.buckets, expected.vocab) != (params.buckets, params.vocab) {
            return Err(OrchestratorError::ParamsMismatch(entry.spec.module_id.clone()));
        }
        entry.params = params;
        Ok(())
    }

    /// Adds a module without touching any existing module's parameters.
    pub fn register_module(
        &mut self,
        spec: ModuleSpec,
        generator: Arc<dyn Generator>,
        params: LogitTable,
    ) -> Result<(), OrchestratorError> {
        if self.index_of(&spec.module_id).is_some() {
            return Err(OrchestratorError::DuplicateModuleId(spec.module_id));
        }
        let id = spec.module_id.clone();
        self.entries.push(ModuleEntry { spec, generator, params });
        match topo_order(&self.entries) {
            Some(order) => {
                self.order = order;
                Ok(())
            }
            None => {
                self.entries.pop();
                Err(OrchestratorError::CyclicDependency(id))
            }
        }
    }

    /// Registers with the generator's default parameters.
    pub fn register(&mut self, spec: ModuleSpec, generator: Arc<dyn Generator>) -> Result<(), OrchestratorError> {
        let params = generator.initial_params();
        self.register_module(spec, generator, params)
    }
}

/// Kahn's algorithm; ready modules are released lowest registration index
/// first. Dependencies on ids that are not registered are ignored.
fn topo_order(entries: &[ModuleEntry]) -> Option<Vec<usize>> {
    let index: HashMap<&str, usize> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.spec.module_id.as_str(), i))
        .collect();
    let mut indegree = vec![0usize; entries.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); entries.len()];
    for (i, e) in entries.iter().enumerate() {
        for dep in &e.spec.declared_dependencies {
            if let Some(&j) = index.get(dep.as_str()) {
                indegree[i] += 1;
                dependents[j].push(i);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..entries.len())
        .filter(|&i| indegree[i] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(entries.len());
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &d in &dependents[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.push(Reverse(d));
            }
        }
    }
    (order.len() == entries.len()).then_some(order)
}

/// A validated output tagged with the module that produced it. The canonical
/// document is computed once, at emission time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmittedRecord", into = "EmittedRecord")]
pub struct EmittedOutput {
    pub module_id: String,
    pub output: ModuleOutput,
    pub document: CanonicalDocument,
}

impl EmittedOutput {
    /// Validates and canonicalizes `output` as emitted by `module_id`.
    pub fn new(module_id: impl Into<String>, output: ModuleOutput) -> Result<Self, OrchestratorError> {
        let module_id = module_id.into();
        let output = validate_output(&output.to_value(), &module_id).map_err(|source| {
            OrchestratorError::InvalidOutput {
                module_id: module_id.clone(),
                source,
            }
        })?;
        let document = canonical_form(&output, &module_id);
        Ok(Self {
            module_id,
            output,
            document,
        })
    }
}

/// Stored form of an [`EmittedOutput`]; the document is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct EmittedRecord {
    module_id: String,
    output: ModuleOutput,
}

impl TryFrom<EmittedRecord> for EmittedOutput {
    type Error = OrchestratorError;

    fn try_from(r: EmittedRecord) -> Result<Self, Self::Error> {
        EmittedOutput::new(r.module_id, r.output)
    }
}

impl From<EmittedOutput> for EmittedRecord {
    fn from(e: EmittedOutput) -> Self {
        EmittedRecord {
            module_id: e.module_id,
            output: e.output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    Parallel,
    Sequential,
}

/// How each output is normalized before concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterfaceMode {
    /// Sorted-key canonical documents.
    #[default]
    Canonical,
    /// Unnormalized debug rendering of the raw record.
    AdHoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleTiming {
    pub module_id: String,
    pub duration_ms: f64,
    pub isolation_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub mode: ExecutionMode,
    pub seed: u64,
    pub modules: Vec<ModuleTiming>,
    pub integration_ms: f64,
    pub wall_ms: f64,
}

impl ExecutionTrace {
    pub fn module_ms(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.duration_ms).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentBody {
    Document(CanonicalDocument),
    Raw(String),
    Ablated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub module_id: String,
    pub role_tag: Role,
    pub body: SegmentBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedSolution {
    pub segments: Vec<Segment>,
}

impl ComposedSolution {
    /// Text that scorers see: one header line and one body line per segment.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            out.push('<');
            out.push_str(&seg.module_id);
            out.push('|');
            out.push_str(seg.role_tag.as_str());
            out.push_str(">\n");
            match &seg.body {
                SegmentBody::Document(doc) => out.push_str(doc.as_str()),
                SegmentBody::Raw(s) => out.push_str(s),
                SegmentBody::Ablated => out.push_str(ABLATED),
            }
            out.push('\n');
        }
        out
    }
}

/// Composes outputs in dependency order. Supply order is irrelevant.
pub fn compose(ensemble: &Ensemble, outputs: &[EmittedOutput]) -> Result<ComposedSolution, OrchestratorError> {
    compose_with(ensemble, outputs, None, InterfaceMode::Canonical)
}

/// Same as [`compose`] with module `ablate`'s document replaced by [`ABLATED`].
pub fn ablate_compose(
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    ablate: &str,
) -> Result<ComposedSolution, OrchestratorError> {
    if ensemble.index_of(ablate).is_none() {
        return Err(OrchestratorError::UnknownModuleOutput(ablate.to_string()));
    }
    compose_with(ensemble, outputs, Some(ablate), InterfaceMode::Canonical)
}

pub fn compose_with(
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    ablate: Option<&str>,
    interface: InterfaceMode,
) -> Result<ComposedSolution, OrchestratorError> {
    let mut by_index: Vec<Option<&EmittedOutput>> = vec![None; ensemble.len()];
    for out in outputs {
        let i = ensemble
            .index_of(&out.module_id)
            .ok_or_else(|| OrchestratorError::UnknownModuleOutput(out.module_id.clone()))?;
        if by_index[i].replace(out).is_some() {
            return Err(OrchestratorError::DuplicateOutput(out.module_id.clone()));
        }
    }
    let mut segments = Vec::with_capacity(ensemble.len());
    for &i in ensemble.topological_order() {
        let spec = &ensemble.entries[i].spec;
        let out = by_index[i].ok_or_else(|| OrchestratorError::MissingOutput(spec.module_id.clone()))?;
        let body = if ablate == Some(spec.module_id.as_str()) {
            SegmentBody::Ablated
        } else {
            match interface {
                InterfaceMode::Canonical => SegmentBody::Document(out.document.clone()),
                InterfaceMode::AdHoc => SegmentBody::Raw(format!("{:?}", out.output)),
            }
        };
        segments.push(Segment {
            module_id: spec.module_id.clone(),
            role_tag: spec.role_tag.clone(),
            body,
        });
    }
    Ok(ComposedSolution { segments })
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("ensemble has no modules")]
    EmptyEnsemble,
    #[error("module `{module_id}` failed: {cause}")]
    ModuleFailure {
        module_id: String,
        cause: String,
        trace: ExecutionTrace,
    },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outputs: Vec<EmittedOutput>,
    pub solution: ComposedSolution,
    pub trace: ExecutionTrace,
}

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn isolation_token() -> String {
    format!("iso-{:016x}", NEXT_TOKEN.fetch_add(1, Ordering::Relaxed))
}

/// Per-module seed; independent of scheduling order.
pub fn module_seed(seed: u64, module_id: &str) -> u64 {
    derive_seed(seed, module_id)
}

/// Options for [`run`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub interface: InterfaceMode,
}

fn invoke(entry: &ModuleEntry, ctx: &Context, seed: u64) -> (Result<EmittedOutput, String>, ModuleTiming) {
    let token = isolation_token();
    let start = Instant::now();
    let result = entry
        .generator
        .generate(ctx, &entry.params, module_seed(seed, &entry.spec.module_id))
        .and_then(|out| EmittedOutput::new(entry.spec.module_id.clone(), out).map_err(|e| e.to_string()));
    let timing = ModuleTiming {
        module_id: entry.spec.module_id.clone(),
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
        isolation_token: token,
    };
    (result, timing)
}

pub fn run_parallel(ensemble: &Ensemble, ctx: &Context, seed: u64) -> Result<RunOutput, RunError> {
    run(ensemble, ctx, seed, ExecutionMode::Parallel, RunOptions::default())
}

pub fn run_sequential(ensemble: &Ensemble, ctx: &Context, seed: u64) -> Result<RunOutput, RunError> {
    run(ensemble, ctx, seed, ExecutionMode::Sequential, RunOptions::default())
}

/// Invokes every module on `ctx` and composes the results.
pub fn run(
    ensemble: &Ensemble,
    ctx: &Context,
    seed: u64,
    mode: ExecutionMode,
    opts: RunOptions,
) -> Result<RunOutput, RunError> {
    if ensemble.is_empty() {
        return Err(RunError::EmptyEnsemble);
    }
    let wall = Instant::now();
    let results: Vec<(Result<EmittedOutput, String>, ModuleTiming)> = match mode {
        ExecutionMode::Sequential => {
            let mut results = Vec::with_capacity(ensemble.len());
            for entry in ensemble.entries() {
                let r = invoke(entry, ctx, seed);
                let failed = r.0.is_err();
                results.push(r);
                if failed {
                    break;
                }
            }
            results
        }
        ExecutionMode::Parallel => std::thread::scope(|scope| {
            let handles: Vec<_> = ensemble
                .entries()
                .iter()
                .map(|entry| scope.spawn(move || invoke(entry, ctx, seed)))
                .collect();
            handles
                .into_iter()
                .zip(ensemble.entries())
                .map(|(h, entry)| {
                    h.join().unwrap_or_else(|_| {
                        (
                            Err("generator panicked".to_string()),
                            ModuleTiming {
                                module_id: entry.spec.module_id.clone(),
                                duration_ms: 0.0,
                                isolation_token: isolation_token(),
                            },
                        )
                    })
                })
                .collect()
        }),
    };

    let mut outputs = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    let mut failure = None;
    for (res, timing) in results {
        match res {
            Ok(out) => outputs.push(out),
            Err(cause) if failure.is_none() => failure = Some((timing.module_id.clone(), cause)),
            Err(_) => {}
        }
        timings.push(timing);
    }
    let mut trace = ExecutionTrace {
        mode,
        seed,
        modules: timings,
        integration_ms: 0.0,
        wall_ms: 0.0,
    };
    if let Some((module_id, cause)) = failure {
        trace.wall_ms = wall.elapsed().as_secs_f64() * 1e3;
        return Err(RunError::ModuleFailure {
            module_id,
            cause,
            trace,
        });
    }

    let integration = Instant::now();
    if !ensemble.integration_latency.is_zero() {
        std::thread::sleep(ensemble.integration_latency);
    }
    let solution = compose_with(ensemble, &outputs, None, opts.interface).expect("one output per registered module");
    trace.integration_ms = integration.elapsed().as_secs_f64() * 1e3;
    trace.wall_ms = wall.elapsed().as_secs_f64() * 1e3;
    Ok(RunOutput {
        outputs,
        solution,
        trace,
    })
}
