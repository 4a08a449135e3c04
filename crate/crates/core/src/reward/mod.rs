//! Reward model and per-module reward decomposition.
//!
//! The reference scorer featurizes text as hashed token counts and applies a
//! logistic head: `score = σ(w·f + b)`. On top of any [`Scorer`]:
//!
//! * local reward: the score of one module's document followed by a
//!   separator and the context;
//! * contribution reward: full-composition score minus the score with that
//!   module's segment ablated;
//! * bound enforcement: if the contributions sum past the full score, the
//!   positive ones are scaled down until the sum fits;
//! * integrated reward: `α·local + β·contribution` with `α, β` from a
//!   two-way softmax over temperatures.

pub mod attribution;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{digest_f64s, fnv1a};
use crate::orchestrator::{
    ablate_compose, compose, compose_with, ComposedSolution, Context, Ensemble, EmittedOutput, InterfaceMode,
    OrchestratorError,
};
use crate::schema::CanonicalDocument;

/// Separator placed between a module's document and the context.
pub const SEPARATOR: &str = "\n[SEP]\n";

/// Logits are clamped to this magnitude so scores stay strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 36.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("cannot score an empty document")]
    EmptyDocument,
    #[error("input out of range: {0}")]
    InputOutOfRange(String),
    #[error("temperatures must be finite")]
    NonFiniteTemperature,
    #[error("mixing weights must lie in [0, 1] and sum to 1 (got {0} + {1})")]
    WeightsNotNormalized(f64, f64),
    #[error("reward model has {weights} weights for dimension {dim}")]
    DimensionMismatch { dim: usize, weights: usize },
    #[error(transparent)]
    Compose(#[from] OrchestratorError),
}

/// Anything that maps text to a score in (0, 1).
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;

    fn score_text(&self, text: &str) -> Result<f64, RewardError>;

    /// Digest of the scorer's parameters, used to prove they stay frozen.
    fn digest(&self) -> String;
}

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lowercased maximal alphanumeric runs; whitespace and punctuation split.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag-of-tokens logistic scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub hash_seed: u64,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl RewardModel {
    pub const DEFAULT_DIM: usize = 256;

    pub fn zeros(hash_seed: u64, dim: usize) -> Self {
        assert!(dim >= 1, "feature dimension must be positive");
        Self {
            hash_seed,
            dim,
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.dim == 0 || self.weights.len() != self.dim {
            return Err(RewardError::DimensionMismatch {
                dim: self.dim,
                weights: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn feature_index(&self, token: &str) -> usize {
        (fnv1a(self.hash_seed, token.as_bytes()) % self.dim as u64) as usize
    }

    /// Dense token-count vector.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let mut f = vec![0.0; self.dim];
        for tok in tokenize(text) {
            f[self.feature_index(&tok)] += 1.0;
        }
        f
    }

    /// Non-zero token counts as `(feature index, count)`, ascending by index.
    pub fn sparse_features(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts = std::collections::BTreeMap::new();
        for tok in tokenize(text) {
            *counts.entry(self.feature_index(&tok)).or_insert(0.0) += 1.0;
        }
        counts.into_iter().collect()
    }

    /// `w·f + b`, summed in feature-index order.
    pub fn logit(&self, text: &str) -> f64 {
        let mut acc = 0.0;
        for (i, x) in self.sparse_features(text) {
            acc += self.weights[i] * x;
        }
        acc + self.bias
    }

    /// Adds `delta` to the weight of the bucket `token` hashes to.
    pub fn add_token_weight(&mut self, token: &str, delta: f64) {
        let i = self.feature_index(&token.to_lowercase());
        self.weights[i] += delta;
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let rm: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        rm.validate().map_err(|e| e.to_string())?;
        Ok(rm)
    }
}

impl Scorer for RewardModel {
    fn name(&self) -> &str {
        "hashed-linear"
    }

    fn score_text(&self, text: &str) -> Result<f64, RewardError> {
        if text.is_empty() {
            return Err(RewardError::EmptyDocument);
        }
        Ok(sigmoid(self.logit(text)))
    }

    fn digest(&self) -> String {
        let mut v = vec![self.hash_seed as f64, self.dim as f64, self.bias];
        v.extend_from_slice(&self.weights);
        digest_f64s(&v)
    }
}

pub fn score_document(rm: &dyn Scorer, doc: &CanonicalDocument) -> Result<f64, RewardError> {
    rm.score_text(doc.as_str())
}

pub fn score_solution(rm: &dyn Scorer, solution: &ComposedSolution) -> Result<f64, RewardError> {
    rm.score_text(&solution.render())
}

/// Text scored for a local reward: document, separator, context.
pub fn local_text(output: &EmittedOutput, ctx: &Context) -> String {
    let mut s = String::from(output.document.as_str());
    s.push_str(SEPARATOR);
    s.push_str(&ctx.render());
    s
}

pub fn local_reward(rm: &dyn Scorer, output: &EmittedOutput, ctx: &Context) -> Result<f64, RewardError> {
    rm.score_text(&local_text(output, ctx))
}

/// Score drop when `module_id` is ablated from the full composition.
pub fn contribution_reward(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    module_id: &str,
) -> Result<f64, RewardError> {
    let full = score_solution(rm, &compose(ensemble, outputs)?)?;
    let ablated = score_solution(rm, &ablate_compose(ensemble, outputs, module_id)?)?;
    Ok(full - ablated)
}

/// Full score plus every module's raw contribution, in registration order,
/// composing the full solution only once.
pub fn all_contributions(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
) -> Result<(f64, Vec<f64>), RewardError> {
    all_contributions_with(rm, ensemble, outputs, InterfaceMode::Canonical)
}

/// [`all_contributions`] with segments rendered under `interface`.
pub fn all_contributions_with(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    interface: InterfaceMode,
) -> Result<(f64, Vec<f64>), RewardError> {
    let full = score_solution(rm, &compose_with(ensemble, outputs, None, interface)?)?;
    let contribs = ensemble
        .entries()
        .iter()
        .map(|e| {
            let abl = compose_with(ensemble, outputs, Some(&e.spec.module_id), interface)?;
            Ok(full - score_solution(rm, &abl)?)
        })
        .collect::<Result<Vec<_>, RewardError>>()?;
    Ok((full, contribs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enforced {
    pub values: Vec<f64>,
    /// Multiplier applied to the positive entries (1 when untouched).
    pub scale: f64,
    pub violated: bool,
}

/// Caps the sum of contributions at `full_score` by shrinking positive
/// entries; negative entries are never rescaled.
pub fn enforce_bounds(contribs: &[f64], full_score: f64) -> Result<Enforced, RewardError> {
    if !(full_score > 0.0 && full_score < 1.0) {
        return Err(RewardError::InputOutOfRange(format!("full score {full_score}")));
    }
    if let Some(c) = contribs.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
        return Err(RewardError::InputOutOfRange(format!("contribution {c}")));
    }
    let total: f64 = contribs.iter().sum();
    if total <= full_score {
        return Ok(Enforced {
            values: contribs.to_vec(),
            scale: 1.0,
            violated: false,
        });
    }
    let neg: f64 = contribs.iter().filter(|c| **c < 0.0).sum();
    let pos: f64 = contribs.iter().filter(|c| **c > 0.0).sum();
    let mut scale = ((full_score - neg) / pos).max(0.0);
    let apply = |scale: f64| -> Vec<f64> {
        contribs
            .iter()
            .map(|&c| if c > 0.0 { c * scale } else { c })
            .collect()
    };
    let mut values = apply(scale);
    // rounding can leave the sum one ulp above the cap
    while values.iter().sum::<f64>() > full_score {
        scale *= 1.0 - f64::EPSILON;
        values = apply(scale);
    }
    Ok(Enforced {
        values,
        scale,
        violated: true,
    })
}

const HALF_EPS: f64 = f64::EPSILON / 2.0;

/// `α = e^τl / (e^τl + e^τc)`, `β = 1 − α`.
pub fn mixing_weights(tau_local: f64, tau_contrib: f64) -> Result<(f64, f64), RewardError> {
    if !tau_local.is_finite() || !tau_contrib.is_finite() {
        return Err(RewardError::NonFiniteTemperature);
    }
    let alpha = (1.0 / (1.0 + (tau_contrib - tau_local).exp())).clamp(HALF_EPS, 1.0 - HALF_EPS);
    Ok((alpha, 1.0 - alpha))
}

pub fn integrated_reward(local: f64, contrib: f64, alpha: f64, beta: f64) -> Result<f64, RewardError> {
    let in_unit = |x: f64| (0.0..=1.0).contains(&x);
    if !in_unit(alpha) || !in_unit(beta) || (alpha + beta - 1.0).abs() > 1e-12 {
        return Err(RewardError::WeightsNotNormalized(alpha, beta));
    }
    Ok(alpha * local + beta * contrib)
}

/// How local and contribution rewards are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub tau_local: f64,
    pub tau_contrib: f64,
    /// When set, overrides the temperature-derived weights.
    pub fixed: Option<(f64, f64)>,
}

impl Default for Mixing {
    fn default() -> Self {
        Self {
            tau_local: 0.0,
            tau_contrib: 0.0,
            fixed: None,
        }
    }
}

impl Mixing {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            fixed: Some((alpha, beta)),
            ..Self::default()
        }
    }

    pub fn weights(&self) -> Result<(f64, f64), RewardError> {
        match self.fixed {
            Some((a, b)) => {
                integrated_reward(0.0, 0.0, a, b)?;
                Ok((a, b))
            }
            None => mixing_weights(self.tau_local, self.tau_contrib),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleReward {
    pub module_id: String,
    pub local: f64,
    pub contrib_raw: f64,
    pub contrib: f64,
    pub integrated: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub modules: Vec<ModuleReward>,
    pub alpha: f64,
    pub beta: f64,
    pub tau_local: f64,
    pub tau_contrib: f64,
    pub full_score: f64,
    pub bounds_violation: bool,
    pub contrib_scale: f64,
}

impl RewardBreakdown {
    pub fn contrib_sum(&self) -> f64 {
        self.modules.iter().map(|m| m.contrib).sum()
    }
}

/// Local, contribution and integrated rewards for every module, in
/// registration order. Enforced contributions feed the integrated reward.
pub fn reward_breakdown(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    ctx: &Context,
    mixing: Mixing,
) -> Result<RewardBreakdown, RewardError> {
    reward_breakdown_with(rm, ensemble, outputs, ctx, mixing, InterfaceMode::Canonical)
}

/// [`reward_breakdown`] with the composition rendered under `interface`.
pub fn reward_breakdown_with(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    ctx: &Context,
    mixing: Mixing,
    interface: InterfaceMode,
) -> Result<RewardBreakdown, RewardError> {
    let (alpha, beta) = mixing.weights()?;
    let (full_score, raw) = all_contributions_with(rm, ensemble, outputs, interface)?;
    let enforced = enforce_bounds(&raw, full_score)?;
    let mut modules = Vec::with_capacity(ensemble.len());
    for (i, entry) in ensemble.entries().iter().enumerate() {
        let out = outputs
            .iter()
            .find(|o| o.module_id == entry.spec.module_id)
            .ok_or_else(|| OrchestratorError::MissingOutput(entry.spec.module_id.clone()))?;
        let local = local_reward(rm, out, ctx)?;
        let contrib = enforced.values[i];
        modules.push(ModuleReward {
            module_id: entry.spec.module_id.clone(),
            local,
            contrib_raw: raw[i],
            contrib,
            integrated: integrated_reward(local, contrib, alpha, beta)?,
            confidence: out.output.confidence,
        });
    }
    Ok(RewardBreakdown {
        modules,
        alpha,
        beta,
        tau_local: mixing.tau_local,
        tau_contrib: mixing.tau_contrib,
        full_score,
        bounds_violation: enforced.violated,
        contrib_scale: enforced.scale,
    })
}

type ScorerFactory = Box<dyn Fn(&str) -> Result<Arc<dyn Scorer>, String> + Send + Sync>;

/// Named scorer constructors; each takes its parameters as JSON text.
pub struct ScorerRegistry {
    factories: BTreeMap<String, ScorerFactory>,
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("hashed-linear", |params| Ok(Arc::new(RewardModel::from_json(params)?)));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&str) -> Result<Arc<dyn Scorer>, String> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// `None` for an unknown name, `Some(Err)` for bad parameters.
    pub fn build(&self, name: &str, params: &str) -> Option<Result<Arc<dyn Scorer>, String>> {
        self.factories.get(name).map(|f| f(params))
    }
}
