//! Error attribution: which module most likely caused a bad solution.
//!
//! An [`Attributor`] ranks modules from most to least suspect given a
//! [`RewardBreakdown`]. Attributors are registered by name so that
//! experiments can swap them at runtime.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{reward_breakdown_with, Mixing, RewardBreakdown, RewardError, Scorer};
use crate::orchestrator::{Context, EmittedOutput, Ensemble, InterfaceMode};

/// Fraction of the full score below which a contribution is flagged.
pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.05;

pub trait Attributor: Send + Sync {
    fn name(&self) -> &str;

    /// Module indices (registration order) sorted most-suspect first.
    fn rank(&self, breakdown: &RewardBreakdown, seed: u64) -> Vec<usize>;
}

fn ascending_by(breakdown: &RewardBreakdown, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..breakdown.modules.len()).collect();
    // stable sort keeps registration order on ties
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    idx
}

/// Lowest enforced contribution first.
pub struct ByContribution;

impl Attributor for ByContribution {
    fn name(&self) -> &str {
        "contribution"
    }

    fn rank(&self, bd: &RewardBreakdown, _seed: u64) -> Vec<usize> {
        ascending_by(bd, |i| bd.modules[i].contrib)
    }
}

/// Lowest integrated reward first.
pub struct ByIntegrated;

impl Attributor for ByIntegrated {
    fn name(&self) -> &str {
        "integrated"
    }

    fn rank(&self, bd: &RewardBreakdown, _seed: u64) -> Vec<usize> {
        ascending_by(bd, |i| bd.modules[i].integrated)
    }
}

/// Lowest local reward first.
pub struct ByLocal;

impl Attributor for ByLocal {
    fn name(&self) -> &str {
        "local"
    }

    fn rank(&self, bd: &RewardBreakdown, _seed: u64) -> Vec<usize> {
        ascending_by(bd, |i| bd.modules[i].local)
    }
}

/// Uniformly random ranking; a control.
pub struct RandomOrder;

impl Attributor for RandomOrder {
    fn name(&self) -> &str {
        "random"
    }

    fn rank(&self, bd: &RewardBreakdown, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..bd.modules.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }
}

type Factory = Box<dyn Fn() -> Box<dyn Attributor> + Send + Sync>;

pub struct AttributorRegistry {
    factories: BTreeMap<String, Factory>,
}

impl AttributorRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("contribution", || Box::new(ByContribution));
        r.register("integrated", || Box::new(ByIntegrated));
        r.register("local", || Box::new(ByLocal));
        r.register("random", || Box::new(RandomOrder));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> Box<dyn Attributor> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<Box<dyn Attributor>> {
        self.factories.get(name).map(|f| f())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub mixing: Mixing,
    pub flag_threshold: f64,
    #[serde(default)]
    pub interface: InterfaceMode,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            mixing: Mixing::default(),
            flag_threshold: DEFAULT_FLAG_THRESHOLD,
            interface: InterfaceMode::Canonical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub attributor: String,
    /// Module ids, most suspect first.
    pub ranking: Vec<String>,
    /// Modules whose enforced contribution falls under the flag threshold.
    pub flagged: Vec<String>,
    pub breakdown: RewardBreakdown,
}

impl Attribution {
    pub fn top(&self) -> &str {
        &self.ranking[0]
    }
}

/// Ranks the modules behind `outputs` from most to least suspect.
pub fn attribute_errors(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    outputs: &[EmittedOutput],
    ctx: &Context,
    attributor: &dyn Attributor,
    config: &AttributionConfig,
    seed: u64,
) -> Result<Attribution, RewardError> {
    let breakdown = reward_breakdown_with(rm, ensemble, outputs, ctx, config.mixing, config.interface)?;
    let order = attributor.rank(&breakdown, seed);
    let cutoff = config.flag_threshold * breakdown.full_score;
    let flagged = breakdown
        .modules
        .iter()
        .filter(|m| m.contrib < cutoff)
        .map(|m| m.module_id.clone())
        .collect();
    Ok(Attribution {
        attributor: attributor.name().to_string(),
        ranking: order.iter().map(|&i| breakdown.modules[i].module_id.clone()).collect(),
        flagged,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::ModuleReward;

    fn bd(contribs: &[f64], locals: &[f64]) -> RewardBreakdown {
        RewardBreakdown {
            modules: contribs
                .iter()
                .zip(locals)
                .enumerate()
                .map(|(i, (&c, &l))| ModuleReward {
                    module_id: format!("m{i}"),
                    local: l,
                    contrib_raw: c,
                    contrib: c,
                    integrated: 0.5 * l + 0.5 * c,
                    confidence: 1.0,
                })
                .collect(),
            alpha: 0.5,
            beta: 0.5,
            tau_local: 0.0,
            tau_contrib: 0.0,
            full_score: 0.6,
            bounds_violation: false,
            contrib_scale: 1.0,
        }
    }

    #[test]
    fn contribution_ranks_ascending_with_stable_ties() {
        let b = bd(&[0.2, -0.1, 0.2, 0.0], &[0.5; 4]);
        assert_eq!(ByContribution.rank(&b, 0), [1, 3, 0, 2]);
    }

    #[test]
    fn integrated_and_local_use_their_own_keys() {
        let b = bd(&[0.1, 0.1, 0.1], &[0.9, 0.2, 0.5]);
        assert_eq!(ByLocal.rank(&b, 0), [1, 2, 0]);
        assert_eq!(ByIntegrated.rank(&b, 0), [1, 2, 0]);
    }

    #[test]
    fn random_is_a_seeded_permutation() {
        let b = bd(&[0.0; 6], &[0.0; 6]);
        let r = RandomOrder.rank(&b, 7);
        assert_eq!(r, RandomOrder.rank(&b, 7));
        let mut s = r.clone();
        s.sort();
        assert_eq!(s, [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn registry_resolves_builtins() {
        let reg = AttributorRegistry::with_builtins();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["contribution", "integrated", "local", "random"]);
        assert_eq!(reg.get("integrated").unwrap().name(), "integrated");
        assert!(reg.get("oracle").is_none());
    }
}
