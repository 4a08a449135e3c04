//! Preference training for tabular module policies.
//!
//! Each epoch runs one isolated pass per module followed by one joint step:
//!
//! * Phase 1 (per module `i`): on every batch of preference triples, a
//!   gradient step on the mean pairwise loss
//!   `−ln σ(γ(ΔR + margin − η·KL))`, touching only `θ_i`. `ΔR` mixes the
//!   local-reward gap and the contribution gap of module `i`; `margin` is the
//!   policy log-probability margin (dropped in [`LossMode::Literal`]).
//! * Phase 2: for a batch of contexts, `G` full-ensemble samples are scored
//!   by the reward model, standardized within the group, and every policy
//!   takes one step on `−(1/G) Σ_j Â_j Σ_i ln π_i + η Σ_i KL_i`.
//!
//! The base snapshot taken at initialization anchors every KL term and is
//! never updated. Training is single-threaded and fully determined by the
//! master seed.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{derive_seed, digest_f64s, sha256_hex};
use crate::orchestrator::{compose_with, Context, EmittedOutput, Ensemble, InterfaceMode, OrchestratorError};
use crate::policy::{log_softmax, sample_categorical, softmax, LogitTable};
use crate::reward::{all_contributions_with, local_reward, mixing_weights, score_solution, RewardError, Scorer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("p is positive where q is zero (index {0})")]
    SupportMismatch(usize),
    #[error("distributions have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("module index {0} is not registered")]
    ModuleNotRegistered(usize),
    #[error("group size {0} is below 2")]
    DegenerateGroup(usize),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("output of module `{0}` is not one of its templates")]
    UnknownTemplate(String),
    #[error("triple has no output for module `{0}`")]
    IncompleteTriple(String),
    #[error("module `{module_id}` failed while sampling: {cause}")]
    Generation { module_id: String, cause: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Reward difference and KL only; no gradient reaches the preference.
    Literal,
    /// Adds the policy log-probability margin inside the sigmoid.
    #[default]
    DpoAugmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub eta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub loss_mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub learnable_temperature: bool,
    pub tau_local: f64,
    pub tau_contrib: f64,
    pub seed: u64,
    pub advantage_eps: f64,
    pub skip_phase1: bool,
    /// How segments are rendered before the reward model sees a composition.
    pub interface: InterfaceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            eta: 0.1,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 2,
            group_size: 4,
            loss_mode: LossMode::DpoAugmented,
            alpha: 0.5,
            beta: 0.5,
            learnable_temperature: false,
            tau_local: 0.0,
            tau_contrib: 0.0,
            seed: 7,
            advantage_eps: 1e-8,
            skip_phase1: false,
            interface: InterfaceMode::Canonical,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.group_size < 2 {
            return Err(TrainError::DegenerateGroup(self.group_size));
        }
        if !(self.advantage_eps > 0.0) {
            return bad("advantage_eps must be positive");
        }
        crate::reward::integrated_reward(0.0, 0.0, self.alpha, self.beta)?;
        if !self.tau_local.is_finite() || !self.tau_contrib.is_finite() {
            return bad("temperatures must be finite");
        }
        Ok(())
    }
}

/// Mixing weights in effect: fixed from the config unless temperatures are learnable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_local: f64,
    pub tau_contrib: f64,
}

impl Temperatures {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            tau_local: cfg.tau_local,
            tau_contrib: cfg.tau_contrib,
        }
    }

    pub fn weights(&self, cfg: &TrainConfig) -> (f64, f64) {
        if cfg.learnable_temperature {
            mixing_weights(self.tau_local, self.tau_contrib).expect("temperatures stay finite")
        } else {
            (cfg.alpha, cfg.beta)
        }
    }
}

/// `Σ p·ln(p/q)` with `0·ln 0 = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, TrainError> {
    if p.len() != q.len() {
        return Err(TrainError::LengthMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (v, (&pv, &qv)) in p.iter().zip(q).enumerate() {
        if pv > 0.0 {
            if qv <= 0.0 {
                return Err(TrainError::SupportMismatch(v));
            }
            kl += pv * (pv / qv).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// KL between two softmax rows and its gradient w.r.t. the first row's logits.
fn kl_with_grad(logits: &[f64], base_logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let lp = log_softmax(logits);
    let lq = log_softmax(base_logits);
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pv, (a, b))| pv * (a - b)).sum();
    let grad = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pv, (a, b))| pv * (a - b - kl))
        .collect();
    (kl, grad)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn loss_argument(delta_r: f64, kl: f64, margin: f64, cfg: &TrainConfig) -> f64 {
    match cfg.loss_mode {
        LossMode::Literal => delta_r - cfg.eta * kl,
        LossMode::DpoAugmented => delta_r + margin - cfg.eta * kl,
    }
}

/// Pairwise preference loss; strictly positive for finite inputs.
pub fn drpo_loss(delta_r: f64, kl: f64, logprob_margin: f64, cfg: &TrainConfig) -> f64 {
    softplus(-cfg.gamma * loss_argument(delta_r, kl, logprob_margin, cfg))
}

/// Local-reward gap and contribution gap of one module between the two
/// sides of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardGaps {
    pub local: f64,
    pub contrib: f64,
}

impl RewardGaps {
    pub fn mix(&self, alpha: f64, beta: f64) -> f64 {
        alpha * self.local + beta * self.contrib
    }
}

/// One preference example: winning and losing outputs for every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub ctx: Context,
    pub winning: Vec<EmittedOutput>,
    pub losing: Vec<EmittedOutput>,
}

fn output_for<'a>(outs: &'a [EmittedOutput], module_id: &str) -> Result<&'a EmittedOutput, TrainError> {
    outs.iter()
        .find(|o| o.module_id == module_id)
        .ok_or_else(|| TrainError::IncompleteTriple(module_id.to_string()))
}

/// Gaps for every module of one triple, in registration order.
pub fn reward_gaps(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    triple: &PreferenceTriple,
    interface: InterfaceMode,
) -> Result<Vec<RewardGaps>, TrainError> {
    let (_, cw) = all_contributions_with(rm, ensemble, &triple.winning, interface)?;
    let (_, cl) = all_contributions_with(rm, ensemble, &triple.losing, interface)?;
    ensemble
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let id = &e.spec.module_id;
            let lw = local_reward(rm, output_for(&triple.winning, id)?, &triple.ctx)?;
            let ll = local_reward(rm, output_for(&triple.losing, id)?, &triple.ctx)?;
            Ok(RewardGaps {
                local: lw - ll,
                contrib: cw[i] - cl[i],
            })
        })
        .collect()
}

/// `α·(local gap) + β·(contribution gap)` for module `i`.
pub fn reward_difference(
    rm: &dyn Scorer,
    ensemble: &Ensemble,
    triple: &PreferenceTriple,
    i: usize,
    alpha: f64,
    beta: f64,
) -> Result<f64, TrainError> {
    if i >= ensemble.len() {
        return Err(TrainError::ModuleNotRegistered(i));
    }
    crate::reward::integrated_reward(0.0, 0.0, alpha, beta)?;
    Ok(reward_gaps(rm, ensemble, triple, InterfaceMode::Canonical)?[i].mix(alpha, beta))
}

/// Template indices of the two sides of a triple for one policy module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairChoice {
    pub bucket: usize,
    pub win: usize,
    pub lose: usize,
}

/// Everything Phase 1 needs about one (triple, module) pair; rewards are
/// computed once because they do not depend on the policy parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerm {
    pub gaps: RewardGaps,
    /// `None` for modules without a trainable policy.
    pub choice: Option<PairChoice>,
}

/// Value, argument derivative and logit gradient of one pairwise loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEval {
    pub loss: f64,
    pub delta_r: f64,
    pub kl: f64,
    /// dL/dΔR, used for temperature updates.
    pub d_delta_r: f64,
    /// Gradient w.r.t. the logits of the pair's bucket.
    pub grad: Vec<f64>,
}

/// Loss and gradient of one pair with the policy row `logits` and base row `base_logits`.
pub fn pair_loss_grad(logits: &[f64], base_logits: &[f64], choice: PairChoice, delta_r: f64, cfg: &TrainConfig) -> PairEval {
    let (kl, dkl) = kl_with_grad(logits, base_logits);
    let lp = log_softmax(logits);
    let margin = lp[choice.win] - lp[choice.lose];
    let x = loss_argument(delta_r, kl, margin, cfg);
    let loss = softplus(-cfg.gamma * x);
    let d_x = -cfg.gamma * sigmoid(-cfg.gamma * x);
    let mut grad: Vec<f64> = dkl.iter().map(|g| -cfg.eta * g).collect();
    if cfg.loss_mode == LossMode::DpoAugmented {
        grad[choice.win] += 1.0;
        grad[choice.lose] -= 1.0;
    }
    for g in &mut grad {
        *g *= d_x;
    }
    PairEval {
        loss,
        delta_r,
        kl,
        d_delta_r: d_x,
        grad,
    }
}

/// Reward gaps and template choices for a whole dataset, `[triple][module]`.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub terms: Vec<Vec<PairTerm>>,
}

impl PreparedData {
    pub fn new(
        rm: &dyn Scorer,
        ensemble: &Ensemble,
        dataset: &[PreferenceTriple],
        interface: InterfaceMode,
    ) -> Result<Self, TrainError> {
        let terms = dataset
            .iter()
            .map(|triple| {
                let gaps = reward_gaps(rm, ensemble, triple, interface)?;
                ensemble
                    .entries()
                    .iter()
                    .zip(gaps)
                    .map(|(entry, gaps)| {
                        let choice = match entry.generator.policy() {
                            None => None,
                            Some(policy) => {
                                let id = &entry.spec.module_id;
                                let bucket = policy.bucket(&triple.ctx);
                                let find = |outs: &[EmittedOutput]| {
                                    policy
                                        .bank
                                        .lookup(bucket, &output_for(outs, id)?.output)
                                        .ok_or_else(|| TrainError::UnknownTemplate(id.clone()))
                                };
                                Some(PairChoice {
                                    bucket,
                                    win: find(&triple.winning)?,
                                    lose: find(&triple.losing)?,
                                })
                            }
                        };
                        Ok(PairTerm { gaps, choice })
                    })
                    .collect::<Result<Vec<_>, TrainError>>()
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self { terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Frozen copy of every module's initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSnapshot {
    pub tables: Vec<LogitTable>,
}

impl BaseSnapshot {
    pub fn take(ensemble: &Ensemble) -> Self {
        Self {
            tables: (0..ensemble.len()).map(|i| ensemble.params(i).clone()).collect(),
        }
    }

    pub fn digest(&self) -> String {
        let digests: Vec<String> = self.tables.iter().map(LogitTable::digest).collect();
        sha256_hex(digests.join(",").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ModuleWise,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub module_id: Option<String>,
    pub loss: f64,
    pub mean_delta_r: Option<f64>,
    pub mean_kl: f64,
    pub global_reward: Option<f64>,
    pub alpha: f64,
    pub state_digest: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn count(&self, phase: Phase) -> usize {
        self.records.iter().filter(|r| r.phase == phase).count()
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }
}

/// Digest of all policy parameters plus temperatures.
pub fn state_digest(ensemble: &Ensemble, temps: &Temperatures) -> String {
    let mut v = vec![temps.tau_local, temps.tau_contrib];
    for i in 0..ensemble.len() {
        v.extend_from_slice(&ensemble.params(i).logits);
    }
    digest_f64s(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub delta_r: f64,
    pub kl: f64,
}

/// One gradient step for module `i` on the mean loss over `batch`.
/// Returns the pre-update means.
pub fn phase1_batch_step(
    ensemble: &mut Ensemble,
    data: &PreparedData,
    batch: &[usize],
    i: usize,
    cfg: &TrainConfig,
    base: &BaseSnapshot,
    temps: &mut Temperatures,
) -> Result<BatchStats, TrainError> {
    if i >= ensemble.len() {
        return Err(TrainError::ModuleNotRegistered(i));
    }
    let (alpha, beta) = temps.weights(cfg);
    let n = batch.len() as f64;
    let params = ensemble.params(i);
    let mut grad = vec![0.0; params.logits.len()];
    let mut d_tau = 0.0;
    let mut stats = BatchStats::default();
    for &t in batch {
        let term = data.terms[t][i];
        let delta_r = term.gaps.mix(alpha, beta);
        let eval = match term.choice {
            Some(choice) => {
                let e = pair_loss_grad(params.row(choice.bucket), base.tables[i].row(choice.bucket), choice, delta_r, cfg);
                let off = choice.bucket * params.vocab;
                for (g, d) in grad[off..off + params.vocab].iter_mut().zip(&e.grad) {
                    *g += d;
                }
                e
            }
            None => {
                let x = loss_argument(delta_r, 0.0, 0.0, cfg);
                PairEval {
                    loss: drpo_loss(delta_r, 0.0, 0.0, cfg),
                    delta_r,
                    kl: 0.0,
                    d_delta_r: -cfg.gamma * sigmoid(-cfg.gamma * x),
                    grad: Vec::new(),
                }
            }
        };
        // dΔR/dτ_l = αβ(local − contrib); dΔR/dτ_c is its negative
        d_tau += eval.d_delta_r * alpha * beta * (term.gaps.local - term.gaps.contrib);
        stats.loss += eval.loss / n;
        stats.delta_r += eval.delta_r / n;
        stats.kl += eval.kl / n;
    }
    let lr = cfg.learning_rate;
    for (z, g) in ensemble.params_mut(i).logits.iter_mut().zip(&grad) {
        *z -= lr * g / n;
    }
    if cfg.learnable_temperature {
        temps.tau_local -= lr * d_tau / n;
        temps.tau_contrib += lr * d_tau / n;
    }
    Ok(stats)
}

/// Full Phase-1 pass for module `i` over `batches`; only `θ_i` (and, when
/// learnable, the temperatures) change.
pub fn phase1_epoch(
    ensemble: &mut Ensemble,
    data: &PreparedData,
    batches: &[Vec<usize>],
    i: usize,
    cfg: &TrainConfig,
    base: &BaseSnapshot,
    temps: &mut Temperatures,
    epoch: usize,
) -> Result<StepRecord, TrainError> {
    if i >= ensemble.len() {
        return Err(TrainError::ModuleNotRegistered(i));
    }
    let total: usize = batches.iter().map(Vec::len).sum::<usize>().max(1);
    let mut acc = BatchStats::default();
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        let s = phase1_batch_step(ensemble, data, batch, i, cfg, base, temps)?;
        let w = batch.len() as f64 / total as f64;
        acc.loss += s.loss * w;
        acc.delta_r += s.delta_r * w;
        acc.kl += s.kl * w;
    }
    Ok(StepRecord {
        phase: Phase::ModuleWise,
        epoch,
        module_id: Some(ensemble.entry(i).spec.module_id.clone()),
        loss: acc.loss,
        mean_delta_r: Some(acc.delta_r),
        mean_kl: acc.kl,
        global_reward: None,
        alpha: temps.weights(cfg).0,
        state_digest: state_digest(ensemble, temps),
    })
}

/// `G` joint samples for one context: per-module template picks and the
/// reward-model score of each composed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledGroup {
    /// Bucket per module; `None` for non-policy modules.
    pub buckets: Vec<Option<usize>>,
    /// `picks[j][i]`: template chosen by module `i` in sample `j`.
    pub picks: Vec<Vec<Option<usize>>>,
    pub rewards: Vec<f64>,
}

/// `(r − mean) / (std + ε)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

/// Draws `group_size` joint samples per context from the current policies.
pub fn sample_groups<R: RngCore>(
    ensemble: &Ensemble,
    rm: &dyn Scorer,
    contexts: &[Context],
    group_size: usize,
    interface: InterfaceMode,
    rng: &mut R,
) -> Result<Vec<SampledGroup>, TrainError> {
    let mut groups = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let buckets: Vec<Option<usize>> = ensemble
            .entries()
            .iter()
            .map(|e| e.generator.policy().map(|p| p.bucket(ctx)))
            .collect();
        let probs: Vec<Option<Vec<f64>>> = buckets
            .iter()
            .enumerate()
            .map(|(i, b)| b.map(|b| ensemble.params(i).probs(b)))
            .collect();
        let mut picks = Vec::with_capacity(group_size);
        let mut rewards = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let mut sample = Vec::with_capacity(ensemble.len());
            let mut outputs = Vec::with_capacity(ensemble.len());
            for (i, entry) in ensemble.entries().iter().enumerate() {
                let id = &entry.spec.module_id;
                let (pick, out) = match (entry.generator.policy(), &probs[i], buckets[i]) {
                    (Some(policy), Some(p), Some(b)) => {
                        let t = sample_categorical(p, rng);
                        (Some(t), policy.bank.render(b, t))
                    }
                    _ => {
                        let out = entry
                            .generator
                            .generate(ctx, &entry.params, rng.next_u64())
                            .map_err(|cause| TrainError::Generation {
                                module_id: id.clone(),
                                cause,
                            })?;
                        (None, out)
                    }
                };
                sample.push(pick);
                outputs.push(EmittedOutput::new(id.clone(), out)?);
            }
            rewards.push(score_solution(rm, &compose_with(ensemble, &outputs, None, interface)?)?);
            picks.push(sample);
        }
        groups.push(SampledGroup { buckets, picks, rewards });
    }
    Ok(groups)
}

/// Mean over groups of `−(1/G) Σ_j Â_j Σ_i ln π_i(pick) + η Σ_i KL_i`, with
/// advantages treated as constants. Returns the objective, the mean KL and
/// the gradient for every module's table.
pub fn phase2_objective(
    params: &[LogitTable],
    base: &BaseSnapshot,
    groups: &[SampledGroup],
    eta: f64,
    eps: f64,
) -> (f64, f64, Vec<LogitTable>) {
    let mut grads: Vec<LogitTable> = params.iter().map(|t| LogitTable::zeros(t.buckets, t.vocab)).collect();
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let n = groups.len() as f64;
    for group in groups {
        let adv = group_advantages(&group.rewards, eps);
        let g = group.picks.len() as f64;
        for (i, bucket) in group.buckets.iter().enumerate() {
            let Some(b) = *bucket else { continue };
            let row = params[i].row(b);
            let probs = softmax(row);
            let lp = log_softmax(row);
            let (kl, dkl) = kl_with_grad(row, base.tables[i].row(b));
            objective += eta * kl / n;
            kl_total += kl / n;
            let grow = grads[i].row_mut(b);
            for (gv, d) in grow.iter_mut().zip(&dkl) {
                *gv += eta * d / n;
            }
            for (j, pick) in group.picks.iter().enumerate() {
                let Some(t) = pick[i] else { continue };
                let w = adv[j] / (g * n);
                objective -= w * lp[t];
                // ∂ ln π_t / ∂z_v = [v = t] − π_v
                for (v, gv) in grow.iter_mut().enumerate() {
                    let ind = if v == t { 1.0 } else { 0.0 };
                    *gv -= w * (ind - probs[v]);
                }
            }
        }
    }
    (objective, kl_total, grads)
}

/// One joint update on `contexts`.
pub fn phase2_step<R: RngCore>(
    ensemble: &mut Ensemble,
    rm: &dyn Scorer,
    contexts: &[Context],
    cfg: &TrainConfig,
    base: &BaseSnapshot,
    temps: &Temperatures,
    rng: &mut R,
    epoch: usize,
) -> Result<StepRecord, TrainError> {
    if cfg.group_size < 2 {
        return Err(TrainError::DegenerateGroup(cfg.group_size));
    }
    let groups = sample_groups(ensemble, rm, contexts, cfg.group_size, cfg.interface, rng)?;
    let params: Vec<LogitTable> = (0..ensemble.len()).map(|i| ensemble.params(i).clone()).collect();
    let (objective, kl, grads) = phase2_objective(&params, base, &groups, cfg.eta, cfg.advantage_eps);
    for (i, g) in grads.iter().enumerate() {
        for (z, d) in ensemble.params_mut(i).logits.iter_mut().zip(&g.logits) {
            *z -= cfg.learning_rate * d;
        }
    }
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    Ok(StepRecord {
        phase: Phase::Joint,
        epoch,
        module_id: None,
        loss: objective,
        mean_delta_r: None,
        mean_kl: kl,
        global_reward: Some(rewards.iter().sum::<f64>() / rewards.len().max(1) as f64),
        alpha: temps.weights(cfg).0,
        state_digest: state_digest(ensemble, temps),
    })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub base: BaseSnapshot,
    pub temperatures: Temperatures,
}

/// Cascaded training: per epoch, one Phase-1 pass per module (unless
/// skipped) and one Phase-2 step on the epoch's first batch of contexts.
pub fn train(
    ensemble: &mut Ensemble,
    rm: &dyn Scorer,
    dataset: &[PreferenceTriple],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.validate()?;
    let base = BaseSnapshot::take(ensemble);
    let data = PreparedData::new(rm, ensemble, dataset, cfg.interface)?;
    let mut temps = Temperatures::from_config(cfg);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch/{epoch}")));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        if !cfg.skip_phase1 {
            for i in 0..ensemble.len() {
                let rec = phase1_epoch(ensemble, &data, &batches, i, cfg, &base, &mut temps, epoch)?;
                history.records.push(rec);
            }
        }
        let contexts: Vec<Context> = batches[0].iter().map(|&t| dataset[t].ctx.clone()).collect();
        let rec = phase2_step(ensemble, rm, &contexts, cfg, &base, &temps, &mut rng, epoch)?;
        history.records.push(rec);
    }
    Ok(TrainOutcome {
        history,
        base,
        temperatures: temps,
    })
}

/// Trained parameters, the base snapshot and the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    pub module_ids: Vec<String>,
    pub params: Vec<LogitTable>,
    pub base: BaseSnapshot,
    pub temperatures: Temperatures,
}

impl Checkpoint {
    pub fn capture(ensemble: &Ensemble, outcome: &TrainOutcome, config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            seed: config.seed,
            module_ids: ensemble.module_ids(),
            params: (0..ensemble.len()).map(|i| ensemble.params(i).clone()).collect(),
            base: outcome.base.clone(),
            temperatures: outcome.temperatures,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("checkpoints serialize").as_bytes())
    }

    /// Loads the trained tables into a matching ensemble.
    pub fn apply(&self, ensemble: &mut Ensemble) -> Result<(), TrainError> {
        if ensemble.module_ids() != self.module_ids {
            return Err(TrainError::InvalidConfig("checkpoint modules do not match the ensemble".into()));
        }
        for (i, t) in self.params.iter().enumerate() {
            ensemble.set_params(i, t.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::generators::FixedText;
    use crate::orchestrator::{compose, ModuleSpec, Role};
    use crate::policy::{CannedTemplates, TemplateBank};
    use crate::reward::RewardModel;
    use proptest::prelude::*;
    use serde_json::{Map, Value};
    use std::sync::Arc;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn kl_spot_values() {
        assert_eq!(kl_categorical(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]), Err(TrainError::SupportMismatch(1))));
        assert!(matches!(kl_categorical(&[1.0], &[0.5, 0.5]), Err(TrainError::LengthMismatch(1, 2))));
    }

    /// Neumaier-compensated sum of p·ln(p/q), each term split into high and
    /// low parts so cancellation does not lose digits.
    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (&a, &b) in p.iter().zip(q) {
            if a == 0.0 {
                continue;
            }
            let term = a * (a.ln() - b.ln());
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    #[test]
    fn kl_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let raw_p: Vec<f64> = (0..6).map(|_| rng.next_u32() as f64 + 1.0).collect();
            let raw_q: Vec<f64> = (0..6).map(|_| rng.next_u32() as f64 + 1.0).collect();
            let sp: f64 = raw_p.iter().sum();
            let sq: f64 = raw_q.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|x| x / sp).collect();
            let q: Vec<f64> = raw_q.iter().map(|x| x / sq).collect();
            assert!((kl_categorical(&p, &q).unwrap() - kl_oracle(&p, &q)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_spot_values() {
        let cfg = TrainConfig::default();
        assert!((drpo_loss(0.0, 0.0, 0.0, &cfg) - std::f64::consts::LN_2).abs() < 1e-12);
        let cfg = TrainConfig {
            eta: 0.0,
            ..TrainConfig::default()
        };
        assert!((drpo_loss(1.0, 0.0, 0.0, &cfg) - 0.313_261_687_518_222_8).abs() < 1e-12);
        let lit = TrainConfig {
            loss_mode: LossMode::Literal,
            ..TrainConfig::default()
        };
        assert_eq!(drpo_loss(0.4, 0.2, 5.0, &lit), drpo_loss(0.4, 0.2, -5.0, &lit));
    }

    fn random_row(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
        (0..v).map(|_| (rng.next_u32() as f64 / u32::MAX as f64) * 4.0 - 2.0).collect()
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [LossMode::Literal, LossMode::DpoAugmented] {
            for trial in 0..40 {
                let v = 2 + trial % 7;
                let z = random_row(&mut rng, v);
                let base = random_row(&mut rng, v);
                let choice = PairChoice {
                    bucket: 0,
                    win: trial % v,
                    lose: (trial + 1) % v,
                };
                let cfg = TrainConfig {
                    gamma: 0.5 + (trial % 3) as f64,
                    eta: 0.3,
                    loss_mode: mode,
                    ..TrainConfig::default()
                };
                let dr = (trial as f64 / 40.0) - 0.5;
                let e = pair_loss_grad(&z, &base, choice, dr, &cfg);
                let h = 1e-5;
                for k in 0..v {
                    let mut zp = z.clone();
                    zp[k] += h;
                    let mut zm = z.clone();
                    zm[k] -= h;
                    let lp = pair_loss_grad(&zp, &base, choice, dr, &cfg).loss;
                    let lm = pair_loss_grad(&zm, &base, choice, dr, &cfg).loss;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        rel_err(e.grad[k], fd) <= 1e-4 || (e.grad[k] - fd).abs() < 1e-9,
                        "{mode:?} v={v} k={k}: {} vs {fd}",
                        e.grad[k]
                    );
                }
            }
        }
    }

    fn text_output(role: &str, text: &str) -> crate::schema::ModuleOutput {
        let mut c = Map::new();
        c.insert("text".into(), Value::String(text.into()));
        crate::schema::ModuleOutput::new(role, c, 1.0)
    }

    fn policy_ensemble(k: usize, buckets: usize, vocab: usize) -> Ensemble {
        let mut e = Ensemble::new();
        for i in 0..k {
            let role = format!("r{i}");
            let bank: Arc<dyn TemplateBank> = Arc::new(CannedTemplates { role: role.clone(), vocab });
            e.register(
                ModuleSpec::new(format!("m{}", i + 1), Role::Custom(role)),
                Arc::new(crate::orchestrator::PolicyGenerator::new(buckets, bank)),
            )
            .unwrap();
        }
        e
    }

    /// Reward model favouring template `t` of module `i` by `weight(i, t)`.
    fn canned_rm(k: usize, buckets: usize, vocab: usize, seed: u64) -> RewardModel {
        let mut rm = RewardModel::zeros(seed, 4096);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..k {
            for b in 0..buckets {
                for t in 0..vocab {
                    let w = (rng.next_u32() as f64 / u32::MAX as f64) - 0.5;
                    rm.add_token_weight(&format!("r{i}b{b}t{t}"), w);
                }
            }
        }
        rm
    }

    fn triple(e: &Ensemble, ctx: &Context, win: &[usize], lose: &[usize]) -> PreferenceTriple {
        let side = |picks: &[usize]| {
            e.entries()
                .iter()
                .zip(picks)
                .map(|(entry, &t)| {
                    let p = entry.generator.policy().unwrap();
                    EmittedOutput::new(entry.spec.module_id.clone(), p.bank.render(p.bucket(ctx), t)).unwrap()
                })
                .collect()
        };
        PreferenceTriple {
            ctx: ctx.clone(),
            winning: side(win),
            losing: side(lose),
        }
    }

    #[test]
    fn reward_difference_cases() {
        let e = policy_ensemble(2, 1, 4);
        let rm = canned_rm(2, 1, 4, 3);
        let ctx = Context::new("q", "c0").unwrap();
        let same = triple(&e, &ctx, &[1, 2], &[1, 2]);
        assert_eq!(reward_difference(&rm, &e, &same, 0, 0.5, 0.5).unwrap(), 0.0);

        let t = triple(&e, &ctx, &[0, 3], &[2, 1]);
        // six independent scores for module 0
        let render = |outs: &[EmittedOutput], skip: Option<usize>| {
            let mut s = String::new();
            for (i, o) in outs.iter().enumerate() {
                s.push_str(&format!("<m{}|r{}>\n", i + 1, i));
                if Some(i) == skip {
                    s.push('∅');
                } else {
                    s.push_str(o.document.as_str());
                }
                s.push('\n');
            }
            s
        };
        let sc = |text: String| rm.score_text(&text).unwrap();
        let local = |o: &EmittedOutput| sc(format!("{}\n[SEP]\n{}", o.document.as_str(), ctx.render()));
        let lw = local(&t.winning[0]);
        let ll = local(&t.losing[0]);
        let cw = sc(render(&t.winning, None)) - sc(render(&t.winning, Some(0)));
        let cl = sc(render(&t.losing, None)) - sc(render(&t.losing, Some(0)));
        let want = 0.3 * (lw - ll) + 0.7 * (cw - cl);
        let got = reward_difference(&rm, &e, &t, 0, 0.3, 0.7).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        let local_only = reward_difference(&rm, &e, &t, 0, 1.0, 0.0).unwrap();
        assert!((local_only - (lw - ll)).abs() < 1e-15);
        assert!(matches!(
            reward_difference(&rm, &e, &t, 2, 0.5, 0.5),
            Err(TrainError::ModuleNotRegistered(2))
        ));
    }

    fn fixture(n: usize, seed: u64) -> (Ensemble, RewardModel, Vec<PreferenceTriple>) {
        let (k, b, v) = (3, 2, 6);
        let e = policy_ensemble(k, b, v);
        let rm = canned_rm(k, b, v, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|c| {
                let ctx = Context::new("fixture problem", format!("ctx{c}")).unwrap();
                let a: Vec<usize> = (0..k).map(|_| (rng.next_u32() as usize) % v).collect();
                let bb: Vec<usize> = (0..k).map(|_| (rng.next_u32() as usize) % v).collect();
                let t = triple(&e, &ctx, &a, &bb);
                let sa = score_solution(&rm, &compose(&e, &t.winning).unwrap()).unwrap();
                let sb = score_solution(&rm, &compose(&e, &t.losing).unwrap()).unwrap();
                if sa >= sb {
                    t
                } else {
                    triple(&e, &ctx, &bb, &a)
                }
            })
            .collect();
        (e, rm, data)
    }

    #[test]
    fn phase1_freezes_other_modules_and_reward_model() {
        let (mut e, rm, data) = fixture(24, 1);
        let prepared = PreparedData::new(&rm, &e, &data, InterfaceMode::Canonical).unwrap();
        let base = BaseSnapshot::take(&e);
        let base_digest = base.digest();
        let cfg = TrainConfig::default();
        let mut temps = Temperatures::from_config(&cfg);
        let batches: Vec<Vec<usize>> = (0..24).collect::<Vec<_>>().chunks(8).map(<[usize]>::to_vec).collect();
        let before: Vec<String> = (0..3).map(|i| e.params(i).digest()).collect();
        let rm_digest = rm.digest();
        phase1_epoch(&mut e, &prepared, &batches, 1, &cfg, &base, &mut temps, 0).unwrap();
        assert_eq!(e.params(0).digest(), before[0]);
        assert_ne!(e.params(1).digest(), before[1]);
        assert_eq!(e.params(2).digest(), before[2]);
        assert_eq!(rm.digest(), rm_digest);
        assert_eq!(base.digest(), base_digest);

        let zero = TrainConfig {
            learning_rate: 0.0,
            ..cfg.clone()
        };
        let snap = e.params(1).digest();
        phase1_epoch(&mut e, &prepared, &batches, 1, &zero, &base, &mut temps, 0).unwrap();
        assert_eq!(e.params(1).digest(), snap);
        assert!(matches!(
            phase1_epoch(&mut e, &prepared, &batches, 3, &cfg, &base, &mut temps, 0),
            Err(TrainError::ModuleNotRegistered(3))
        ));
    }

    #[test]
    fn phase1_steps_reduce_the_batch_loss() {
        let (mut e, rm, data) = fixture(64, 2);
        let prepared = PreparedData::new(&rm, &e, &data, InterfaceMode::Canonical).unwrap();
        let base = BaseSnapshot::take(&e);
        let cfg = TrainConfig::default();
        let mut temps = Temperatures::from_config(&cfg);
        let batch: Vec<usize> = (0..64).collect();
        let first = phase1_batch_step(&mut e, &prepared, &batch, 0, &cfg, &base, &mut temps).unwrap();
        let mut last = first;
        for _ in 1..50 {
            last = phase1_batch_step(&mut e, &prepared, &batch, 0, &cfg, &base, &mut temps).unwrap();
        }
        assert!(last.loss < first.loss, "{} !< {}", last.loss, first.loss);
    }

    #[test]
    fn phase1_temperature_gradient_matches_finite_differences() {
        let (e, rm, data) = fixture(16, 4);
        let prepared = PreparedData::new(&rm, &e, &data, InterfaceMode::Canonical).unwrap();
        let base = BaseSnapshot::take(&e);
        let cfg = TrainConfig {
            learnable_temperature: true,
            tau_local: 0.3,
            tau_contrib: -0.2,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let batch: Vec<usize> = (0..16).collect();
        let loss_at = |tl: f64| {
            let mut e2 = e.clone();
            let mut t = Temperatures {
                tau_local: tl,
                tau_contrib: -0.2,
            };
            phase1_batch_step(&mut e2, &prepared, &batch, 0, &cfg, &base, &mut t).unwrap().loss
        };
        let h = 1e-5;
        let fd = (loss_at(0.3 + h) - loss_at(0.3 - h)) / (2.0 * h);
        let mut e2 = e.clone();
        let mut t = Temperatures::from_config(&cfg);
        phase1_batch_step(&mut e2, &prepared, &batch, 0, &cfg, &base, &mut t).unwrap();
        // with λ = 1 the step equals the negative gradient
        let analytic = 0.3 - t.tau_local;
        assert!(rel_err(analytic, fd) < 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn degenerate_group_is_rejected() {
        let (mut e, rm, data) = fixture(4, 3);
        let base = BaseSnapshot::take(&e);
        let cfg = TrainConfig {
            group_size: 1,
            ..TrainConfig::default()
        };
        let temps = Temperatures::from_config(&cfg);
        let ctxs = vec![data[0].ctx.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            phase2_step(&mut e, &rm, &ctxs, &cfg, &base, &temps, &mut rng, 0),
            Err(TrainError::DegenerateGroup(1))
        ));
    }

    #[test]
    fn equal_rewards_leave_only_the_kl_pull() {
        // constant reward model: every sample scores the same
        let mut e = policy_ensemble(2, 1, 3);
        let rm = RewardModel::zeros(0, 16);
        let base = BaseSnapshot::take(&e);
        let cfg = TrainConfig::default();
        let temps = Temperatures::from_config(&cfg);
        let ctxs = vec![Context::new("q", "c").unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        phase2_step(&mut e, &rm, &ctxs, &cfg, &base, &temps, &mut rng, 0).unwrap();
        // policies equal the base, so the KL gradient is zero too
        assert_eq!(BaseSnapshot::take(&e), base);

        e.params_mut(0).logits = vec![1.0, 0.0, -1.0];
        let before = e.params(0).logits.clone();
        phase2_step(&mut e, &rm, &ctxs, &cfg, &base, &temps, &mut rng, 0).unwrap();
        let (_, kl_grad) = kl_with_grad(&before, base.tables[0].row(0));
        for ((a, b), g) in e.params(0).logits.iter().zip(&before).zip(&kl_grad) {
            assert!((a - (b - cfg.learning_rate * cfg.eta * g)).abs() < 1e-15);
        }
    }

    /// Surrogate recomputed from the joint distribution over all `V^k`
    /// outcomes: ln P(joint) is read from the enumerated table rather than
    /// summed per module.
    fn enumerated_objective(params: &[LogitTable], base: &BaseSnapshot, groups: &[SampledGroup], eta: f64, eps: f64) -> f64 {
        let k = params.len();
        let v = params[0].vocab;
        let mut total = 0.0;
        for g in groups {
            let probs: Vec<Vec<f64>> = (0..k).map(|i| softmax(params[i].row(0))).collect();
            let mut table = std::collections::HashMap::new();
            for code in 0..v.pow(k as u32) {
                let mut joint = Vec::with_capacity(k);
                let mut c = code;
                let mut p = 1.0;
                for probs_i in &probs {
                    joint.push(c % v);
                    p *= probs_i[c % v];
                    c /= v;
                }
                table.insert(joint, p);
            }
            let adv = group_advantages(&g.rewards, eps);
            let mut pg = 0.0;
            for (j, picks) in g.picks.iter().enumerate() {
                let key: Vec<usize> = picks.iter().map(|p| p.unwrap()).collect();
                pg += adv[j] * table[&key].ln();
            }
            let mut kl = 0.0;
            for i in 0..k {
                kl += kl_categorical(&probs[i], &softmax(base.tables[i].row(0))).unwrap();
            }
            total += -pg / g.picks.len() as f64 + eta * kl;
        }
        total / groups.len() as f64
    }

    #[test]
    fn phase2_gradient_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let k = 1 + trial % 3;
            let mut e = policy_ensemble(k, 1, 3);
            for i in 0..k {
                e.params_mut(i).logits = random_row(&mut rng, 3);
            }
            let rm = canned_rm(k, 1, 3, trial as u64);
            let base = BaseSnapshot {
                tables: (0..k)
                    .map(|_| LogitTable {
                        buckets: 1,
                        vocab: 3,
                        logits: random_row(&mut rng, 3),
                    })
                    .collect(),
            };
            let ctxs = vec![Context::new("q", "a").unwrap(), Context::new("q", "b").unwrap()];
            let mut srng = ChaCha8Rng::seed_from_u64(trial as u64);
            let groups = sample_groups(&e, &rm, &ctxs, 4, InterfaceMode::Canonical, &mut srng).unwrap();
            let params: Vec<LogitTable> = (0..k).map(|i| e.params(i).clone()).collect();
            let (obj, _, grads) = phase2_objective(&params, &base, &groups, 0.1, 1e-8);
            assert!((obj - enumerated_objective(&params, &base, &groups, 0.1, 1e-8)).abs() < 1e-12);
            let h = 1e-5;
            for i in 0..k {
                for vi in 0..3 {
                    let mut pp = params.clone();
                    pp[i].logits[vi] += h;
                    let mut pm = params.clone();
                    pm[i].logits[vi] -= h;
                    let fd = (enumerated_objective(&pp, &base, &groups, 0.1, 1e-8)
                        - enumerated_objective(&pm, &base, &groups, 0.1, 1e-8))
                        / (2.0 * h);
                    let a = grads[i].logits[vi];
                    assert!(rel_err(a, fd) <= 1e-4 || (a - fd).abs() < 1e-9, "{a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_structured() {
        let (e0, rm, data) = fixture(40, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut a = e0.clone();
        let mut b = e0.clone();
        let ha = train(&mut a, &rm, &data, &cfg).unwrap();
        let hb = train(&mut b, &rm, &data, &cfg).unwrap();
        assert_eq!(ha.history.to_jsonl(), hb.history.to_jsonl());
        assert_eq!(ha.history.count(Phase::ModuleWise), 3 * 3);
        assert_eq!(ha.history.count(Phase::Joint), 3);
        assert_eq!(ha.base, BaseSnapshot::take(&e0));
        let ca = Checkpoint::capture(&a, &ha, &cfg);
        assert_eq!(ca.digest(), Checkpoint::capture(&b, &hb, &cfg).digest());
        let back = Checkpoint::from_json(&ca.to_json()).unwrap();
        assert_eq!(back, ca);
        let mut fresh = e0.clone();
        back.apply(&mut fresh).unwrap();
        assert_eq!(fresh.params(2), a.params(2));

        let mut c = e0.clone();
        assert!(matches!(train(&mut c, &rm, &[], &cfg), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn fixed_modules_are_carried_through_training() {
        let mut e = policy_ensemble(2, 1, 3);
        e.register(
            ModuleSpec::new("note", Role::Integrate),
            Arc::new(FixedText {
                output: text_output("summarize", "constant"),
            }),
        )
        .unwrap();
        let rm = canned_rm(2, 1, 3, 8);
        let ctx = Context::new("q", "c").unwrap();
        let mut t = triple(&policy_ensemble(2, 1, 3), &ctx, &[0, 1], &[2, 2]);
        let note = EmittedOutput::new("note", text_output("summarize", "constant")).unwrap();
        t.winning.push(note.clone());
        t.losing.push(note);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train(&mut e, &rm, &[t], &cfg).unwrap();
        assert_eq!(out.history.count(Phase::ModuleWise), 6);
        assert!(e.params(2).is_empty());
    }

    proptest! {
        #[test]
        fn loss_is_positive_and_decreasing(dr in -20.0f64..20.0, kl in 0.0f64..5.0, m in -5.0f64..5.0, d in 1e-3f64..5.0) {
            let cfg = TrainConfig::default();
            let l0 = drpo_loss(dr, kl, m, &cfg);
            prop_assert!(l0 > 0.0);
            prop_assert!(drpo_loss(dr + d, kl, m, &cfg) < l0);
        }

        #[test]
        fn kl_is_nonnegative_and_zero_only_on_equality(
            a in prop::collection::vec(0.01f64..1.0, 2..8),
            b in prop::collection::vec(0.01f64..1.0, 2..8),
        ) {
            let n = a.len().min(b.len());
            let sa: f64 = a[..n].iter().sum();
            let sb: f64 = b[..n].iter().sum();
            let p: Vec<f64> = a[..n].iter().map(|x| x / sa).collect();
            let q: Vec<f64> = b[..n].iter().map(|x| x / sb).collect();
            let kl = kl_categorical(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
            if p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-6) {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn updates_keep_rows_normalized(seed in 0u64..1000) {
            let (mut e, rm, data) = fixture(8, seed);
            let prepared = PreparedData::new(&rm, &e, &data, InterfaceMode::Canonical).unwrap();
            let base = BaseSnapshot::take(&e);
            let cfg = TrainConfig { learning_rate: 0.5, ..TrainConfig::default() };
            let mut temps = Temperatures::from_config(&cfg);
            let batch: Vec<usize> = (0..8).collect();
            phase1_batch_step(&mut e, &prepared, &batch, 0, &cfg, &base, &mut temps).unwrap();
            for b in 0..e.params(0).buckets {
                prop_assert!((e.params(0).probs(b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
