//! Synthetic tasks with a known-good answer per module.
//!
//! Each module owns, per context bucket, a small vocabulary of `words`
//! tokens (`parse3w7` is word 7 of bucket 3 for the `parse` module). A
//! template is a distinct subset of `template_len` of those words, and one
//! template per (module, bucket) is the target. The ground-truth reward
//! model rewards target words and penalizes the other words of the same
//! vocabulary, so the all-target composition scores highest.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::HarnessError;
use crate::hashing::derive_seed;
use crate::orchestrator::{compose, Context, EmittedOutput, Ensemble, ModuleSpec, PolicyGenerator, Role};
use crate::policy::{bucket_of, LogitTable, TemplateBank};
use crate::reward::{RewardModel, Scorer};
use crate::schema::ModuleOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub modules: usize,
    pub buckets: usize,
    pub vocab: usize,
    pub words: usize,
    pub template_len: usize,
    pub rm_dim: usize,
    pub target_weight: f64,
    pub off_target_weight: f64,
    pub noise_words: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            modules: 3,
            buckets: 16,
            vocab: 32,
            words: 8,
            template_len: 4,
            rm_dim: 1 << 16,
            target_weight: 0.5,
            off_target_weight: -0.25,
            noise_words: 64,
            seed: 7,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All `len`-subsets of `0..n` in lexicographic order.
fn subsets(n: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..len).collect();
    if len > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = len;
        while i > 0 && cur[i - 1] == n - len + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..len {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Templates of one module: `templates[bucket][t]` lists word indices.
#[derive(Debug, Clone)]
pub struct WordBank {
    pub role: String,
    pub templates: Vec<Vec<Vec<usize>>>,
}

impl WordBank {
    pub fn word(&self, bucket: usize, w: usize) -> String {
        format!("{}{}w{}", self.role, bucket, w)
    }

    pub fn text(&self, bucket: usize, t: usize) -> String {
        self.templates[bucket][t]
            .iter()
            .map(|&w| self.word(bucket, w))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn text_output(role: &str, text: &str) -> ModuleOutput {
    let mut content = Map::new();
    content.insert("text".into(), Value::String(text.to_string()));
    ModuleOutput::new(role, content, 1.0)
}

impl TemplateBank for WordBank {
    fn vocab(&self) -> usize {
        self.templates.first().map_or(0, Vec::len)
    }

    fn render(&self, bucket: usize, template: usize) -> ModuleOutput {
        text_output(&self.role, &self.text(bucket, template))
    }
}

pub struct SyntheticTask {
    pub config: TaskConfig,
    pub module_ids: Vec<String>,
    pub roles: Vec<Role>,
    pub banks: Vec<Arc<WordBank>>,
    /// `targets[module][bucket]`: the preferred template.
    pub targets: Vec<Vec<usize>>,
    pub rm: RewardModel,
    /// Tokens that carry no reward-model weight, used to corrupt outputs.
    pub noise: Vec<String>,
}

impl SyntheticTask {
    /// Builds a task and its ground-truth reward model. If hash collisions
    /// break the preference for the all-target composition, the hash seed
    /// is rederived and construction retried.
    pub fn new(config: TaskConfig) -> Result<Self, HarnessError> {
        let c = &config;
        if c.modules == 0 || c.buckets == 0 || c.template_len == 0 || c.rm_dim == 0 {
            return Err(HarnessError::InvalidTask("sizes must be positive".into()));
        }
        if c.vocab < 2 || binomial(c.words, c.template_len) < c.vocab {
            return Err(HarnessError::InvalidTask(format!(
                "{} words cannot form {} distinct templates of length {}",
                c.words, c.vocab, c.template_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "task"));
        let roles: Vec<Role> = (0..c.modules)
            .map(|i| match Role::STANDARD.get(i) {
                Some(r) => r.clone(),
                None => Role::Custom(format!("aux{i}")),
            })
            .collect();
        let module_ids: Vec<String> = (1..=c.modules).map(|i| format!("m{i}")).collect();
        let all = subsets(c.words, c.template_len);
        let mut banks = Vec::with_capacity(c.modules);
        let mut targets = Vec::with_capacity(c.modules);
        for role in &roles {
            let mut templates = Vec::with_capacity(c.buckets);
            let mut tgt = Vec::with_capacity(c.buckets);
            for _ in 0..c.buckets {
                let mut pool = all.clone();
                pool.shuffle(&mut rng);
                pool.truncate(c.vocab);
                templates.push(pool);
                tgt.push(rand::Rng::random_range(&mut rng, 0..c.vocab));
            }
            banks.push(Arc::new(WordBank {
                role: role.as_str().replace(|ch: char| !ch.is_alphanumeric(), ""),
                templates,
            }));
            targets.push(tgt);
        }
        for attempt in 0..64u64 {
            let hash_seed = derive_seed(c.seed, &format!("rm/{attempt}"));
            let rm = Self::ground_truth(c, &banks, &targets, hash_seed);
            let mut task = Self {
                config: config.clone(),
                module_ids: module_ids.clone(),
                roles: roles.clone(),
                banks: banks.clone(),
                targets: targets.clone(),
                rm,
                noise: Vec::new(),
            };
            task.noise = task.neutral_words(c.noise_words);
            if task.noise.len() == c.noise_words && task.structure_is_neutral() && task.targets_strictly_preferred()? {
                return Ok(task);
            }
        }
        Err(HarnessError::InvalidTask("no hash seed separates the target composition".into()))
    }

    fn ground_truth(c: &TaskConfig, banks: &[Arc<WordBank>], targets: &[Vec<usize>], hash_seed: u64) -> RewardModel {
        let mut rm = RewardModel::zeros(hash_seed, c.rm_dim);
        for (bank, tgt) in banks.iter().zip(targets) {
            for (b, &t) in tgt.iter().enumerate() {
                let target_words = &bank.templates[b][t];
                for w in 0..c.words {
                    let weight = if target_words.contains(&w) {
                        c.target_weight
                    } else {
                        c.off_target_weight
                    };
                    rm.add_token_weight(&bank.word(b, w), weight);
                }
            }
        }
        rm.bias = -(c.modules as f64);
        rm
    }

    /// Tokens every composition carries regardless of content: record keys,
    /// segment headers and the rendering of ad-hoc records.
    pub fn structural_tokens(&self) -> Vec<String> {
        let mut t: Vec<String> = [
            "type", "content", "text", "confidence", "dependencies", "1", "0", "sep", "moduleoutput", "tag", "string",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        t.extend(self.module_ids.iter().cloned());
        t.extend(self.roles.iter().map(|r| r.as_str().to_lowercase()));
        t
    }

    fn structure_is_neutral(&self) -> bool {
        self.structural_tokens()
            .iter()
            .all(|w| self.rm.weights[self.rm.feature_index(w)] == 0.0)
    }

    /// Tokens whose hashed feature has zero weight.
    fn neutral_words(&self, n: usize) -> Vec<String> {
        (0..n * 64)
            .map(|j| format!("filler{j}"))
            .filter(|w| self.rm.weights[self.rm.feature_index(w)] == 0.0)
            .take(n)
            .collect()
    }

    fn representative_context(&self, bucket: usize) -> Context {
        (0..)
            .map(|n| format!("probe-{n}"))
            .find(|id| bucket_of(id, self.config.buckets) == bucket)
            .map(|id| Context::new("probe", id).expect("non-empty"))
            .expect("some id hashes to every bucket")
    }

    /// Checks that every single-module substitution lowers the score.
    fn targets_strictly_preferred(&self) -> Result<bool, HarnessError> {
        let ens = self.base_ensemble();
        for b in 0..self.config.buckets {
            let ctx = self.representative_context(b);
            let target = self.target_outputs(&ctx)?;
            let best = self.rm.score_text(&compose(&ens, &target)?.render())?;
            for i in 0..self.config.modules {
                for t in 0..self.config.vocab {
                    if t == self.targets[i][b] {
                        continue;
                    }
                    let mut alt = target.clone();
                    alt[i] = EmittedOutput::new(self.module_ids[i].clone(), self.banks[i].render(b, t))?;
                    if self.rm.score_text(&compose(&ens, &alt)?.render())? >= best {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    pub fn bucket(&self, ctx: &Context) -> usize {
        bucket_of(&ctx.context_id, self.config.buckets)
    }

    /// Ensemble of untrained (uniform) policies over the task's templates.
    pub fn base_ensemble(&self) -> Ensemble {
        let mut e = Ensemble::new();
        for ((id, role), bank) in self.module_ids.iter().zip(&self.roles).zip(&self.banks) {
            let bank: Arc<dyn TemplateBank> = bank.clone();
            e.register(
                ModuleSpec::new(id.clone(), role.clone()),
                Arc::new(PolicyGenerator::new(self.config.buckets, bank)),
            )
            .expect("task modules have unique ids and no dependencies");
        }
        e
    }

    /// Ensemble whose policies put almost all mass on the targets.
    pub fn target_ensemble(&self) -> Ensemble {
        let mut e = self.base_ensemble();
        for i in 0..self.config.modules {
            let mut t = LogitTable::zeros(self.config.buckets, self.config.vocab);
            for b in 0..self.config.buckets {
                t.row_mut(b)[self.targets[i][b]] = 50.0;
            }
            e.set_params(i, t).expect("shapes match");
        }
        e
    }

    pub fn target_outputs(&self, ctx: &Context) -> Result<Vec<EmittedOutput>, HarnessError> {
        let b = self.bucket(ctx);
        (0..self.config.modules)
            .map(|i| Ok(EmittedOutput::new(self.module_ids[i].clone(), self.banks[i].render(b, self.targets[i][b]))?))
            .collect()
    }

    /// Outputs choosing template `picks[i]` for module `i`.
    pub fn outputs_for(&self, ctx: &Context, picks: &[usize]) -> Result<Vec<EmittedOutput>, HarnessError> {
        let b = self.bucket(ctx);
        picks
            .iter()
            .enumerate()
            .map(|(i, &t)| Ok(EmittedOutput::new(self.module_ids[i].clone(), self.banks[i].render(b, t))?))
            .collect()
    }

    /// `n` contexts from a named stream; different streams never share ids.
    pub fn contexts(&self, stream: &str, n: usize, seed: u64) -> Vec<Context> {
        (0..n)
            .map(|j| {
                Context::new(format!("synthetic problem {j}"), format!("{stream}-{seed}-{j}")).expect("non-empty statement")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_distinct_and_complete() {
        let s = subsets(8, 4);
        assert_eq!(s.len(), 70);
        let mut d = s.clone();
        d.dedup();
        assert_eq!(d.len(), 70);
        assert!(s.iter().all(|x| x.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn standard_task_prefers_targets() {
        let task = SyntheticTask::new(TaskConfig::default()).unwrap();
        assert!(task.targets_strictly_preferred().unwrap());
        assert!(task.structure_is_neutral());
        assert_eq!(task.noise.len(), 64);
        for w in &task.noise {
            assert_eq!(task.rm.weights[task.rm.feature_index(w)], 0.0);
        }
        let bank = &task.banks[0];
        for b in 0..task.config.buckets {
            let mut texts: Vec<String> = (0..task.config.vocab).map(|t| bank.text(b, t)).collect();
            texts.sort();
            texts.dedup();
            assert_eq!(texts.len(), task.config.vocab);
        }
        assert_eq!(bank.word(3, 7), "parse3w7");
    }

    #[test]
    fn impossible_vocabularies_are_rejected() {
        let cfg = TaskConfig {
            words: 4,
            ..TaskConfig::default()
        };
        assert!(matches!(SyntheticTask::new(cfg), Err(HarnessError::InvalidTask(_))));
    }
}
