//! Tabular categorical policies.
//!
//! A policy owns one logit row per context bucket. A [`TemplateBank`] maps
//! (bucket, template index) to a concrete [`ModuleOutput`], so sampling a
//! template index is the same as sampling an output.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::hashing::{digest_f64s, fnv1a};
use crate::schema::{canonical_form, ModuleOutput};

/// Bucket of a context id under `buckets` buckets.
pub fn bucket_of(context_id: &str, buckets: usize) -> usize {
    (fnv1a(0x6275_636b, context_id.as_bytes()) % buckets.max(1) as u64) as usize
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Inverse-CDF draw; the last index absorbs rounding slack.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Per-module parameters: a buckets x vocab logit table (row-major).
/// Modules that are not policies carry an empty table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    pub buckets: usize,
    pub vocab: usize,
    pub logits: Vec<f64>,
}

impl LogitTable {
    pub fn zeros(buckets: usize, vocab: usize) -> Self {
        Self {
            buckets,
            vocab,
            logits: vec![0.0; buckets * vocab],
        }
    }

    pub fn empty() -> Self {
        Self::zeros(0, 0)
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.logits[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [f64] {
        &mut self.logits[bucket * self.vocab..(bucket + 1) * self.vocab]
    }

    pub fn probs(&self, bucket: usize) -> Vec<f64> {
        softmax(self.row(bucket))
    }

    pub fn log_probs(&self, bucket: usize) -> Vec<f64> {
        log_softmax(self.row(bucket))
    }

    pub fn digest(&self) -> String {
        let mut header = vec![self.buckets as f64, self.vocab as f64];
        header.extend_from_slice(&self.logits);
        digest_f64s(&header)
    }
}

/// Maps template indices to concrete outputs.
pub trait TemplateBank: Send + Sync {
    fn vocab(&self) -> usize;

    fn render(&self, bucket: usize, template: usize) -> ModuleOutput;

    /// Index of the template in `bucket` whose canonical bytes equal `output`'s.
    fn lookup(&self, bucket: usize, output: &ModuleOutput) -> Option<usize> {
        let target = canonical_form(output, "").bytes;
        (0..self.vocab()).find(|&t| canonical_form(&self.render(bucket, t), "").bytes == target)
    }
}

/// Generic templates used when no task supplies its own bank: template `t`
/// in bucket `b` says `{role}b{b}t{t}`.
#[derive(Debug, Clone)]
pub struct CannedTemplates {
    pub role: String,
    pub vocab: usize,
}

impl TemplateBank for CannedTemplates {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn render(&self, bucket: usize, template: usize) -> ModuleOutput {
        let mut content = Map::new();
        content.insert(
            "text".into(),
            Value::String(format!("{}b{}t{}", self.role, bucket, template)),
        );
        ModuleOutput::new(self.role.clone(), content, 1.0)
    }
}

/// A bank with a precomputed reverse index over canonical bytes.
pub struct IndexedBank {
    inner: Arc<dyn TemplateBank>,
    buckets: usize,
    index: OnceLock<Vec<HashMap<Vec<u8>, usize>>>,
}

impl IndexedBank {
    pub fn new(inner: Arc<dyn TemplateBank>, buckets: usize) -> Self {
        Self {
            inner,
            buckets,
            index: OnceLock::new(),
        }
    }

    fn index(&self) -> &[HashMap<Vec<u8>, usize>] {
        self.index.get_or_init(|| {
            (0..self.buckets)
                .map(|b| {
                    (0..self.inner.vocab())
                        .map(|t| (canonical_form(&self.inner.render(b, t), "").bytes, t))
                        .collect()
                })
                .collect()
        })
    }
}

impl TemplateBank for IndexedBank {
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    fn render(&self, bucket: usize, template: usize) -> ModuleOutput {
        self.inner.render(bucket, template)
    }

    fn lookup(&self, bucket: usize, output: &ModuleOutput) -> Option<usize> {
        let key = canonical_form(output, "").bytes;
        self.index().get(bucket)?.get(&key).copied()
    }
}
