//! Data-quality pipeline: normalization, exact and near-duplicate removal,
//! length/math, PII, character-set and perplexity gates.
//!
//! Every filter keeps input order and returns a [`FilterEntry`] with its
//! accounting. Per-record predicates run in parallel; dedup keep decisions
//! are committed sequentially in input order, so results never depend on
//! the worker count.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};

use md5::{Digest, Md5};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConversationSample, DatasetManifest, ImageCaptionSample, Sample, TextRecord, VqaSample};

/// Rejected ids kept per filter entry for auditing.
pub const REJECTED_ID_CAP: usize = 16;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
#[error("scorer failed: {0}")]
pub struct ScoreError(pub String);

/// Case-folds, collapses whitespace runs to one space and trims.
pub fn normalize_text(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Anything the filters can judge.
pub trait Curatable {
    fn record_id(&self) -> &str;
    fn curation_text(&self) -> Cow<'_, str>;
}

impl Curatable for TextRecord {
    fn record_id(&self) -> &str {
        &self.id
    }
    fn curation_text(&self) -> Cow<'_, str> {
        Cow::Borrowed(&self.text)
    }
}

impl Curatable for ImageCaptionSample {
    fn record_id(&self) -> &str {
        &self.id
    }
    fn curation_text(&self) -> Cow<'_, str> {
        Cow::Borrowed(&self.caption)
    }
}

/// Question and answer together: short answers alone repeat constantly.
impl Curatable for VqaSample {
    fn record_id(&self) -> &str {
        &self.id
    }
    fn curation_text(&self) -> Cow<'_, str> {
        Cow::Owned(format!("{}\n{}", self.question, self.answer))
    }
}

impl Curatable for ConversationSample {
    fn record_id(&self) -> &str {
        &self.id
    }
    fn curation_text(&self) -> Cow<'_, str> {
        Cow::Owned(self.turns.iter().map(|t| t.answer.as_str()).collect::<Vec<_>>().join("\n"))
    }
}

impl Curatable for Sample {
    fn record_id(&self) -> &str {
        self.id()
    }
    fn curation_text(&self) -> Cow<'_, str> {
        match self {
            Sample::Text(r) => r.curation_text(),
            Sample::Caption(r) => r.curation_text(),
            Sample::Vqa(r) => r.curation_text(),
            Sample::Conversation(r) => r.curation_text(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterEntry {
    pub name: String,
    pub input_count: usize,
    pub accepted_count: usize,
    pub rejected_count: usize,
    #[serde(default)]
    pub quarantined_count: usize,
    pub sample_rejected_ids: Vec<String>,
    #[serde(default)]
    pub quarantined_ids: Vec<String>,
}

impl FilterEntry {
    pub fn conserves(&self) -> bool {
        self.input_count == self.accepted_count + self.rejected_count + self.quarantined_count
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub pipeline: Vec<String>,
    pub entries: Vec<FilterEntry>,
}

impl FilterReport {
    /// Every entry conserves its count and each filter's input is the
    /// previous filter's accepted count.
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().all(FilterEntry::conserves)
            && self.entries.windows(2).all(|w| w[1].input_count == w[0].accepted_count)
            && self.pipeline.len() == self.entries.len()
    }
}

pub struct FilterOutput<T> {
    pub kept: Vec<T>,
    pub entry: FilterEntry,
    pub quarantined: Vec<T>,
}

/// Splits `records` by a precomputed keep decision per record.
fn partition<T: Curatable>(name: &str, records: Vec<T>, keep: Vec<bool>) -> FilterOutput<T> {
    debug_assert_eq!(records.len(), keep.len());
    let input_count = records.len();
    let mut kept = Vec::with_capacity(input_count);
    let mut sample_rejected_ids = Vec::new();
    let mut rejected = 0;
    for (r, k) in records.into_iter().zip(keep) {
        if k {
            kept.push(r);
        } else {
            rejected += 1;
            if sample_rejected_ids.len() < REJECTED_ID_CAP {
                sample_rejected_ids.push(r.record_id().to_string());
            }
        }
    }
    FilterOutput {
        entry: FilterEntry {
            name: name.to_string(),
            input_count,
            accepted_count: kept.len(),
            rejected_count: rejected,
            quarantined_count: 0,
            sample_rejected_ids,
            quarantined_ids: Vec::new(),
        },
        kept,
        quarantined: Vec::new(),
    }
}

fn predicate<T, F>(records: &[T], f: F) -> Vec<bool>
where
    T: Curatable + Sync,
    F: Fn(&str) -> bool + Sync,
{
    records.par_iter().map(|r| f(&r.curation_text())).collect()
}

pub fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Keeps the first record per MD5 digest of its normalized text.
pub fn exact_dedup<T: Curatable + Send + Sync>(records: Vec<T>) -> FilterOutput<T> {
    let digests: Vec<[u8; 16]> = records
        .par_iter()
        .map(|r| Md5::digest(normalize_text(&r.curation_text()).as_bytes()).into())
        .collect();
    let mut seen = HashSet::with_capacity(digests.len());
    let keep = digests.into_iter().map(|d| seen.insert(d)).collect();
    partition("exact_dedup", records, keep)
}

pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Feature-hashed character trigram counts of the normalized text,
/// L2-normalized.
#[derive(Clone, Copy, Debug)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub ngram: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 256, ngram: 3 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = normalize_text(text).chars().collect();
        let mut v = vec![0.0; self.dim];
        if chars.is_empty() {
            return v;
        }
        let n = self.ngram.min(chars.len());
        let mut buf = String::new();
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            v[(fnv1a(buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy sequential near-duplicate removal: a record is dropped iff its
/// embedding lies closer than `threshold` (Euclidean) to some previously
/// kept record's embedding.
pub fn near_dedup<T: Curatable + Send + Sync>(
    records: Vec<T>,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<FilterOutput<T>, CurationError> {
    if !(threshold > 0.0) {
        return Err(CurationError::Config(format!("near_dedup threshold must be positive, got {threshold}")));
    }
    let dim = embedder.dim();
    let embeddings: Vec<Vec<f64>> = records.par_iter().map(|r| embedder.embed(&r.curation_text())).collect();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(CurationError::Config(format!(
            "embedder declared dimension {dim} but produced {}",
            bad.len()
        )));
    }
    let t2 = threshold * threshold;
    let mut kept_embeddings: Vec<&[f64]> = Vec::new();
    let mut keep = Vec::with_capacity(records.len());
    for e in &embeddings {
        let duplicate = kept_embeddings.par_iter().any(|k| sq_dist(k, e) < t2);
        if !duplicate {
            kept_embeddings.push(e);
        }
        keep.push(!duplicate);
    }
    Ok(partition("near_dedup", records, keep))
}

fn math_pattern() -> Regex {
    Regex::new(r"=|\\frac|\\sum|\\int|\^\{|_\{|[+\-*/×÷^]{2,}").expect("valid math pattern")
}

pub fn contains_math(text: &str) -> bool {
    math_pattern().is_match(text)
}

/// Keeps records of at least `min_chars` characters with no math
/// expression.
pub fn length_math_filter<T: Curatable + Send + Sync>(records: Vec<T>, min_chars: usize) -> FilterOutput<T> {
    let math = math_pattern();
    let keep = predicate(&records, |t| t.chars().count() >= min_chars && !math.is_match(t));
    partition("length_math", records, keep)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiPattern {
    pub label: String,
    pub regex: String,
}

pub fn default_pii_patterns() -> Vec<PiiPattern> {
    let p = |label: &str, regex: &str| PiiPattern {
        label: label.into(),
        regex: regex.into(),
    };
    vec![
        p("email", r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,}"),
        p("phone", r"(?:\+\d{1,3}[\s.\-]?)?\(?\b\d{3}\)?[\s.\-]\d{3}[\s.\-]\d{4}\b"),
        p("phone", r"\b1[3-9]\d{9}\b"),
        p("national_id", r"\b\d{17}[\dXx]\b"),
        p("national_id", r"\b\d{3}-\d{2}-\d{4}\b"),
    ]
}

/// Compiled PII matchers.
#[derive(Clone, Debug)]
pub struct PiiFilter {
    matchers: Vec<(String, Regex)>,
}

impl PiiFilter {
    pub fn new(patterns: &[PiiPattern], names: &[String]) -> Result<Self, CurationError> {
        let mut matchers = Vec::new();
        for p in patterns {
            let re = Regex::new(&p.regex)
                .map_err(|e| CurationError::Config(format!("invalid PII pattern `{}`: {e}", p.label)))?;
            matchers.push((p.label.clone(), re));
        }
        let names: Vec<String> = names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| {
                let escaped = regex::escape(n.trim());
                if n.is_ascii() {
                    format!(r"\b{escaped}\b")
                } else {
                    escaped
                }
            })
            .collect();
        if !names.is_empty() {
            let re = Regex::new(&format!("(?i){}", names.join("|")))
                .map_err(|e| CurationError::Config(format!("invalid name list: {e}")))?;
            matchers.push(("name".into(), re));
        }
        if matchers.is_empty() {
            return Err(CurationError::Config("PII filter needs at least one pattern".into()));
        }
        Ok(Self { matchers })
    }

    pub fn with_defaults(names: &[String]) -> Result<Self, CurationError> {
        Self::new(&default_pii_patterns(), names)
    }

    /// Label of the first matching pattern.
    pub fn find(&self, text: &str) -> Option<&str> {
        self.matchers
            .iter()
            .find(|(_, re)| re.is_match(text))
            .map(|(label, _)| label.as_str())
    }
}

pub fn pii_filter<T: Curatable + Send + Sync>(records: Vec<T>, filter: &PiiFilter) -> FilterOutput<T> {
    let keep = predicate(&records, |t| filter.find(t).is_none());
    partition("pii", records, keep)
}

fn is_chinese_or_neutral(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{3000}'..='\u{303F}'
        | '\u{FF00}'..='\u{FFEF}'
        | '0'..='9'
    ) || c.is_whitespace()
        || ",.;:!?()%-\"'".contains(c)
}

/// Rejects text containing any character outside Chinese script, digits,
/// whitespace and common punctuation.
pub fn charset_filter<T: Curatable + Send + Sync>(records: Vec<T>) -> FilterOutput<T> {
    let keep = predicate(&records, |t| t.chars().all(is_chinese_or_neutral));
    partition("charset", records, keep)
}

pub trait PerplexityScorer: Sync {
    fn perplexity(&self, text: &str) -> Result<f64, ScoreError>;
}

/// Every character has probability `1 / vocab`; perplexity is `vocab`.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub vocab: usize,
}

impl PerplexityScorer for UniformScorer {
    fn perplexity(&self, text: &str) -> Result<f64, ScoreError> {
        if text.is_empty() {
            return Err(ScoreError("empty text".into()));
        }
        Ok(self.vocab as f64)
    }
}

/// Character unigram model with add-one smoothing and a single unknown
/// bucket.
#[derive(Clone, Debug)]
pub struct UnigramScorer {
    log_probs: HashMap<char, f64>,
    unknown_log_prob: f64,
}

impl UnigramScorer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut total = 0usize;
        for t in texts {
            for c in t.chars() {
                *counts.entry(c).or_insert(0) += 1;
                total += 1;
            }
        }
        let vocab = counts.len() + 1;
        let denom = (total + vocab) as f64;
        let log_probs = counts
            .into_iter()
            .map(|(c, n)| (c, ((n + 1) as f64 / denom).ln()))
            .collect();
        Self {
            log_probs,
            unknown_log_prob: (1.0 / denom).ln(),
        }
    }
}

impl PerplexityScorer for UnigramScorer {
    fn perplexity(&self, text: &str) -> Result<f64, ScoreError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in text.chars() {
            sum += self.log_probs.get(&c).copied().unwrap_or(self.unknown_log_prob);
            n += 1;
        }
        if n == 0 {
            return Err(ScoreError("empty text".into()));
        }
        Ok((-sum / n as f64).exp())
    }
}

/// Keeps records with perplexity ≤ `tau`; records the scorer fails on are
/// quarantined.
pub fn perplexity_filter<T: Curatable + Send + Sync>(
    records: Vec<T>,
    scorer: &dyn PerplexityScorer,
    tau: f64,
) -> Result<FilterOutput<T>, CurationError> {
    if !(tau > 0.0) {
        return Err(CurationError::Config(format!("perplexity tau must be positive, got {tau}")));
    }
    let verdicts: Vec<Option<bool>> = records
        .par_iter()
        .map(|r| scorer.perplexity(&r.curation_text()).ok().map(|p| p <= tau))
        .collect();
    let input_count = records.len();
    let mut kept = Vec::new();
    let mut quarantined = Vec::new();
    let mut sample_rejected_ids = Vec::new();
    let mut rejected = 0;
    for (r, v) in records.into_iter().zip(verdicts) {
        match v {
            Some(true) => kept.push(r),
            Some(false) => {
                rejected += 1;
                if sample_rejected_ids.len() < REJECTED_ID_CAP {
                    sample_rejected_ids.push(r.record_id().to_string());
                }
            }
            None => quarantined.push(r),
        }
    }
    Ok(FilterOutput {
        entry: FilterEntry {
            name: "perplexity".into(),
            input_count,
            accepted_count: kept.len(),
            rejected_count: rejected,
            quarantined_count: quarantined.len(),
            sample_rejected_ids,
            quarantined_ids: quarantined.iter().map(|r| r.record_id().to_string()).collect(),
        },
        kept,
        quarantined,
    })
}

fn default_threshold() -> f64 {
    0.35
}
fn default_dim() -> usize {
    256
}
fn default_min_chars() -> usize {
    250
}
fn default_tau() -> f64 {
    1000.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scorer", rename_all = "snake_case")]
pub enum ScorerSpec {
    /// Character unigram fitted on the pipeline's input.
    #[default]
    Unigram,
    Uniform { vocab: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    ExactDedup,
    NearDedup {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    LengthMath {
        #[serde(default = "default_min_chars")]
        min_chars: usize,
    },
    Pii {
        #[serde(default = "yes")]
        defaults: bool,
        #[serde(default)]
        patterns: Vec<PiiPattern>,
        #[serde(default)]
        names: Vec<String>,
    },
    Charset,
    Perplexity {
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default, flatten)]
        scorer: ScorerSpec,
    },
}

impl FilterSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FilterSpec::ExactDedup => "exact_dedup",
            FilterSpec::NearDedup { .. } => "near_dedup",
            FilterSpec::LengthMath { .. } => "length_math",
            FilterSpec::Pii { .. } => "pii",
            FilterSpec::Charset => "charset",
            FilterSpec::Perplexity { .. } => "perplexity",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
}

impl PipelineConfig {
    /// Exact dedup, near dedup, length/math, PII, perplexity. The
    /// character-set filter is off by default.
    pub fn default_pipeline() -> Self {
        Self {
            filters: vec![
                FilterSpec::ExactDedup,
                FilterSpec::NearDedup {
                    threshold: default_threshold(),
                    dim: default_dim(),
                },
                FilterSpec::LengthMath {
                    min_chars: default_min_chars(),
                },
                FilterSpec::Pii {
                    defaults: true,
                    patterns: Vec::new(),
                    names: Vec::new(),
                },
                FilterSpec::Perplexity {
                    tau: default_tau(),
                    scorer: ScorerSpec::Unigram,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        let mut exact_seen = false;
        for f in &self.filters {
            match f {
                FilterSpec::ExactDedup => exact_seen = true,
                FilterSpec::NearDedup { threshold, dim } => {
                    if !exact_seen {
                        return Err(CurationError::Config("near_dedup must come after exact_dedup".into()));
                    }
                    if !(*threshold > 0.0) || *dim == 0 {
                        return Err(CurationError::Config("near_dedup needs a positive threshold and dimension".into()));
                    }
                }
                FilterSpec::Perplexity { tau, .. } if !(*tau > 0.0) => {
                    return Err(CurationError::Config(format!("perplexity tau must be positive, got {tau}")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

enum Stage {
    Exact,
    Near { embedder: HashingEmbedder, threshold: f64 },
    LengthMath(usize),
    Pii(PiiFilter),
    Charset,
    Perplexity { tau: f64, scorer: ScorerSpec },
}

pub struct PipelineOutput {
    pub manifest: DatasetManifest,
    pub report: FilterReport,
    pub quarantined: Vec<Sample>,
}

/// Applies the configured filters in order to a manifest's records.
pub fn run_pipeline(config: &PipelineConfig, input: &DatasetManifest) -> Result<PipelineOutput, CurationError> {
    config.validate()?;
    // Compile everything before touching data.
    let stages: Vec<Stage> = config
        .filters
        .iter()
        .map(|f| {
            Ok(match f {
                FilterSpec::ExactDedup => Stage::Exact,
                FilterSpec::NearDedup { threshold, dim } => Stage::Near {
                    embedder: HashingEmbedder { dim: *dim, ngram: 3 },
                    threshold: *threshold,
                },
                FilterSpec::LengthMath { min_chars } => Stage::LengthMath(*min_chars),
                FilterSpec::Pii {
                    defaults,
                    patterns,
                    names,
                } => {
                    let mut all = if *defaults { default_pii_patterns() } else { Vec::new() };
                    all.extend(patterns.iter().cloned());
                    Stage::Pii(PiiFilter::new(&all, names)?)
                }
                FilterSpec::Charset => Stage::Charset,
                FilterSpec::Perplexity { tau, scorer } => Stage::Perplexity {
                    tau: *tau,
                    scorer: scorer.clone(),
                },
            })
        })
        .collect::<Result<_, CurationError>>()?;

    let mut records = input.records.clone();
    let mut report = FilterReport::default();
    let mut quarantined = Vec::new();
    for (spec, stage) in config.filters.iter().zip(&stages) {
        let out = match stage {
            Stage::Exact => exact_dedup(records),
            Stage::Near { embedder, threshold } => near_dedup(records, embedder, *threshold)?,
            Stage::LengthMath(min) => length_math_filter(records, *min),
            Stage::Pii(filter) => pii_filter(records, filter),
            Stage::Charset => charset_filter(records),
            Stage::Perplexity { tau, scorer } => match scorer {
                ScorerSpec::Uniform { vocab } => perplexity_filter(records, &UniformScorer { vocab: *vocab }, *tau)?,
                ScorerSpec::Unigram => {
                    let texts: Vec<Cow<'_, str>> = input.records.iter().map(|r| r.curation_text()).collect();
                    let fitted = UnigramScorer::fit(texts.iter().map(|t| t.as_ref()));
                    perplexity_filter(records, &fitted, *tau)?
                }
            },
        };
        report.pipeline.push(spec.name().to_string());
        report.entries.push(out.entry);
        quarantined.extend(out.quarantined);
        records = out.kept;
    }
    let manifest = DatasetManifest {
        name: input.name.clone(),
        task: input.task,
        records,
        base_dir: input.base_dir.clone(),
    };
    Ok(PipelineOutput {
        manifest,
        report,
        quarantined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Domain, Language, Task};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, text: &str) -> TextRecord {
        TextRecord {
            id: id.into(),
            text: text.into(),
            language: Language::En,
            source: "test".into(),
            domain: Domain::Medical,
        }
    }

    fn ids<T: Curatable>(v: &[T]) -> Vec<&str> {
        v.iter().map(|r| r.record_id()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("  Lung   CANCER "), "lung cancer");
        assert_eq!(normalize_text("lung cancer"), "lung cancer");
        assert_eq!(normalize_text("a\t\nb"), "a b");
    }

    #[test]
    fn normalization_is_idempotent_on_fuzz_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let alphabet: Vec<char> = "aBcD xYz\t\n  肺癌ÉéİßΣς ".chars().collect();
        for _ in 0..1000 {
            let len = rng.random_range(0..40);
            let s: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            let once = normalize_text(&s);
            assert_eq!(normalize_text(&once), once, "input {s:?}");
        }
    }

    proptest! {
        #[test]
        fn normalization_idempotent_on_arbitrary_strings(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }

    #[test]
    fn exact_dedup_examples() {
        let out = exact_dedup(vec![rec("1", "a"), rec("2", "a"), rec("3", "b")]);
        assert_eq!(ids(&out.kept), ["1", "3"]);
        assert_eq!(out.entry.rejected_count, 1);
        let out = exact_dedup(vec![rec("1", "Lung cancer"), rec("2", "lung  CANCER")]);
        assert_eq!(ids(&out.kept), ["1"]);
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
    }

    fn random_corpus(seed: u64, n: usize) -> Vec<TextRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["lung", "CT", "nodule", "chest", "Mri", "  brain", "lesion"];
        (0..n)
            .map(|i| {
                let k = rng.random_range(1..4);
                let text: Vec<&str> = (0..k).map(|_| words[rng.random_range(0..words.len())]).collect();
                rec(&format!("r{i}"), &text.join(" "))
            })
            .collect()
    }

    #[test]
    fn exact_dedup_is_idempotent_and_order_preserving() {
        let corpus = random_corpus(3, 500);
        let once = exact_dedup(corpus.clone());
        let twice = exact_dedup(once.kept.clone());
        assert_eq!(ids(&once.kept), ids(&twice.kept));
        assert_eq!(twice.entry.rejected_count, 0);
        let positions: Vec<usize> = once.kept.iter().map(|r| r.id[1..].parse().unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(once.entry.conserves());
    }

    struct FixedEmbedder(HashMap<String, Vec<f64>>, usize);

    impl Embedder for FixedEmbedder {
        fn dim(&self) -> usize {
            self.1
        }
        fn embed(&self, text: &str) -> Vec<f64> {
            self.0[text].clone()
        }
    }

    #[test]
    fn near_dedup_examples() {
        let e = FixedEmbedder(
            HashMap::from([("a".into(), vec![0.0, 0.0]), ("b".into(), vec![0.0, 0.0]), ("c".into(), vec![3.0, 4.0])]),
            2,
        );
        let out = near_dedup(vec![rec("1", "a"), rec("2", "b")], &e, 0.1).unwrap();
        assert_eq!(ids(&out.kept), ["1"]);
        let out = near_dedup(vec![rec("1", "a"), rec("3", "c")], &e, 0.1).unwrap();
        assert_eq!(ids(&out.kept), ["1", "3"]);
        let wrong = FixedEmbedder(HashMap::from([("a".into(), vec![0.0])]), 2);
        assert!(matches!(near_dedup(vec![rec("1", "a")], &wrong, 0.1), Err(CurationError::Config(_))));
    }

    /// Independent greedy oracle: each record is compared against the full
    /// kept set with a from-scratch distance.
    fn near_oracle(records: &[TextRecord], embedder: &dyn Embedder, threshold: f64) -> Vec<String> {
        let mut kept: Vec<(String, Vec<f64>)> = Vec::new();
        for r in records {
            let e = embedder.embed(&r.text);
            let mut dup = false;
            for (_, k) in &kept {
                let d: f64 = k.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if d < threshold {
                    dup = true;
                }
            }
            if !dup {
                kept.push((r.id.clone(), e));
            }
        }
        kept.into_iter().map(|(id, _)| id).collect()
    }

    #[test]
    fn near_dedup_matches_brute_force_oracle() {
        let embedder = HashingEmbedder::default();
        for seed in 0..20 {
            let corpus = exact_dedup(random_corpus(seed, 50 + seed as usize * 2)).kept;
            for threshold in [0.2, 0.35, 0.6, 1.0] {
                let got = near_dedup(corpus.clone(), &embedder, threshold).unwrap();
                assert_eq!(ids(&got.kept), near_oracle(&corpus, &embedder, threshold));
                assert!(got.entry.conserves());
            }
        }
    }

    #[test]
    fn hashing_embedder_is_unit_and_deterministic() {
        let e = HashingEmbedder::default();
        let a = e.embed("Pleural effusion on the left");
        assert_eq!(a.len(), 256);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, e.embed("pleural   effusion on the LEFT"));
    }

    #[test]
    fn length_boundary_is_inclusive() {
        let out = length_math_filter(vec![rec("249", &"a".repeat(249)), rec("250", &"a".repeat(250))], 250);
        assert_eq!(ids(&out.kept), ["250"]);
        let mut long = "b".repeat(290);
        long.push_str(" E = mc^{2}");
        let out = length_math_filter(vec![rec("m", &long)], 250);
        assert!(out.kept.is_empty());
    }

    #[test]
    fn math_patterns() {
        for t in ["x = 1", r"\frac{a}{b}", r"\sum_i", r"\int f", "a^{2}", "x_{1}", "3 +- 2", "a ** b"] {
            assert!(contains_math(t), "{t}");
        }
        for t in ["a well-defined mass", "size 3 x 4 cm", "left / right"] {
            assert!(!contains_math(t), "{t}");
        }
    }

    #[test]
    fn pii_examples() {
        let f = PiiFilter::with_defaults(&["Zhang Wei".into()]).unwrap();
        let out = pii_filter(
            vec![
                rec("e", "Contact me at test@example.com"),
                rec("k", "The patient presented with cough"),
                rec("p", "call 415-555-0132 now"),
                rec("n", "seen by zhang wei yesterday"),
                rec("id", "id 11010519491231002X"),
            ],
            &f,
        );
        assert_eq!(ids(&out.kept), ["k"]);
        assert!(matches!(PiiFilter::new(&[PiiPattern { label: "bad".into(), regex: "(".into() }], &[]), Err(CurationError::Config(_))));
        assert!(PiiFilter::new(&[], &[]).is_err());
    }

    #[test]
    fn pii_injection_flips_every_record() {
        let f = PiiFilter::with_defaults(&[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean: Vec<TextRecord> = random_corpus(9, 200);
        let before = pii_filter(clean.clone(), &f);
        assert_eq!(before.kept.len(), 200);
        let injected: Vec<TextRecord> = clean
            .into_iter()
            .map(|mut r| {
                let words: Vec<&str> = r.text.split(' ').collect();
                let at = rng.random_range(0..=words.len());
                let mut w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
                w.insert(at, format!("user{}@mail.org", rng.random_range(0..1000)));
                r.text = w.join(" ");
                r
            })
            .collect();
        let after = pii_filter(injected, &f);
        assert_eq!(after.entry.rejected_count, 200);
    }

    #[test]
    fn charset_filter_keeps_chinese_only() {
        let out = charset_filter(vec![rec("zh", "肺部CT检查，未见异常。"), rec("zh2", "肺癌 3 期"), rec("en", "肺 lung")]);
        assert_eq!(ids(&out.kept), ["zh2"]);
    }

    #[test]
    fn uniform_perplexity_gate() {
        let corpus = random_corpus(1, 10);
        let s = UniformScorer { vocab: 100 };
        let out = perplexity_filter(corpus.clone(), &s, 50.0).unwrap();
        assert!(out.kept.is_empty());
        let out = perplexity_filter(corpus, &s, 100.0).unwrap();
        assert_eq!(out.kept.len(), 10);
    }

    #[test]
    fn uniform_unigram_perplexity_equals_vocabulary() {
        // Ten symbols seen once each: add-one smoothing gives every seen
        // symbol 2 / (10 + 11), so perplexity is 21 / 2.
        let text: String = "abcdefghij".into();
        let u = UnigramScorer::fit([text.as_str()]);
        let p = u.perplexity("jihgf").unwrap();
        assert!((p - 10.5).abs() < 1e-9, "{p}");
    }

    struct Flaky;
    impl PerplexityScorer for Flaky {
        fn perplexity(&self, text: &str) -> Result<f64, ScoreError> {
            if text.contains("boom") {
                Err(ScoreError("boom".into()))
            } else {
                Ok(1.0)
            }
        }
    }

    #[test]
    fn scorer_failure_quarantines() {
        let mut corpus = random_corpus(2, 9);
        corpus.insert(4, rec("bad", "boom"));
        let out = perplexity_filter(corpus, &Flaky, 10.0).unwrap();
        assert_eq!(out.kept.len(), 9);
        assert_eq!(out.quarantined.len(), 1);
        assert_eq!(out.entry.quarantined_ids, ["bad"]);
        assert!(out.entry.conserves());
    }

    fn manifest(records: Vec<TextRecord>) -> DatasetManifest {
        DatasetManifest::new("t", Task::Text, records.into_iter().map(Sample::Text).collect())
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let m = manifest(random_corpus(4, 20));
        let out = run_pipeline(&PipelineConfig::default(), &m).unwrap();
        assert_eq!(out.manifest.records, m.records);
        assert!(out.report.entries.is_empty());
    }

    #[test]
    fn single_exact_filter_pipeline() {
        let m = manifest(vec![rec("1", "a"), rec("2", "a")]);
        let cfg = PipelineConfig {
            filters: vec![FilterSpec::ExactDedup],
        };
        let out = run_pipeline(&cfg, &m).unwrap();
        assert_eq!(out.manifest.ids(), ["1"]);
    }

    #[test]
    fn misordered_dedup_rejected() {
        let cfg = PipelineConfig {
            filters: vec![
                FilterSpec::NearDedup { threshold: 0.3, dim: 64 },
                FilterSpec::ExactDedup,
            ],
        };
        assert!(matches!(run_pipeline(&cfg, &manifest(vec![])), Err(CurationError::Config(_))));
    }

    #[test]
    fn bad_pattern_fails_at_build_time() {
        let cfg = PipelineConfig {
            filters: vec![FilterSpec::Pii {
                defaults: false,
                patterns: vec![PiiPattern { label: "x".into(), regex: "[".into() }],
                names: vec![],
            }],
        };
        assert!(run_pipeline(&cfg, &manifest(vec![])).is_err());
    }

    #[test]
    fn config_parses_from_json() {
        let cfg: PipelineConfig = serde_json::from_str(
            r#"{"filters":[{"kind":"exact_dedup"},{"kind":"near_dedup","threshold":0.2},{"kind":"perplexity","tau":50,"scorer":"uniform","vocab":100}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.filters.len(), 3);
        assert_eq!(cfg.filters[1], FilterSpec::NearDedup { threshold: 0.2, dim: 256 });
        assert_eq!(
            cfg.filters[2],
            FilterSpec::Perplexity {
                tau: 50.0,
                scorer: ScorerSpec::Uniform { vocab: 100 }
            }
        );
    }
}
