//! Metrics and task protocols for VQA, text QA and image classification.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetManifest, Image, QuestionKind, Sample, VqaSample};
use crate::model::{DecodeConfig, ModelError, ToyVlm};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Case-folds, turns every non-alphanumeric character into a space and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let folded: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    folded.split_whitespace().map(str::to_string).collect()
}

pub fn normalize_answer(text: &str) -> String {
    tokenize(text).join(" ")
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let cb = counts(b);
    counts(a).iter().map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0))).sum()
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    if c.is_empty() {
        return 0.0;
    }
    let r = tokenize(reference);
    let precision = overlap(&c, &r) as f64 / c.len() as f64;
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    precision * bp
}

/// Multiset token precision, recall and F1. Two empty strings agree
/// perfectly; otherwise an empty side scores zero.
pub fn token_prf(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() && r.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if c.is_empty() || r.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let common = overlap(&c, &r) as f64;
    let p = common / c.len() as f64;
    let rc = common / r.len() as f64;
    let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f1)
}

/// Index of the descriptor with the highest BLEU-1 against `output`; ties
/// go to the lowest index.
pub fn classify_by_bleu(output: &str, descriptors: &[String]) -> Result<usize, EvalError> {
    if descriptors.is_empty() {
        return Err(EvalError::Validation("class descriptor list is empty".into()));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, d) in descriptors.iter().enumerate() {
        let s = bleu1(output, d);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// BLEU-1 similarities normalized to sum to one, uniform when all are zero.
pub fn class_scores(output: &str, descriptors: &[String]) -> Vec<f64> {
    let raw: Vec<f64> = descriptors.iter().map(|d| bleu1(output, d)).collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        vec![1.0 / descriptors.len() as f64; descriptors.len()]
    } else {
        raw.iter().map(|s| s / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucResult {
    pub value: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Classes with no gold sample, left out of the mean.
    pub skipped: Vec<usize>,
}

/// One-vs-rest AUC of one score column by the rank statistic with
/// averaged ranks for ties.
fn rank_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = n as f64 - n_pos;
    let rank_sum: f64 = (0..n).filter(|&k| positive[k]).map(|k| ranks[k]).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Unweighted mean of per-class one-vs-rest AUCs.
pub fn macro_auc(scores: &[Vec<f64>], gold: &[usize]) -> Result<AucResult, EvalError> {
    if scores.len() != gold.len() || scores.is_empty() {
        return Err(EvalError::Validation(format!("{} score rows for {} labels", scores.len(), gold.len())));
    }
    let k = scores[0].len();
    if k < 2 {
        return Err(EvalError::Undefined("macro-AUC needs at least two classes".into()));
    }
    if scores.iter().any(|r| r.len() != k || r.iter().any(|x| !x.is_finite())) {
        return Err(EvalError::Validation("score rows must be finite and of equal width".into()));
    }
    if gold.iter().any(|&g| g >= k) {
        return Err(EvalError::Validation("gold label outside the class list".into()));
    }
    if gold.iter().all(|&g| g == gold[0]) {
        return Err(EvalError::Undefined("every gold label is the same class".into()));
    }
    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    for c in 0..k {
        let positive: Vec<bool> = gold.iter().map(|&g| g == c).collect();
        if !positive.contains(&true) {
            skipped.push(c);
            continue;
        }
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        per_class.insert(c, rank_auc(&column, &positive));
    }
    let value = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(AucResult {
        value,
        per_class,
        skipped,
    })
}

/// Unweighted mean of per-class F1 over every class that occurs in gold
/// or predictions.
pub fn macro_f1(predicted: &[usize], gold: &[usize]) -> f64 {
    let mut classes: Vec<usize> = predicted.iter().chain(gold).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = predicted.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count() as f64;
            let pp = predicted.iter().filter(|&&p| p == c).count() as f64;
            let gp = gold.iter().filter(|&&g| g == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                let p = tp / pp;
                let r = tp / gp;
                2.0 * p * r / (p + r)
            }
        })
        .sum();
    total / classes.len() as f64
}

/// The one capability evaluation needs.
pub trait ModelUnderTest: Sync {
    fn generate(&self, image: Option<&Image>, prompt: &str) -> Result<String, EvalError>;
}

impl ModelUnderTest for ToyVlm {
    fn generate(&self, image: Option<&Image>, prompt: &str) -> Result<String, EvalError> {
        Ok(ToyVlm::generate(self, image, prompt, &DecodeConfig::default())?.text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaProtocol {
    MultipleChoice,
    YesNoMaybe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum EvalTask {
    Vqa,
    Qa { protocol: QaProtocol },
    Ic,
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalTask::Vqa => f.write_str("vqa"),
            EvalTask::Qa {
                protocol: QaProtocol::MultipleChoice,
            } => f.write_str("qa-mc"),
            EvalTask::Qa {
                protocol: QaProtocol::YesNoMaybe,
            } => f.write_str("qa-ynm"),
            EvalTask::Ic => f.write_str("ic"),
        }
    }
}

impl FromStr for EvalTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vqa" => Ok(EvalTask::Vqa),
            "qa" | "qa-mc" => Ok(EvalTask::Qa {
                protocol: QaProtocol::MultipleChoice,
            }),
            "qa-ynm" => Ok(EvalTask::Qa {
                protocol: QaProtocol::YesNoMaybe,
            }),
            "ic" => Ok(EvalTask::Ic),
            _ => Err(format!("unknown task `{s}` (vqa, qa, qa-mc, qa-ynm, ic)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_kind: Option<QuestionKind>,
    /// Extraction failures and similar per-sample notes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub task: EvalTask,
    pub metrics: BTreeMap<String, f64>,
    pub sample_count: usize,
    #[serde(default)]
    pub notes: Vec<String>,
    pub details: Vec<DetailRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn column<'a>(rows: impl Iterator<Item = &'a DetailRow> + 'a, key: &'a str) -> impl Iterator<Item = f64> + 'a {
    rows.map(move |r| r.values[key])
}

/// Headline metrics from detail rows; the single aggregation used by
/// every protocol.
pub fn aggregate(task: EvalTask, rows: &[DetailRow]) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut m = BTreeMap::new();
    match task {
        EvalTask::Vqa => {
            let of = |k: QuestionKind| rows.iter().filter(move |r| r.question_kind == Some(k));
            if let Some(v) = mean(column(of(QuestionKind::Closed), "exact")) {
                m.insert("closed_accuracy".into(), v);
            }
            if let Some(v) = mean(column(of(QuestionKind::Open), "exact")) {
                m.insert("open_accuracy".into(), v);
            }
            if let Some(v) = mean(column(of(QuestionKind::Open), "recall")) {
                m.insert("open_recall".into(), v);
            }
            for (name, key) in [("recall", "recall"), ("f1", "f1"), ("bleu1", "bleu1")] {
                if let Some(v) = mean(column(rows.iter(), key)) {
                    m.insert(name.into(), v);
                }
            }
        }
        EvalTask::Qa { .. } => {
            if let Some(v) = mean(column(rows.iter(), "correct")) {
                m.insert("accuracy".into(), v);
            }
        }
        EvalTask::Ic => {
            if let Some(v) = mean(column(rows.iter(), "correct")) {
                m.insert("accuracy".into(), v);
            }
            let gold: Vec<usize> = rows.iter().map(|r| r.gold_class.expect("IC rows carry classes")).collect();
            let pred: Vec<usize> = rows.iter().map(|r| r.predicted_class.expect("IC rows carry classes")).collect();
            let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.scores.clone().expect("IC rows carry scores")).collect();
            m.insert("macro_f1".into(), macro_f1(&pred, &gold));
            m.insert("macro_auc".into(), macro_auc(&scores, &gold)?.value);
        }
    }
    Ok(m)
}

impl MetricReport {
    pub fn recompute(&self) -> Result<BTreeMap<String, f64>, EvalError> {
        aggregate(self.task, &self.details)
    }
}

fn vqa_samples(dataset: &DatasetManifest) -> Result<Vec<&VqaSample>, EvalError> {
    dataset
        .records
        .iter()
        .map(|r| match r {
            Sample::Vqa(v) => Ok(v),
            other => Err(EvalError::Validation(format!("record `{}` is not a question-answer sample", other.id()))),
        })
        .collect()
}

fn load(dataset: &DatasetManifest, s: &VqaSample) -> Result<Option<Image>, EvalError> {
    Ok(s.image.as_ref().map(|i| dataset.load_image(i)).transpose()?)
}

/// Open/closed accuracy, open recall, overall recall, F1 and BLEU-1. The
/// prompt is the question verbatim alongside the image.
pub fn evaluate_vqa(model: &dyn ModelUnderTest, dataset: &DatasetManifest) -> Result<MetricReport, EvalError> {
    let samples = vqa_samples(dataset)?;
    let rows: Vec<DetailRow> = samples
        .par_iter()
        .map(|s| {
            let image = load(dataset, s)?;
            let prediction = model.generate(image.as_ref(), &s.question)?;
            let (_, recall, f1) = token_prf(&prediction, &s.answer);
            let exact = (normalize_answer(&prediction) == normalize_answer(&s.answer)) as u8 as f64;
            Ok(DetailRow {
                id: s.id.clone(),
                values: BTreeMap::from([
                    ("exact".into(), exact),
                    ("recall".into(), recall),
                    ("f1".into(), f1),
                    ("bleu1".into(), bleu1(&prediction, &s.answer)),
                ]),
                prediction,
                gold: s.answer.clone(),
                question_kind: Some(s.question_kind),
                flag: None,
                gold_class: None,
                predicted_class: None,
                scores: None,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    finish(dataset, EvalTask::Vqa, rows, Vec::new())
}

fn finish(dataset: &DatasetManifest, task: EvalTask, rows: Vec<DetailRow>, notes: Vec<String>) -> Result<MetricReport, EvalError> {
    Ok(MetricReport {
        dataset: dataset.name.clone(),
        task,
        metrics: aggregate(task, &rows)?,
        sample_count: rows.len(),
        notes,
        details: rows,
    })
}

const LETTERS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

fn letter(i: usize) -> char {
    LETTERS.as_bytes()[i] as char
}

pub fn multiple_choice_prompt(question: &str, options: &[String]) -> String {
    let mut p = question.to_string();
    for (i, o) in options.iter().enumerate() {
        p.push_str(&format!("\n{}. {}", letter(i), o));
    }
    p
}

fn answer_is_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s+is\s*:?\s*\(?([A-Z])\b").expect("valid pattern"))
}

/// Option index named by a model output: a standalone letter, then an
/// "answer is X" phrase, then the option with the largest token overlap.
pub fn extract_choice(output: &str, options: &[String]) -> Option<usize> {
    let n = options.len();
    let index_of = |c: char| {
        let up = c.to_ascii_uppercase();
        LETTERS.find(up).filter(|&i| i < n)
    };
    let bare = output.trim().trim_matches(|c: char| !c.is_alphanumeric());
    let mut chars = bare.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(i) = index_of(c) {
            return Some(i);
        }
    }
    if let Some(i) = answer_is_pattern()
        .captures(output)
        .and_then(|cap| cap[1].chars().next())
        .and_then(index_of)
    {
        return Some(i);
    }
    let out = tokenize(output);
    let mut best = None;
    let mut best_overlap = 0;
    for (i, o) in options.iter().enumerate() {
        let k = overlap(&out, &tokenize(o));
        if k > best_overlap {
            best = Some(i);
            best_overlap = k;
        }
    }
    best
}

/// First of yes/no/maybe appearing in the output.
pub fn extract_yes_no_maybe(output: &str) -> Option<&'static str> {
    tokenize(output).iter().find_map(|t| match t.as_str() {
        "yes" => Some("yes"),
        "no" => Some("no"),
        "maybe" => Some("maybe"),
        _ => None,
    })
}

fn gold_choice(s: &VqaSample, options: &[String]) -> Result<usize, EvalError> {
    let g = s.answer.trim();
    let mut chars = g.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(i) = LETTERS.find(c.to_ascii_uppercase()).filter(|&i| i < options.len()) {
            return Ok(i);
        }
    }
    let norm = normalize_answer(g);
    options
        .iter()
        .position(|o| normalize_answer(o) == norm)
        .ok_or_else(|| EvalError::Validation(format!("gold answer of `{}` is not one of its options", s.id)))
}

/// Accuracy under a multiple-choice or yes/no/maybe protocol. Extraction
/// failures count as incorrect and are flagged in the detail table.
pub fn evaluate_qa(model: &dyn ModelUnderTest, dataset: &DatasetManifest, protocol: QaProtocol) -> Result<MetricReport, EvalError> {
    let samples = vqa_samples(dataset)?;
    let rows: Vec<DetailRow> = samples
        .par_iter()
        .map(|s| {
            let image = load(dataset, s)?;
            let (prediction, correct, flag, gold) = match protocol {
                QaProtocol::MultipleChoice => {
                    let options = s
                        .options
                        .as_deref()
                        .filter(|o| !o.is_empty())
                        .ok_or_else(|| EvalError::Validation(format!("multiple-choice sample `{}` has no options", s.id)))?;
                    let gold = gold_choice(s, options)?;
                    let prediction = model.generate(image.as_ref(), &multiple_choice_prompt(&s.question, options))?;
                    match extract_choice(&prediction, options) {
                        Some(i) => (prediction, i == gold, None, letter(gold).to_string()),
                        None => (prediction, false, Some("extraction_failed".to_string()), letter(gold).to_string()),
                    }
                }
                QaProtocol::YesNoMaybe => {
                    let gold = extract_yes_no_maybe(&s.answer)
                        .ok_or_else(|| EvalError::Validation(format!("gold answer of `{}` is not yes/no/maybe", s.id)))?;
                    let prediction = model.generate(image.as_ref(), &s.question)?;
                    match extract_yes_no_maybe(&prediction) {
                        Some(p) => (prediction, p == gold, None, gold.to_string()),
                        None => (prediction, false, Some("extraction_failed".to_string()), gold.to_string()),
                    }
                }
            };
            Ok(DetailRow {
                id: s.id.clone(),
                prediction,
                gold,
                values: BTreeMap::from([("correct".into(), correct as u8 as f64)]),
                question_kind: Some(s.question_kind),
                flag,
                gold_class: None,
                predicted_class: None,
                scores: None,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    finish(dataset, EvalTask::Qa { protocol }, rows, Vec::new())
}

pub fn classification_prompt(classes: &[String]) -> String {
    format!("Which of the following classes does this image show: {}?", classes.join(", "))
}

/// Accuracy, macro-F1 and macro-AUC with outputs matched to classes by
/// BLEU-1. The class list comes from `classes` or, failing that, from the
/// shared `options` of the samples.
pub fn evaluate_ic(model: &dyn ModelUnderTest, dataset: &DatasetManifest, classes: Option<&[String]>) -> Result<MetricReport, EvalError> {
    let samples = vqa_samples(dataset)?;
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => samples
            .first()
            .and_then(|s| s.options.clone())
            .ok_or_else(|| EvalError::Validation("no class descriptor list given".into()))?,
    };
    if classes.len() < 2 {
        return Err(EvalError::Undefined("classification needs at least two classes".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.options.as_ref().is_some_and(|o| *o != classes)) {
        return Err(EvalError::Validation(format!("sample `{}` uses a different class list", s.id)));
    }
    let prompt = classification_prompt(&classes);
    let rows: Vec<DetailRow> = samples
        .par_iter()
        .map(|s| {
            let gold = classes
                .iter()
                .position(|c| normalize_answer(c) == normalize_answer(&s.answer))
                .ok_or_else(|| EvalError::Validation(format!("gold label of `{}` is not a listed class", s.id)))?;
            let image = load(dataset, s)?;
            let prediction = model.generate(image.as_ref(), &prompt)?;
            let predicted = classify_by_bleu(&prediction, &classes)?;
            let scores = class_scores(&prediction, &classes);
            Ok(DetailRow {
                id: s.id.clone(),
                prediction,
                gold: classes[gold].clone(),
                values: BTreeMap::from([("correct".into(), (predicted == gold) as u8 as f64)]),
                question_kind: None,
                flag: None,
                gold_class: Some(gold),
                predicted_class: Some(predicted),
                scores: Some(scores),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let gold: Vec<usize> = rows.iter().filter_map(|r| r.gold_class).collect();
    let scores: Vec<Vec<f64>> = rows.iter().filter_map(|r| r.scores.clone()).collect();
    let auc = macro_auc(&scores, &gold)?;
    let notes = auc
        .skipped
        .iter()
        .map(|&c| format!("class `{}` has no gold sample; left out of macro-AUC", classes[c]))
        .collect();
    finish(dataset, EvalTask::Ic, rows, notes)
}
