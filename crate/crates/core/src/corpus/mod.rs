//! Universal sample types and line-delimited dataset manifests.
//!
//! A manifest file is UTF-8 JSON Lines. The first line is a header record
//! (`"type": "header"`) carrying the dataset name, task and declared
//! per-type counts; every following line is one sample tagged with
//! `"type"` ∈ {`text`, `caption`, `vqa`, `conversation`}. Image paths are
//! resolved relative to the manifest's directory unless absolute.

mod image;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{Image, CHANNELS};

use crate::curation::normalize_text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("count mismatch for `{kind}`: header declares {declared}, found {actual}")]
    CountMismatch {
        kind: String,
        declared: usize,
        actual: usize,
    },
    #[error("missing image asset {0}")]
    MissingAsset(PathBuf),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("record `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("record `{0}` has no question-answer pairs")]
    EmptyRecord(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Medical,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "IC")]
    Ic,
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "VQA")]
    Vqa,
    #[serde(rename = "captioning")]
    Captioning,
    #[serde(rename = "text")]
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

impl ImageRef {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            base.join(&self.path)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub source: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCaptionSample {
    pub id: String,
    pub image: ImageRef,
    pub caption: String,
    pub language: Language,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: String,
    /// Absent for text-only question answering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question: String,
    pub answer: String,
    pub question_kind: QuestionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub turns: Vec<Turn>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Sample {
    Text(TextRecord),
    Caption(ImageCaptionSample),
    Vqa(VqaSample),
    Conversation(ConversationSample),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Text,
    Caption,
    Vqa,
    Conversation,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::Text => "text",
            RecordKind::Caption => "caption",
            RecordKind::Vqa => "vqa",
            RecordKind::Conversation => "conversation",
        })
    }
}

impl Sample {
    pub fn id(&self) -> &str {
        match self {
            Sample::Text(r) => &r.id,
            Sample::Caption(r) => &r.id,
            Sample::Vqa(r) => &r.id,
            Sample::Conversation(r) => &r.id,
        }
    }

    pub fn kind(&self) -> RecordKind {
        match self {
            Sample::Text(_) => RecordKind::Text,
            Sample::Caption(_) => RecordKind::Caption,
            Sample::Vqa(_) => RecordKind::Vqa,
            Sample::Conversation(_) => RecordKind::Conversation,
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Sample::Text(r) => r.domain,
            Sample::Caption(r) => r.domain,
            Sample::Vqa(r) => r.domain,
            Sample::Conversation(r) => r.domain,
        }
    }

    pub fn image(&self) -> Option<&ImageRef> {
        match self {
            Sample::Text(_) => None,
            Sample::Caption(r) => Some(&r.image),
            Sample::Vqa(r) => r.image.as_ref(),
            Sample::Conversation(r) => r.image.as_ref(),
        }
    }

    fn image_mut(&mut self) -> Option<&mut ImageRef> {
        match self {
            Sample::Text(_) => None,
            Sample::Caption(r) => Some(&mut r.image),
            Sample::Vqa(r) => r.image.as_mut(),
            Sample::Conversation(r) => r.image.as_mut(),
        }
    }

    /// The text that curation filters judge: the body of a text record, a
    /// caption, a VQA answer, or the answers of a conversation joined by
    /// newlines.
    pub fn primary_text(&self) -> std::borrow::Cow<'_, str> {
        match self {
            Sample::Text(r) => r.text.as_str().into(),
            Sample::Caption(r) => r.caption.as_str().into(),
            Sample::Vqa(r) => r.answer.as_str().into(),
            Sample::Conversation(r) => r
                .turns
                .iter()
                .map(|t| t.answer.as_str())
                .collect::<Vec<_>>()
                .join("\n")
                .into(),
        }
    }

    /// Checks the per-type invariants that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: &str| CorpusError::Invalid {
            id: self.id().to_string(),
            message: message.to_string(),
        };
        if self.id().is_empty() {
            return Err(invalid("empty id"));
        }
        match self {
            Sample::Text(r) => {
                if normalize_text(&r.text).is_empty() {
                    return Err(invalid("text is empty after normalization"));
                }
            }
            Sample::Caption(r) => {
                if normalize_text(&r.caption).is_empty() {
                    return Err(invalid("caption has no tokens"));
                }
            }
            Sample::Vqa(r) => {
                let answer = normalize_text(&r.answer);
                if let Some(options) = &r.options {
                    if !options.iter().any(|o| normalize_text(o) == answer) {
                        return Err(invalid("options do not contain the answer"));
                    }
                } else if r.question_kind == QuestionKind::Closed
                    && !CLOSED_ANSWERS.contains(&answer.as_str())
                {
                    return Err(invalid("closed answer outside the closed answer set"));
                }
            }
            Sample::Conversation(r) => {
                if r.turns.is_empty() {
                    return Err(invalid("conversation has no turns"));
                }
            }
        }
        Ok(())
    }
}

/// Normalized answers a closed question without explicit options may take.
pub const CLOSED_ANSWERS: &[&str] = &["yes", "no", "maybe"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "type")]
    kind: HeaderTag,
    name: String,
    task: Task,
    counts: BTreeMap<RecordKind, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum HeaderTag {
    Header,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub task: Task,
    pub records: Vec<Sample>,
    /// Directory image paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, task: Task, records: Vec<Sample>) -> Self {
        Self {
            name: name.into(),
            task,
            records,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<RecordKind, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.kind()).or_insert(0) += 1;
        }
        counts
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(Sample::id).collect()
    }

    pub fn load_image(&self, image: &ImageRef) -> Result<Image, CorpusError> {
        let path = image.resolve(&self.base_dir);
        let img = Image::load_png(&path)?;
        if img.width() != image.width || img.height() != image.height {
            return Err(CorpusError::Image {
                path,
                message: format!(
                    "decoded {}x{}, declared {}x{}",
                    img.width(),
                    img.height(),
                    image.width,
                    image.height
                ),
            });
        }
        Ok(img)
    }

    /// Rewrites relative image paths as absolute paths under `base_dir`, so
    /// records keep resolving after being copied into another manifest.
    pub fn absolutize_images(&mut self) -> Result<(), CorpusError> {
        let base = fs::canonicalize(&self.base_dir)?;
        for r in &mut self.records {
            if let Some(img) = r.image_mut() {
                if img.path.is_relative() {
                    img.path = base.join(&img.path);
                }
            }
        }
        Ok(())
    }

    /// Validates invariants that need no filesystem access: per-record
    /// checks and id uniqueness.
    pub fn validate_records(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id()) {
                return Err(CorpusError::Integrity(format!("duplicate id `{}`", r.id())));
            }
        }
        Ok(())
    }

    /// Validates records and decodes every referenced image.
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.validate_records()?;
        for r in &self.records {
            if let Some(img) = r.image() {
                self.load_image(img)?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            kind: HeaderTag::Header,
            name: self.name.clone(),
            task: self.task,
            counts: self.counts(),
        };
        let mut out = serde_json::to_string(&header).expect("serializable header");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        out
    }
}

/// Reads and fully validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, CorpusError> {
    let manifest = parse_manifest(path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Reads a manifest and validates records and counts without decoding
/// images.
pub fn parse_manifest(path: &Path) -> Result<DatasetManifest, CorpusError> {
    let file = fs::File::open(path)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or(CorpusError::Malformed {
        line: 1,
        message: "empty manifest".into(),
    })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| CorpusError::Malformed {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 2,
            message: e.to_string(),
        })?;
        records.push(sample);
    }
    let manifest = DatasetManifest {
        name: header.name,
        task: header.task,
        records,
        base_dir,
    };
    manifest.validate_records()?;
    let actual = manifest.counts();
    let kinds: HashSet<RecordKind> = actual.keys().chain(header.counts.keys()).copied().collect();
    let mut kinds: Vec<_> = kinds.into_iter().collect();
    kinds.sort();
    for kind in kinds {
        let declared = header.counts.get(&kind).copied().unwrap_or(0);
        let found = actual.get(&kind).copied().unwrap_or(0);
        if declared != found {
            return Err(CorpusError::CountMismatch {
                kind: kind.to_string(),
                declared,
                actual: found,
            });
        }
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(manifest.to_jsonl().as_bytes())?;
    Ok(())
}

/// A source record carrying several question-answer pairs about one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiQaRecord {
    pub id: String,
    pub image: ImageRef,
    pub pairs: Vec<QaPair>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    /// Inferred from the answer when absent: yes/no/maybe answers are closed.
    #[serde(default)]
    pub kind: Option<QuestionKind>,
}

/// Splits a multi-pair record into one VQA sample per pair. Child ids are
/// `parent#index` and keep the input pair order.
pub fn expand_multi_qa(record: &MultiQaRecord) -> Result<Vec<VqaSample>, CorpusError> {
    if record.pairs.is_empty() {
        return Err(CorpusError::EmptyRecord(record.id.clone()));
    }
    Ok(record
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let kind = pair.kind.unwrap_or_else(|| {
                if CLOSED_ANSWERS.contains(&normalize_text(&pair.answer).as_str()) {
                    QuestionKind::Closed
                } else {
                    QuestionKind::Open
                }
            });
            VqaSample {
                id: format!("{}#{i}", record.id),
                image: Some(record.image.clone()),
                question: pair.question.clone(),
                answer: pair.answer.clone(),
                question_kind: kind,
                options: None,
                domain: record.domain,
            }
        })
        .collect())
}
