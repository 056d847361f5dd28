//! Stage-specific training streams built by mixing domain and general data
//! at a record-count ratio.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetManifest};
use crate::model::GroupSet;
use crate::training::TrainableSelector;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("insufficient data: need {required} records, pool has {available}")]
    InsufficientData { required: usize, available: usize },
    #[error("invalid mix spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Domain-to-general record-count ratio `domain:general`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub domain_parts: f64,
    pub general_parts: f64,
}

impl Ratio {
    pub const fn new(domain_parts: f64, general_parts: f64) -> Self {
        Self {
            domain_parts,
            general_parts,
        }
    }

    /// General records per domain record.
    pub fn k(&self) -> f64 {
        self.general_parts / self.domain_parts
    }

    fn validate(&self) -> Result<(), MixError> {
        if !(self.domain_parts > 0.0) || !(self.general_parts >= 0.0) || !self.general_parts.is_finite() {
            return Err(MixError::Invalid(format!("ratio {self} needs domain > 0 and general ≥ 0")));
        }
        Ok(())
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain_parts, self.general_parts)
    }
}

impl FromStr for Ratio {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (d, g) = s
            .split_once(':')
            .ok_or_else(|| MixError::Invalid(format!("ratio `{s}` is not of the form d:g")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| MixError::Invalid(format!("ratio `{s}` has a non-numeric part")))
        };
        let r = Ratio::new(parse(d)?, parse(g)?);
        r.validate()?;
        Ok(r)
    }
}

impl TryFrom<String> for Ratio {
    type Error = MixError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// Round half up, tolerant of representation error just below the half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub domain_count: usize,
    pub ratio: Ratio,
    pub seed: u64,
    #[serde(default)]
    pub shuffle: bool,
}

impl MixSpec {
    pub fn general_draw(&self) -> usize {
        round_half_up(self.domain_count as f64 * self.ratio.k())
    }

    pub fn total(&self) -> usize {
        self.domain_count + self.general_draw()
    }
}

// Distinct streams for subset draws and shuffles under one seed.
const DRAW_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Seeded uniform sample of `count` positions out of `pool`, returned in
/// increasing order.
pub fn sample_indices(pool: usize, count: usize, seed: u64) -> Result<Vec<usize>, MixError> {
    if count > pool {
        return Err(MixError::InsufficientData {
            required: count,
            available: pool,
        });
    }
    let mut picked = index::sample(&mut rng(seed, DRAW_STREAM), pool, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Seeded subset of `count` records, kept in their original order.
pub fn select_records(manifest: &DatasetManifest, count: usize, seed: u64) -> Result<DatasetManifest, MixError> {
    let picked = sample_indices(manifest.len(), count, seed)?;
    Ok(DatasetManifest {
        name: manifest.name.clone(),
        task: manifest.task,
        records: picked.into_iter().map(|i| manifest.records[i].clone()).collect(),
        base_dir: manifest.base_dir.clone(),
    })
}

/// All domain records once, followed by a seeded sample without
/// replacement of `round(domain_count × k)` general records; optionally
/// shuffled. Image paths are made absolute so the result resolves from
/// anywhere.
pub fn mix_datasets(domain: &DatasetManifest, general: &DatasetManifest, spec: &MixSpec) -> Result<DatasetManifest, MixError> {
    spec.ratio.validate()?;
    if domain.len() != spec.domain_count {
        return Err(MixError::Invalid(format!(
            "spec expects {} domain records, manifest `{}` has {}",
            spec.domain_count,
            domain.name,
            domain.len()
        )));
    }
    let draw = spec.general_draw();
    let picked = sample_indices(general.len(), draw, spec.seed)?;

    let mut domain = domain.clone();
    domain.absolutize_images()?;
    let mut records = domain.records;
    if draw > 0 {
        let mut general = general.clone();
        general.absolutize_images()?;
        records.extend(picked.into_iter().map(|i| general.records[i].clone()));
    }
    let mut seen = HashSet::with_capacity(records.len());
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.id().to_string())) {
        return Err(MixError::Invalid(format!("record id `{}` occurs in both inputs", dup.id())));
    }
    if spec.shuffle {
        records.shuffle(&mut rng(spec.seed, SHUFFLE_STREAM));
    }
    let name = if draw > 0 {
        format!("{}+{}", domain.name, general.name)
    } else {
        domain.name.clone()
    };
    Ok(DatasetManifest {
        name,
        task: domain.task,
        records,
        base_dir: domain.base_dir,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    #[serde(rename = "text_sft_1")]
    TextSft1,
    #[serde(rename = "text_sft_2")]
    TextSft2,
    MmAlign,
    MmInstruct,
}

impl StageId {
    pub const ALL: [StageId; 4] = [StageId::TextSft1, StageId::TextSft2, StageId::MmAlign, StageId::MmInstruct];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::TextSft1 => "text_sft_1",
            StageId::TextSft2 => "text_sft_2",
            StageId::MmAlign => "mm_align",
            StageId::MmInstruct => "mm_instruct",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            StageId::TextSft1 | StageId::TextSft2 => LossKind::CausalLm,
            StageId::MmAlign => LossKind::Alignment,
            StageId::MmInstruct => LossKind::Instruction,
        }
    }

    pub fn is_multimodal(self) -> bool {
        matches!(self, StageId::MmAlign | StageId::MmInstruct)
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CausalLm,
    Alignment,
    Instruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub steps: usize,
    pub batch_size: usize,
    /// Passes over the stage dataset; overrides `steps` when set.
    pub epochs: Option<usize>,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 8,
            epochs: None,
        }
    }
}

impl Budget {
    pub fn fixed(steps: usize, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            epochs: None,
        }
    }

    /// Optimizer steps for a dataset of `n` examples.
    pub fn steps_for(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => (e * n).div_ceil(self.batch_size.max(1)),
            None => self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: StageId,
    pub mix: MixSpec,
    pub loss_kind: LossKind,
    pub trainable: GroupSet,
    pub budget: Budget,
}

/// Instruction-stage ratios of the E/V grid.
pub const INSTRUCT_GRID: [Ratio; 4] = [
    Ratio::new(1.0, 0.0),
    Ratio::new(1.0, 0.2),
    Ratio::new(1.0, 0.5),
    Ratio::new(1.0, 1.0),
];
/// Alignment-stage ratios of the E/V grid.
pub const ALIGN_GRID: [Ratio; 2] = [Ratio::new(1.0, 0.0), Ratio::new(1.0, 1.0)];

/// A grid cell label such as `E2-V3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    /// 1-based alignment ratio index.
    pub e: usize,
    /// 1-based instruction ratio index.
    pub v: usize,
}

impl GridCell {
    pub fn all() -> Vec<GridCell> {
        (1..=ALIGN_GRID.len())
            .flat_map(|e| (1..=INSTRUCT_GRID.len()).map(move |v| GridCell { e, v }))
            .collect()
    }

    pub fn align_ratio(&self) -> Ratio {
        ALIGN_GRID[self.e - 1]
    }

    pub fn instruct_ratio(&self) -> Ratio {
        INSTRUCT_GRID[self.v - 1]
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}-V{}", self.e, self.v)
    }
}

impl FromStr for GridCell {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("grid cell `{s}` is not of the form E<1-2>-V<1-4>");
        let (e, v) = s.split_once('-').ok_or_else(bad)?;
        let e: usize = e.strip_prefix('E').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let v: usize = v.strip_prefix('V').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        if !(1..=ALIGN_GRID.len()).contains(&e) || !(1..=INSTRUCT_GRID.len()).contains(&v) {
            return Err(bad());
        }
        Ok(GridCell { e, v })
    }
}

fn default_scale() -> f64 {
    0.001
}

/// Full-scale stage compositions plus the desk-scale factor applied to
/// every count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub text_sft_1_domain: usize,
    pub text_sft_2_total: usize,
    pub text_sft_2_ratio: Ratio,
    pub mm_align_domain: usize,
    pub mm_align_ratio: Ratio,
    pub mm_instruct_domain: usize,
    pub mm_instruct_ratio: Ratio,
    /// Restrict multimodal ratios to the E/V grid.
    pub grid_mode: bool,
    pub budgets: StageBudgets,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudgets {
    pub text_sft_1: Budget,
    pub text_sft_2: Budget,
    pub mm_align: Budget,
    pub mm_instruct: Budget,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            scale: default_scale(),
            seed: 0,
            shuffle: true,
            text_sft_1_domain: 300_000,
            text_sft_2_total: 250_000,
            text_sft_2_ratio: Ratio::new(1.0, 4.0),
            mm_align_domain: 250_000,
            mm_align_ratio: Ratio::new(1.0, 1.0),
            mm_instruct_domain: 60_000,
            mm_instruct_ratio: Ratio::new(1.0, 0.5),
            grid_mode: false,
            budgets: StageBudgets::default(),
        }
    }
}

impl MixConfig {
    pub fn for_cell(mut self, cell: GridCell) -> Self {
        self.mm_align_ratio = cell.align_ratio();
        self.mm_instruct_ratio = cell.instruct_ratio();
        self.grid_mode = true;
        self
    }
}

fn scaled(count: usize, scale: f64) -> usize {
    round_half_up(count as f64 * scale)
}

fn in_grid(r: Ratio, grid: &[Ratio]) -> bool {
    grid.iter().any(|g| (g.k() - r.k()).abs() < 1e-12)
}

/// The four stage plans in training order.
pub fn build_stage_plans(config: &MixConfig) -> Result<Vec<StagePlan>, MixError> {
    if !(config.scale > 0.0) {
        return Err(MixError::Invalid(format!("scale must be positive, got {}", config.scale)));
    }
    for r in [config.text_sft_2_ratio, config.mm_align_ratio, config.mm_instruct_ratio] {
        r.validate()?;
    }
    if config.grid_mode {
        if !in_grid(config.mm_align_ratio, &ALIGN_GRID) {
            return Err(MixError::Invalid(format!("alignment ratio {} is outside the grid", config.mm_align_ratio)));
        }
        if !in_grid(config.mm_instruct_ratio, &INSTRUCT_GRID) {
            return Err(MixError::Invalid(format!(
                "instruction ratio {} is outside the grid",
                config.mm_instruct_ratio
            )));
        }
    }
    // Stage 2 is specified by its total; the domain share is total / (1 + k).
    let total2 = scaled(config.text_sft_2_total, config.scale);
    let domain2 = round_half_up(total2 as f64 / (1.0 + config.text_sft_2_ratio.k()));
    let plan = |stage_id: StageId, domain_count: usize, ratio: Ratio, budget: Budget| StagePlan {
        stage_id,
        mix: MixSpec {
            domain_count,
            ratio,
            seed: config.seed,
            shuffle: config.shuffle,
        },
        loss_kind: stage_id.loss_kind(),
        trainable: TrainableSelector::for_stage(stage_id).groups,
        budget,
    };
    Ok(vec![
        plan(
            StageId::TextSft1,
            scaled(config.text_sft_1_domain, config.scale),
            Ratio::new(1.0, 0.0),
            config.budgets.text_sft_1,
        ),
        plan(StageId::TextSft2, domain2, config.text_sft_2_ratio, config.budgets.text_sft_2),
        plan(
            StageId::MmAlign,
            scaled(config.mm_align_domain, config.scale),
            config.mm_align_ratio,
            config.budgets.mm_align,
        ),
        plan(
            StageId::MmInstruct,
            scaled(config.mm_instruct_domain, config.scale),
            config.mm_instruct_ratio,
            config.budgets.mm_instruct,
        ),
    ])
}
