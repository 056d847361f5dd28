use std::fs;
use std::path::{Path, PathBuf};

use medvlm::curation::{FilterSpec, PipelineConfig};
use medvlm::evaluation::EvalTask;
use medvlm::mixer::{build_stage_plans, MixConfig, StageId, StagePlan};
use medvlm::model::ModelConfig;
use medvlm::training::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Input corpora and the output root. Relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub output_root: PathBuf,
    pub medical_text: PathBuf,
    pub general_text: PathBuf,
    pub medical_captions: PathBuf,
    pub general_captions: PathBuf,
    pub medical_vqa: PathBuf,
    pub general_vqa: PathBuf,
}

impl Paths {
    /// (corpus name, path) in a fixed order.
    pub fn corpora(&self) -> [(&'static str, &Path); 6] {
        [
            ("medical_text", &self.medical_text),
            ("general_text", &self.general_text),
            ("medical_captions", &self.medical_captions),
            ("general_captions", &self.general_captions),
            ("medical_vqa", &self.medical_vqa),
            ("general_vqa", &self.general_vqa),
        ]
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.output_root,
            &mut self.medical_text,
            &mut self.general_text,
            &mut self.medical_captions,
            &mut self.general_captions,
            &mut self.medical_vqa,
            &mut self.general_vqa,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn default_text_pipeline() -> PipelineConfig {
    PipelineConfig::default_pipeline()
}

fn default_caption_pipeline() -> PipelineConfig {
    PipelineConfig {
        filters: vec![
            FilterSpec::LengthMath { min_chars: 60 },
            FilterSpec::Pii {
                defaults: true,
                patterns: Vec::new(),
                names: Vec::new(),
            },
        ],
    }
}

fn default_vqa_pipeline() -> PipelineConfig {
    PipelineConfig {
        filters: vec![FilterSpec::Pii {
            defaults: true,
            patterns: Vec::new(),
            names: Vec::new(),
        }],
    }
}

// General corpora are taken as published.
fn default_general_pipeline() -> PipelineConfig {
    PipelineConfig::default()
}

/// Filter chains per corpus family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub medical_text: PipelineConfig,
    pub medical_captions: PipelineConfig,
    pub medical_vqa: PipelineConfig,
    /// Applied to every general-domain corpus.
    pub general: PipelineConfig,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            medical_text: default_text_pipeline(),
            medical_captions: default_caption_pipeline(),
            medical_vqa: default_vqa_pipeline(),
            general: default_general_pipeline(),
        }
    }
}

impl CurationConfig {
    pub fn for_corpus(&self, name: &str) -> &PipelineConfig {
        match name {
            "medical_text" => &self.medical_text,
            "medical_captions" => &self.medical_captions,
            "medical_vqa" => &self.medical_vqa,
            _ => &self.general,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTarget {
    pub name: String,
    pub dataset: PathBuf,
    /// `vqa`, `qa`, `qa-mc`, `qa-ynm` or `ic`.
    pub task: String,
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

impl EvalTarget {
    pub fn task(&self) -> Result<EvalTask, CliError> {
        self.task
            .parse()
            .map_err(|e| CliError::Validation(format!("eval target `{}`: {e}", self.name)))
    }
}

/// Which eval targets feed the grid table's two score columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub domain_target: String,
    pub general_target: String,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            domain_target: "medical_vqa".into(),
            general_target: "toy_general".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory name under the root; stable across config edits
    /// so that resume can reuse unaffected stages.
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default = "all_stages")]
    pub stages: Vec<StageId>,
    #[serde(default)]
    pub eval: Vec<EvalTarget>,
    #[serde(default)]
    pub grid: GridConfig,
}

fn all_stages() -> Vec<StageId> {
    StageId::ALL.to_vec()
}

impl RunConfig {
    /// Parses a TOML config and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.paths.resolve(&base);
        for t in &mut cfg.eval {
            if t.dataset.is_relative() {
                t.dataset = base.join(&t.dataset);
            }
        }
        Ok(cfg)
    }

    /// Applies command-line overrides. The seed drives model init, mixing
    /// and batch order.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.paths.output_root = o;
        }
        self.mix.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(CliError::Validation(format!("invalid run_id `{}`", self.run_id)));
        }
        for (name, p) in self.paths.corpora() {
            if !p.is_file() {
                return Err(CliError::Validation(format!("corpus `{name}` not found at {}", p.display())));
            }
        }
        self.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.stages.is_empty() || self.stages[..] != StageId::ALL[..self.stages.len().min(4)] {
            return Err(CliError::Validation(
                "stages must be a prefix of text_sft_1, text_sft_2, mm_align, mm_instruct".into(),
            ));
        }
        for p in [
            &self.curation.medical_text,
            &self.curation.medical_captions,
            &self.curation.medical_vqa,
            &self.curation.general,
        ] {
            p.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        }
        self.stage_plans()?;
        let mut names = std::collections::HashSet::new();
        for t in &self.eval {
            t.task()?;
            if !names.insert(t.name.as_str()) {
                return Err(CliError::Validation(format!("duplicate eval target `{}`", t.name)));
            }
            if !t.dataset.is_file() {
                return Err(CliError::Validation(format!(
                    "eval dataset `{}` not found at {}",
                    t.name,
                    t.dataset.display()
                )));
            }
        }
        Ok(())
    }

    /// Plans for the configured stage prefix.
    pub fn stage_plans(&self) -> Result<Vec<StagePlan>, CliError> {
        let plans = build_stage_plans(&self.mix).map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(plans.into_iter().take(self.stages.len()).collect())
    }
}
