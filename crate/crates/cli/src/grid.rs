use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use medvlm::evaluation::MetricReport;
use medvlm::mixer::{build_stage_plans, GridCell};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::StageStatus;
use crate::pipeline::{RunLayout, Runner};
use crate::CliError;

/// Headline VQA keys averaged into a single score.
pub const VQA_KEYS: [&str; 6] = ["closed_accuracy", "open_accuracy", "open_recall", "recall", "f1", "bleu1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: String,
    pub align_ratio: String,
    pub instruct_ratio: String,
    pub status: StageStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Domain VQA metrics of the cell's final model.
    pub vqa: BTreeMap<String, f64>,
    pub domain_score: Option<f64>,
    /// Mean headline metric on the bundled synthetic general benchmark.
    pub toy_general: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub run_id: String,
    pub domain_target: String,
    pub general_target: String,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn row(&self, cell: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// Markdown table in E×V order.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| cell | E | V | status |");
        for k in VQA_KEYS {
            let _ = write!(out, " {k} |");
        }
        let _ = writeln!(out, " domain | toy-general |");
        out.push_str(&"|---".repeat(6 + VQA_KEYS.len()));
        out.push_str("|\n");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        for r in &self.rows {
            let status = match r.status {
                StageStatus::Done => "done",
                StageStatus::Failed => "failed",
                StageStatus::Running => "running",
                StageStatus::Pending => "pending",
            };
            let _ = write!(out, "| {} | {} | {} | {status} |", r.cell, r.align_ratio, r.instruct_ratio);
            for k in VQA_KEYS {
                let _ = write!(out, " {} |", f(r.vqa.get(k).copied()));
            }
            let _ = writeln!(out, " {} | {} |", f(r.domain_score), f(r.toy_general));
        }
        out
    }
}

pub fn headline_score(report: &MetricReport) -> Option<f64> {
    let vals: Vec<f64> = VQA_KEYS.iter().filter_map(|k| report.metrics.get(*k).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn read_report(path: &std::path::Path) -> Result<MetricReport, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::stage("grid", format!("{}: {e}", path.display())))
}

/// Shares curation and both text stages across cells, then runs
/// alignment, instruction tuning and evaluation per E×V cell under
/// `<run_dir>/grid/<cell>/`. A failing cell is recorded and the rest
/// still run.
pub fn run_grid(cfg: RunConfig, quiet: bool) -> Result<GridReport, CliError> {
    cfg.validate()?;
    for name in [&cfg.grid.domain_target, &cfg.grid.general_target] {
        if !cfg.eval.iter().any(|t| &t.name == name) {
            return Err(CliError::Validation(format!("grid target `{name}` is not an eval target")));
        }
    }
    let mut text_cfg = cfg.clone();
    text_cfg.stages.truncate(2);
    let layout = RunLayout::new(cfg.paths.output_root.join(&cfg.run_id));
    let text_plans = text_cfg.stage_plans()?;
    let mut base = Runner::with_layout(cfg.clone(), layout.clone(), text_plans)?;
    base.quiet = quiet;
    let curated = base.curate()?;
    let mixes = base.mix(&curated)?;
    let start = base.init_start();
    let text_done = base.train(&mixes, start, None)?;

    let mut rows = Vec::new();
    for cell in GridCell::all() {
        let label = cell.to_string();
        let mut cell_cfg = cfg.clone();
        cell_cfg.mix = cfg.mix.clone().for_cell(cell);
        let mut row = GridRow {
            cell: label.clone(),
            align_ratio: cell.align_ratio().to_string(),
            instruct_ratio: cell.instruct_ratio().to_string(),
            status: StageStatus::Failed,
            error: None,
            vqa: BTreeMap::new(),
            domain_score: None,
            toy_general: None,
        };
        let result = (|| -> Result<(), CliError> {
            let plans = build_stage_plans(&cell_cfg.mix).map_err(|e| CliError::Validation(e.to_string()))?;
            let cell_layout = RunLayout::new(layout.run_dir.join("grid").join(&label));
            cell_cfg.run_id = format!("{}/{label}", cfg.run_id);
            let mut runner = Runner::with_layout(cell_cfg.clone(), cell_layout.clone(), plans[2..].to_vec())?;
            runner.quiet = quiet;
            runner.curated_dir = layout.curated.clone();
            let cell_mixes = runner.mix(&curated)?;
            let last = runner.train(&cell_mixes, text_done.clone(), None)?;
            runner.eval(&last)?;
            let domain = read_report(&cell_layout.report(&cfg.grid.domain_target))?;
            let general = read_report(&cell_layout.report(&cfg.grid.general_target))?;
            row.vqa = VQA_KEYS
                .iter()
                .filter_map(|k| domain.metrics.get(*k).map(|v| (k.to_string(), *v)))
                .collect();
            row.domain_score = headline_score(&domain);
            row.toy_general = headline_score(&general);
            Ok(())
        })();
        match result {
            Ok(()) => row.status = StageStatus::Done,
            Err(e) => {
                if !quiet {
                    eprintln!("[grid] {label} failed: {e}");
                }
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    let report = GridReport {
        run_id: cfg.run_id.clone(),
        domain_target: cfg.grid.domain_target.clone(),
        general_target: cfg.grid.general_target.clone(),
        rows,
    };
    let dir: PathBuf = layout.run_dir.join("grid");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("grid_report.json"), serde_json::to_string_pretty(&report).expect("serializable report"))?;
    fs::write(dir.join("grid_table.md"), report.table())?;
    Ok(report)
}
