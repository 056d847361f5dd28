use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use medvlm::corpus::{load_manifest, parse_manifest, write_manifest, DatasetManifest};
use medvlm::curation::run_pipeline;
use medvlm::evaluation::{evaluate_ic, evaluate_qa, evaluate_vqa, EvalTask, MetricReport};
use medvlm::mixer::{mix_datasets, select_records, StageId, StagePlan};
use medvlm::model::{load_checkpoint, ToyVlm};
use medvlm::training::{build_examples, train_stage, TrainError, TrainOptions};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{Hasher, RunManifest};
use crate::CliError;

/// How far a command drives the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Through {
    Curate,
    Mix,
    Stage(StageId),
    Eval,
}

/// `<run_dir>/{curated,mixed,checkpoints/<stage>,reports}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub run_dir: PathBuf,
    pub curated: PathBuf,
    pub mixed: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl RunLayout {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        let run_dir = run_dir.into();
        Self {
            curated: run_dir.join("curated"),
            mixed: run_dir.join("mixed"),
            checkpoints: run_dir.join("checkpoints"),
            reports: run_dir.join("reports"),
            run_dir,
        }
    }

    pub fn curated_manifest(&self, corpus: &str) -> PathBuf {
        self.curated.join(format!("{corpus}.jsonl"))
    }

    pub fn mixed_manifest(&self, stage: StageId) -> PathBuf {
        self.mixed.join(format!("{stage}.jsonl"))
    }

    pub fn checkpoint(&self, stage: StageId) -> PathBuf {
        self.checkpoints.join(stage.as_str())
    }

    pub fn report(&self, target: &str) -> PathBuf {
        self.reports.join(format!("{target}.json"))
    }

    pub fn train_log(&self, stage: StageId) -> PathBuf {
        self.reports.join(format!("train_{stage}.jsonl"))
    }
}

/// Where training starts: a fresh model or an upstream checkpoint, with
/// the hash that identifies it.
#[derive(Clone, Debug, PartialEq)]
pub struct Start {
    pub hash: String,
    pub checkpoint: Option<PathBuf>,
}

struct StepOutput {
    checkpoint: Option<PathBuf>,
    artifacts: Vec<PathBuf>,
    train_steps: usize,
}

impl StepOutput {
    fn files(artifacts: Vec<PathBuf>) -> Self {
        Self {
            checkpoint: None,
            artifacts,
            train_steps: 0,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable value"))?;
    Ok(())
}

/// Manifest file plus every image it references.
fn hash_corpus(h: &mut Hasher, path: &Path) -> Result<(), CliError> {
    h.file(path)?;
    let m = parse_manifest(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut images: Vec<PathBuf> = m.records.iter().filter_map(|r| r.image()).map(|i| i.resolve(&m.base_dir)).collect();
    images.sort();
    images.dedup();
    for img in images {
        let bytes = fs::read(&img).map_err(|e| CliError::Validation(format!("{}: {e}", img.display())))?;
        h.part("image", &bytes);
    }
    Ok(())
}

const STAGE_SOURCES: [(StageId, &str, &str); 4] = [
    (StageId::TextSft1, "medical_text", "general_text"),
    (StageId::TextSft2, "medical_text", "general_text"),
    (StageId::MmAlign, "medical_captions", "general_captions"),
    (StageId::MmInstruct, "medical_vqa", "general_vqa"),
];

fn sources(stage: StageId) -> (&'static str, &'static str) {
    let (_, d, g) = STAGE_SOURCES.iter().find(|(s, _, _)| *s == stage).expect("every stage has sources");
    (d, g)
}

/// Drives one run directory. Grid cells use a runner whose curated inputs
/// and starting checkpoint come from the shared base run.
pub struct Runner {
    pub cfg: RunConfig,
    pub layout: RunLayout,
    pub manifest: RunManifest,
    /// Directory holding the curated corpora this runner mixes from.
    pub curated_dir: PathBuf,
    pub plans: Vec<StagePlan>,
    pub quiet: bool,
}

impl Runner {
    /// Validates the config and opens (or creates) the run manifest under
    /// `<output_root>/<run_id>`.
    pub fn open(cfg: RunConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let layout = RunLayout::new(cfg.paths.output_root.join(&cfg.run_id));
        let plans = cfg.stage_plans()?;
        Self::with_layout(cfg, layout, plans)
    }

    pub fn with_layout(cfg: RunConfig, layout: RunLayout, plans: Vec<StagePlan>) -> Result<Self, CliError> {
        let config_hash = config_hash(&cfg)?;
        let manifest = RunManifest::open(&layout.run_dir, &cfg.run_id, &config_hash)?;
        write_json(&layout.run_dir.join("config.json"), &cfg)?;
        Ok(Self {
            curated_dir: layout.curated.clone(),
            cfg,
            layout,
            manifest,
            plans,
            quiet: false,
        })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.cfg.run_id, msg.as_ref());
        }
    }

    fn step(&mut self, name: &str, hash: &str, f: impl FnOnce(&Self) -> Result<StepOutput, CliError>) -> Result<(), CliError> {
        if self.manifest.reusable(name, hash) {
            self.manifest.mark_skipped(name);
            self.manifest.save(&self.layout.run_dir)?;
            self.note(format!("{name}: up to date, skipped"));
            return Ok(());
        }
        self.note(format!("{name}: running"));
        self.manifest.mark_running(name, hash);
        self.manifest.save(&self.layout.run_dir)?;
        match f(self) {
            Ok(out) => {
                self.manifest.mark_done(name, out.checkpoint, out.artifacts, out.train_steps);
                self.manifest.save(&self.layout.run_dir)?;
                self.note(format!("{name}: done"));
                Ok(())
            }
            Err(e) => {
                let e = match e {
                    CliError::Validation(m) => CliError::stage(name, m),
                    other => other,
                };
                self.manifest.mark_failed(name, &e.to_string());
                self.manifest.save(&self.layout.run_dir)?;
                self.note(format!("{name}: failed: {e}"));
                Err(e)
            }
        }
    }

    /// Runs the configured pipeline up to `through`.
    pub fn run(&mut self, through: Through) -> Result<(), CliError> {
        let curated = self.curate()?;
        if through == Through::Curate {
            return Ok(());
        }
        let mixes = self.mix(&curated)?;
        if through == Through::Mix {
            return Ok(());
        }
        let until = match through {
            Through::Stage(s) => Some(s),
            _ => None,
        };
        let start = self.init_start();
        let last = self.train(&mixes, start, until)?;
        if through == Through::Eval {
            self.eval(&last)?;
        }
        Ok(())
    }

    pub fn init_start(&self) -> Start {
        let hash = Hasher::new()
            .part("init", b"")
            .json("model", &self.cfg.model)
            .json("seed", &self.cfg.seed)
            .finish();
        Start { hash, checkpoint: None }
    }

    /// Curates every corpus into `curated/`; returns the step hash.
    pub fn curate(&mut self) -> Result<String, CliError> {
        let mut h = Hasher::new();
        h.part("curate", b"").json("curation", &self.cfg.curation);
        for (name, path) in self.cfg.paths.corpora() {
            h.part(name, b"");
            hash_corpus(&mut h, path)?;
        }
        let hash = h.finish();
        self.step("curate", &hash, |r| {
            let mut artifacts = Vec::new();
            for (name, path) in r.cfg.paths.corpora() {
                let input = load_manifest(path).map_err(|e| CliError::stage("curate", format!("{name}: {e}")))?;
                let out = run_pipeline(r.cfg.curation.for_corpus(name), &input).map_err(|e| CliError::stage("curate", e))?;
                if !out.report.is_consistent() {
                    return Err(CliError::stage("curate", format!("{name}: filter report does not conserve counts")));
                }
                let mut kept = out.manifest;
                kept.absolutize_images().map_err(|e| CliError::stage("curate", e))?;
                let dest = r.layout.curated_manifest(name);
                write_manifest(&kept, &dest).map_err(|e| CliError::stage("curate", e))?;
                let report = r.layout.curated.join(format!("{name}.report.json"));
                write_json(&report, &out.report)?;
                artifacts.push(dest);
                artifacts.push(report);
            }
            Ok(StepOutput::files(artifacts))
        })?;
        Ok(hash)
    }

    fn curated(&self, corpus: &str) -> Result<DatasetManifest, CliError> {
        let path = self.curated_dir.join(format!("{corpus}.jsonl"));
        parse_manifest(&path).map_err(|e| CliError::stage("mix", format!("{}: {e}", path.display())))
    }

    /// Mixes each planned stage's dataset; returns per-stage mix hashes.
    pub fn mix(&mut self, curate_hash: &str) -> Result<BTreeMap<StageId, String>, CliError> {
        let mut hashes = BTreeMap::new();
        for plan in self.plans.clone() {
            let name = format!("mix:{}", plan.stage_id);
            let hash = Hasher::new()
                .part("mix", curate_hash.as_bytes())
                .json("stage", &plan.stage_id)
                .json("spec", &plan.mix)
                .finish();
            self.step(&name, &hash, |r| {
                let (d, g) = sources(plan.stage_id);
                let domain = r.curated(d)?;
                let general = r.curated(g)?;
                let domain = select_records(&domain, plan.mix.domain_count, plan.mix.seed)
                    .map_err(|e| CliError::stage(&name, format!("{d}: {e}")))?;
                let mixed = mix_datasets(&domain, &general, &plan.mix).map_err(|e| CliError::stage(&name, format!("{g}: {e}")))?;
                let dest = r.layout.mixed_manifest(plan.stage_id);
                write_manifest(&mixed, &dest).map_err(|e| CliError::stage(&name, e))?;
                Ok(StepOutput::files(vec![dest]))
            })?;
            hashes.insert(plan.stage_id, hash);
        }
        write_json(&self.layout.mixed.join("plans.json"), &self.plans)?;
        Ok(hashes)
    }

    fn load_start(&self, start: &Start) -> Result<ToyVlm, CliError> {
        match &start.checkpoint {
            Some(dir) => load_checkpoint(dir).map_err(|e| CliError::stage("train", format!("{}: {e}", dir.display()))),
            None => ToyVlm::new(self.cfg.model.clone(), self.cfg.seed).map_err(|e| CliError::Validation(e.to_string())),
        }
    }

    /// Trains the planned stages in order from `start`, stopping after
    /// `until` when given.
    pub fn train(&mut self, mixes: &BTreeMap<StageId, String>, start: Start, until: Option<StageId>) -> Result<Start, CliError> {
        let mut current = start;
        for plan in self.plans.clone() {
            let stage = plan.stage_id;
            let name = stage.as_str().to_string();
            let hash = Hasher::new()
                .part("train", current.hash.as_bytes())
                .part("mix", mixes[&stage].as_bytes())
                .json("plan", &plan)
                .json("optimizer", &self.cfg.optimizer)
                .json("seed", &self.cfg.seed)
                .finish();
            let prev = current.clone();
            self.step(&name, &hash, |r| {
                let model = r.load_start(&prev)?;
                let data = parse_manifest(&r.layout.mixed_manifest(stage)).map_err(|e| CliError::stage(&name, e))?;
                let examples = build_examples(&data, plan.loss_kind, &model.tokenizer, model.config.max_seq_len)
                    .map_err(|e| CliError::stage(&name, e))?;
                let ckpt = r.layout.checkpoint(stage);
                let log = r.layout.train_log(stage);
                if ckpt.exists() {
                    fs::remove_dir_all(&ckpt)?;
                }
                fs::create_dir_all(&r.layout.reports)?;
                if log.exists() {
                    fs::remove_file(&log)?;
                }
                let opts = TrainOptions {
                    optimizer: r.cfg.optimizer.clone(),
                    seed: r.cfg.seed,
                    metrics_path: Some(log.clone()),
                    checkpoint_dir: Some(ckpt.clone()),
                };
                let out = train_stage(&model, &plan, &examples, &opts).map_err(|e| match e {
                    TrainError::Diverged { step, checkpoint, .. } => CliError::stage(
                        &name,
                        format!(
                            "diverged at step {step}; last good parameters{}",
                            checkpoint.map(|c| format!(" saved to {}", c.display())).unwrap_or_default()
                        ),
                    ),
                    other => CliError::stage(&name, other),
                })?;
                Ok(StepOutput {
                    checkpoint: Some(ckpt),
                    artifacts: vec![log],
                    train_steps: out.metrics.len(),
                })
            })?;
            current = Start {
                hash,
                checkpoint: Some(self.layout.checkpoint(stage)),
            };
            if until == Some(stage) {
                break;
            }
        }
        Ok(current)
    }

    /// Evaluates the model at `last` on every eval target.
    pub fn eval(&mut self, last: &Start) -> Result<Vec<PathBuf>, CliError> {
        let mut h = Hasher::new();
        h.part("eval", last.hash.as_bytes()).json("targets", &self.cfg.eval);
        for t in &self.cfg.eval {
            hash_corpus(&mut h, &t.dataset)?;
        }
        let hash = h.finish();
        let paths: Vec<PathBuf> = self.cfg.eval.iter().map(|t| self.layout.report(&t.name)).collect();
        self.step("eval", &hash, |r| {
            let model = r.load_start(last)?;
            for (t, dest) in r.cfg.eval.iter().zip(&paths) {
                let ds = load_manifest(&t.dataset).map_err(|e| CliError::stage("eval", format!("{}: {e}", t.name)))?;
                let report = evaluate(&model, &ds, t.task()?, t.classes.as_deref()).map_err(|e| CliError::stage("eval", format!("{}: {e}", t.name)))?;
                write_json(dest, &report)?;
            }
            Ok(StepOutput::files(paths.clone()))
        })?;
        Ok(paths)
    }
}

pub fn evaluate(
    model: &ToyVlm,
    ds: &DatasetManifest,
    task: EvalTask,
    classes: Option<&[String]>,
) -> Result<MetricReport, medvlm::evaluation::EvalError> {
    match task {
        EvalTask::Vqa => evaluate_vqa(model, ds),
        EvalTask::Qa { protocol } => evaluate_qa(model, ds, protocol),
        EvalTask::Ic => evaluate_ic(model, ds, classes),
    }
}

/// Hash of the resolved config and the contents of every input it names.
pub fn config_hash(cfg: &RunConfig) -> Result<String, CliError> {
    let mut h = Hasher::new();
    let mut portable = cfg.clone();
    portable.paths.output_root = PathBuf::new();
    h.json("config", &portable);
    for (name, path) in cfg.paths.corpora() {
        h.part(name, b"");
        hash_corpus(&mut h, path)?;
    }
    for t in &cfg.eval {
        hash_corpus(&mut h, &t.dataset)?;
    }
    Ok(h.finish())
}
