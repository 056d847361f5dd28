//! Losses, freeze schedules, the optimization loop and gradient checks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetManifest, Image, Sample};
use crate::mixer::{LossKind, StageId, StagePlan};
use crate::model::autograd::softmax_rows;
use crate::model::{
    caption_segments, conversation_segments, save_checkpoint, text_segments, vqa_segments, ByteTokenizer, Forward, GroupSet,
    Matrix, ModelError, ParamGroup, Segment, ToyVlm,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("data does not match {kind:?} stage: {message}")]
    DataMismatch { kind: LossKind, message: String },
    #[error("non-finite loss at step {step}; last good parameters retained")]
    Diverged {
        step: usize,
        last_good: Box<ToyVlm>,
        checkpoint: Option<PathBuf>,
    },
    #[error("frozen group {0} changed during training")]
    FrozenChanged(ParamGroup),
    #[error("trainable selector is empty")]
    EmptySelector,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Masked next-token NLL over logit rows and its gradient with respect to
/// the logits. Row `p` is scored against `targets[p]` iff `mask[p]`.
pub fn masked_nll(logits: &Matrix, targets: &[u32], mask: &[bool], reduction: Reduction) -> Result<(f64, Matrix), TrainError> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(TrainError::Model(ModelError::Shape(format!(
            "{rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        ))));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::Degenerate("loss mask is empty".into()));
    }
    let probs = softmax_rows(logits, false);
    let mut grad = Matrix::zeros(rows, vocab);
    let mut total = 0.0;
    let weight = match reduction {
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    };
    for p in (0..rows).filter(|&p| mask[p]) {
        let t = targets[p] as usize;
        if t >= vocab {
            return Err(TrainError::Model(ModelError::Shape(format!("target {t} outside vocabulary {vocab}"))));
        }
        // log-sum-exp for the value, softmax for the gradient.
        let row = logits.row(p);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        let g = grad.row_mut(p);
        for (gi, pi) in g.iter_mut().zip(probs.row(p)) {
            *gi = pi * weight;
        }
        g[t] -= weight;
    }
    let value = match reduction {
        Reduction::Mean => total / count as f64,
        Reduction::Sum => total,
    };
    Ok((value, grad))
}

/// Mean NLL over caption positions (visual and prompt rows masked out).
pub fn alignment_loss(logits: &Matrix, targets: &[u32], mask: &[bool]) -> Result<f64, TrainError> {
    masked_nll(logits, targets, mask, Reduction::Mean).map(|(l, _)| l)
}

/// Mean NLL over answer positions of every turn.
pub fn instruction_loss(logits: &Matrix, targets: &[u32], mask: &[bool]) -> Result<f64, TrainError> {
    masked_nll(logits, targets, mask, Reduction::Mean).map(|(l, _)| l)
}

/// Parameter groups a stage may update.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSelector {
    pub stage_id: StageId,
    pub groups: GroupSet,
}

impl TrainableSelector {
    pub fn for_stage(stage_id: StageId) -> Self {
        let groups = match stage_id {
            StageId::TextSft1 | StageId::TextSft2 => [ParamGroup::Lm].into(),
            StageId::MmAlign => [ParamGroup::Projector].into(),
            StageId::MmInstruct => [ParamGroup::VisionLora, ParamGroup::Projector, ParamGroup::Lm].into(),
        };
        Self { stage_id, groups }
    }
}

pub fn apply_freeze_schedule(model: &mut ToyVlm, stage: &str) -> Result<TrainableSelector, TrainError> {
    let id: StageId = stage.parse().map_err(|_| TrainError::UnknownStage(stage.to_string()))?;
    let selector = TrainableSelector::for_stage(id);
    model.set_trainable(selector.groups.clone());
    Ok(selector)
}

/// A sample ready for the model: decoded image plus template segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: Option<Image>,
    pub segments: Vec<Segment>,
}

impl Example {
    /// Template chosen by record type.
    pub fn from_sample(sample: &Sample, image: Option<Image>, tok: &ByteTokenizer) -> Self {
        let with_image = image.is_some();
        let segments = match sample {
            Sample::Text(r) => text_segments(tok, &r.text),
            Sample::Caption(c) => caption_segments(tok, &c.caption, with_image),
            Sample::Vqa(v) => vqa_segments(tok, &v.question, &v.answer, with_image),
            Sample::Conversation(c) => {
                let turns: Vec<(&str, &str)> = c.turns.iter().map(|t| (t.question.as_str(), t.answer.as_str())).collect();
                conversation_segments(tok, &turns, with_image)
            }
        };
        Self {
            id: sample.id().to_string(),
            image,
            segments,
        }
    }
}

fn accepts(kind: LossKind, sample: &Sample) -> bool {
    matches!(
        (kind, sample),
        (LossKind::CausalLm, Sample::Text(_))
            | (LossKind::Alignment, Sample::Caption(_))
            | (LossKind::Instruction, Sample::Vqa(_) | Sample::Conversation(_))
    )
}

/// Decodes every record of a manifest into training examples for a stage.
/// Text records longer than `max_len` keep their leading window (and lose
/// EOS); other record kinds are never cut.
pub fn build_examples(
    manifest: &DatasetManifest,
    kind: LossKind,
    tok: &ByteTokenizer,
    max_len: usize,
) -> Result<Vec<Example>, TrainError> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            if !accepts(kind, r) {
                return Err(TrainError::DataMismatch {
                    kind,
                    message: format!("record `{}` is a {} record", r.id(), r.kind()),
                });
            }
            let image = r.image().map(|i| manifest.load_image(i)).transpose()?;
            let mut ex = Example::from_sample(r, image, tok);
            if let Sample::Text(_) = r {
                let used: usize = ex.segments.iter().map(|s| s.tokens.len()).sum();
                if used > max_len {
                    let last = ex.segments.last_mut().expect("text template has a body");
                    let keep = last.tokens.len() - (used - max_len);
                    last.tokens.truncate(keep);
                }
            }
            Ok(ex)
        })
        .collect()
}

/// Summed NLL, masked-token count and gradients of the model's trainable
/// parameters for one example.
pub fn example_gradients(model: &ToyVlm, ex: &Example) -> Result<(f64, usize, BTreeMap<String, Matrix>), TrainError> {
    let mut fw = Forward::new(model, true);
    let (logits, layout) = fw.sample(ex.image.as_ref(), &ex.segments)?;
    let (targets, mask) = layout.targets();
    let count = mask.iter().filter(|&&m| m).count();
    let (loss, dlogits) = masked_nll(fw.graph.value(logits), &targets, &mask, Reduction::Sum)?;
    let grads = fw.graph.backward(logits, dlogits);
    Ok((loss, count, grads))
}

/// Mean per-token loss of an example without gradients.
pub fn example_loss(model: &ToyVlm, ex: &Example) -> Result<f64, TrainError> {
    let (logits, layout) = model.sample_logits(ex.image.as_ref(), &ex.segments)?;
    let (targets, mask) = layout.targets();
    masked_nll(&logits, &targets, &mask, Reduction::Mean).map(|(l, _)| l)
}

/// Token-weighted mean loss over examples.
pub fn mean_loss(model: &ToyVlm, examples: &[Example]) -> Result<f64, TrainError> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let (logits, layout) = model.sample_logits(ex.image.as_ref(), &ex.segments)?;
            let (targets, mask) = layout.targets();
            let (sum, _) = masked_nll(&logits, &targets, &mask, Reduction::Sum)?;
            Ok((sum, mask.iter().filter(|&&m| m).count()))
        })
        .collect::<Result<_, TrainError>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(sum / n.max(1) as f64)
}

/// Gradient norm of every parameter; frozen parameters report 0.
pub fn grad_norms(model: &ToyVlm, ex: &Example) -> Result<BTreeMap<String, f64>, TrainError> {
    let (_, _, grads) = example_gradients(model, ex)?;
    Ok(model
        .params
        .iter()
        .map(|(name, _)| (name.clone(), grads.get(name).map_or(0.0, Matrix::norm)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Projector and adapter learning rate.
    pub lr_adapter: f64,
    /// Language-model (and vision base, if ever unfrozen) learning rate.
    pub lr_lm: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_adapter: 3e-4,
            lr_lm: 1e-4,
            warmup_steps: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Projector | ParamGroup::VisionLora => self.lr_adapter,
            ParamGroup::Lm | ParamGroup::VisionBase => self.lr_lm,
        }
    }

    /// Linear warmup factor for 0-based `step`.
    pub fn warmup(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    /// First and second moments, one entry per trainable parameter.
    pub moments: BTreeMap<String, Moments>,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    pub plan: StagePlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: StageId,
    pub loss: f64,
    /// Projector/adapter learning rate after warmup.
    pub lr: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Metrics appended here as JSON lines.
    pub metrics_path: Option<PathBuf>,
    /// Checkpoint written at stage end (or last-good on divergence).
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct StageOutcome {
    pub model: ToyVlm,
    pub state: TrainState,
    pub metrics: Vec<MetricRecord>,
}

fn adamw_step(model: &mut ToyVlm, state: &mut TrainState, grads: &BTreeMap<String, Matrix>, opt: &OptimizerConfig, step: usize) {
    let t = (step + 1) as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);
    let warm = opt.warmup(step);
    for (name, g) in grads {
        let param = model.params.get_mut(name).expect("gradient for a known parameter");
        let lr = opt.base_lr(param.group) * warm;
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Matrix::zeros(g.rows(), g.cols()),
            v: Matrix::zeros(g.rows(), g.cols()),
        });
        let w = param.value.data_mut();
        let m = mom.m.data_mut();
        let v = mom.v.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            w[i] -= lr * (mh / (vh.sqrt() + opt.eps) + opt.weight_decay * w[i]);
        }
    }
}

fn diverged(model: ToyVlm, step: usize, opts: &TrainOptions) -> Result<StageOutcome, TrainError> {
    let checkpoint = match &opts.checkpoint_dir {
        Some(dir) => {
            save_checkpoint(&model, dir)?;
            Some(dir.clone())
        }
        None => None,
    };
    Err(TrainError::Diverged {
        step,
        last_good: Box::new(model),
        checkpoint,
    })
}

/// Runs the plan's budgeted optimizer steps on `data` starting from
/// `model` with `plan.trainable` as the trainable set.
pub fn train_stage(model: &ToyVlm, plan: &StagePlan, data: &[Example], opts: &TrainOptions) -> Result<StageOutcome, TrainError> {
    if plan.trainable.is_empty() {
        return Err(TrainError::EmptySelector);
    }
    let mut model = model.clone();
    model.set_trainable(plan.trainable.clone());
    let frozen: Vec<(ParamGroup, Vec<u8>)> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !plan.trainable.contains(g))
        .map(|g| (g, model.params.group_bytes(g)))
        .collect();

    let mut state = TrainState {
        step: 0,
        moments: BTreeMap::new(),
        loss_history: Vec::new(),
        seed: opts.seed,
        plan: plan.clone(),
    };
    let mut metrics = Vec::new();
    let mut log = match &opts.metrics_path {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let steps = plan.budget.steps_for(data.len());
    if steps > 0 && data.is_empty() {
        return Err(TrainError::Degenerate(format!("{} has no training data", plan.stage_id)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let batch = plan.budget.batch_size.clamp(1, data.len().max(1));
    for step in 0..steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            picked.push(order.pop().expect("refilled"));
        }
        let parts: Result<Vec<(f64, usize, BTreeMap<String, Matrix>)>, TrainError> =
            picked.par_iter().map(|&i| example_gradients(&model, &data[i])).collect();
        let parts = match parts {
            Ok(p) => p,
            Err(TrainError::Model(ModelError::NonFinite { .. })) => return diverged(model, step, opts),
            Err(e) => return Err(e),
        };
        // Ordered reduction keeps results independent of the worker count.
        let tokens: usize = parts.iter().map(|p| p.1).sum();
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
        for (loss, _, g) in parts {
            total += loss;
            for (name, m) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&m),
                    None => {
                        grads.insert(name, m);
                    }
                }
            }
        }
        let loss = total / tokens as f64;
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return diverged(model, step, opts);
        }
        let inv = 1.0 / tokens as f64;
        grads.values_mut().for_each(|g| *g = g.scaled(inv));
        if let Some(max) = opts.optimizer.max_grad_norm {
            let norm = grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                grads.values_mut().for_each(|g| *g = g.scaled(s));
            }
        }
        adamw_step(&mut model, &mut state, &grads, &opts.optimizer, step);
        state.step = step + 1;
        state.loss_history.push(loss);
        let record = MetricRecord {
            step,
            stage: plan.stage_id,
            loss,
            lr: opts.optimizer.lr_adapter * opts.optimizer.warmup(step),
            tokens,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record).expect("metric serializes"))?;
        }
        metrics.push(record);
    }
    for (group, before) in frozen {
        if model.params.group_bytes(group) != before {
            return Err(TrainError::FrozenChanged(group));
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&model, dir)?;
    }
    Ok(StageOutcome { model, state, metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per trainable parameter.
    pub per_param: BTreeMap<String, f64>,
    pub checked: usize,
}

/// Relative errors below this magnitude of both gradients are measured
/// against the floor instead, so exact zeros compare cleanly.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the mean loss with central finite
/// differences for every scalar of every trainable parameter.
pub fn grad_check(model: &ToyVlm, ex: &Example, epsilon: f64) -> Result<GradCheckReport, TrainError> {
    let (sum, count, grads) = example_gradients(model, ex)?;
    let _ = sum;
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| model.trainable().contains(&p.group))
        .map(|(n, _)| n.clone())
        .collect();
    let per_param: Vec<(String, f64, usize)> = names
        .par_iter()
        .map(|name| {
            let analytic = grads.get(name).cloned().unwrap_or_else(|| {
                let p = &model.params.get(name).unwrap().value;
                Matrix::zeros(p.rows(), p.cols())
            });
            let mut probe = model.clone();
            let mut worst: f64 = 0.0;
            let n = analytic.len();
            for i in 0..n {
                let orig = probe.params.get(name).unwrap().value.data()[i];
                probe.params.get_mut(name).unwrap().value.data_mut()[i] = orig + epsilon;
                let up = example_loss(&probe, ex)?;
                probe.params.get_mut(name).unwrap().value.data_mut()[i] = orig - epsilon;
                let down = example_loss(&probe, ex)?;
                probe.params.get_mut(name).unwrap().value.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * epsilon);
                let a = analytic.data()[i] / count as f64;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                worst = worst.max(rel);
            }
            Ok((name.clone(), worst, n))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().map(|p| p.1).fold(0.0, f64::max),
        checked: per_param.iter().map(|p| p.2).sum(),
        per_param: per_param.into_iter().map(|(n, e, _)| (n, e)).collect(),
    })
}

/// Writes a stage's metrics log to `path`, replacing any previous file.
pub fn write_metrics(path: &Path, metrics: &[MetricRecord]) -> Result<(), TrainError> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metric serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
