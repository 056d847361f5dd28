use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::autograd::{Graph, Var};
use super::sequence::{prompt_segments, AssembledSequence, Segment, SequenceLayout};
use super::tokenizer::{ByteTokenizer, EOS};
use super::{GroupSet, Matrix, ModelConfig, ModelError, ParamGroup, ParamStore};
use crate::corpus::Image;

/// Low-rank update `W_eff = W + (alpha / rank) · B · A` on one vision
/// weight. `A` is `[rank, in]`, `B` is `[out, rank]`; both live in the
/// parameter store under the target's prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    fn prefix(&self) -> &str {
        self.target.strip_suffix(".weight").unwrap_or(&self.target)
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.prefix())
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.prefix())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Encoder output before projection, `[n_patches, d_vision]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens(pub Matrix);

/// The single linear layer bridging vision and language widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    /// `[d_lm, d_vision]`
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl Projector {
    pub fn apply(&self, tokens: &Matrix) -> Result<Matrix, ModelError> {
        if tokens.cols() != self.weight.cols() {
            return Err(ModelError::Shape(format!(
                "token width {} does not match projector input {}",
                tokens.cols(),
                self.weight.cols()
            )));
        }
        let out = tokens.matmul_t(&self.weight);
        Ok(match &self.bias {
            Some(b) => out.add_row(b),
            None => out,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_new_tokens: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<u32>,
    /// Set when decoding stopped on the token budget or context limit
    /// instead of an end-of-sequence token.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVlm {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Keyed by target weight name.
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub tokenizer: ByteTokenizer,
    trainable: GroupSet,
}

fn xavier(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl ToyVlm {
    /// Randomly initialized model with adapters on the configured targets.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let c = &config;
        let dv = c.d_vision;
        let dl = c.d_lm;

        let base = ParamGroup::VisionBase;
        params.insert("vision.patch.weight", base, Matrix::randn(dv, c.patch_dim(), xavier(c.patch_dim()), &mut rng));
        params.insert("vision.patch.bias", base, Matrix::zeros(1, dv));
        params.insert("vision.pos", base, Matrix::randn(c.n_patches(), dv, 0.02, &mut rng));
        for i in 0..c.n_vision_layers {
            init_block(&mut params, &format!("vision.blocks.{i}"), base, dv, c.mlp_ratio, &mut rng);
        }
        init_norm(&mut params, "vision.ln_f", base, dv);

        params.insert("projector.weight", ParamGroup::Projector, Matrix::randn(dl, dv, xavier(dv), &mut rng));
        if c.projector_bias {
            params.insert("projector.bias", ParamGroup::Projector, Matrix::zeros(1, dl));
        }

        let lm = ParamGroup::Lm;
        params.insert("lm.tok_emb", lm, Matrix::randn(c.vocab_size, dl, 0.02, &mut rng));
        params.insert("lm.pos_emb", lm, Matrix::randn(c.max_seq_len, dl, 0.02, &mut rng));
        for i in 0..c.n_lm_layers {
            init_block(&mut params, &format!("lm.blocks.{i}"), lm, dl, c.mlp_ratio, &mut rng);
        }
        init_norm(&mut params, "lm.ln_f", lm, dl);
        params.insert("lm.head.weight", lm, Matrix::randn(c.vocab_size, dl, 0.02, &mut rng));

        let mut adapters = BTreeMap::new();
        for i in 0..c.n_vision_layers {
            for t in &c.lora_targets {
                let adapter = LoraAdapter {
                    target: format!("vision.blocks.{i}.attn.{t}.weight"),
                    rank: c.lora_rank,
                    alpha: c.lora_alpha,
                };
                // A small gaussian, B zero: the update starts at exactly zero.
                params.insert(
                    adapter.a_name(),
                    ParamGroup::VisionLora,
                    Matrix::randn(c.lora_rank, dv, xavier(dv), &mut rng),
                );
                params.insert(adapter.b_name(), ParamGroup::VisionLora, Matrix::zeros(dv, c.lora_rank));
                adapters.insert(adapter.target.clone(), adapter);
            }
        }

        Ok(Self {
            tokenizer: ByteTokenizer::new(c.vocab_size),
            config,
            params,
            adapters,
            trainable: GroupSet::new(),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        adapters: BTreeMap<String, LoraAdapter>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let model = Self {
            tokenizer: ByteTokenizer::new(config.vocab_size),
            config,
            params,
            adapters,
            trainable: GroupSet::new(),
        };
        model.check_integrity()?;
        Ok(model)
    }

    /// Every adapter must target an existing vision matrix with matching
    /// factor shapes, and every tensor must be finite.
    pub fn check_integrity(&self) -> Result<(), ModelError> {
        for a in self.adapters.values() {
            let w = self
                .params
                .get(&a.target)
                .filter(|p| p.group == ParamGroup::VisionBase)
                .ok_or_else(|| ModelError::Config(format!("adapter target `{}` is not a vision weight", a.target)))?;
            let (m, n) = w.value.shape();
            if a.rank > m.min(n) {
                return Err(ModelError::Config(format!("adapter rank {} exceeds min({m}, {n})", a.rank)));
            }
            let fa = self.params.get(&a.a_name()).map(|p| p.value.shape());
            let fb = self.params.get(&a.b_name()).map(|p| p.value.shape());
            if fa != Some((a.rank, n)) || fb != Some((m, a.rank)) {
                return Err(ModelError::Config(format!("adapter factors for `{}` are missing or misshaped", a.target)));
            }
        }
        for (name, p) in self.params.iter() {
            if !p.value.is_finite() {
                return Err(ModelError::NonFinite { layer: name.clone() });
            }
        }
        Ok(())
    }

    pub fn trainable(&self) -> &GroupSet {
        &self.trainable
    }

    pub fn set_trainable(&mut self, groups: GroupSet) {
        self.trainable = groups;
    }

    /// A copy with adapters and their factors removed.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        for a in std::mem::take(&mut out.adapters).into_values() {
            out.params.remove(&a.a_name());
            out.params.remove(&a.b_name());
        }
        out
    }

    /// Folds every adapter into its base weight and drops the factors.
    pub fn merge_lora(mut self) -> Self {
        for a in std::mem::take(&mut self.adapters).into_values() {
            let fa = self.params.remove(&a.a_name()).expect("adapter factor A").value;
            let fb = self.params.remove(&a.b_name()).expect("adapter factor B").value;
            let delta = fb.matmul(&fa);
            let w = &mut self.params.get_mut(&a.target).expect("adapter target").value;
            w.axpy(a.scaling(), &delta);
        }
        self
    }

    pub fn projector(&self) -> Projector {
        Projector {
            weight: self.params.get("projector.weight").expect("projector weight").value.clone(),
            bias: self.params.get("projector.bias").map(|p| p.value.clone()),
        }
    }

    pub fn encode_image(&self, image: &Image) -> Result<VisualTokens, ModelError> {
        let mut f = Forward::new(self, false);
        let v = f.vision(image)?;
        Ok(VisualTokens(f.graph.value(v).clone()))
    }

    pub fn project(&self, tokens: &VisualTokens) -> Result<Matrix, ModelError> {
        self.projector().apply(&tokens.0)
    }

    /// Concatenates projected visual rows with text embeddings per the
    /// template, without position embeddings (those are added by
    /// [`ToyVlm::forward`]).
    pub fn assemble_sequence(
        &self,
        projected: Option<&Matrix>,
        segments: &[Segment],
    ) -> Result<AssembledSequence, ModelError> {
        let n_visual = projected.map_or(0, Matrix::rows);
        if let Some(p) = projected {
            if p.cols() != self.config.d_lm {
                return Err(ModelError::Shape(format!(
                    "projected width {} does not match d_lm {}",
                    p.cols(),
                    self.config.d_lm
                )));
            }
        }
        let layout = SequenceLayout::build(n_visual, segments, self.config.max_seq_len)?;
        let text = self.embed_ids(&layout.text_ids)?;
        let embeddings = match projected {
            Some(p) => Matrix::concat_rows(&[p, &text]),
            None => text,
        };
        Ok(AssembledSequence { embeddings, layout })
    }

    fn embed_ids(&self, ids: &[u32]) -> Result<Matrix, ModelError> {
        let table = &self.params.get("lm.tok_emb").expect("token embeddings").value;
        let mut out = Matrix::zeros(ids.len(), self.config.d_lm);
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= table.rows() {
                return Err(ModelError::Shape(format!("token id {id} outside vocabulary")));
            }
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok(out)
    }

    /// Causal language-model pass over an embedding sequence.
    pub fn forward(&self, embeddings: &Matrix) -> Result<Matrix, ModelError> {
        let mut f = Forward::new(self, false);
        let x = f.graph.input(embeddings.clone());
        let logits = f.lm(x)?;
        Ok(f.graph.value(logits).clone())
    }

    /// Logits for a full sample (image optional) laid out by `segments`.
    pub fn sample_logits(&self, image: Option<&Image>, segments: &[Segment]) -> Result<(Matrix, SequenceLayout), ModelError> {
        let mut f = Forward::new(self, false);
        let (logits, layout) = f.sample(image, segments)?;
        Ok((f.graph.value(logits).clone(), layout))
    }

    /// Greedy decoding. Ties between maximal logits go to the lowest id.
    pub fn generate(&self, image: Option<&Image>, prompt: &str, cfg: &DecodeConfig) -> Result<Generation, ModelError> {
        let segments = prompt_segments(&self.tokenizer, prompt, image.is_some());
        let projected = match image {
            Some(img) => Some(self.project(&self.encode_image(img)?)?),
            None => None,
        };
        let mut seq = self.assemble_sequence(projected.as_ref(), &segments)?.embeddings;
        let mut tokens = Vec::new();
        let mut finished = false;
        while tokens.len() < cfg.max_new_tokens && seq.rows() < self.config.max_seq_len {
            let logits = self.forward(&seq)?;
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let next = best as u32;
            if next == EOS {
                finished = true;
                break;
            }
            tokens.push(next);
            let row = self.embed_ids(&[next])?;
            seq = Matrix::concat_rows(&[&seq, &row]);
        }
        Ok(Generation {
            text: self.tokenizer.decode(&tokens),
            tokens,
            truncated: !finished,
        })
    }
}

fn init_norm(params: &mut ParamStore, prefix: &str, group: ParamGroup, d: usize) {
    params.insert(format!("{prefix}.gamma"), group, Matrix::filled(1, d, 1.0));
    params.insert(format!("{prefix}.beta"), group, Matrix::zeros(1, d));
}

fn init_block(params: &mut ParamStore, prefix: &str, group: ParamGroup, d: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) {
    let h = d * mlp_ratio;
    init_norm(params, &format!("{prefix}.ln1"), group, d);
    init_norm(params, &format!("{prefix}.ln2"), group, d);
    for t in ["q", "k", "v", "o"] {
        let std = if t == "o" { 0.5 * xavier(d) } else { xavier(d) };
        params.insert(format!("{prefix}.attn.{t}.weight"), group, Matrix::randn(d, d, std, rng));
        params.insert(format!("{prefix}.attn.{t}.bias"), group, Matrix::zeros(1, d));
    }
    params.insert(format!("{prefix}.mlp.fc1.weight"), group, Matrix::randn(h, d, xavier(d), rng));
    params.insert(format!("{prefix}.mlp.fc1.bias"), group, Matrix::zeros(1, h));
    params.insert(format!("{prefix}.mlp.fc2.weight"), group, Matrix::randn(d, h, 0.5 * xavier(h), rng));
    params.insert(format!("{prefix}.mlp.fc2.bias"), group, Matrix::zeros(1, d));
}

/// Builds the computation of one sample on a fresh tape. With gradient
/// tracking on, leaves of the model's trainable groups are marked for the
/// backward sweep.
pub struct Forward<'m> {
    model: &'m ToyVlm,
    pub graph: Graph<'m>,
    track: bool,
    leaves: HashMap<String, Var>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m ToyVlm, track_grads: bool) -> Self {
        Self {
            model,
            graph: Graph::new(),
            track: track_grads,
            leaves: HashMap::new(),
        }
    }

    fn leaf(&mut self, name: &str) -> Var {
        if let Some(&v) = self.leaves.get(name) {
            return v;
        }
        let p = self
            .model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let trainable = self.track && self.model.trainable.contains(&p.group);
        let v = self.graph.param(name, &p.value, trainable);
        self.leaves.insert(name.to_string(), v);
        v
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let weight = format!("{prefix}.weight");
        let w = self.leaf(&weight);
        let mut y = self.graph.matmul_t(x, w);
        let bias = format!("{prefix}.bias");
        if self.model.params.contains(&bias) {
            let b = self.leaf(&bias);
            y = self.graph.add_row(y, b);
        }
        if let Some(adapter) = self.model.adapters.get(&weight) {
            let a = self.leaf(&adapter.a_name());
            let b = self.leaf(&adapter.b_name());
            let down = self.graph.matmul_t(x, a);
            let up = self.graph.matmul_t(down, b);
            let up = self.graph.scale(up, adapter.scaling());
            y = self.graph.add(y, up);
        }
        y
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.leaf(&format!("{prefix}.gamma"));
        let b = self.leaf(&format!("{prefix}.beta"));
        self.graph.layer_norm(x, g, b)
    }

    fn attention(&mut self, x: Var, prefix: &str, causal: bool) -> Var {
        let q = self.linear(x, &format!("{prefix}.q"));
        let k = self.linear(x, &format!("{prefix}.k"));
        let v = self.linear(x, &format!("{prefix}.v"));
        let d = self.graph.value(q).cols();
        let heads = self.model.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * dh, dh);
            let kh = self.graph.slice_cols(k, h * dh, dh);
            let vh = self.graph.slice_cols(v, h * dh, dh);
            let scores = self.graph.matmul_t(qh, kh);
            let scores = self.graph.scale(scores, scale);
            let probs = self.graph.softmax(scores, causal);
            outs.push(self.graph.matmul(probs, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { self.graph.concat_cols(&outs) };
        self.linear(joined, &format!("{prefix}.o"))
    }

    fn block(&mut self, x: Var, prefix: &str, causal: bool) -> Result<Var, ModelError> {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"));
        let a = self.attention(h, &format!("{prefix}.attn"), causal);
        let x = self.graph.add(x, a);
        let h = self.layer_norm(x, &format!("{prefix}.ln2"));
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"));
        let h = self.graph.gelu(h);
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"));
        let out = self.graph.add(x, h);
        self.ensure_finite(out, prefix)?;
        Ok(out)
    }

    fn ensure_finite(&self, v: Var, layer: &str) -> Result<(), ModelError> {
        if self.graph.value(v).is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite { layer: layer.to_string() })
        }
    }

    /// Vision encoder: patch embedding, bidirectional blocks, final norm.
    pub fn vision(&mut self, image: &Image) -> Result<Var, ModelError> {
        let c = &self.model.config;
        if image.width() != c.image_size || image.height() != c.image_size {
            return Err(ModelError::Shape(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.width(),
                image.height(),
                c.image_size,
                c.image_size
            )));
        }
        let patches = Matrix::from_rows(&image.patches(c.patch_size));
        let n_layers = c.n_vision_layers;
        let x = self.graph.input(patches);
        let x = self.linear(x, "vision.patch");
        let pos = self.leaf("vision.pos");
        let mut x = self.graph.add(x, pos);
        for i in 0..n_layers {
            x = self.block(x, &format!("vision.blocks.{i}"), false)?;
        }
        let out = self.layer_norm(x, "vision.ln_f");
        self.ensure_finite(out, "vision.ln_f")?;
        Ok(out)
    }

    pub fn project(&mut self, visual: Var) -> Var {
        self.linear(visual, "projector")
    }

    pub fn embed(&mut self, ids: &[u32]) -> Var {
        let table = self.leaf("lm.tok_emb");
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.graph.gather(table, &ids)
    }

    /// Decoder over an embedding sequence; returns logits `[len, vocab]`.
    pub fn lm(&mut self, seq: Var) -> Result<Var, ModelError> {
        let len = self.graph.value(seq).rows();
        let c = &self.model.config;
        if len > c.max_seq_len {
            return Err(ModelError::Overflow { len, max: c.max_seq_len });
        }
        if self.graph.value(seq).cols() != c.d_lm {
            return Err(ModelError::Shape(format!(
                "embedding width {} does not match d_lm {}",
                self.graph.value(seq).cols(),
                c.d_lm
            )));
        }
        let n_layers = c.n_lm_layers;
        let pos_table = self.leaf("lm.pos_emb");
        let positions: Vec<usize> = (0..len).collect();
        let pos = self.graph.gather(pos_table, &positions);
        let mut x = self.graph.add(seq, pos);
        for i in 0..n_layers {
            x = self.block(x, &format!("lm.blocks.{i}"), true)?;
        }
        let x = self.layer_norm(x, "lm.ln_f");
        let head = self.leaf("lm.head.weight");
        let logits = self.graph.matmul_t(x, head);
        self.ensure_finite(logits, "lm.head")?;
        Ok(logits)
    }

    /// Image (optional) and template to logits.
    pub fn sample(&mut self, image: Option<&Image>, segments: &[Segment]) -> Result<(Var, SequenceLayout), ModelError> {
        let visual = match image {
            Some(img) => {
                let v = self.vision(img)?;
                Some(self.project(v))
            }
            None => None,
        };
        let n_visual = visual.map_or(0, |v| self.graph.value(v).rows());
        let layout = SequenceLayout::build(n_visual, segments, self.model.config.max_seq_len)?;
        let text = self.embed(&layout.text_ids);
        let seq = match visual {
            Some(v) => self.graph.concat_rows(&[v, text]),
            None => text,
        };
        let logits = self.lm(seq)?;
        Ok((logits, layout))
    }
}
