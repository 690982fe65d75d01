//! Decoder-only stack: word embedding, patch embedding, routed blocks, final
//! norm and a weight-tied output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::block::{
    block_forward, branch_suffix, BlockDims, BlockParams, Branched, Norm, RandomInit, SeqContext,
    VariantKind, DEFAULT_LN_EPS, DEFAULT_ROPE_BASE,
};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{Binder, GradMode, ParamId, ParamStore};
use crate::patch_embed::{decode_layout, embed_pixels, Modality, PatchEmbedDims, PatchEmbedParams, TokenKind, TokenSequence, PATCH};
use crate::tensor::Tensor;
use crate::tokenizer::EOS;

pub use crate::training::pretrain_base_lm;

pub const WORD_EMBED: &str = "embed.word";
pub const FINAL_GAIN: &str = "final_norm.gain";
pub const FINAL_BIAS: &str = "final_norm.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub context: usize,
    pub variant: VariantKind,
    /// Hidden channels of the first patch convolution.
    pub d1: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d: 128,
            d_ff: 512,
            n_heads: 4,
            vocab: crate::tokenizer::VOCAB_SIZE,
            context: 1024,
            variant: VariantKind::Dac,
            d1: 64,
            rope_base: DEFAULT_ROPE_BASE,
            ln_eps: DEFAULT_LN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields =
            [("layers", self.layers), ("d", self.d), ("d_ff", self.d_ff), ("n_heads", self.n_heads), ("vocab", self.vocab), ("context", self.context), ("d1", self.d1)];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model field {name} must be positive")));
        }
        if !(self.rope_base > 1.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Config("rope_base must exceed 1 and ln_eps must be positive".into()));
        }
        self.block_dims().validate()
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims { d: self.d, d_ff: self.d_ff, n_heads: self.n_heads }
    }

    pub fn patch_dims(&self) -> PatchEmbedDims {
        PatchEmbedDims { d1: self.d1, d: self.d }
    }

    pub fn with_variant(&self, variant: VariantKind) -> Self {
        ModelConfig { variant, ..self.clone() }
    }

    /// Same shapes apart from the variant.
    pub fn same_dims(&self, other: &ModelConfig) -> bool {
        self.with_variant(other.variant) == *other
    }
}

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub step: u64,
    pub seed: u64,
}

/// Trainable parameter groups used by freeze masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PatchEmbed,
    VisionLayers,
    TextLayers,
    WordEmbed,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::PatchEmbed, ParamGroup::VisionLayers, ParamGroup::TextLayers, ParamGroup::WordEmbed];

    /// Group of a parameter by name. Vision branches and re-parameterization
    /// deltas are vision layers; every other block tensor and the final norm
    /// belong to the text side.
    pub fn of(name: &str) -> Self {
        if name.starts_with("patch.") {
            ParamGroup::PatchEmbed
        } else if name == WORD_EMBED {
            ParamGroup::WordEmbed
        } else if name.starts_with("layers.") && (name.ends_with(".v") || name.ends_with(".delta")) {
            ParamGroup::VisionLayers
        } else {
            ParamGroup::TextLayers
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub provenance: Provenance,
    word: ParamId,
    patch: PatchEmbedParams,
    blocks: Vec<BlockParams>,
    final_norm: Norm,
}

/// Graph handles produced by a batched forward pass.
pub struct ForwardOut {
    /// Final hidden rows `[n × d]` over all packed positions.
    pub hidden: Var,
    pub ctx: SeqContext,
}

impl Model {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let word = store.insert(WORD_EMBED, Tensor::randn(&[config.vocab, config.d], 0.02, &mut rng))?;
        let patch = PatchEmbedParams::init(&mut store, config.patch_dims(), &mut rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut init = RandomInit(&mut rng);
            blocks.push(BlockParams::build(&mut store, &format!("layers.{i}"), config.variant, config.block_dims(), &mut init)?);
        }
        let gain = store.insert(FINAL_GAIN, Tensor::full(&[config.d], 1.0))?;
        let bias = store.insert(FINAL_BIAS, Tensor::zeros(&[config.d]))?;
        Ok(Model {
            config,
            store,
            provenance: Provenance { stage: "init".into(), step: 0, seed },
            word,
            patch,
            blocks,
            final_norm: Norm { gain, bias },
        })
    }

    /// Rebuilds handles over an existing store whose names and shapes match
    /// `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore, provenance: Provenance) -> Result<Self> {
        config.validate()?;
        let template = Model::new(config.clone(), 0)?;
        for (_, name, t) in template.store.iter() {
            match store.by_name(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some((_, name, _)) = store.iter().find(|(_, n, _)| template.store.id(n).is_none()) {
            return Err(Error::Checkpoint(format!("unknown tensor {name} for a {} model", config.variant)));
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let blocks = (0..config.layers)
            .map(|i| BlockParams::lookup(&store, &format!("layers.{i}"), config.variant, config.block_dims()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            word: id(WORD_EMBED),
            patch: PatchEmbedParams::lookup(&store, config.patch_dims())?,
            final_norm: Norm { gain: id(FINAL_GAIN), bias: id(FINAL_BIAS) },
            blocks,
            config,
            store,
            provenance,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Scalar count of the stacked blocks alone.
    pub fn block_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count(&self.store)).sum()
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn word_embedding(&self) -> ParamId {
        self.word
    }

    /// Per-parameter trainability for the given groups, indexed by id.
    pub fn group_mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        self.store.iter().map(|(_, name, _)| groups.contains(&ParamGroup::of(name))).collect()
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.context {
            return Err(Error::Length { len: seq.len(), limit: self.config.context });
        }
        for t in &seq.tokens {
            if let TokenKind::Text(id) = t.kind {
                if id as usize >= self.config.vocab {
                    return Err(Error::Vocab { id, vocab: self.config.vocab });
                }
            }
        }
        let (rows, cols) = decode_layout(&seq.tokens)?;
        match &seq.image {
            Some(img) if (img.height(), img.width()) != (rows * PATCH, cols * PATCH) => Err(Error::Dimension(format!(
                "image {}×{} does not match a {rows}×{cols} patch layout",
                img.height(),
                img.width()
            ))),
            None if rows > 0 => Err(Error::Dimension("sequence has image tokens but no image".into())),
            _ => Ok(()),
        }
    }

    /// Input rows for the packed batch: word-embedding lookups at text
    /// positions and patch-embedding rows at image positions.
    fn embed_batch<'a>(&'a self, g: &mut Graph<'a>, b: &Binder<'a>, seqs: &[TokenSequence]) -> Result<Var> {
        let e = b.bind(g, self.word);
        let mut inputs = vec![e];
        let mut picks = Vec::with_capacity(seqs.iter().map(TokenSequence::len).sum());
        for seq in seqs {
            self.check_sequence(seq)?;
            let img_slot = match &seq.image {
                Some(img) if seq.image_token_count() > 0 => {
                    inputs.push(embed_pixels(g, b, &self.patch, img)?);
                    Some(inputs.len() as u32 - 1)
                }
                _ => None,
            };
            let mut img_row = 0u32;
            for t in &seq.tokens {
                match t.kind {
                    TokenKind::Text(id) => picks.push((0, id)),
                    _ => {
                        picks.push((img_slot.expect("validated layout"), img_row));
                        img_row += 1;
                    }
                }
            }
        }
        g.select_rows(&inputs, &picks)
    }

    /// Runs the stack over packed sequences and returns the final hidden
    /// rows before the output norm.
    pub fn forward_hidden<'a>(&'a self, g: &mut Graph<'a>, mode: GradMode<'a>, seqs: &[TokenSequence]) -> Result<ForwardOut> {
        if seqs.iter().any(TokenSequence::is_empty) {
            return Err(Error::Dimension("cannot run an empty sequence".into()));
        }
        let b = Binder::new(&self.store, mode);
        let mut x = self.embed_batch(g, &b, seqs)?;
        let mut ctx = SeqContext::packed(&seqs.iter().map(TokenSequence::modalities).collect::<Vec<_>>());
        ctx.rope_base = self.config.rope_base;
        ctx.ln_eps = self.config.ln_eps;
        for p in &self.blocks {
            x = block_forward(g, &b, x, &ctx, p)?;
        }
        Ok(ForwardOut { hidden: x, ctx })
    }

    /// Final norm and tied head over `rows` of `hidden`.
    pub fn head<'a>(&'a self, g: &mut Graph<'a>, mode: GradMode<'a>, hidden: Var) -> Result<Var> {
        let b = Binder::new(&self.store, mode);
        let gain = b.bind(g, self.final_norm.gain);
        let bias = b.bind(g, self.final_norm.bias);
        let h = g.layer_norm(hidden, gain, bias, self.config.ln_eps)?;
        let e = b.bind(g, self.word);
        let et = g.transpose(e)?;
        g.matmul(h, et)
    }

    /// Logits `[n × V]` for one sequence.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_hidden(&mut g, GradMode::None, std::slice::from_ref(seq))?;
        let logits = self.head(&mut g, GradMode::None, out.hidden)?;
        Ok(g.tensor(logits))
    }

    /// Mean next-token loss over the supervised positions of a packed batch.
    /// Only supervised rows reach the head. Returns the loss node and the
    /// number of supervised targets.
    pub fn loss<'a>(&'a self, g: &mut Graph<'a>, mode: GradMode<'a>, seqs: &[TokenSequence]) -> Result<(Var, usize)> {
        let (rows, targets) = supervised_targets(seqs);
        if rows.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        let out = self.forward_hidden(g, mode, seqs)?;
        let picks: Vec<(u32, u32)> = rows.iter().map(|&r| (0, r)).collect();
        let sel = g.select_rows(&[out.hidden], &picks)?;
        let logits = self.head(g, mode, sel)?;
        let mask = vec![true; targets.len()];
        let loss = g.cross_entropy(logits, &targets, &mask)?;
        Ok((loss, targets.len()))
    }

    /// Total negative log-likelihood and target count over `seqs`, evaluated
    /// in packed chunks.
    pub fn nll(&self, seqs: &[TokenSequence], chunk: usize) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for part in seqs.chunks(chunk.max(1)) {
            if supervised_targets(part).0.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let (loss, n) = self.loss(&mut g, GradMode::None, part)?;
            total += g.scalar(loss) * n as f64;
            count += n;
        }
        Ok((total, count))
    }

    /// `exp(mean NLL)` over the supervised targets of `seqs`.
    pub fn perplexity(&self, seqs: &[TokenSequence]) -> Result<f64> {
        let (total, count) = self.nll(seqs, 32)?;
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        Ok((total / count as f64).exp())
    }

    /// Greedy continuation with a key/value cache. Stops after `[EOS]` (not
    /// returned) or `max_new` tokens.
    pub fn generate(&self, seq: &TokenSequence, max_new: usize) -> Result<Vec<u32>> {
        self.check_generation(seq, max_new)?;
        let w = InferenceWeights::new(self);
        let mut cache = KvCache::new(self.config.layers);
        let rows = self.input_rows(seq)?;
        let mut logits = Vec::new();
        for (i, (row, t)) in rows.chunks_exact(self.config.d).zip(&seq.tokens).enumerate() {
            logits = w.step(&mut cache, row.to_vec(), t.modality, i);
        }
        let mut out = Vec::new();
        for _ in 0..max_new {
            let next = argmax(&logits);
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() == max_new {
                break;
            }
            let row = self.store.get(self.word).row(next as usize).to_vec();
            let pos = cache.len;
            logits = w.step(&mut cache, row, Modality::Text, pos);
        }
        Ok(out)
    }

    /// Greedy continuation by full recomputation at every step.
    pub fn generate_uncached(&self, seq: &TokenSequence, max_new: usize) -> Result<Vec<u32>> {
        self.check_generation(seq, max_new)?;
        let mut cur = seq.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.forward(&cur)?;
            let next = argmax(logits.row(cur.len() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            cur.push_text(&[next], false);
        }
        Ok(out)
    }

    fn check_generation(&self, seq: &TokenSequence, max_new: usize) -> Result<()> {
        if max_new == 0 {
            return Err(Error::Generation("max_new must be at least 1".into()));
        }
        if seq.is_empty() {
            return Err(Error::Generation("cannot continue an empty prompt".into()));
        }
        self.check_sequence(seq)?;
        let len = seq.len() + max_new;
        if len > self.config.context {
            return Err(Error::Length { len, limit: self.config.context });
        }
        Ok(())
    }

    /// Embedded input rows of one sequence, flattened.
    fn input_rows(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = Binder::new(&self.store, GradMode::None);
        let x = self.embed_batch(&mut g, &b, std::slice::from_ref(seq))?;
        Ok(g.value(x).to_vec())
    }

    /// Dense model with re-parameterization deltas folded into their base
    /// weights. Identity for other variants.
    pub fn merge_deltas(&self) -> Result<Model> {
        if self.config.variant != VariantKind::Rep {
            return Ok(self.clone());
        }
        let mut store = ParamStore::new();
        for (_, name, t) in self.store.iter() {
            if name.ends_with(".delta") {
                continue;
            }
            let mut t = t.clone();
            if let Some(delta) = self.store.by_name(&format!("{name}.delta")) {
                t.data_mut().iter_mut().zip(delta.data()).for_each(|(w, d)| *w += d);
            }
            store.insert(name, t)?;
        }
        Model::from_store(self.config.with_variant(VariantKind::Dense), store, self.provenance.clone())
    }
}

/// Positions whose successor is a supervised text token, with that token as
/// target. Row indices address the packed batch.
pub fn supervised_targets(seqs: &[TokenSequence]) -> (Vec<u32>, Vec<u32>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut base = 0u32;
    for seq in seqs {
        for (i, pair) in seq.tokens.windows(2).enumerate() {
            if let (true, TokenKind::Text(id)) = (pair[1].loss_mask, pair[1].kind) {
                rows.push(base + i as u32);
                targets.push(id);
            }
        }
        base += seq.len() as u32;
    }
    (rows, targets)
}

/// Lowest index among maximal entries.
pub fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Builds a sparse-variant model whose text branch copies the dense base LM
/// and whose vision branch starts as a second copy. The patch embedding is
/// freshly initialized from `seed` and re-parameterization deltas are zero.
pub fn init_vlm_from_base(base: &Model, config: &ModelConfig, seed: u64) -> Result<Model> {
    if base.config.variant != VariantKind::Dense {
        return Err(Error::Config(format!("base model must be dense, got {}", base.config.variant)));
    }
    if !base.config.same_dims(config) {
        return Err(Error::Config(format!("base dims {:?} do not match target dims {:?}", base.config, config)));
    }
    let mut model = Model::new(config.clone(), seed)?;
    let names: Vec<(ParamId, String)> = model.store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in names {
        if ParamGroup::of(&name) == ParamGroup::PatchEmbed {
            continue;
        }
        let t = model.store.get_mut(id);
        if name.ends_with(".delta") {
            t.data_mut().fill(0.0);
            continue;
        }
        let base_name = base_name_of(&name);
        let src = base
            .store
            .by_name(base_name)
            .ok_or_else(|| Error::Config(format!("base model lacks tensor {base_name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Config(format!("tensor {base_name} shape {:?} vs {:?}", src.shape(), t.shape())));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    model.provenance = Provenance { stage: "init_from_base".into(), step: 0, seed };
    Ok(model)
}

/// Name of the dense tensor a (possibly branch-suffixed) name derives from.
pub fn base_name_of(name: &str) -> &str {
    for m in [Modality::Text, Modality::Vision] {
        if let Some(stripped) = name.strip_suffix(&format!(".{}", branch_suffix(m))) {
            return stripped;
        }
    }
    name
}

struct BranchWeights {
    ln1: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    up: Vec<f64>,
    down: Vec<f64>,
}

/// Resolved per-layer, per-modality weights for the cached decode path.
struct InferenceWeights<'m> {
    model: &'m Model,
    layers: Vec<Branched<usize>>,
    resolved: Vec<BranchWeights>,
    head_t: Vec<f64>,
}

impl<'m> InferenceWeights<'m> {
    fn new(model: &'m Model) -> Self {
        let s = &model.store;
        let lin = |l: crate::block::Linear| -> Vec<f64> {
            let mut w = s.get(l.weight).data().to_vec();
            if let Some(d) = l.delta {
                // Same elementwise sum the graph computes.
                w.iter_mut().zip(s.get(d).data()).for_each(|(a, b)| *a += b);
            }
            w
        };
        let mut layers = Vec::new();
        let mut resolved = Vec::new();
        for p in &model.blocks {
            let mut slot = |m: Modality| {
                let norm = |n: &Branched<Norm>| {
                    let n = n.get(m);
                    (s.get(n.gain).data().to_vec(), s.get(n.bias).data().to_vec())
                };
                resolved.push(BranchWeights {
                    ln1: norm(&p.ln1),
                    ln2: norm(&p.ln2),
                    wq: lin(*p.wq.get(m)),
                    wk: lin(*p.wk.get(m)),
                    wv: lin(*p.wv.get(m)),
                    wo: lin(*p.wo.get(m)),
                    up: lin(*p.up.get(m)),
                    down: lin(*p.down.get(m)),
                });
                resolved.len() - 1
            };
            let text = slot(Modality::Text);
            let vision = slot(Modality::Vision);
            layers.push(Branched { text, vision });
        }
        let e = s.get(model.word);
        let (v, d) = (e.rows(), e.cols());
        let mut head_t = vec![0.0; v * d];
        for i in 0..v {
            for j in 0..d {
                head_t[j * v + i] = e.data()[i * d + j];
            }
        }
        InferenceWeights { model, layers, resolved, head_t }
    }

    /// Feeds one input row at position `pos` and returns next-token logits.
    fn step(&self, cache: &mut KvCache, mut x: Vec<f64>, m: Modality, pos: usize) -> Vec<f64> {
        let cfg = &self.model.config;
        let (d, f, heads) = (cfg.d, cfg.d_ff, cfg.n_heads);
        for (l, slots) in self.layers.iter().enumerate() {
            let w = &self.resolved[*slots.get(m)];
            let (n1, _, _) = kernels::layer_norm(&x, &w.ln1.0, &w.ln1.1, cfg.ln_eps);
            let mut q = kernels::matmul(&n1, &w.wq, 1, d, d);
            let mut k = kernels::matmul(&n1, &w.wk, 1, d, d);
            let v = kernels::matmul(&n1, &w.wv, 1, d, d);
            kernels::rope_row(&mut q, pos, heads, cfg.rope_base, 1.0);
            kernels::rope_row(&mut k, pos, heads, cfg.rope_base, 1.0);
            let lc = &mut cache.layers[l];
            lc.keys.extend_from_slice(&k);
            lc.values.extend_from_slice(&v);
            let mut mixed = vec![0.0; d];
            let mut probs = vec![0.0; heads * (pos + 1)];
            kernels::attend_row(&q, &lc.keys, &lc.values, d, heads, pos, &mut mixed, &mut probs);
            let a = kernels::matmul(&mixed, &w.wo, 1, d, d);
            let h: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
            let (n2, _, _) = kernels::layer_norm(&h, &w.ln2.0, &w.ln2.1, cfg.ln_eps);
            let up: Vec<f64> = kernels::matmul(&n2, &w.up, 1, d, f).into_iter().map(kernels::gelu).collect();
            let down = kernels::matmul(&up, &w.down, 1, f, d);
            x = h.iter().zip(&down).map(|(h, y)| h + y).collect();
        }
        cache.len = pos + 1;
        let s = &self.model.store;
        let fnorm = &self.model.final_norm;
        let (y, _, _) = kernels::layer_norm(&x, s.get(fnorm.gain).data(), s.get(fnorm.bias).data(), cfg.ln_eps);
        kernels::matmul(&y, &self.head_t, 1, d, cfg.vocab)
    }
}

struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        KvCache { layers: (0..layers).map(|_| LayerCache { keys: Vec::new(), values: Vec::new() }).collect(), len: 0 }
    }
}
