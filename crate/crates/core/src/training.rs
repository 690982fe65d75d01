//! Staged training: freeze masks, warmup plus cosine schedule, seeded data
//! mixing, and per-step metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::block::VariantKind;
use crate::error::{Error, Result};
use crate::model::{init_vlm_from_base, Model, ModelConfig, ParamGroup, Provenance};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::params::GradMode;
use crate::patch_embed::{canvas_for_token_cap, TokenSequence};
use crate::synth::{Sample, SampleKind};
use crate::tokenizer::{Tokenizer, BOS, EOS};

pub const CLIP_NORM: f64 = 1.0;
pub const WARMUP_RATIO: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Stage {
    S1,
    S2_1,
    S2_2,
    S3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::S1, Stage::S2_1, Stage::S2_2, Stage::S3];

    pub fn id(self) -> &'static str {
        match self {
            Stage::S1 => "1",
            Stage::S2_1 => "2.1",
            Stage::S2_2 => "2.2",
            Stage::S3 => "3",
        }
    }

    pub fn peak_lr(self) -> f64 {
        match self {
            Stage::S1 => 2e-4,
            Stage::S2_1 => 1e-4,
            Stage::S2_2 => 2e-5,
            Stage::S3 => 1e-5,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.id() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}; expected one of 1, 2.1, 2.2, 3")))
    }
}

impl TryFrom<String> for Stage {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Stage> for String {
    fn from(s: Stage) -> String {
        s.id().to_string()
    }
}

/// Parameter groups that may change during a stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn allows(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }
}

pub fn freeze_mask_for(stage: Stage) -> FreezeMask {
    let groups: &[ParamGroup] = match stage {
        Stage::S1 => &[ParamGroup::PatchEmbed],
        Stage::S2_1 => &[ParamGroup::PatchEmbed, ParamGroup::VisionLayers],
        Stage::S2_2 | Stage::S3 => &ParamGroup::ALL,
    };
    FreezeMask { trainable: groups.iter().copied().collect() }
}

/// Relative weights of the synthesized, language-only and web-style sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRatios {
    pub synthesized: f64,
    pub language: f64,
    pub web: f64,
}

impl MixRatios {
    pub fn new(synthesized: f64, language: f64, web: f64) -> Self {
        MixRatios { synthesized, language, web }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.synthesized, self.language, self.web]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || r.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("mix ratios {r:?} must be non-negative and not all zero")));
        }
        Ok(())
    }
}

impl FromStr for MixRatios {
    type Err = Error;

    /// Parses `x:y:z`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("mix ratios {s:?} are not numbers")))?;
        match parts.as_slice() {
            [x, y, z] => {
                let r = MixRatios::new(*x, *y, *z);
                r.validate()?;
                Ok(r)
            }
            _ => Err(Error::Config(format!("mix ratios {s:?} must have the form x:y:z"))),
        }
    }
}

fn default_probe_size() -> usize {
    64
}

/// One stage of the schedule. Every field is part of the JSON schema;
/// omitted optional fields take the defaults shown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: BTreeSet<ParamGroup>,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub batch: usize,
    pub steps: usize,
    pub mix: MixRatios,
    /// Image-token budget at the start of the stage.
    pub max_image_tokens: usize,
    /// Budget from the stage midpoint on; `None` keeps the start budget.
    #[serde(default)]
    pub max_image_tokens_end: Option<usize>,
    /// Sample kinds the synthesized source cycles through.
    pub synth_kinds: Vec<SampleKind>,
    /// Steps between text-perplexity probes; 0 probes only at the end.
    #[serde(default)]
    pub probe_every: usize,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
}

impl StageConfig {
    /// CPU-scale defaults.
    pub fn desk(stage: Stage) -> Self {
        let steps = match stage {
            Stage::S1 => 500,
            Stage::S2_1 => 2000,
            Stage::S2_2 | Stage::S3 => 1000,
        };
        let synth_kinds = match stage {
            Stage::S1 | Stage::S2_1 => vec![SampleKind::Caption],
            Stage::S2_2 => vec![SampleKind::Qa],
            Stage::S3 => vec![SampleKind::Instruction],
        };
        StageConfig {
            stage,
            trainable: freeze_mask_for(stage).trainable,
            peak_lr: stage.peak_lr(),
            warmup_ratio: WARMUP_RATIO,
            batch: 16,
            steps,
            mix: MixRatios::new(1.0, 0.0, 0.0),
            max_image_tokens: 64,
            max_image_tokens_end: None,
            synth_kinds,
            probe_every: 0,
            probe_size: default_probe_size(),
        }
    }

    /// Batch sizes and image-token budgets of the full-scale schedule.
    pub fn full_scale(stage: Stage) -> Self {
        let (batch, start, end) = match stage {
            Stage::S1 => (1024, 625, None),
            Stage::S2_1 => (1024, 625, Some(2500)),
            Stage::S2_2 | Stage::S3 => (512, 2500, None),
        };
        StageConfig { batch, max_image_tokens: start, max_image_tokens_end: end, ..StageConfig::desk(stage) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!("warmup_ratio {} must lie in (0, 1)", self.warmup_ratio)));
        }
        if self.trainable.is_empty() {
            return Err(Error::Config("trainable must name at least one parameter group".into()));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be finite and non-negative", self.peak_lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.max_image_tokens == 0 || self.max_image_tokens_end == Some(0) {
            return Err(Error::Config("max_image_tokens must be positive".into()));
        }
        if self.synth_kinds.is_empty() || self.synth_kinds.contains(&SampleKind::TextOnly) {
            return Err(Error::Config("synth_kinds must list image-bearing kinds".into()));
        }
        self.mix.validate()
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        FreezeMask { trainable: self.trainable.clone() }
    }

    /// Image-token budget in effect at `step`.
    pub fn image_tokens_at(&self, step: usize) -> usize {
        match self.max_image_tokens_end {
            Some(end) if 2 * step >= self.steps => end,
            _ => self.max_image_tokens,
        }
    }
}

/// Linear warmup from 0 to `peak_lr` over `ceil(warmup_ratio·total)` steps,
/// then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &StageConfig) -> f64 {
    schedule(step, total, cfg.peak_lr, cfg.warmup_ratio)
}

pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).ceil() as usize).max(1)
}

fn schedule(step: usize, total: usize, peak: f64, ratio: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    let warm = warmup_steps(total, ratio);
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Seeded interleaving of several sources. Source choice uses smooth
/// weighted round-robin with seeded initial credit, so every prefix tracks
/// the ratios to within one draw per source; items within a source follow a
/// seeded permutation reshuffled on each pass.
pub struct MixStream {
    weights: Vec<f64>,
    credit: Vec<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl MixStream {
    pub fn new(sizes: &[usize], ratios: &[f64], seed: u64) -> Result<Self> {
        if sizes.len() != ratios.len() || sizes.is_empty() {
            return Err(Error::Config("mix needs one ratio per source".into()));
        }
        let total: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
            return Err(Error::Config(format!("mix ratios {ratios:?} must be non-negative and not all zero")));
        }
        if let Some(i) = (0..sizes.len()).find(|&i| sizes[i] == 0 && ratios[i] > 0.0) {
            return Err(Error::Config(format!("source {i} is empty but has ratio {}", ratios[i])));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = ratios.iter().map(|r| r / total).collect();
        let credit = weights.iter().map(|&w| if w > 0.0 { rng.random::<f64>() * w } else { 0.0 }).collect();
        let orders = sizes
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Ok(MixStream { weights, credit, orders, cursors: vec![0; sizes.len()], rng })
    }
}

impl Iterator for MixStream {
    /// `(source, item index within source)`.
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        for (c, w) in self.credit.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let mut src = 0;
        for i in 1..self.credit.len() {
            if self.credit[i] > self.credit[src] {
                src = i;
            }
        }
        self.credit[src] -= 1.0;
        let order = &mut self.orders[src];
        if self.cursors[src] == order.len() {
            order.shuffle(&mut self.rng);
            self.cursors[src] = 0;
        }
        let item = order[self.cursors[src]];
        self.cursors[src] += 1;
        Some((src, item))
    }
}

/// Convenience wrapper: the first `n` draws of a seeded mix.
pub fn mix_stream(sizes: &[usize], ratios: &[f64], seed: u64, n: usize) -> Result<Vec<(usize, usize)>> {
    Ok(MixStream::new(sizes, ratios, seed)?.take(n).collect())
}

/// Training material shared by all stages.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    /// Image-bearing samples; each stage re-expresses their scenes in its
    /// own sample kinds.
    pub scenes: Vec<Sample>,
    /// Language-only samples.
    pub text: Vec<Sample>,
    /// Held-out language-only samples for the retention probe.
    pub held_out_text: Vec<Sample>,
}

impl TrainData {
    /// Splits samples by whether they carry an image.
    pub fn from_samples(samples: &[Sample], held_out_text: Vec<Sample>) -> Self {
        let (scenes, text) = samples.iter().cloned().partition(Sample::has_image);
        TrainData { scenes, text, held_out_text }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_ppl: Option<f64>,
}

/// Token sequence of a language-only string: `[BOS] text [EOS]`.
pub fn text_sequence(tok: &Tokenizer, text: &str) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(tok.encode(text));
    ids.push(EOS);
    TokenSequence::text(&ids)
}

pub fn probe_sequences(tok: &Tokenizer, samples: &[Sample], n: usize) -> Vec<TokenSequence> {
    samples.iter().take(n).map(|s| text_sequence(tok, &s.target)).collect()
}

/// Trains `model` for one stage. Parameters outside the stage's trainable
/// groups never receive gradients. Optimizer moments start fresh.
///
/// On a non-finite loss or gradient the run stops with a training error and
/// `model` keeps the parameters of the last completed step.
pub fn run_stage(
    model: &mut Model,
    cfg: &StageConfig,
    data: &TrainData,
    seed: u64,
    on_row: &mut dyn FnMut(&MetricRow) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let tok = Tokenizer::new();
    let groups: Vec<ParamGroup> = cfg.trainable.iter().copied().collect();
    let mask = model.group_mask(&groups);
    let mut stream = MixStream::new(
        &[data.scenes.len(), data.text.len(), data.scenes.len()],
        &cfg.mix.as_array(),
        seed,
    )?;
    let probe = probe_sequences(&tok, &data.held_out_text, cfg.probe_size);
    let stage_name = cfg.stage.to_string();
    let context = model.config.context;
    // Every visit to a scene draws a fresh kind and question, so a stage sees
    // many questions per scene rather than one memorizable pair.
    let mut draws = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_E5A1);
    let mut batch_of = |step: usize| -> Result<Vec<TokenSequence>> {
        let canvas = canvas_for_token_cap(cfg.image_tokens_at(step));
        (0..cfg.batch)
            .map(|_| {
                let (src, i) = stream.next().expect("endless stream");
                let draw: u64 = draws.random();
                let sample = match src {
                    0 => {
                        let kind = cfg.synth_kinds[(draw % cfg.synth_kinds.len() as u64) as usize];
                        data.scenes[i].reexpress(kind, draw)?
                    }
                    1 => data.text[i].clone(),
                    _ => data.scenes[i].reexpress(SampleKind::WebCaption, draw)?,
                };
                sample.training_sequence(&tok, canvas, context)
            })
            .collect()
    };
    let lr_fn = |s: usize| lr_at(s, cfg.steps, cfg);
    let log = train_loop(model, &mask, cfg.steps, &lr_fn, &mut batch_of, &stage_name, &probe, cfg.probe_every, on_row)?;
    model.provenance = Provenance { stage: stage_name, step: cfg.steps as u64, seed };
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut Model,
    mask: &[bool],
    steps: usize,
    lr_fn: &dyn Fn(usize) -> f64,
    batch_of: &mut dyn FnMut(usize) -> Result<Vec<TokenSequence>>,
    stage: &str,
    probe: &[TokenSequence],
    probe_every: usize,
    on_row: &mut dyn FnMut(&MetricRow) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = batch_of(step)?;
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let (loss, _) = model.loss(&mut g, GradMode::Only(mask), &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training { step, reason: format!("loss is {value}") });
            }
            (value, g.backward(loss)?.param_grads())
        };
        let grad_norm = clip_global_norm(&mut grads, CLIP_NORM);
        if !grad_norm.is_finite() {
            return Err(Error::Training { step, reason: format!("gradient norm is {grad_norm}") });
        }
        let lr = lr_fn(step);
        opt.step(&mut model.store, &grads, lr);
        let last = step + 1 == steps;
        let probe_now = !probe.is_empty() && (last || (probe_every > 0 && (step + 1) % probe_every == 0));
        let text_ppl = if probe_now { Some(model.perplexity(probe)?) } else { None };
        let row = MetricRow { step, stage: stage.to_string(), loss, lr, grad_norm, text_ppl };
        on_row(&row)?;
        log.push(row);
    }
    Ok(log)
}

/// Result of a multi-stage run.
pub struct PipelineOutput {
    pub model: Model,
    pub stages: Vec<(Stage, Model)>,
    pub metrics: Vec<MetricRow>,
}

/// Builds a `variant` model from the dense `base` and runs the stages in
/// order, each starting from the previous stage's parameters.
pub fn run_pipeline(
    base: &Model,
    variant: VariantKind,
    stages: &[StageConfig],
    data: &TrainData,
    seed: u64,
    on_row: &mut dyn FnMut(&MetricRow) -> Result<()>,
) -> Result<PipelineOutput> {
    if stages.windows(2).any(|w| w[0].stage > w[1].stage) {
        return Err(Error::Config("stage configs must be ordered 1 → 3".into()));
    }
    let mut model = init_vlm_from_base(base, &base.config.with_variant(variant), seed)?;
    let mut metrics = Vec::new();
    let mut out = Vec::new();
    for (i, cfg) in stages.iter().enumerate() {
        let stage_seed = seed.wrapping_add(1 + i as u64);
        metrics.extend(run_stage(&mut model, cfg, data, stage_seed, on_row)?);
        out.push((cfg.stage, model.clone()));
    }
    Ok(PipelineOutput { model, stages: out, metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    #[serde(default)]
    pub probe_every: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { steps: 300, batch: 16, peak_lr: 3e-3, warmup_ratio: WARMUP_RATIO, probe_every: 0 }
    }
}

pub struct Pretrained {
    pub model: Model,
    pub log: Vec<MetricRow>,
    /// Held-out perplexity and friends, for the checkpoint manifest.
    pub metrics: BTreeMap<String, f64>,
}

/// Trains a dense text-only LM on `corpus` with every parameter trainable.
pub fn pretrain_base_lm(
    config: &ModelConfig,
    corpus: &[String],
    held_out: &[String],
    opts: &PretrainOptions,
    seed: u64,
) -> Result<Pretrained> {
    if config.variant != VariantKind::Dense {
        return Err(Error::Config(format!("base LM must be dense, got {}", config.variant)));
    }
    if corpus.is_empty() && opts.steps > 0 {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let tok = Tokenizer::new();
    let mut model = Model::new(config.clone(), seed)?;
    let mask = vec![true; model.store.len()];
    let seqs: Vec<TokenSequence> = corpus.iter().map(|s| text_sequence(&tok, s)).collect();
    let probe: Vec<TokenSequence> = held_out.iter().map(|s| text_sequence(&tok, s)).collect();
    let mut stream = MixStream::new(&[seqs.len().max(1)], &[1.0], seed)?;
    let mut batch_of = |_step: usize| -> Result<Vec<TokenSequence>> {
        Ok((0..opts.batch.max(1)).map(|_| seqs[stream.next().expect("endless").1].clone()).collect())
    };
    let lr_fn = |s: usize| schedule(s, opts.steps, opts.peak_lr, opts.warmup_ratio);
    let log = train_loop(&mut model, &mask, opts.steps, &lr_fn, &mut batch_of, "pretrain", &probe, opts.probe_every, &mut |_| Ok(()))?;
    model.provenance = Provenance { stage: "pretrain".into(), step: opts.steps as u64, seed };
    let mut metrics = BTreeMap::new();
    if !probe.is_empty() {
        metrics.insert("held_out_text_ppl".to_string(), model.perplexity(&probe)?);
    }
    if let Some(last) = log.last() {
        metrics.insert("final_train_loss".to_string(), last.loss);
    }
    Ok(Pretrained { model, log, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, text_only, CorpusSpec};

    #[test]
    fn masks_per_stage() {
        assert_eq!(freeze_mask_for(Stage::S1).trainable, [ParamGroup::PatchEmbed].into());
        assert_eq!(
            freeze_mask_for(Stage::S2_1).trainable,
            [ParamGroup::PatchEmbed, ParamGroup::VisionLayers].into()
        );
        for s in [Stage::S2_2, Stage::S3] {
            assert_eq!(freeze_mask_for(s).trainable.len(), 4);
        }
        assert!(matches!("2.3".parse::<Stage>(), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = StageConfig { steps: 100, ..StageConfig::desk(Stage::S1) };
        assert_eq!(lr_at(0, 100, &cfg), 0.0);
        assert_eq!(warmup_steps(100, 0.03), 3);
        assert_eq!(lr_at(3, 100, &cfg), 2e-4);
        assert!(lr_at(100, 100, &cfg).abs() < 1e-12);
        assert!(lr_at(50, 100, &cfg) < 2e-4);
    }

    #[test]
    fn stage_config_json_round_trip_and_schema() {
        let cfg = StageConfig::full_scale(Stage::S2_1);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"stage\":\"2.1\""));
        let back: StageConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.image_tokens_at(0), 625);
        assert_eq!(cfg.image_tokens_at(cfg.steps - 1), 2500);
        let bad = json.replace("\"batch\"", "\"batchsize\"");
        assert!(serde_json::from_str::<StageConfig>(&bad).unwrap_err().to_string().contains("batchsize"));
        let zero = StageConfig { warmup_ratio: 0.0, ..cfg };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn mix_counts_and_determinism() {
        let draws = mix_stream(&[10, 10, 10], &[1.0, 1.0, 0.0], 3, 10_000).unwrap();
        let count = |s| draws.iter().filter(|d| d.0 == s).count();
        assert!((4900..=5100).contains(&count(0)), "{}", count(0));
        assert_eq!(count(2), 0);
        assert_eq!(draws, mix_stream(&[10, 10, 10], &[1.0, 1.0, 0.0], 3, 10_000).unwrap());
        assert!(mix_stream(&[10, 0, 10], &[1.0, 1.0, 0.0], 3, 1).is_err());
        assert!(mix_stream(&[10, 0, 0], &[1.0, 0.0, 0.0], 3, 100).unwrap().iter().all(|d| d.0 == 0));
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let cfg = ModelConfig { layers: 1, d: 8, d_ff: 16, n_heads: 2, context: 128, d1: 2, ..Default::default() };
        let base = Model::new(cfg.with_variant(VariantKind::Dense), 0).unwrap();
        let mut model = init_vlm_from_base(&base, &cfg, 1).unwrap();
        let before = model.store.clone();
        let samples = generate_corpus(8, 1, &CorpusSpec::default()).unwrap();
        let data = TrainData::from_samples(&samples, vec![]);
        let stage = StageConfig { steps: 0, max_image_tokens: 4, ..StageConfig::desk(Stage::S1) };
        let log = run_stage(&mut model, &stage, &data, 0, &mut |_| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(model.store, before);
        let p = pretrain_base_lm(&cfg.with_variant(VariantKind::Dense), &[text_only(0)], &[], &PretrainOptions { steps: 0, ..Default::default() }, 0).unwrap();
        assert_eq!(p.model.store, Model::new(cfg.with_variant(VariantKind::Dense), 0).unwrap().store);
    }
}
