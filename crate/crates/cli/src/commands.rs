use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use dac_vlm::analysis::{compare_variants, eval_model, text_branch_drift, weight_drift, CompareSetup, DriftGrouping};
use dac_vlm::block::VariantKind;
use dac_vlm::checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_with};
use dac_vlm::model::init_vlm_from_base;
use dac_vlm::synth::{generate_corpus, read_corpus, write_corpus, CorpusSpec, ImageStorage, Sample, SampleKind, Scene};
use dac_vlm::training::{pretrain_base_lm, run_stage, MetricRow, PretrainOptions, Stage, StageConfig, TrainData};
use dac_vlm::{Error, Model, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::ManifestBuilder;
use crate::{CompareArgs, DatagenArgs, DriftArgs, EvalArgs, PretrainArgs, TrainArgs};

pub const THREADS_ENV: &str = "DAC_VLM_THREADS";

/// Seed offset of the held-out language probe, far from corpus seeds.
const HELD_OUT_SEED: u64 = 1_000_000;

/// Validated `DAC_VLM_THREADS`. The numeric code runs on one thread, so any
/// cap of at least one is satisfied; the value is recorded in manifests.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")).into()),
        },
    }
}

/// Layout directories under `out`.
struct Layout {
    root: PathBuf,
    checkpoints: PathBuf,
    metrics: PathBuf,
    reports: PathBuf,
}

impl Layout {
    fn create(out: &Path) -> Result<Self> {
        let l = Layout {
            root: out.to_path_buf(),
            checkpoints: out.join("checkpoints"),
            metrics: out.join("metrics"),
            reports: out.join("reports"),
        };
        for d in [&l.root, &l.checkpoints, &l.metrics, &l.reports] {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(l)
    }
}

fn corpus_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("corpus.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn load_samples(p: &Path) -> Result<(PathBuf, Vec<Sample>)> {
    let file = corpus_file(p);
    let rows = read_corpus(&file)?;
    Ok((file, rows.into_iter().map(|r| r.sample).collect()))
}

fn held_out_text(n: usize) -> Result<Vec<Sample>> {
    Ok((0..n as u64)
        .map(|i| Sample::of_kind(SampleKind::TextOnly, &Scene::default(), HELD_OUT_SEED + i))
        .collect::<dac_vlm::Result<_>>()?)
}

fn parse_kind(s: &str) -> Result<SampleKind> {
    serde_json::from_value(Value::String(s.trim().to_string()))
        .map_err(|_| Error::Usage(format!("unknown sample kind {s:?}")).into())
}

fn parse_kinds(list: &str) -> Result<Vec<SampleKind>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(parse_kind).collect()
}

fn parse_variants(list: &str) -> Result<Vec<VariantKind>> {
    Ok(list.split(',').map(|s| s.trim().parse::<VariantKind>()).collect::<dac_vlm::Result<_>>()?)
}

fn write(path: &Path, body: &str) -> Result<PathBuf> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

pub fn datagen(a: &DatagenArgs, threads: usize) -> Result<()> {
    let mut spec = CorpusSpec { min_objects: a.min_objects, max_objects: a.max_objects, ..CorpusSpec::default() };
    if let Some(k) = &a.kinds {
        spec.kinds = k
            .split(',')
            .map(|part| {
                let (name, w) = part
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("kind weight {part:?} must look like name=weight")))?;
                let w: f64 = w.trim().parse().map_err(|_| Error::Usage(format!("bad weight in {part:?}")))?;
                Ok((parse_kind(name)?, w))
            })
            .collect::<Result<_>>()?;
    }
    if a.canvas == 0 || a.canvas % dac_vlm::patch_embed::PATCH != 0 {
        return Err(Error::Usage(format!("--canvas {} must be a positive multiple of 32", a.canvas)).into());
    }
    if a.min_objects > a.max_objects || a.max_objects > dac_vlm::synth::MAX_OBJECTS {
        return Err(Error::Usage(format!(
            "object counts must satisfy min ≤ max ≤ {}",
            dac_vlm::synth::MAX_OBJECTS
        ))
        .into());
    }
    let config = json!({ "n": a.n, "canvas": a.canvas, "spec": spec, "inline_images": a.inline_images });
    let manifest = ManifestBuilder::new("datagen", config, Some(a.seed), vec![], threads);
    let samples = generate_corpus(a.n, a.seed, &spec)?;
    let storage = if a.inline_images { ImageStorage::InlineHex } else { ImageStorage::Files };
    write_corpus(&a.out, &samples, a.canvas, storage)?;
    let mut outputs = vec![a.out.join("corpus.jsonl")];
    if a.out.join("images").is_dir() {
        outputs.push(a.out.join("images"));
    }
    manifest.finish(&a.out, &outputs)?;
    println!("wrote {} samples to {}", samples.len(), a.out.join("corpus.jsonl").display());
    Ok(())
}

/// Language the base LM reads: every row's text, questions joined to
/// their answers.
fn pretrain_text(samples: &[Sample]) -> Vec<String> {
    samples
        .iter()
        .map(|s| match s.kind {
            SampleKind::Qa | SampleKind::Instruction => format!("{} {}", s.prompt, s.target),
            _ => s.target.clone(),
        })
        .collect()
}

fn metrics_sink(path: &Path) -> Result<impl FnMut(&MetricRow) -> dac_vlm::Result<()>> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let path = path.to_path_buf();
    Ok(move |row: &MetricRow| {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::Io { path: path.clone(), source: e })
    })
}

pub fn pretrain(a: &PretrainArgs, threads: usize) -> Result<()> {
    let model_cfg = ModelConfig {
        layers: a.layers,
        d: a.d,
        d_ff: a.d_ff,
        n_heads: a.heads,
        d1: a.d1,
        context: a.context,
        variant: VariantKind::Dense,
        ..ModelConfig::default()
    };
    model_cfg.validate()?;
    let opts = PretrainOptions { steps: a.steps, batch: a.batch, peak_lr: a.lr, ..PretrainOptions::default() };
    let (corpus_path, samples) = load_samples(&a.corpus)?;
    let held: Vec<String> = held_out_text(a.held_out)?.into_iter().map(|s| s.target).collect();
    let config = json!({ "model": model_cfg, "options": opts, "held_out": a.held_out });
    let manifest = ManifestBuilder::new("pretrain", config, Some(a.seed), vec![corpus_path], threads);
    let layout = Layout::create(&a.out)?;

    let out = pretrain_base_lm(&model_cfg, &pretrain_text(&samples), &held, &opts, a.seed)?;
    let ckpt = layout.checkpoints.join("base.ckpt");
    save_checkpoint_with(&out.model, &out.metrics, &ckpt)?;
    let mut jsonl = String::new();
    for row in &out.log {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    let metrics = write(&layout.metrics.join("pretrain.jsonl"), &jsonl)?;
    let summary = write(&layout.reports.join("pretrain.json"), &serde_json::to_string_pretty(&out.metrics)?)?;
    manifest.finish(&layout.root, &[ckpt.clone(), metrics, summary])?;
    println!("base LM {:?} -> {}", out.metrics, ckpt.display());
    Ok(())
}

/// Training config file. Stages missing from `stages` use desk defaults.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub variant: Option<VariantKind>,
    #[serde(default)]
    pub stages: Vec<StageConfig>,
}

fn read_train_config(path: Option<&Path>) -> Result<(TrainConfig, Vec<PathBuf>)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), vec![]));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for (i, s) in cfg.stages.iter().enumerate() {
        if cfg.stages[..i].iter().any(|o| o.stage == s.stage) {
            return Err(Error::Config(format!("{}: stage {} listed twice", path.display(), s.stage)).into());
        }
    }
    Ok((cfg, vec![path.to_path_buf()]))
}

fn parse_stage_arg(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    Ok(vec![s.parse::<Stage>()?])
}

struct Overrides {
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
}

fn resolve_stages(file: &TrainConfig, stages: &[Stage], o: &Overrides) -> Result<Vec<StageConfig>> {
    stages
        .iter()
        .map(|&stage| {
            let mut cfg = file.stages.iter().find(|c| c.stage == stage).cloned().unwrap_or_else(|| StageConfig::desk(stage));
            if let Some(v) = o.steps {
                cfg.steps = v;
            }
            if let Some(v) = o.batch {
                cfg.batch = v;
            }
            if let Some(v) = o.lr {
                cfg.peak_lr = v;
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Seed of `stage` within a run seeded `seed`; matches the pipeline so a
/// stage-by-stage run reproduces `--stage all`.
fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let i = Stage::ALL.iter().position(|&s| s == stage).expect("known stage") as u64;
    seed.wrapping_add(1 + i)
}

/// Continues from `base` when it is already a staged checkpoint of
/// `variant`, otherwise builds the VLM from the dense base LM.
fn starting_model(base: &Model, variant: VariantKind, seed: u64) -> Result<Model> {
    let staged = base.provenance.stage.parse::<Stage>().is_ok();
    if staged && base.config.variant == variant {
        return Ok(base.clone());
    }
    if staged {
        return Err(Error::Config(format!(
            "checkpoint is a {} stage-{} model; cannot continue it as {variant}",
            base.config.variant, base.provenance.stage
        ))
        .into());
    }
    Ok(init_vlm_from_base(base, &base.config.with_variant(variant), seed)?)
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let stages = parse_stage_arg(&a.stage)?;
    let (file, mut inputs) = read_train_config(a.config.as_deref())?;
    let variant = match &a.variant {
        Some(v) => v.parse::<VariantKind>()?,
        None => file.variant.unwrap_or(VariantKind::Dac),
    };
    let overrides = Overrides { steps: a.steps, batch: a.batch, lr: a.lr };
    let cfgs = resolve_stages(&file, &stages, &overrides)?;
    let (corpus_path, samples) = load_samples(&a.corpus)?;
    inputs.push(corpus_path);
    inputs.push(a.base_ckpt.clone());
    let data = TrainData::from_samples(&samples, held_out_text(a.held_out)?);
    let base = load_checkpoint(&a.base_ckpt)?;
    let mut model = starting_model(&base, variant, a.seed)?;

    let config = json!({
        "variant": variant,
        "stages": cfgs,
        "optimizer_moments": "reset_per_stage",
        "held_out": a.held_out,
        "model": model.config,
    });
    let manifest = ManifestBuilder::new("train", config, Some(a.seed), inputs, threads);
    let layout = Layout::create(&a.out)?;
    let mut outputs = Vec::new();
    for cfg in &cfgs {
        let id = cfg.stage.id();
        let metrics = layout.metrics.join(format!("stage_{id}.jsonl"));
        let mut sink = metrics_sink(&metrics)?;
        outputs.push(metrics);
        match run_stage(&mut model, cfg, &data, stage_seed(a.seed, cfg.stage), &mut sink) {
            Ok(_) => {
                let ckpt = layout.checkpoints.join(format!("stage_{id}.ckpt"));
                save_checkpoint(&model, &ckpt)?;
                println!("stage {id}: {}", ckpt.display());
                outputs.push(ckpt);
            }
            Err(e @ (Error::Training { .. } | Error::Numeric(_))) => {
                let ckpt = layout.checkpoints.join(format!("stage_{id}.last_good.ckpt"));
                save_checkpoint(&model, &ckpt)?;
                outputs.push(ckpt.clone());
                manifest.finish(&layout.root, &outputs)?;
                return Err(anyhow!(e).context(format!("stage {id} aborted; last good checkpoint {}", ckpt.display())));
            }
            Err(e) => return Err(anyhow!(e).context(format!("stage {id}"))),
        }
    }
    manifest.finish(&layout.root, &outputs)?;
    Ok(())
}

pub fn eval(a: &EvalArgs, threads: usize) -> Result<()> {
    let kinds = parse_kinds(&a.kinds)?;
    let (corpus_path, mut samples) = load_samples(&a.corpus)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let model = load_checkpoint(&a.ckpt)?;
    let config = json!({ "kinds": kinds, "canvas": a.canvas, "limit": a.limit });
    let manifest = ManifestBuilder::new("eval", config, None, vec![a.ckpt.clone(), corpus_path], threads);
    let layout = Layout::create(&a.out)?;
    let report = eval_model(&model, &samples, &kinds, a.canvas)?;
    let csv = write(&layout.reports.join("eval.csv"), &report.to_csv())?;
    let jsonl = write(&layout.reports.join("eval.jsonl"), &report.to_jsonl()?)?;
    manifest.finish(&layout.root, &[csv, jsonl])?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn drift(a: &DriftArgs, threads: usize) -> Result<()> {
    let groupings = match a.grouping.as_str() {
        "both" => vec![DriftGrouping::LayerType, DriftGrouping::LayerIndex],
        g => vec![g.parse::<DriftGrouping>()?],
    };
    let before = load_checkpoint(&a.before)?;
    let after = load_checkpoint(&a.after)?;
    let config = json!({ "grouping": a.grouping });
    let manifest = ManifestBuilder::new("drift", config, None, vec![a.before.clone(), a.after.clone()], threads);
    let layout = Layout::create(&a.out)?;
    let mut outputs = Vec::new();
    for g in groupings {
        let report = if before.config.variant == after.config.variant {
            weight_drift(&before, &after, g)?
        } else {
            // A VLM against the dense LM it grew from: compare the text side.
            text_branch_drift(&before, &after, g)?
        };
        outputs.push(write(&layout.reports.join(format!("drift_{g}.csv")), &report.to_csv())?);
        outputs.push(write(&layout.reports.join(format!("drift_{g}.jsonl")), &report.to_jsonl()?)?);
        print!("{}", report.to_csv());
    }
    manifest.finish(&layout.root, &outputs)?;
    Ok(())
}

pub fn compare(a: &CompareArgs, threads: usize) -> Result<()> {
    let variants = parse_variants(&a.variants)?;
    let eval_kinds = parse_kinds(&a.eval_kinds)?;
    let (file, mut inputs) = read_train_config(a.config.as_deref())?;
    let wanted: Vec<Stage> =
        if file.stages.is_empty() { Stage::ALL.to_vec() } else { file.stages.iter().map(|s| s.stage).collect() };
    let stages = resolve_stages(&file, &wanted, &Overrides { steps: None, batch: None, lr: None })?;
    let (corpus_path, samples) = load_samples(&a.corpus)?;
    inputs.push(corpus_path);
    let eval_samples = match &a.eval_corpus {
        Some(p) => {
            let (path, s) = load_samples(p)?;
            inputs.push(path);
            s
        }
        None => samples.clone(),
    };
    let eval_samples: Vec<Sample> = eval_samples.into_iter().take(a.eval_limit).collect();
    inputs.push(a.base_ckpt.clone());
    let base = load_checkpoint(&a.base_ckpt)?;
    let data = TrainData::from_samples(&samples, held_out_text(a.held_out)?);

    let config = json!({
        "variants": variants,
        "stages": stages,
        "eval_kinds": eval_kinds,
        "canvas": a.canvas,
        "eval_limit": a.eval_limit,
        "optimizer_moments": "reset_per_stage",
    });
    let manifest = ManifestBuilder::new("compare", config, Some(a.seed), inputs, threads);
    let layout = Layout::create(&a.out)?;
    let setup = CompareSetup {
        base: &base,
        stages: &stages,
        data: &data,
        eval_samples: &eval_samples,
        eval_kinds: &eval_kinds,
        canvas: a.canvas,
        seed: a.seed,
    };
    let cmp = compare_variants(&variants, &setup)?;
    cmp.write_bundle(&layout.reports)?;
    let mut outputs: Vec<PathBuf> = ["comparison.csv", "comparison.jsonl", "loss_curves.jsonl", "text_drift.csv"]
        .iter()
        .map(|f| layout.reports.join(f))
        .collect();
    for run in &cmp.runs {
        let ckpt = layout.checkpoints.join(format!("{}.ckpt", run.variant));
        save_checkpoint(&run.final_model, &ckpt)?;
        outputs.push(ckpt);
    }
    manifest.finish(&layout.root, &outputs)?;
    print!("{}", std::fs::read_to_string(layout.reports.join("comparison.csv"))?);
    Ok(())
}
