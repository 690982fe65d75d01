//! Acceptance suite: one test per criterion, each printing a single
//! `ACn <name>: PASS|FAIL (...)` line. Run with
//! `cargo test -p dac-vlm --test acceptance -- --nocapture --test-threads=1`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use dac_vlm::analysis::{
    eval_model, stack_active_flops_per_token, text_branch_drift, weight_drift, DriftGrouping, DriftReport,
};
use dac_vlm::block::{active_flops_per_token, VariantKind};
use dac_vlm::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use dac_vlm::flops::count_macs;
use dac_vlm::model::{base_name_of, init_vlm_from_base, ParamGroup};
use dac_vlm::patch_embed::{embed_image, ImageInput, PatchEmbedParams, TokenSequence};
use dac_vlm::synth::{generate_corpus, text_only, CorpusSpec, Sample, SampleKind, Scene};
use dac_vlm::tokenizer::Tokenizer;
use dac_vlm::training::{
    lr_at, pretrain_base_lm, probe_sequences, run_pipeline, run_stage, warmup_steps, MetricRow,
    PretrainOptions, Stage, StageConfig, TrainData,
};
use dac_vlm::{Binder, GradMode, Graph, Model, ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "common/fd.rs"]
mod fd;
#[path = "common/learnability.rs"]
mod recipe;

/// Prints the criterion line, then fails the test if the criterion failed.
fn report(id: u8, name: &str, pass: bool, elapsed: Duration, budget: Duration, detail: String) {
    let within = elapsed <= budget;
    let verdict = if pass && within { "PASS" } else { "FAIL" };
    println!(
        "AC{id} {name}: {verdict} ({detail}; {:.1}s of {:.0}s budget)",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(pass, "AC{id} {name} failed: {detail}");
    assert!(within, "AC{id} {name} exceeded its {budget:?} budget: {elapsed:?}");
}

fn small_config(variant: VariantKind) -> ModelConfig {
    ModelConfig { layers: 2, d: 32, d_ff: 64, n_heads: 4, context: 256, variant, d1: 16, ..ModelConfig::default() }
}

fn all_kinds_spec() -> CorpusSpec {
    CorpusSpec {
        kinds: vec![
            (SampleKind::Caption, 1.0),
            (SampleKind::WebCaption, 1.0),
            (SampleKind::Qa, 1.0),
            (SampleKind::Instruction, 1.0),
            (SampleKind::TextOnly, 1.0),
        ],
        ..Default::default()
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn stores_bitwise_equal(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((_, na, ta), (_, nb, tb))| {
            na == nb && ta.shape() == tb.shape() && bits(ta.data()) == bits(tb.data())
        })
}

#[test]
fn ac1_token_count_fidelity() {
    let t = Instant::now();
    let cfg = ModelConfig { d: 16, d1: 8, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let params = PatchEmbedParams::init(&mut store, cfg.patch_dims(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut counts = Vec::new();
    for side in [800, 1600] {
        let img = ImageInput::filled(side, side, [0.5, 0.25, 0.75]);
        let mut g = Graph::new();
        let b = Binder::new(&store, GradMode::None);
        let (rows, seq) = embed_image(&mut g, &b, &params, &img).unwrap();
        let patches = seq.image_token_count() - side / 32 - 1;
        assert_eq!(g.shape(rows)[0], seq.len());
        counts.push(patches);
    }
    report(1, "token_count_fidelity", counts == [625, 2500], t.elapsed(), Duration::from_secs(1), format!("patch tokens {counts:?}"));
}

#[test]
fn ac2_gradient_correctness() {
    let t = Instant::now();
    let mut errors = Vec::new();
    for seed in 0..fd::SEEDS {
        errors.extend(fd::all_primitives(seed));
        errors.extend(fd::block(VariantKind::ALL[seed as usize % VariantKind::ALL.len()], seed));
    }
    let (worst_label, worst) =
        errors.iter().cloned().fold((String::new(), 0.0), |acc, (l, e)| if e > acc.1 { (l, e) } else { acc });
    report(
        2,
        "gradient_correctness",
        worst <= fd::TOL,
        t.elapsed(),
        Duration::from_secs(60),
        format!("{} checks over {} seeds, worst {worst:.2e} at {worst_label}", errors.len(), fd::SEEDS),
    );
}

/// Dense model with every tensor, gains and biases included, drawn at random.
fn randomized_dense(seed: u64) -> Model {
    let mut base = Model::new(small_config(VariantKind::Dense), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let ids: Vec<_> = base.store.ids().collect();
    for id in ids {
        let shape = base.store.get(id).shape().to_vec();
        *base.store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    base
}

#[test]
fn ac3_initialization_equivalence() {
    let t = Instant::now();
    let tok = Tokenizer::new();
    let base = randomized_dense(3);
    let seqs: Vec<_> = generate_corpus(50, 77, &all_kinds_spec())
        .unwrap()
        .iter()
        .map(|s| s.training_sequence(&tok, 64, 256).unwrap())
        .collect();
    assert!(seqs.iter().filter(|s| s.image_token_count() > 0).count() >= 30);
    // The dense reference carries the same fresh patch embedding.
    let reference = init_vlm_from_base(&base, &base.config, 9).unwrap();
    let want: Vec<Tensor> = seqs.iter().map(|s| reference.forward(s).unwrap()).collect();
    let mut worst = BTreeMap::new();
    for kind in [VariantKind::Dac, VariantKind::MoeFfn, VariantKind::LnOnly, VariantKind::Rep] {
        let vlm = init_vlm_from_base(&base, &base.config.with_variant(kind), 9).unwrap();
        let diff = seqs.iter().zip(&want).map(|(s, w)| vlm.forward(s).unwrap().max_abs_diff(w)).fold(0.0, f64::max);
        worst.insert(kind.name(), diff);
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    report(3, "initialization_equivalence", max <= 1e-9, t.elapsed(), Duration::from_secs(30), format!("max abs logit diff {worst:?}"));
}

#[test]
fn ac4_parameter_and_flop_parity() {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let dims = cfg.block_dims();
    let dense_block = VariantKind::Dense.param_count(&dims);
    let dac_block = VariantKind::Dac.param_count(&dims);
    let dense_stack = Model::new(cfg.with_variant(VariantKind::Dense), 0).unwrap().block_param_count();
    let dac_stack = Model::new(cfg.with_variant(VariantKind::Dac), 0).unwrap().block_param_count();
    let params_ok = dac_block == 2 * dense_block && dac_stack == 2 * dense_stack;

    let n = 48;
    let kinds = [VariantKind::Dense, VariantKind::MoeFfn, VariantKind::LnOnly, VariantKind::Dac];
    let formula: Vec<u64> = kinds.iter().map(|&k| active_flops_per_token(k, cfg.d, cfg.d_ff, n, cfg.n_heads)).collect();
    let identical = formula.windows(2).all(|w| w[0] == w[1]);

    let ids: Vec<u32> = (0..n as u32).map(|i| 3 + i % 200).collect();
    let seq = TokenSequence::text(&ids);
    let mut worst_rel: f64 = 0.0;
    for &k in &kinds {
        let kcfg = ModelConfig { layers: 2, ..cfg.with_variant(k) };
        let model = Model::new(kcfg.clone(), 1).unwrap();
        let (_, macs) = count_macs(|| model.forward(&seq).unwrap());
        let measured = macs as f64 / n as f64;
        let expected = stack_active_flops_per_token(&kcfg, n) as f64;
        worst_rel = worst_rel.max((measured - expected).abs() / expected);
    }
    report(
        4,
        "parameter_flop_parity",
        params_ok && identical && worst_rel <= 1e-3,
        t.elapsed(),
        Duration::from_secs(10),
        format!(
            "block params dense {dense_block} dac {dac_block}, stack dense {dense_stack} dac {dac_stack}; \
             flops/token {} identical={identical}; instrumented rel diff {worst_rel:.2e}",
            formula[0]
        ),
    );
}

fn perplexity(model: &Model, probe: &[TokenSequence]) -> f64 {
    model.perplexity(probe).unwrap()
}

#[test]
fn ac5_freezing_and_forgetting() {
    let t = Instant::now();
    let tok = Tokenizer::new();
    let cfg = ModelConfig { layers: 2, d: 48, d_ff: 96, n_heads: 4, context: 128, d1: 16, variant: VariantKind::Dense, ..ModelConfig::default() };
    let sentences: Vec<String> = (0..2000).map(text_only).collect();
    let held_out: Vec<Sample> = (0..64)
        .map(|i| Sample::of_kind(SampleKind::TextOnly, &Scene::default(), 1_000_000 + i).unwrap())
        .collect();
    let held_text: Vec<String> = held_out.iter().map(|s| s.target.clone()).collect();
    let opts = PretrainOptions { steps: 200, batch: 16, peak_lr: 3e-3, ..Default::default() };
    let base = pretrain_base_lm(&cfg, &sentences, &held_text, &opts, 5).unwrap().model;
    let probe = probe_sequences(&tok, &held_out, 64);
    let ppl_base = perplexity(&base, &probe);

    let captions = generate_corpus(1000, 6, &CorpusSpec { kinds: vec![(SampleKind::Caption, 1.0)], ..Default::default() }).unwrap();
    let data = TrainData::from_samples(&captions, held_out.clone());
    let stage = |trainable: &[ParamGroup]| StageConfig {
        steps: 500,
        batch: 8,
        peak_lr: 1e-3,
        max_image_tokens: 4,
        trainable: trainable.iter().copied().collect(),
        ..StageConfig::desk(Stage::S1)
    };

    let mut dac = init_vlm_from_base(&base, &cfg.with_variant(VariantKind::Dac), 7).unwrap();
    run_stage(&mut dac, &stage(&[ParamGroup::PatchEmbed, ParamGroup::VisionLayers]), &data, 8, &mut |_| Ok(())).unwrap();
    let ppl_dac = perplexity(&dac, &probe);
    let drift = text_branch_drift(&base, &dac, DriftGrouping::LayerType).unwrap();
    let text_bitwise = dac.store.iter().filter(|(_, n, _)| {
        !matches!(ParamGroup::of(n), ParamGroup::PatchEmbed | ParamGroup::VisionLayers)
    }).all(|(_, n, tensor)| bits(base.store.by_name(base_name_of(n)).unwrap().data()) == bits(tensor.data()));
    let vision_moved = weight_drift(&init_vlm_from_base(&base, &dac.config, 7).unwrap(), &dac, DriftGrouping::LayerType)
        .unwrap()
        .groups
        .iter()
        .any(|g| g.mean_abs_delta > 0.0);

    let mut dense = init_vlm_from_base(&base, &cfg, 7).unwrap();
    run_stage(&mut dense, &stage(&ParamGroup::ALL), &data, 8, &mut |_| Ok(())).unwrap();
    let ppl_dense = perplexity(&dense, &probe);
    let degradation = ppl_dense / ppl_base - 1.0;

    let pass = ppl_dac.to_bits() == ppl_base.to_bits() && text_bitwise && drift.is_zero() && vision_moved && degradation >= 0.05;
    report(
        5,
        "freezing_forgetting",
        pass,
        t.elapsed(),
        Duration::from_secs(300),
        format!(
            "base ppl {ppl_base:.4}, dac ppl {ppl_dac:.4} (delta {:e}), text bitwise unchanged={text_bitwise}, \
             dense ppl {ppl_dense:.4} (+{:.1}%)",
            ppl_dac - ppl_base,
            100.0 * degradation
        ),
    );
}

#[test]
fn ac6_learnability() {
    let t = Instant::now();
    let r = recipe::Recipe::default();
    let data = recipe::build_data(&r).unwrap();
    let base = recipe::pretrain(&r, &data).unwrap();
    let out = run_pipeline(&base.model, r.variant, &r.stages(), &data.train, r.seed, &mut |_| Ok(())).unwrap();
    let eval = eval_model(&out.model, &data.eval, &[SampleKind::Qa], r.canvas).unwrap();
    let acc = eval.accuracy(SampleKind::Qa).unwrap();
    let blind = eval_model(&out.model, &recipe::mismatched_images(&data.eval), &[SampleKind::Qa], r.canvas).unwrap();
    let blind = blind.accuracy(SampleKind::Qa).unwrap();
    report(
        6,
        "learnability",
        acc >= recipe::QA_THRESHOLD && acc - blind >= recipe::MIN_IMAGE_GAIN,
        t.elapsed(),
        Duration::from_secs(900),
        format!(
            "held-out QA exact match {acc:.4} on {} samples (threshold {}); with mismatched images {blind:.4} (required gain {})",
            data.eval.len(),
            recipe::QA_THRESHOLD,
            recipe::MIN_IMAGE_GAIN
        ),
    );
}

/// Brute-force drift: groups by splitting the name on dots.
fn drift_oracle(before: &ParamStore, after: &ParamStore, grouping: DriftGrouping) -> BTreeMap<String, f64> {
    let key = |name: &str| -> String {
        let parts: Vec<&str> = name.split('.').collect();
        match grouping {
            DriftGrouping::LayerIndex => match parts[0] {
                "layers" => parts[1].to_string(),
                "final_norm" => "final_norm".to_string(),
                _ => "embedding".to_string(),
            },
            DriftGrouping::LayerType => {
                if parts.contains(&"attn") {
                    "attention".into()
                } else if parts.contains(&"ffn") {
                    "ffn".into()
                } else if parts.iter().any(|p| ["ln1", "ln2", "final_norm"].contains(p)) {
                    "norm".into()
                } else {
                    "embedding".into()
                }
            }
        }
    };
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (_, name, a) in before.iter() {
        let b = after.by_name(name).unwrap();
        let e = acc.entry(key(name)).or_default();
        for i in 0..a.numel() {
            e.0 += (b.data()[i] - a.data()[i]).abs();
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn oracle_gap(r: &DriftReport, oracle: &BTreeMap<String, f64>) -> f64 {
    if r.groups.len() != oracle.len() {
        return f64::INFINITY;
    }
    r.groups
        .iter()
        .map(|g| oracle.get(&g.group).map_or(f64::INFINITY, |o| (o - g.mean_abs_delta).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn ac7_drift_oracle_equivalence() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    for seed in 0..5u64 {
        let before = Model::new(small_config(VariantKind::ALL[seed as usize]), seed).unwrap();
        let mut after = before.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let ids: Vec<_> = after.store.ids().collect();
        for id in ids {
            if rng.random_bool(0.6) {
                let scale = 10f64.powi(-rng.random_range(1..6));
                for v in after.store.get_mut(id).data_mut() {
                    *v += scale * rng.random_range(-1.0..1.0);
                }
            }
        }
        let (pa, pb) = (dir.path().join(format!("a{seed}.ckpt")), dir.path().join(format!("b{seed}.ckpt")));
        save_checkpoint(&before, &pa).unwrap();
        save_checkpoint(&after, &pb).unwrap();
        let (before, after) = (load_checkpoint(&pa).unwrap(), load_checkpoint(&pb).unwrap());
        for grouping in [DriftGrouping::LayerIndex, DriftGrouping::LayerType] {
            let r = weight_drift(&before, &after, grouping).unwrap();
            worst = worst.max(oracle_gap(&r, &drift_oracle(&before.store, &after.store, grouping)));
            let same = weight_drift(&before, &before.clone(), grouping).unwrap();
            zero_ok &= same.is_zero() && same.groups.iter().all(|g| g.mean_abs_delta == 0.0);
        }
    }
    report(
        7,
        "drift_oracle_equivalence",
        worst <= 1e-15 && zero_ok,
        t.elapsed(),
        Duration::from_secs(5),
        format!("max |report - oracle| {worst:.1e}, identical checkpoints all-zero={zero_ok}"),
    );
}

#[test]
fn ac8_schedule_fidelity() {
    let t = Instant::now();
    let peaks = [2e-4, 1e-4, 2e-5, 1e-5];
    let mut problems = Vec::new();
    for (stage, peak) in Stage::ALL.into_iter().zip(peaks) {
        let cfg = StageConfig::full_scale(stage);
        if cfg.peak_lr != peak || cfg.warmup_ratio != 0.03 {
            problems.push(format!("stage {stage}: peak {} ratio {}", cfg.peak_lr, cfg.warmup_ratio));
        }
        for total in [10, 100, 1000, 5197] {
            let warm = (0.03 * total as f64).ceil().max(1.0) as usize;
            if warmup_steps(total, cfg.warmup_ratio) != warm {
                problems.push(format!("stage {stage} total {total}: warmup {}", warmup_steps(total, cfg.warmup_ratio)));
            }
            for s in 0..=total {
                let want = if s >= total {
                    0.0
                } else if s < warm {
                    peak * s as f64 / warm as f64
                } else {
                    let p = (s - warm) as f64 / (total - warm) as f64;
                    peak * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
                };
                let got = lr_at(s, total, &cfg);
                if (got - want).abs() > 1e-12 * peak.max(1.0) || got > peak {
                    problems.push(format!("stage {stage} total {total} step {s}: {got} vs {want}"));
                }
            }
            if lr_at(warm, total, &cfg) != peak || lr_at(total, total, &cfg).abs() > 1e-12 {
                problems.push(format!("stage {stage} total {total}: peak or endpoint off"));
            }
        }
    }
    report(
        8,
        "schedule_fidelity",
        problems.is_empty(),
        t.elapsed(),
        Duration::from_secs(1),
        if problems.is_empty() { format!("peaks {peaks:?}, warmup ratio 0.03, endpoint 0") } else { problems[..problems.len().min(3)].join("; ") },
    );
}

fn metric_bits(rows: &[MetricRow]) -> Vec<(usize, String, u64, u64, u64, Option<u64>)> {
    rows.iter()
        .map(|r| (r.step, r.stage.clone(), r.loss.to_bits(), r.lr.to_bits(), r.grad_norm.to_bits(), r.text_ppl.map(f64::to_bits)))
        .collect()
}

#[test]
fn ac9_determinism_and_round_trips() {
    let t = Instant::now();
    let tok = Tokenizer::new();
    let base = randomized_dense(11);
    let samples = generate_corpus(200, 12, &CorpusSpec::default()).unwrap();
    let held_out: Vec<Sample> = samples.iter().filter(|s| s.kind == SampleKind::TextOnly).take(8).cloned().collect();
    let data = TrainData::from_samples(&samples, held_out);
    let stages: Vec<StageConfig> = Stage::ALL
        .iter()
        .map(|&s| StageConfig { steps: 4, batch: 4, max_image_tokens: 4, probe_every: 2, probe_size: 4, peak_lr: 1e-3, ..StageConfig::desk(s) })
        .collect();
    let run = || run_pipeline(&base, VariantKind::Dac, &stages, &data, 13, &mut |_| Ok(())).unwrap();
    let (a, b) = (run(), run());
    let pipeline_same = metric_bits(&a.metrics) == metric_bits(&b.metrics) && stores_bitwise_equal(&a.model.store, &b.model.store);

    let metrics = BTreeMap::from([("loss".to_string(), 0.1 + 0.2)]);
    let bytes = to_bytes(&a.model, &metrics).unwrap();
    let (loaded, manifest) = from_bytes(&bytes).unwrap();
    let checkpoint_same = stores_bitwise_equal(&a.model.store, &loaded.store)
        && loaded.config == a.model.config
        && loaded.provenance == a.model.provenance
        && manifest.metrics.get("loss").map(|v| v.to_bits()) == Some((0.1f64 + 0.2).to_bits())
        && to_bytes(&loaded, &metrics).unwrap() == bytes;

    let mut decode_same = true;
    let mut decoded = 0;
    for kind in VariantKind::ALL {
        let model = init_vlm_from_base(&base, &base.config.with_variant(kind), 14).unwrap();
        for s in samples.iter().take(6) {
            let prompt = s.prompt_sequence(&tok, 64, 256).unwrap();
            let cached = model.generate(&prompt, 12).unwrap();
            decode_same &= cached == model.generate_uncached(&prompt, 12).unwrap();
            decoded += cached.len();
        }
    }
    let mut ids = vec![dac_vlm::tokenizer::BOS];
    ids.extend(tok.encode("one plus two equals"));
    let text = TokenSequence::text(&ids);
    decode_same &= a.model.generate(&text, 8).unwrap() == a.model.generate_uncached(&text, 8).unwrap();

    report(
        9,
        "determinism_round_trips",
        pipeline_same && checkpoint_same && decode_same,
        t.elapsed(),
        Duration::from_secs(120),
        format!(
            "pipeline rerun bitwise={pipeline_same} ({} metric rows), checkpoint bitwise={checkpoint_same} ({} bytes), \
             cached==uncached={decode_same} ({decoded} tokens)",
            a.metrics.len(),
            bytes.len()
        ),
    );
}
