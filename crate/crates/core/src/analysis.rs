//! Weight drift, FLOP accounting, evaluation and variant comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block::{active_flops_per_token, VariantKind};
use crate::error::{Error, Result};
use crate::model::{base_name_of, Model, ModelConfig, ParamGroup};
use crate::params::ParamStore;
use crate::synth::{Sample, SampleKind};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::training::{probe_sequences, run_pipeline, MetricRow, StageConfig, TrainData};

pub const DRIFT_NORMALIZATION: &str = "per_scalar_mean_abs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftGrouping {
    LayerType,
    LayerIndex,
}

impl fmt::Display for DriftGrouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftGrouping::LayerType => "layer_type",
            DriftGrouping::LayerIndex => "layer_index",
        })
    }
}

impl FromStr for DriftGrouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_type" => Ok(DriftGrouping::LayerType),
            "layer_index" => Ok(DriftGrouping::LayerIndex),
            _ => Err(Error::Config(format!("unknown drift grouping {s:?}; expected layer_type or layer_index"))),
        }
    }
}

/// `attention`, `norm`, `ffn` or `embedding`.
pub fn layer_type_of(name: &str) -> &'static str {
    if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains(".ln1.") || name.contains(".ln2.") || name.starts_with("final_norm.") {
        "norm"
    } else {
        "embedding"
    }
}

/// Block index for `layers.{i}.*`; `embedding` and `final_norm` otherwise.
pub fn layer_index_of(name: &str) -> String {
    match name.strip_prefix("layers.").and_then(|r| r.split('.').next()) {
        Some(i) => i.to_string(),
        None if name.starts_with("final_norm.") => "final_norm".to_string(),
        None => "embedding".to_string(),
    }
}

pub fn group_key(name: &str, grouping: DriftGrouping) -> String {
    match grouping {
        DriftGrouping::LayerType => layer_type_of(name).to_string(),
        DriftGrouping::LayerIndex => layer_index_of(name),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftGroup {
    pub group: String,
    pub mean_abs_delta: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub grouping: DriftGrouping,
    pub normalization: String,
    pub before: String,
    pub after: String,
    pub groups: Vec<DriftGroup>,
}

impl DriftReport {
    pub fn get(&self, group: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.group == group).map(|g| g.mean_abs_delta)
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().all(|g| g.mean_abs_delta == 0.0)
    }

    pub const CSV_HEADER: &'static str = "grouping,group,mean_abs_delta,count,normalization,before,after";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for g in &self.groups {
            s.push_str(&format!(
                "{},{},{:e},{},{},{},{}\n",
                self.grouping, g.group, g.mean_abs_delta, g.count, self.normalization, self.before, self.after
            ));
        }
        s
    }

    /// One JSON object per group with the CSV's fields.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for g in &self.groups {
            let row = serde_json::json!({
                "grouping": self.grouping,
                "group": g.group,
                "mean_abs_delta": g.mean_abs_delta,
                "count": g.count,
                "normalization": self.normalization,
                "before": self.before,
                "after": self.after,
            });
            s.push_str(&serde_json::to_string(&row)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Drift over explicit `(name, before, after)` triples.
pub fn drift_of_pairs<'t>(
    pairs: impl IntoIterator<Item = (&'t str, &'t Tensor, &'t Tensor)>,
    grouping: DriftGrouping,
    before: &str,
    after: &str,
) -> Result<DriftReport> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut bad = Vec::new();
    for (name, a, b) in pairs {
        if a.shape() != b.shape() {
            bad.push(format!("{name} {:?} vs {:?}", a.shape(), b.shape()));
            continue;
        }
        let e = sums.entry(group_key(name, grouping)).or_insert((0.0, 0));
        for (x, y) in a.data().iter().zip(b.data()) {
            e.0 += (y - x).abs();
        }
        e.1 += a.numel();
    }
    if !bad.is_empty() {
        return Err(Error::Comparison(format!("shape mismatch: {}", bad.join("; "))));
    }
    let groups = sums
        .into_iter()
        .map(|(group, (sum, count))| DriftGroup {
            group,
            mean_abs_delta: if count == 0 { 0.0 } else { sum / count as f64 },
            count,
        })
        .collect();
    Ok(DriftReport {
        grouping,
        normalization: DRIFT_NORMALIZATION.to_string(),
        before: before.to_string(),
        after: after.to_string(),
        groups,
    })
}

/// Drift between two stores holding the same names and shapes.
pub fn drift_of_stores(before: &ParamStore, after: &ParamStore, grouping: DriftGrouping) -> Result<DriftReport> {
    let missing: Vec<&str> = before
        .iter()
        .filter(|(_, n, _)| after.id(n).is_none())
        .chain(after.iter().filter(|(_, n, _)| before.id(n).is_none()))
        .map(|(_, n, _)| n)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Comparison(format!("tensor names differ: {}", missing.join(", "))));
    }
    let pairs = before.iter().map(|(_, n, t)| (n, t, after.by_name(n).expect("checked")));
    drift_of_pairs(pairs, grouping, "before", "after")
}

fn ident(m: &Model) -> String {
    format!("{}:{}@{}/seed{}", m.config.variant, m.provenance.stage, m.provenance.step, m.provenance.seed)
}

/// Per-scalar mean `|after − before|` grouped by layer index or type.
pub fn weight_drift(before: &Model, after: &Model, grouping: DriftGrouping) -> Result<DriftReport> {
    let mut r = drift_of_stores(&before.store, &after.store, grouping)?;
    r.before = ident(before);
    r.after = ident(after);
    Ok(r)
}

/// Drift of a model's text side against the dense base it was built from:
/// text-branch and shared tensors are matched to base names; vision
/// branches, deltas and the patch embedding are left out.
pub fn text_branch_drift(base: &Model, after: &Model, grouping: DriftGrouping) -> Result<DriftReport> {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for (_, name, t) in after.store.iter() {
        if matches!(ParamGroup::of(name), ParamGroup::PatchEmbed | ParamGroup::VisionLayers) {
            continue;
        }
        let bn = base_name_of(name);
        match base.store.by_name(bn) {
            Some(b) => pairs.push((bn, b, t)),
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Comparison(format!("no base tensor for: {}", missing.join(", "))));
    }
    let mut r = drift_of_pairs(pairs, grouping, &ident(base), &ident(after))?;
    r.after.push_str(":text_branch");
    Ok(r)
}

/// Multiply-accumulates per token of the whole stack on a text sequence of
/// length `n`: every block plus the output head.
pub fn stack_active_flops_per_token(cfg: &ModelConfig, n: usize) -> u64 {
    cfg.layers as u64 * active_flops_per_token(cfg.variant, cfg.d, cfg.d_ff, n, cfg.n_heads)
        + (cfg.d * cfg.vocab) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub kind: SampleKind,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<KindScore>,
    pub text_ppl: Option<f64>,
    pub text_samples: usize,
}

impl EvalReport {
    pub fn accuracy(&self, kind: SampleKind) -> Option<f64> {
        self.scores.iter().find(|s| s.kind == kind).map(|s| s.accuracy)
    }

    pub const CSV_HEADER: &'static str = "kind,metric,value,count";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for k in &self.scores {
            s.push_str(&format!("{},exact_match,{},{}\n", k.kind, k.accuracy, k.total));
        }
        if let Some(p) = self.text_ppl {
            s.push_str(&format!("text_only,perplexity,{p},{}\n", self.text_samples));
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for k in &self.scores {
            let row = serde_json::json!({"kind": k.kind, "metric": "exact_match", "value": k.accuracy, "count": k.total});
            s.push_str(&serde_json::to_string(&row)?);
            s.push('\n');
        }
        if let Some(p) = self.text_ppl {
            let row = serde_json::json!({"kind": "text_only", "metric": "perplexity", "value": p, "count": self.text_samples});
            s.push_str(&serde_json::to_string(&row)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Whether greedy decoding of `sample`'s prompt reproduces its target and
/// then stops.
pub fn exact_match(model: &Model, tok: &Tokenizer, sample: &Sample, canvas: usize) -> Result<bool> {
    let seq = sample.prompt_sequence(tok, canvas, model.config.context)?;
    let target = tok.encode(&sample.target);
    let max_new = (target.len() + 1).min(model.config.context.saturating_sub(seq.len())).max(1);
    Ok(model.generate(&seq, max_new)? == target)
}

/// Exact-match accuracy for each requested image-bearing kind and
/// perplexity over the text-only samples.
pub fn eval_model(model: &Model, samples: &[Sample], kinds: &[SampleKind], canvas: usize) -> Result<EvalReport> {
    let tok = Tokenizer::new();
    let mut scores = Vec::new();
    for &kind in kinds.iter().filter(|k| **k != SampleKind::TextOnly) {
        let subset: Vec<&Sample> = samples.iter().filter(|s| s.kind == kind).collect();
        let mut correct = 0;
        for s in &subset {
            correct += usize::from(exact_match(model, &tok, s, canvas)?);
        }
        let total = subset.len();
        scores.push(KindScore { kind, correct, total, accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 } });
    }
    let text: Vec<Sample> = samples.iter().filter(|s| s.kind == SampleKind::TextOnly).cloned().collect();
    let text_ppl = if kinds.contains(&SampleKind::TextOnly) && !text.is_empty() {
        Some(model.perplexity(&probe_sequences(&tok, &text, text.len()))?)
    } else {
        None
    };
    Ok(EvalReport { scores, text_ppl, text_samples: text.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: VariantKind,
    pub metric: String,
    pub value: f64,
}

pub struct VariantRun {
    pub variant: VariantKind,
    pub metrics: Vec<MetricRow>,
    pub eval: EvalReport,
    pub text_drift: DriftReport,
    pub final_model: Model,
}

pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<VariantRun>,
}

/// Inputs shared by every variant in a comparison.
pub struct CompareSetup<'a> {
    pub base: &'a Model,
    pub stages: &'a [StageConfig],
    pub data: &'a TrainData,
    pub eval_samples: &'a [Sample],
    pub eval_kinds: &'a [SampleKind],
    pub canvas: usize,
    pub seed: u64,
}

/// Trains every variant from the same base, data, stages and seed and
/// tabulates losses, evaluation and text-side drift.
pub fn compare_variants(variants: &[VariantKind], setup: &CompareSetup<'_>) -> Result<Comparison> {
    if variants.is_empty() {
        return Err(Error::Comparison("no variants to compare".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(v) = variants.iter().find(|v| !seen.insert(**v)) {
        return Err(Error::Comparison(format!("variant {v} listed twice")));
    }
    let tok = Tokenizer::new();
    let probe = probe_sequences(&tok, &setup.data.held_out_text, usize::MAX);
    let base_ppl = if probe.is_empty() { None } else { Some(setup.base.perplexity(&probe)?) };
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &variant in variants {
        let out = run_pipeline(setup.base, variant, setup.stages, setup.data, setup.seed, &mut |_| Ok(()))?;
        let eval = eval_model(&out.model, setup.eval_samples, setup.eval_kinds, setup.canvas)?;
        let drift = text_branch_drift(setup.base, &out.model, DriftGrouping::LayerType)?;
        let mut push = |metric: String, value: f64| rows.push(ComparisonRow { variant, metric, value });
        push("params".into(), out.model.param_count() as f64);
        push("block_params".into(), out.model.block_param_count() as f64);
        push("active_macs_per_token_n64".into(), stack_active_flops_per_token(&out.model.config, 64) as f64);
        if let Some(last) = out.metrics.last() {
            push("final_loss".into(), last.loss);
        }
        for s in &eval.scores {
            push(format!("exact_match_{}", s.kind), s.accuracy);
        }
        if let (Some(before), false) = (base_ppl, probe.is_empty()) {
            let after = out.model.perplexity(&probe)?;
            push("text_ppl_base".into(), before);
            push("text_ppl".into(), after);
            push("text_ppl_rel_change".into(), after / before - 1.0);
        }
        for g in &drift.groups {
            push(format!("text_drift_{}", g.group), g.mean_abs_delta);
        }
        runs.push(VariantRun { variant, metrics: out.metrics, eval, text_drift: drift, final_model: out.model });
    }
    Ok(Comparison { rows, runs })
}

impl Comparison {
    /// Writes `comparison.csv`, `comparison.jsonl`, `loss_curves.jsonl` and
    /// `text_drift.csv` under `dir`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("variant,metric,value\n");
        let mut jsonl = String::new();
        for r in &self.rows {
            csv.push_str(&format!("{},{},{}\n", r.variant, r.metric, r.value));
            jsonl.push_str(&serde_json::to_string(r)?);
            jsonl.push('\n');
        }
        let mut curves = String::new();
        let mut drift = String::from("variant,");
        drift.push_str(DriftReport::CSV_HEADER);
        drift.push('\n');
        for run in &self.runs {
            for m in &run.metrics {
                let mut v = serde_json::to_value(m)?;
                v["variant"] = serde_json::Value::String(run.variant.to_string());
                curves.push_str(&serde_json::to_string(&v)?);
                curves.push('\n');
            }
            for line in run.text_drift.to_csv().lines().skip(1) {
                drift.push_str(&format!("{},{line}\n", run.variant));
            }
        }
        for (name, body) in [
            ("comparison.csv", csv),
            ("comparison.jsonl", jsonl),
            ("loss_curves.jsonl", curves),
            ("text_drift.csv", drift),
        ] {
            write_file(&dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: VariantKind) -> ModelConfig {
        ModelConfig { layers: 2, d: 8, d_ff: 16, n_heads: 2, vocab: 30, context: 64, variant, d1: 2, ..Default::default() }
    }

    #[test]
    fn identical_models_have_zero_drift() {
        let m = Model::new(tiny(VariantKind::Dac), 1).unwrap();
        for g in [DriftGrouping::LayerType, DriftGrouping::LayerIndex] {
            let r = weight_drift(&m, &m, g).unwrap();
            assert!(r.is_zero());
            assert_eq!(r.groups.iter().map(|g| g.count).sum::<usize>(), m.param_count());
        }
    }

    #[test]
    fn gain_perturbation_touches_only_norm() {
        let a = Model::new(tiny(VariantKind::Dense), 1).unwrap();
        let mut b = a.clone();
        let id = b.store.id("layers.1.ln2.gain").unwrap();
        b.store.get_mut(id).data_mut()[3] += 0.5;
        let r = weight_drift(&a, &b, DriftGrouping::LayerType).unwrap();
        // Norm scalars: ln1 and ln2 gain and bias per layer plus the final norm.
        let norm_count = 2 * 4 * 8 + 2 * 8;
        assert_eq!(r.groups.iter().find(|g| g.group == "norm").unwrap().count, norm_count);
        assert_eq!(r.get("norm").unwrap(), 0.5 / norm_count as f64);
        for g in ["attention", "ffn", "embedding"] {
            assert_eq!(r.get(g), Some(0.0));
        }
        let by_index = weight_drift(&a, &b, DriftGrouping::LayerIndex).unwrap();
        assert!(by_index.get("1").unwrap() > 0.0);
        assert_eq!(by_index.get("0"), Some(0.0));
        assert_eq!(r.groups, weight_drift(&b, &a, DriftGrouping::LayerType).unwrap().groups);
    }

    #[test]
    fn mismatched_names_are_listed() {
        let a = Model::new(tiny(VariantKind::Dense), 1).unwrap();
        let b = Model::new(tiny(VariantKind::LnOnly), 1).unwrap();
        let err = weight_drift(&a, &b, DriftGrouping::LayerType).unwrap_err();
        assert!(err.to_string().contains("layers.0.ln1.gain"), "{err}");
    }

    #[test]
    fn layer_keys() {
        assert_eq!(layer_type_of("layers.0.attn.wq.v"), "attention");
        assert_eq!(layer_type_of("layers.3.ffn.down.delta"), "ffn");
        assert_eq!(layer_type_of("final_norm.bias"), "norm");
        assert_eq!(layer_type_of("patch.spl"), "embedding");
        assert_eq!(layer_index_of("layers.12.ln1.gain.t"), "12");
        assert_eq!(layer_index_of("embed.word"), "embedding");
    }

    #[test]
    fn csv_has_header_and_one_row_per_group() {
        let m = Model::new(tiny(VariantKind::Dense), 1).unwrap();
        let r = weight_drift(&m, &m, DriftGrouping::LayerType).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with(DriftReport::CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + r.groups.len());
        assert_eq!(r.to_jsonl().unwrap().lines().count(), r.groups.len());
    }
}
