//! Pilot for the staged learnability run: pretrains a toy base LM, runs
//! stages 1 → 3 on a 5k-sample corpus and reports held-out QA exact match.
//!
//! Knobs (env): PILOT_STEPS="s1,s2.1,s2.2,s3", PILOT_LR="..", PILOT_BATCH,
//! PILOT_PRETRAIN_STEPS, PILOT_EVAL.

use std::time::Instant;

use dac_vlm::analysis::eval_model;
use dac_vlm::synth::SampleKind;
use dac_vlm::training::run_pipeline;
use recipe::*;

#[path = "../tests/common/learnability.rs"]
mod recipe;

fn env_list(name: &str, default: &str) -> Vec<f64> {
    std::env::var(name).unwrap_or_else(|_| default.to_string()).split(',').map(|v| v.trim().parse().unwrap()).collect()
}

fn main() -> dac_vlm::Result<()> {
    let t0 = Instant::now();
    let mut recipe = Recipe::default();
    let steps = env_list("PILOT_STEPS", &recipe.steps.map(|s| s.to_string()).join(","));
    let lrs = env_list("PILOT_LR", &recipe.peak_lr.map(|s| s.to_string()).join(","));
    for i in 0..4 {
        recipe.steps[i] = steps[i] as usize;
        recipe.peak_lr[i] = lrs[i];
    }
    if let Ok(b) = std::env::var("PILOT_BATCH") {
        recipe.batch = b.parse().unwrap();
    }
    if let Ok(s) = std::env::var("PILOT_PRETRAIN_STEPS") {
        recipe.pretrain.steps = s.parse().unwrap();
    }
    let n_eval: usize = std::env::var("PILOT_EVAL").map(|v| v.parse().unwrap()).unwrap_or(500);
    println!("recipe {recipe:?}");

    let data = build_data(&recipe)?;
    let base = pretrain(&recipe, &data)?;
    println!("[{:>6.1}s] base LM ready: {:?}", t0.elapsed().as_secs_f64(), base.metrics);

    let t1 = Instant::now();
    let mut last_print = Instant::now();
    let out = run_pipeline(&base.model, recipe.variant, &recipe.stages(), &data.train, recipe.seed, &mut |row| {
        if last_print.elapsed().as_secs_f64() > 10.0 || row.text_ppl.is_some() {
            println!(
                "[{:>6.1}s] stage {} step {} loss {:.4} lr {:.2e} gnorm {:.3} ppl {:?}",
                t0.elapsed().as_secs_f64(),
                row.stage,
                row.step,
                row.loss,
                row.lr,
                row.grad_norm,
                row.text_ppl
            );
            last_print = Instant::now();
        }
        Ok(())
    })?;
    println!("[{:>6.1}s] pipeline done in {:.1}s", t0.elapsed().as_secs_f64(), t1.elapsed().as_secs_f64());
    for (stage, model) in &out.stages {
        let r = eval_model(model, &data.eval[..n_eval.min(100)], &[SampleKind::Qa], recipe.canvas)?;
        println!("after stage {stage}: qa exact match on 100 = {:.3}", r.accuracy(SampleKind::Qa).unwrap());
    }
    let r = eval_model(&out.model, &data.eval[..n_eval], &[SampleKind::Qa], recipe.canvas)?;
    let by_q = per_question_accuracy(&out.model, &data.eval[..n_eval], recipe.canvas)?;
    println!("final qa exact match on {n_eval}: {:.4}  by question type {by_q:?}", r.accuracy(SampleKind::Qa).unwrap());
    println!("[{:>6.1}s] total", t0.elapsed().as_secs_f64());
    let blind = eval_model(&out.model, &mismatched_images(&data.eval[..n_eval]), &[SampleKind::Qa], recipe.canvas)?;
    println!("mismatched-image qa exact match on {n_eval}: {:.4}", blind.accuracy(SampleKind::Qa).unwrap());
    Ok(())
}
