//! Central finite-difference checks of the autodiff primitives and of a full
//! block forward pass. Each check returns `(label, relative error)` pairs.

#![allow(dead_code)]

use dac_vlm::block::{block_forward, BlockDims, BlockParams, RandomInit, SeqContext, VariantKind};
use dac_vlm::patch_embed::Modality;
use dac_vlm::{Binder, GradMode, Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub type Errors = Vec<(String, f64)>;

/// Projects an arbitrary output onto a fixed random direction so every
/// output element contributes to the scalar being differentiated.
fn project<'a>(g: &mut Graph<'a>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let flat = g.reshape(y, &[1, n])?;
    let w = g.constant(Tensor::randn(&[n, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD)));
    let s = g.matmul(flat, w)?;
    Ok(g.sum(s))
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, absolute when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a) + norm(n);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

type Build<'f> = &'f dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>;

fn check(name: &str, inputs: &[Tensor], seed: u64, f: Build, out: &mut Errors) {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let y = f(&mut g, &vs).unwrap();
        let s = project(&mut g, y, seed).unwrap();
        g.scalar(s)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vs).unwrap();
    let s = project(&mut g, y, seed).unwrap();
    let grads = g.backward(s).unwrap();
    for (i, (&v, t)) in vs.iter().zip(inputs).enumerate() {
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * H);
        }
        out.push((format!("{name}[{i}] seed {seed}"), rel_err(&analytic, &numeric)));
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn matmul_and_transpose(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    check("matmul", &[randn(&[m, k], rng), randn(&[k, n], rng)], seed, &|g, v| g.matmul(v[0], v[1]), &mut e);
    check("transpose", &[randn(&[m, k], rng)], seed, &|g, v| g.transpose(v[0]), &mut e);
    e
}

pub fn elementwise(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let a = randn(&[3, 4], rng);
    let b = randn(&[3, 4], rng);
    check("add", &[a.clone(), b], seed, &|g, v| g.add(v[0], v[1]), &mut e);
    check("add_self", &[a.clone()], seed, &|g, v| g.add(v[0], v[0]), &mut e);
    check("scale", &[a.clone()], seed, &|g, v| Ok(g.scale(v[0], -1.7)), &mut e);
    check("sum", &[a.clone()], seed, &|g, v| Ok(g.sum(v[0])), &mut e);
    check("reshape", &[a.clone()], seed, &|g, v| g.reshape(v[0], &[2, 6]), &mut e);
    check("gelu", &[a], seed, &|g, v| Ok(g.gelu(v[0])), &mut e);
    e
}

pub fn normalizers(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let inputs = [randn(&[3, 5], rng), randn(&[5], rng), randn(&[5], rng)];
    check("layer_norm", &inputs, seed, &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &mut e);
    check("softmax", &[randn(&[3, 5], rng)], seed, &|g, v| g.softmax(v[0]), &mut e);
    e
}

pub fn conv2d(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let (k, stride) = if seed % 2 == 0 { (2, 2) } else { (3, 1) };
    let inputs = [randn(&[2, 6, 6], rng), randn(&[3, 2, k, k], rng)];
    check("conv2d", &inputs, seed, &|g, v| g.conv2d(v[0], v[1], stride), &mut e);
    e
}

pub fn cross_entropy(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let targets: Vec<u32> = (0..4).map(|_| rng.random_range(0..6)).collect();
    let mut mask: Vec<bool> = (0..4).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    check("cross_entropy", &[randn(&[4, 6], rng)], seed, &|g, v| g.cross_entropy(v[0], &targets, &mask), &mut e);
    e
}

pub fn select_rows(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    // Repeated picks exercise gradient accumulation.
    let picks: Vec<(u32, u32)> = (0..6).map(|_| (rng.random_range(0..2), rng.random_range(0..3))).collect();
    let inputs = [randn(&[3, 4], rng), randn(&[3, 4], rng)];
    check("select_rows", &inputs, seed, &|g, v| g.select_rows(&v[..2], &picks), &mut e);
    e
}

pub fn rope(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let positions: Vec<usize> = (0..4).map(|_| rng.random_range(0..50)).collect();
    check("rope", &[randn(&[4, 8], rng)], seed, &|g, v| g.rope(v[0], &positions, 2, 10_000.0), &mut e);
    e
}

pub fn attention(seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut e = Errors::new();
    let segments = if seed % 2 == 0 { vec![5] } else { vec![2, 3] };
    let inputs = [randn(&[5, 8], rng), randn(&[5, 8], rng), randn(&[5, 8], rng)];
    check("attention", &inputs, seed, &|g, v| g.causal_attention(v[0], v[1], v[2], 2, &segments), &mut e);
    e
}

pub fn all_primitives(seed: u64) -> Errors {
    let mut e = matmul_and_transpose(seed);
    e.extend(elementwise(seed));
    e.extend(normalizers(seed));
    e.extend(conv2d(seed));
    e.extend(cross_entropy(seed));
    e.extend(select_rows(seed));
    e.extend(rope(seed));
    e.extend(attention(seed));
    e
}

const DIMS: BlockDims = BlockDims { d: 8, d_ff: 16, n_heads: 2 };

fn block_scalar(store: &ParamStore, p: &BlockParams, x: &Tensor, ctx: &SeqContext, seed: u64) -> f64 {
    let mut g = Graph::new();
    let b = Binder::new(store, GradMode::None);
    let xv = g.constant(x.clone());
    let y = block_forward(&mut g, &b, xv, ctx, p).unwrap();
    let s = project(&mut g, y, seed).unwrap();
    g.scalar(s)
}

/// Input and per-parameter gradients of a randomized block on a mixed
/// vision/text sequence.
pub fn block(kind: VariantKind, seed: u64) -> Errors {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = BlockParams::build(&mut store, "layers.0", kind, DIMS, &mut RandomInit(&mut *rng)).unwrap();
    // Non-trivial gains, biases and deltas.
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.5, rng);
    }
    let modalities: Vec<Modality> =
        (0..5).map(|i| if i % 3 == 1 { Modality::Text } else { Modality::Vision }).collect();
    let ctx = SeqContext::single(&modalities);
    let x = randn(&[modalities.len(), DIMS.d], rng);

    let mut g = Graph::new();
    let b = Binder::new(&store, GradMode::All);
    let xv = g.leaf(x.clone(), true);
    let y = block_forward(&mut g, &b, xv, &ctx, &p).unwrap();
    let s = project(&mut g, y, seed).unwrap();
    let grads = g.backward(s).unwrap();
    let dx = grads.get(xv).unwrap().to_vec();
    let mut analytic: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
    for (id, gv) in grads.param_grads() {
        analytic[id.0] = gv;
    }

    let mut e = Errors::new();
    let mut numeric = vec![0.0; x.numel()];
    for (j, slot) in numeric.iter_mut().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[j] += H;
        let up = block_scalar(&store, &p, &xp, &ctx, seed);
        xp.data_mut()[j] -= 2.0 * H;
        let down = block_scalar(&store, &p, &xp, &ctx, seed);
        *slot = (up - down) / (2.0 * H);
    }
    e.push((format!("block {kind:?} input seed {seed}"), rel_err(&dx, &numeric)));

    for &id in &ids {
        let mut numeric = vec![0.0; store.get(id).numel()];
        let mut s2 = store.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = s2.get(id).data()[j];
            s2.get_mut(id).data_mut()[j] = orig + H;
            let up = block_scalar(&s2, &p, &x, &ctx, seed);
            s2.get_mut(id).data_mut()[j] = orig - H;
            let down = block_scalar(&s2, &p, &x, &ctx, seed);
            s2.get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * H);
        }
        e.push((format!("block {kind:?} {} seed {seed}", store.name(id)), rel_err(&analytic[id.0], &numeric)));
    }
    e
}

pub fn assert_within(errors: &Errors) {
    for (label, err) in errors {
        assert!(*err <= TOL, "{label}: relative error {err:.3e}");
    }
}
