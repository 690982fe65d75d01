//! Modality-aware transformer block and its variant zoo.
//!
//! Every component (both layer norms, the four attention projections, the
//! feed-forward pair) is a [`Branched`] handle. Variants differ only in which
//! components hold distinct text/vision parameters; shared components alias
//! one parameter id for both modalities. Attention scores and value mixing
//! are always computed jointly over all positions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::patch_embed::Modality;
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// All weights shared across modalities.
    Dense,
    /// Dense plus a zero-initialized trainable delta on each feed-forward
    /// weight, mergeable into the base.
    Rep,
    /// Per-modality feed-forward networks only.
    MoeFfn,
    /// Per-modality layer norms only.
    LnOnly,
    /// Per-modality attention projections, layer norms and feed-forward.
    Dac,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] =
        [VariantKind::Dense, VariantKind::Rep, VariantKind::MoeFfn, VariantKind::LnOnly, VariantKind::Dac];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Dense => "dense",
            VariantKind::Rep => "rep",
            VariantKind::MoeFfn => "moe_ffn",
            VariantKind::LnOnly => "ln_only",
            VariantKind::Dac => "dac",
        }
    }

    fn splits_norms(self) -> bool {
        matches!(self, VariantKind::LnOnly | VariantKind::Dac)
    }

    fn splits_attention(self) -> bool {
        matches!(self, VariantKind::Dac)
    }

    fn splits_ffn(self) -> bool {
        matches!(self, VariantKind::MoeFfn | VariantKind::Dac)
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(self, dims: &BlockDims) -> usize {
        let (d, f) = (dims.d, dims.d_ff);
        let attn = 4 * d * d;
        let ffn = 2 * d * f;
        let norms = 4 * d;
        let base = attn + ffn + norms;
        match self {
            VariantKind::Dense => base,
            VariantKind::Rep => base + ffn,
            VariantKind::MoeFfn => base + ffn,
            VariantKind::LnOnly => base + norms,
            VariantKind::Dac => 2 * base,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub d_ff: usize,
    pub n_heads: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config(format!("block dims must be positive: {self:?}")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!("d={} is not divisible by n_heads={}", self.d, self.n_heads)));
        }
        if (self.d / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!("head width {} must be even for rotary embedding", self.d / self.n_heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// A component with one handle per modality. Shared components use the same
/// handle for both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branched<T> {
    pub text: T,
    pub vision: T,
}

impl<T: PartialEq> Branched<T> {
    pub fn shared(v: T) -> Self
    where
        T: Copy,
    {
        Branched { text: v, vision: v }
    }

    pub fn is_shared(&self) -> bool {
        self.text == self.vision
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// `x · (weight + delta)`; `delta` exists only for the re-parameterized
/// variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub delta: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub kind: VariantKind,
    pub dims: BlockDims,
    pub ln1: Branched<Norm>,
    pub ln2: Branched<Norm>,
    pub wq: Branched<Linear>,
    pub wk: Branched<Linear>,
    pub wv: Branched<Linear>,
    pub wo: Branched<Linear>,
    pub up: Branched<Linear>,
    pub down: Branched<Linear>,
}

/// Tensor name suffix of a branch.
pub fn branch_suffix(m: Modality) -> &'static str {
    match m {
        Modality::Text => "t",
        Modality::Vision => "v",
    }
}

/// How each parameter tensor of a block is initialized.
pub trait BlockInit {
    /// Value for the tensor named `name` (`base` is the name without a
    /// branch suffix) with the given shape.
    fn tensor(&mut self, name: &str, base: &str, shape: &[usize], fan_in: usize) -> Result<Tensor>;
}

/// Random initialization: Gaussian weights with std `1/√fan_in`, unit gains,
/// zero biases and zero deltas.
pub struct RandomInit<'r, R: Rng + ?Sized>(pub &'r mut R);

impl<R: Rng + ?Sized> BlockInit for RandomInit<'_, R> {
    fn tensor(&mut self, name: &str, _base: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        Ok(if name.ends_with(".delta") || name.contains(".bias") {
            Tensor::zeros(shape)
        } else if name.contains(".gain") {
            Tensor::full(shape, 1.0)
        } else {
            Tensor::randn(shape, (fan_in as f64).powf(-0.5), self.0)
        })
    }
}

impl BlockParams {
    /// Allocates a block of `kind` under `prefix` (e.g. `layers.0`).
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        kind: VariantKind,
        dims: BlockDims,
        init: &mut dyn BlockInit,
    ) -> Result<Self> {
        dims.validate()?;
        let (d, f) = (dims.d, dims.d_ff);
        let mut branched = |store: &mut ParamStore, base: String, split: bool, shape: &[usize], fan_in: usize| {
            if split {
                let mut ids = [ParamId(0); 2];
                for (slot, m) in ids.iter_mut().zip([Modality::Text, Modality::Vision]) {
                    let name = format!("{base}.{}", branch_suffix(m));
                    *slot = store.insert(name.clone(), init.tensor(&name, &base, shape, fan_in)?)?;
                }
                Ok::<_, Error>(Branched { text: ids[0], vision: ids[1] })
            } else {
                let t = init.tensor(&base, &base, shape, fan_in)?;
                Ok(Branched::shared(store.insert(base, t)?))
            }
        };
        let mut norm = |store: &mut ParamStore, which: &str| -> Result<Branched<Norm>> {
            let split = kind.splits_norms();
            let gain = branched(store, format!("{prefix}.{which}.gain"), split, &[d], d)?;
            let bias = branched(store, format!("{prefix}.{which}.bias"), split, &[d], d)?;
            Ok(Branched {
                text: Norm { gain: gain.text, bias: bias.text },
                vision: Norm { gain: gain.vision, bias: bias.vision },
            })
        };
        let ln1 = norm(store, "ln1")?;
        let ln2 = norm(store, "ln2")?;

        let mut linears = Vec::with_capacity(6);
        let specs: [(&str, bool, [usize; 2]); 6] = [
            ("attn.wq", kind.splits_attention(), [d, d]),
            ("attn.wk", kind.splits_attention(), [d, d]),
            ("attn.wv", kind.splits_attention(), [d, d]),
            ("attn.wo", kind.splits_attention(), [d, d]),
            ("ffn.up", kind.splits_ffn(), [d, f]),
            ("ffn.down", kind.splits_ffn(), [f, d]),
        ];
        for (name, split, shape) in specs {
            let base = format!("{prefix}.{name}");
            let w = branched(store, base.clone(), split, &shape, shape[0])?;
            let delta = if kind == VariantKind::Rep && name.starts_with("ffn.") {
                Some(branched(store, format!("{base}.delta"), false, &shape, shape[0])?.text)
            } else {
                None
            };
            linears.push(Branched {
                text: Linear { weight: w.text, delta },
                vision: Linear { weight: w.vision, delta },
            });
        }
        Ok(BlockParams {
            kind,
            dims,
            ln1,
            ln2,
            wq: linears[0],
            wk: linears[1],
            wv: linears[2],
            wo: linears[3],
            up: linears[4],
            down: linears[5],
        })
    }

    /// Looks up an existing block of `kind` in `store` by name.
    pub fn lookup(store: &ParamStore, prefix: &str, kind: VariantKind, dims: BlockDims) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut shapes = ShapeOnly;
        let template = BlockParams::build(&mut scratch, prefix, kind, dims, &mut shapes)?;
        let remap = |id: ParamId| -> Result<ParamId> {
            let name = scratch.name(id);
            let found = store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if store.get(found).shape() != scratch.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    store.get(found).shape(),
                    scratch.get(id).shape()
                )));
            }
            Ok(found)
        };
        template.try_map_ids(remap)
    }

    fn try_map_ids(&self, f: impl Fn(ParamId) -> Result<ParamId>) -> Result<Self> {
        let norm = |b: &Branched<Norm>| -> Result<Branched<Norm>> {
            Ok(Branched {
                text: Norm { gain: f(b.text.gain)?, bias: f(b.text.bias)? },
                vision: Norm { gain: f(b.vision.gain)?, bias: f(b.vision.bias)? },
            })
        };
        let lin = |b: &Branched<Linear>| -> Result<Branched<Linear>> {
            let one = |l: &Linear| -> Result<Linear> {
                Ok(Linear { weight: f(l.weight)?, delta: l.delta.map(&f).transpose()? })
            };
            Ok(Branched { text: one(&b.text)?, vision: one(&b.vision)? })
        };
        Ok(BlockParams {
            kind: self.kind,
            dims: self.dims,
            ln1: norm(&self.ln1)?,
            ln2: norm(&self.ln2)?,
            wq: lin(&self.wq)?,
            wk: lin(&self.wk)?,
            wv: lin(&self.wv)?,
            wo: lin(&self.wo)?,
            up: lin(&self.up)?,
            down: lin(&self.down)?,
        })
    }

    /// Every distinct parameter id of the block.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for n in [&self.ln1, &self.ln2] {
            out.extend([n.text.gain, n.text.bias, n.vision.gain, n.vision.bias]);
        }
        for l in [&self.wq, &self.wk, &self.wv, &self.wo, &self.up, &self.down] {
            out.extend([l.text.weight, l.vision.weight]);
            out.extend(l.text.delta);
            out.extend(l.vision.delta);
        }
        out.sort();
        out.dedup();
        out
    }

    /// Number of scalars held by the block (aliased tensors counted once).
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.ids().iter().map(|&id| store.get(id).numel()).sum()
    }
}

struct ShapeOnly;

impl BlockInit for ShapeOnly {
    fn tensor(&mut self, _name: &str, _base: &str, shape: &[usize], _fan_in: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(shape))
    }
}

/// Per-modality partition of sequence positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub text: Vec<u32>,
    pub vision: Vec<u32>,
    len: usize,
}

/// Splits positions by modality tag, preserving order within each group.
pub fn route(ids: &[Modality]) -> Route {
    let mut text = Vec::new();
    let mut vision = Vec::new();
    for (i, m) in ids.iter().enumerate() {
        match m {
            Modality::Text => text.push(i as u32),
            Modality::Vision => vision.push(i as u32),
        }
    }
    Route { text, vision, len: ids.len() }
}

impl Route {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn group(&self, m: Modality) -> &[u32] {
        match m {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
        }
    }

    /// `(group, row)` picks that scatter `[text_rows, vision_rows]` back into
    /// sequence order.
    pub fn scatter_picks(&self) -> Vec<(u32, u32)> {
        let mut picks = vec![(0, 0); self.len];
        for (r, &i) in self.text.iter().enumerate() {
            picks[i as usize] = (0, r as u32);
        }
        for (r, &i) in self.vision.iter().enumerate() {
            picks[i as usize] = (1, r as u32);
        }
        picks
    }
}

/// Per-batch sequence metadata shared by every layer.
#[derive(Clone, Debug)]
pub struct SeqContext {
    pub route: Route,
    /// Rotary position of each row (restarts at 0 in each packed sequence).
    pub positions: Vec<usize>,
    /// Lengths of the packed sequences.
    pub segments: Vec<usize>,
    pub rope_base: f64,
    pub ln_eps: f64,
}

impl SeqContext {
    pub fn single(ids: &[Modality]) -> Self {
        SeqContext {
            route: route(ids),
            positions: (0..ids.len()).collect(),
            segments: vec![ids.len()],
            rope_base: DEFAULT_ROPE_BASE,
            ln_eps: DEFAULT_LN_EPS,
        }
    }

    pub fn packed(seqs: &[Vec<Modality>]) -> Self {
        let flat: Vec<Modality> = seqs.iter().flatten().copied().collect();
        SeqContext {
            route: route(&flat),
            positions: seqs.iter().flat_map(|s| 0..s.len()).collect(),
            segments: seqs.iter().map(Vec::len).collect(),
            rope_base: DEFAULT_ROPE_BASE,
            ln_eps: DEFAULT_LN_EPS,
        }
    }
}

/// Applies `f` to each modality's rows with that modality's handle and
/// restores sequence order. Shared handles run once over all rows.
pub fn routed<'a, T: PartialEq + Copy>(
    g: &mut Graph<'a>,
    route: &Route,
    x: Var,
    branch: &Branched<T>,
    mut f: impl FnMut(&mut Graph<'a>, Var, T) -> Result<Var>,
) -> Result<Var> {
    if branch.is_shared() || route.vision.is_empty() {
        return f(g, x, branch.text);
    }
    if route.text.is_empty() {
        return f(g, x, branch.vision);
    }
    let gather = |idx: &[u32]| idx.iter().map(|&i| (0u32, i)).collect::<Vec<_>>();
    let xt = g.select_rows(&[x], &gather(&route.text))?;
    let xv = g.select_rows(&[x], &gather(&route.vision))?;
    let yt = f(g, xt, branch.text)?;
    let yv = f(g, xv, branch.vision)?;
    g.select_rows(&[yt, yv], &route.scatter_picks())
}

pub(crate) fn linear_weight<'a>(g: &mut Graph<'a>, b: &Binder<'a>, l: Linear) -> Result<Var> {
    let w = b.bind(g, l.weight);
    match l.delta {
        Some(delta) => {
            let dv = b.bind(g, delta);
            g.add(w, dv)
        }
        None => Ok(w),
    }
}

fn routed_linear<'a>(g: &mut Graph<'a>, b: &Binder<'a>, route: &Route, x: Var, w: &Branched<Linear>) -> Result<Var> {
    routed(g, route, x, w, |g, xs, l| {
        let wv = linear_weight(g, b, l)?;
        g.matmul(xs, wv)
    })
}

pub(crate) fn routed_norm<'a>(
    g: &mut Graph<'a>,
    b: &Binder<'a>,
    route: &Route,
    x: Var,
    n: &Branched<Norm>,
    eps: f64,
) -> Result<Var> {
    routed(g, route, x, n, |g, xs, norm| {
        let gain = b.bind(g, norm.gain);
        let bias = b.bind(g, norm.bias);
        g.layer_norm(xs, gain, bias, eps)
    })
}

fn check_rows(g: &Graph<'_>, x: Var, ctx: &SeqContext, d: usize) -> Result<()> {
    let shape = g.shape(x);
    if shape != [ctx.route.len(), d] {
        return dim_err(format!(
            "input shape {shape:?} does not match {} modality ids of width {d}",
            ctx.route.len()
        ));
    }
    if ctx.positions.len() != ctx.route.len() {
        return dim_err("positions and modality ids differ in length");
    }
    Ok(())
}

/// Causal multi-head attention with per-position projection branches and a
/// single joint attention map.
pub fn attention_forward<'a>(
    g: &mut Graph<'a>,
    b: &Binder<'a>,
    x: Var,
    ctx: &SeqContext,
    p: &BlockParams,
) -> Result<Var> {
    check_rows(g, x, ctx, p.dims.d)?;
    let q = routed_linear(g, b, &ctx.route, x, &p.wq)?;
    let k = routed_linear(g, b, &ctx.route, x, &p.wk)?;
    let v = routed_linear(g, b, &ctx.route, x, &p.wv)?;
    let q = g.rope(q, &ctx.positions, p.dims.n_heads, ctx.rope_base)?;
    let k = g.rope(k, &ctx.positions, p.dims.n_heads, ctx.rope_base)?;
    let mixed = g.causal_attention(q, k, v, p.dims.n_heads, &ctx.segments)?;
    routed_linear(g, b, &ctx.route, mixed, &p.wo)
}

pub fn ffn_forward<'a>(g: &mut Graph<'a>, b: &Binder<'a>, x: Var, ctx: &SeqContext, p: &BlockParams) -> Result<Var> {
    if p.up.is_shared() && p.down.is_shared() {
        let up = routed_linear(g, b, &ctx.route, x, &p.up)?;
        let act = g.gelu(up);
        return routed_linear(g, b, &ctx.route, act, &p.down);
    }
    let pair = Branched { text: (p.up.text, p.down.text), vision: (p.up.vision, p.down.vision) };
    routed(g, &ctx.route, x, &pair, |g, xs, (up, down)| {
        let wu = linear_weight(g, b, up)?;
        let h = g.matmul(xs, wu)?;
        let a = g.gelu(h);
        let wd = linear_weight(g, b, down)?;
        g.matmul(a, wd)
    })
}

/// Pre-norm residual block: `h = x + ATTN(LN1(x))`, `x′ = h + FFN(LN2(h))`.
pub fn block_forward<'a>(g: &mut Graph<'a>, b: &Binder<'a>, x: Var, ctx: &SeqContext, p: &BlockParams) -> Result<Var> {
    check_rows(g, x, ctx, p.dims.d)?;
    let n1 = routed_norm(g, b, &ctx.route, x, &p.ln1, ctx.ln_eps)?;
    let a = attention_forward(g, b, n1, ctx, p)?;
    let h = g.add(x, a)?;
    let n2 = routed_norm(g, b, &ctx.route, h, &p.ln2, ctx.ln_eps)?;
    let f = ffn_forward(g, b, n2, ctx, p)?;
    g.add(h, f)
}

/// Multiply-accumulates executed per token by one block over a causal
/// sequence of length `n`: the four projections, the feed-forward pair, and
/// the score and value-mixing products averaged over positions.
///
/// Modality routing selects which weights a token uses, never how many, so
/// the count is the same for every variant (re-parameterized deltas are
/// merged into their base weights before inference).
pub fn active_flops_per_token(kind: VariantKind, d: usize, d_ff: usize, n: usize, n_heads: usize) -> u64 {
    let _ = (kind, n_heads);
    let (d, d_ff, n) = (d as u64, d_ff as u64, n as u64);
    let projections = 4 * d * d;
    let ffn = 2 * d * d_ff;
    // Σ_{i=1..n} 2·d·i over n tokens.
    let attention = d * (n + 1);
    projections + ffn + attention
}
