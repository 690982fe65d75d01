//! Dynamic reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] visits it once in reverse.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::flops;
use crate::kernels;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<u32>,
        mask: Vec<bool>,
        count: usize,
    },
    SelectRows {
        inputs: Vec<Var>,
        picks: Vec<(u32, u32)>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        heads: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph over `f64` tensors. Parameter leaves borrow their
/// storage for the graph's lifetime.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), param_lookup: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Binds a parameter tensor as a leaf. Binding the same id twice returns
    /// the existing leaf, so every use of a parameter accumulates into one
    /// gradient.
    pub fn param(&mut self, id: ParamId, t: &'a Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, requires_grad);
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what} expects a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("add shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![s]), vec![], Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu(a), rg)
    }

    /// Normalizes over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Numeric(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 {
            return dim_err("layer_norm over an empty last axis");
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return dim_err(format!(
                "layer_norm gain/bias shapes {:?}/{:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (y, xhat, inv) = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(y), shape, Op::LayerNorm { x, gain, bias, xhat, inv }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if d == 0 {
            return dim_err("softmax over an empty last axis");
        }
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(d).for_each(kernels::softmax_row);
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(x), rg))
    }

    /// Valid (unpadded) cross-correlation of a `C_in×H×W` input with a
    /// `C_out×C_in×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (c_in, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return dim_err(format!("conv2d input must be C×H×W, got {s:?}")),
        };
        let (c_out, kc, k) = match self.shape(kernel) {
            [o, c, kh, kw] if kh == kw => (*o, *c, *kh),
            s => return dim_err(format!("conv2d kernel must be C_out×C_in×k×k, got {s:?}")),
        };
        if kc != c_in {
            return dim_err(format!("conv2d channel mismatch: input {c_in}, kernel {kc}"));
        }
        if stride == 0 || h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return dim_err(format!(
                "conv2d geometry {h}×{w} with kernel {k} and stride {stride} is not evenly tiled"
            ));
        }
        let h_out = (h - k) / stride + 1;
        let w_out = (w - k) / stride + 1;
        let geom = ConvGeom { c_in, h, w, c_out, k, stride, h_out, w_out };
        let cols = im2col(self.value(x), &geom);
        let ckk = c_in * k * k;
        let p = h_out * w_out;
        flops::record(c_out * ckk * p);
        let out = kernels::matmul_nt(self.value(kernel), &cols, c_out, ckk, p);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Cow::Owned(out), vec![c_out, h_out, w_out], Op::Conv2d { x, kernel, cols, geom }, rg))
    }

    /// Mean negative log-likelihood over the unmasked rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return dim_err(format!(
                "cross_entropy got {} targets and {} mask flags for {n} rows",
                targets.len(),
                mask.len()
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(Error::Vocab { id: targets[r], vocab });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pr = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (p, &l) in pr.iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            total += max + z.ln() - row[t];
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![],
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    /// Builds a matrix whose row `r` is row `picks[r].1` of input
    /// `picks[r].0`. Covers gather, scatter-back, concatenation and sequence
    /// assembly. 1-D inputs are treated as a single row.
    pub fn select_rows(&mut self, inputs: &[Var], picks: &[(u32, u32)]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("select_rows needs at least one input");
        };
        let width = *self.shape(first).last().unwrap_or(&1);
        let mut rows_of = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let w = *s.last().unwrap_or(&1);
            if w != width {
                return dim_err(format!("select_rows width mismatch: {width} vs {w}"));
            }
            rows_of.push(self.value(v).len() / width.max(1));
        }
        let mut out = Vec::with_capacity(picks.len() * width);
        for &(i, r) in picks {
            let (i, r) = (i as usize, r as usize);
            if i >= inputs.len() || r >= rows_of[i] {
                return dim_err(format!("select_rows pick ({i}, {r}) out of range"));
            }
            out.extend_from_slice(&self.value(inputs[i])[r * width..(r + 1) * width]);
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Cow::Owned(out),
            vec![picks.len(), width],
            Op::SelectRows { inputs: inputs.to_vec(), picks: picks.to_vec() },
            rg,
        ))
    }

    /// Rotary embedding on an `n × (heads·head_dim)` matrix, one position
    /// per row.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "rope")?;
        if positions.len() != n {
            return dim_err(format!("rope got {} positions for {n} rows", positions.len()));
        }
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return dim_err(format!("rope needs an even head width, got d={d} heads={heads}"));
        }
        let mut out = self.value(x).to_vec();
        for (row, &p) in out.chunks_exact_mut(d).zip(positions) {
            kernels::rope_row(row, p, heads, base, 1.0);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            vec![n, d],
            Op::Rope { x, positions: positions.to_vec(), heads, base },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed sequences. `segments`
    /// lists the length of each packed sequence; attention never crosses a
    /// segment boundary.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return dim_err(format!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || d % heads != 0 {
            return dim_err(format!("width {d} not divisible by {heads} heads"));
        }
        if segments.iter().sum::<usize>() != n {
            return dim_err(format!("segments {segments:?} do not cover {n} rows"));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; n * d];
        let prob_len: usize = segments.iter().map(|&s| heads * s * (s + 1) / 2).sum();
        let mut probs = vec![0.0; prob_len];
        let mut start = 0;
        let mut off = 0;
        for &len in segments {
            let ks = &kv[start * d..(start + len) * d];
            let vs = &vv[start * d..(start + len) * d];
            for i in 0..len {
                let row = start + i;
                let span = heads * (i + 1);
                kernels::attend_row(
                    &qv[row * d..(row + 1) * d],
                    ks,
                    vs,
                    d,
                    heads,
                    i,
                    &mut out[row * d..(row + 1) * d],
                    &mut probs[off..off + span],
                );
                off += span;
            }
            start += len;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Cow::Owned(out),
            vec![n, d],
            Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backward_node(idx, &gout, &mut grads);
            // Interior gradients are not kept.
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backward_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let da = kernels::matmul_nt(gout, self.value(*b), m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(buf, self.value(*a), gout, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let buf = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += gout[j * m + i];
                    }
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, gout),
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gout);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gout);
                }
            }
            Op::Scale(a, c) => {
                let g: Vec<f64> = gout.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &g);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let buf = slot(grads, *a, n);
                buf.iter_mut().for_each(|v| *v += gout[0]);
            }
            Op::Gelu(a) => {
                let g: Vec<f64> =
                    self.value(*a).iter().zip(gout).map(|(&x, &go)| go * kernels::gelu_grad(x)).collect();
                accumulate(grads, *a, &g);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain);
                let rows = xhat.len() / d;
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let go = gout[r * d + j];
                            dg[j] += go * xhat[r * d + j];
                            db[j] += go;
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(grads, *gain, &dg);
                    }
                    if self.rg(*bias) {
                        accumulate(grads, *bias, &db);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dxhat[j] = gout[r * d + j] * gv[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv[r] * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Softmax(a) => {
                let d = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), gor) in g.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(gout.chunks_exact(d)) {
                    let dotp: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] = yr[j] * (gor[j] - dotp);
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::Conv2d { x, kernel, cols, geom } => {
                let ckk = geom.c_in * geom.k * geom.k;
                let p = geom.h_out * geom.w_out;
                if self.rg(*kernel) {
                    // dK[c_out×ckk] = dOut[c_out×p] · cols[p×ckk]
                    let dk = kernels::matmul(gout, cols, geom.c_out, p, ckk);
                    accumulate(grads, *kernel, &dk);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; p * ckk];
                    kernels::matmul_tn_acc(&mut dcols, gout, self.value(*kernel), geom.c_out, p, ckk);
                    let buf = slot(grads, *x, geom.c_in * geom.h * geom.w);
                    col2im_acc(buf, &dcols, geom);
                }
            }
            Op::CrossEntropy { logits, probs, targets, mask, count } => {
                let vocab = self.shape(*logits)[1];
                let scale = gout[0] / *count as f64;
                let mut g = vec![0.0; probs.len()];
                for r in 0..mask.len() {
                    if !mask[r] {
                        continue;
                    }
                    let gr = &mut g[r * vocab..(r + 1) * vocab];
                    let pr = &probs[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        gr[j] = pr[j] * scale;
                    }
                    gr[targets[r] as usize] -= scale;
                }
                accumulate(grads, *logits, &g);
            }
            Op::SelectRows { inputs, picks } => {
                let width = node.shape[1];
                for (r, &(i, src)) in picks.iter().enumerate() {
                    let v = inputs[i as usize];
                    if !self.rg(v) {
                        continue;
                    }
                    let n = self.value(v).len();
                    let buf = slot(grads, v, n);
                    let dst = &mut buf[src as usize * width..(src as usize + 1) * width];
                    for (d, &g) in dst.iter_mut().zip(&gout[r * width..(r + 1) * width]) {
                        *d += g;
                    }
                }
            }
            Op::Rope { x, positions, heads, base } => {
                let d = node.shape[1];
                let mut g = gout.to_vec();
                for (row, &p) in g.chunks_exact_mut(d).zip(positions) {
                    kernels::rope_row(row, p, *heads, *base, -1.0);
                }
                accumulate(grads, *x, &g);
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let d = node.shape[1];
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    gout,
                    probs,
                    d,
                    *heads,
                    segments,
                );
                if self.rg(*q) {
                    accumulate(grads, *q, &dq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, &dk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, &dv);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ckk = g.c_in * g.k * g.k;
    let mut cols = vec![0.0; g.h_out * g.w_out * ckk];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let dst = &mut cols[(oy * g.w_out + ox) * ckk..(oy * g.w_out + ox + 1) * ckk];
            let mut t = 0;
            for c in 0..g.c_in {
                for ky in 0..g.k {
                    let src = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                    dst[t..t + g.k].copy_from_slice(&x[src..src + g.k]);
                    t += g.k;
                }
            }
        }
    }
    cols
}

fn col2im_acc(dx: &mut [f64], dcols: &[f64], g: &ConvGeom) {
    let ckk = g.c_in * g.k * g.k;
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let src = &dcols[(oy * g.w_out + ox) * ckk..(oy * g.w_out + ox + 1) * ckk];
            let mut t = 0;
            for c in 0..g.c_in {
                for ky in 0..g.k {
                    let dst = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.k {
                        dx[dst + kx] += src[t + kx];
                    }
                    t += g.k;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gout: &[f64],
    probs: &[f64],
    d: usize,
    heads: usize,
    segments: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = Vec::new();
    let mut start = 0;
    let mut off = 0;
    for &len in segments {
        for i in 0..len {
            let row = start + i;
            let n = i + 1;
            for h in 0..heads {
                let p = &probs[off + h * n..off + (h + 1) * n];
                let go = &gout[row * d + h * hd..row * d + (h + 1) * hd];
                ds.clear();
                ds.resize(n, 0.0);
                let mut weighted = 0.0;
                for j in 0..n {
                    let col = (start + j) * d + h * hd;
                    let dp = kernels::dot(go, &v[col..col + hd]);
                    ds[j] = dp;
                    weighted += p[j] * dp;
                    for (dvx, &g) in dv[col..col + hd].iter_mut().zip(go) {
                        *dvx += p[j] * g;
                    }
                }
                let qi = &q[row * d + h * hd..row * d + (h + 1) * hd];
                for j in 0..n {
                    let s = p[j] * (ds[j] - weighted) * scale;
                    let col = (start + j) * d + h * hd;
                    for t in 0..hd {
                        dq[row * d + h * hd + t] += s * k[col + t];
                        dk[col + t] += s * qi[t];
                    }
                }
            }
            off += heads * n;
        }
        start += len;
    }
    (dq, dk, dv)
}

/// Gradients produced by [`Graph::backward`]. Only leaves that require
/// gradients retain an accumulator.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the bound parameters, in binding order. Parameters that
    /// were bound without `requires_grad` or never reached are omitted.
    pub fn param_grads(self) -> Vec<(ParamId, Vec<f64>)> {
        let mut grads = self.grads;
        self.params
            .into_iter()
            .filter_map(|(id, v)| grads[v.0].take().map(|g| (id, g)))
            .collect()
    }
}
