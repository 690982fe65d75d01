//! Image tokenization: resolution policies, the two-convolution patch
//! embedding and the `<CLS>` / `<SPL>` sequence layout.
//!
//! One patch token covers a 32×32 pixel area: a 16×16 stride-16 convolution
//! followed by GELU and a 2×2 stride-2 convolution.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pixels covered by one patch token along each axis.
pub const PATCH: usize = 32;
pub const CONV1_STRIDE: usize = 16;
pub const CONV2_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "v")]
    Vision,
    #[serde(rename = "t")]
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionMode {
    #[serde(rename = "AnyRatio_maxL")]
    AnyRatioMaxL,
    #[serde(rename = "AnyRatio_LD")]
    AnyRatioLd,
    #[serde(rename = "AnyRatio_HD")]
    AnyRatioHd,
    #[serde(rename = "AnyResolution")]
    AnyResolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionLimits {
    pub max_edge: usize,
    pub ld_area: usize,
    pub hd_area: usize,
    pub any_resolution_pixels: usize,
}

impl Default for ResolutionLimits {
    fn default() -> Self {
        ResolutionLimits {
            max_edge: 800,
            ld_area: 800 * 800,
            hd_area: 1600 * 1600,
            any_resolution_pixels: 2_500_000,
        }
    }
}

fn snap_nearest(x: f64) -> usize {
    ((x / PATCH as f64).round() as usize).max(1) * PATCH
}

fn snap_floor(x: f64) -> usize {
    ((x / PATCH as f64).floor() as usize).max(1) * PATCH
}

fn cap_area(h: usize, w: usize, cap: usize) -> (usize, usize) {
    let (hn, wn) = (snap_nearest(h as f64), snap_nearest(w as f64));
    if hn * wn <= cap {
        return (hn, wn);
    }
    let s = (cap as f64 / (h * w) as f64).sqrt().min(1.0);
    let (mut hf, mut wf) = (snap_floor(h as f64 * s), snap_floor(w as f64 * s));
    // Grid-cell clamping can leave the floor one cell over on extreme ratios.
    while hf * wf > cap && (hf > PATCH || wf > PATCH) {
        if hf >= wf {
            hf -= PATCH;
        } else {
            wf -= PATCH;
        }
    }
    (hf, wf)
}

/// Target dimensions (multiples of 32) for an `h × w` source under `mode`.
pub fn resolve_resolution(h: usize, w: usize, mode: ResolutionMode, limits: &ResolutionLimits) -> (usize, usize) {
    let (h, w) = (h.max(1), w.max(1));
    match mode {
        ResolutionMode::AnyRatioMaxL => {
            let s = limits.max_edge as f64 / h.max(w) as f64;
            (snap_nearest(h as f64 * s), snap_nearest(w as f64 * s))
        }
        ResolutionMode::AnyRatioLd => cap_area(h, w, limits.ld_area),
        ResolutionMode::AnyRatioHd => cap_area(h, w, limits.hd_area),
        ResolutionMode::AnyResolution => cap_area(h, w, limits.any_resolution_pixels),
    }
}

/// Largest square canvas side whose patch grid stays within `max_tokens`.
pub fn canvas_for_token_cap(max_tokens: usize) -> usize {
    let side = (max_tokens as f64).sqrt().floor() as usize;
    side.max(1) * PATCH
}

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageInput {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != Self::CHANNELS * height * width {
            return dim_err(format!(
                "image {height}×{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numeric("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageInput { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let mut pixels = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            pixels[c * plane..(c + 1) * plane].iter_mut().for_each(|p| *p = *v);
        }
        ImageInput { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[c * self.height * self.width + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height, self.width);
        self.pixels[c * h * w + y * w + x] = v;
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageInput {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = ImageInput { height, width, pixels: vec![0.0; 3 * height * width] };
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    /// Encodes as binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        out.reserve(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.pixels[c * plane + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Dimension("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Dimension(format!("unsupported PPM magic {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Dimension(format!("bad PPM field {s}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Dimension(format!("unsupported PPM maxval {maxval}")));
        }
        let plane = width * height;
        let body = bytes.get(pos..pos + 3 * plane).ok_or_else(|| Error::Dimension("truncated PPM body".into()))?;
        let mut pixels = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                pixels[c * plane + i] = body[3 * i + c] as f64 / 255.0;
            }
        }
        Ok(ImageInput { height, width, pixels })
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Text(u32),
    Cls,
    Patch { row: usize, col: usize },
    Spl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub modality: Modality,
    pub position: usize,
    /// Whether this token is a supervised next-token target.
    pub loss_mask: bool,
}

/// Interleaved multimodal sequence. Image positions refer to `image`, which
/// the model embeds during its forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub image: Option<ImageInput>,
}

impl TokenSequence {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn text(ids: &[u32]) -> Self {
        let tokens = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Token { kind: TokenKind::Text(id), modality: Modality::Text, position: i, loss_mask: true })
            .collect();
        TokenSequence { tokens, image: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.tokens.iter().map(|t| t.modality).collect()
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .filter_map(|t| match t.kind {
                TokenKind::Text(id) => Some(id),
                _ => None,
            })
            .collect()
    }

    /// Appends text ids as supervised or unsupervised text positions.
    pub fn push_text(&mut self, ids: &[u32], supervised: bool) {
        let start = self.tokens.len();
        self.tokens.extend(ids.iter().enumerate().map(|(i, &id)| Token {
            kind: TokenKind::Text(id),
            modality: Modality::Text,
            position: start + i,
            loss_mask: supervised,
        }));
    }

    pub fn image_token_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.modality == Modality::Vision).count()
    }
}

/// Layout tokens for an `rows × cols` patch grid:
/// `[CLS]` then each row's patches followed by one `[SPL]`.
pub fn image_layout(rows: usize, cols: usize) -> Vec<Token> {
    let mut out = Vec::with_capacity(rows * cols + rows + 1);
    let vision = |kind, position| Token { kind, modality: Modality::Vision, position, loss_mask: false };
    out.push(vision(TokenKind::Cls, 0));
    for r in 0..rows {
        for c in 0..cols {
            out.push(vision(TokenKind::Patch { row: r, col: c }, out.len()));
        }
        out.push(vision(TokenKind::Spl, out.len()));
    }
    out
}

/// Recovers the patch grid `(rows, cols)` from an image segment laid out by
/// [`image_layout`].
pub fn decode_layout(tokens: &[Token]) -> Result<(usize, usize)> {
    let img: Vec<&Token> = tokens.iter().filter(|t| t.modality == Modality::Vision).collect();
    if img.is_empty() {
        return Ok((0, 0));
    }
    if img[0].kind != TokenKind::Cls {
        return dim_err("image segment does not start with CLS");
    }
    let mut rows = 0;
    let mut cols = None;
    let mut run = 0;
    for t in &img[1..] {
        match t.kind {
            TokenKind::Patch { row, col } => {
                if row != rows || col != run {
                    return dim_err(format!("patch ({row}, {col}) out of layout order"));
                }
                run += 1;
            }
            TokenKind::Spl => {
                if run == 0 || cols.is_some_and(|c| c != run) {
                    return dim_err("SPL does not close a full patch row");
                }
                cols = Some(run);
                rows += 1;
                run = 0;
            }
            _ => return dim_err("unexpected token inside image segment"),
        }
    }
    if run != 0 {
        return dim_err("final patch row is missing its SPL");
    }
    Ok((rows, cols.unwrap_or(0)))
}

/// Image segment for `img`, whose dimensions must already be multiples of
/// 32.
pub fn image_sequence(img: ImageInput) -> Result<TokenSequence> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return dim_err(format!("image {h}×{w} is not a multiple of {PATCH} on both axes"));
    }
    Ok(TokenSequence { tokens: image_layout(h / PATCH, w / PATCH), image: Some(img) })
}

/// Places text after the image segment and renumbers positions.
pub fn concat_multimodal(img_seq: TokenSequence, text_ids: &[u32], context_limit: usize) -> Result<TokenSequence> {
    let len = img_seq.len() + text_ids.len();
    if len > context_limit {
        return Err(Error::Length { len, limit: context_limit });
    }
    let mut seq = img_seq;
    for (i, t) in seq.tokens.iter_mut().enumerate() {
        t.position = i;
    }
    seq.push_text(text_ids, true);
    Ok(seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedDims {
    pub d1: usize,
    pub d: usize,
}

/// Parameter handles of the patch embedding layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams {
    pub dims: PatchEmbedDims,
    pub conv1: ParamId,
    pub conv2: ParamId,
    pub cls: ParamId,
    pub spl: ParamId,
}

impl PatchEmbedParams {
    pub const CONV1: &'static str = "patch.conv1";
    pub const CONV2: &'static str = "patch.conv2";
    pub const CLS: &'static str = "patch.cls";
    pub const SPL: &'static str = "patch.spl";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dims: PatchEmbedDims, rng: &mut R) -> Result<Self> {
        let k1 = CONV1_STRIDE;
        let k2 = CONV2_STRIDE;
        let fan1 = (3 * k1 * k1) as f64;
        let fan2 = (dims.d1 * k2 * k2) as f64;
        let conv1 = store.insert(Self::CONV1, Tensor::randn(&[dims.d1, 3, k1, k1], fan1.powf(-0.5), rng))?;
        let conv2 = store.insert(Self::CONV2, Tensor::randn(&[dims.d, dims.d1, k2, k2], fan2.powf(-0.5), rng))?;
        let cls = store.insert(Self::CLS, Tensor::randn(&[dims.d], 0.02, rng))?;
        let spl = store.insert(Self::SPL, Tensor::randn(&[dims.d], 0.02, rng))?;
        Ok(PatchEmbedParams { dims, conv1, conv2, cls, spl })
    }

    pub fn lookup(store: &ParamStore, dims: PatchEmbedDims) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")));
        Ok(PatchEmbedParams { dims, conv1: get(Self::CONV1)?, conv2: get(Self::CONV2)?, cls: get(Self::CLS)?, spl: get(Self::SPL)? })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.conv1, self.conv2, self.cls, self.spl]
    }
}

/// Embeds `img` into `h′·w′ + h′ + 1` rows of width `d` in CLS/SPL layout.
/// Returns the rows and the matching image segment.
pub fn embed_image<'a>(
    g: &mut Graph<'a>,
    binder: &Binder<'a>,
    params: &PatchEmbedParams,
    img: &ImageInput,
) -> Result<(Var, TokenSequence)> {
    let seq = image_sequence(img.clone())?;
    let rows = embed_pixels(g, binder, params, img)?;
    Ok((rows, seq))
}

pub(crate) fn embed_pixels<'a>(
    g: &mut Graph<'a>,
    binder: &Binder<'a>,
    params: &PatchEmbedParams,
    img: &ImageInput,
) -> Result<Var> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return dim_err(format!("image {h}×{w} is not a multiple of {PATCH} on both axes"));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    // Ink intensity: the white background maps to zero so that only drawn
    // content drives the convolutions.
    let ink: Vec<f64> = img.pixels().iter().map(|&v| 1.0 - v).collect();
    let x = g.constant(Tensor::new(vec![3, h, w], ink)?);
    let k1 = binder.bind(g, params.conv1);
    let k2 = binder.bind(g, params.conv2);
    let c1 = g.conv2d(x, k1, CONV1_STRIDE)?;
    let a1 = g.gelu(c1);
    let c2 = g.conv2d(a1, k2, CONV2_STRIDE)?;
    let flat = g.reshape(c2, &[params.dims.d, gh * gw])?;
    let patches = g.transpose(flat)?;
    let cls = binder.bind(g, params.cls);
    let spl = binder.bind(g, params.spl);
    let picks: Vec<(u32, u32)> = image_layout(gh, gw)
        .iter()
        .map(|t| match t.kind {
            TokenKind::Cls => (1, 0),
            TokenKind::Spl => (2, 0),
            TokenKind::Patch { row, col } => (0, (row * gw + col) as u32),
            TokenKind::Text(_) => unreachable!("layout holds only image tokens"),
        })
        .collect();
    g.select_rows(&[patches, cls, spl], &picks)
}
