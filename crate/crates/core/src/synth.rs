//! Seeded shape-scene generator with exactly-derivable captions, questions,
//! instructions and language-only sentences.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_embed::{concat_multimodal, image_sequence, ImageInput, TokenSequence, PATCH};
use crate::tokenizer::{Tokenizer, BOS, EOS};

pub const GRID: usize = 4;
pub const MAX_OBJECTS: usize = 4;
pub const DEFAULT_CANVAS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Shape::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Black,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 8] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange, Color::Black, Color::Cyan];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Black => "black",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 160, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 220, 0],
            Color::Purple => [128, 0, 160],
            Color::Orange => [255, 128, 0],
            Color::Black => [0, 0, 0],
            Color::Cyan => [0, 200, 200],
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Color::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    fn describe(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

/// Up to four solid shapes on a 4×4 cell layout.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>) -> Result<Self> {
        let s = Scene { objects };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::Scene(format!("{} objects exceed the limit of {MAX_OBJECTS}", self.objects.len())));
        }
        let mut cells = HashSet::new();
        for o in &self.objects {
            if o.row >= GRID || o.col >= GRID {
                return Err(Error::Scene(format!("cell ({}, {}) is off the {GRID}×{GRID} grid", o.row, o.col)));
            }
            if !cells.insert((o.row, o.col)) {
                return Err(Error::Scene(format!("two objects share cell ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }

    /// Random scene with between `min` and `max` objects in distinct cells.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, min: usize, max: usize) -> Self {
        let n = rng.random_range(min..=max.min(MAX_OBJECTS));
        let mut cells: Vec<(usize, usize)> = (0..GRID).flat_map(|r| (0..GRID).map(move |c| (r, c))).collect();
        cells.shuffle(rng);
        let objects = cells[..n]
            .iter()
            .map(|&(row, col)| SceneObject {
                shape: *Shape::ALL.choose(rng).expect("non-empty"),
                color: *Color::ALL.choose(rng).expect("non-empty"),
                row,
                col,
            })
            .collect();
        Scene { objects }
    }

    /// Objects in row-major cell order.
    pub fn canonical(&self) -> Vec<SceneObject> {
        let mut v = self.objects.clone();
        v.sort_by_key(|o| (o.row, o.col));
        v
    }

    /// Stable key identifying the scene independently of insertion order.
    pub fn key(&self) -> String {
        caption_of(self)
    }
}

/// Rasterizes the scene on a white `h × w` canvas.
pub fn render(scene: &Scene, h: usize, w: usize) -> Result<ImageInput> {
    scene.validate()?;
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Dimension(format!("canvas {h}×{w} is not a multiple of {PATCH}")));
    }
    let mut img = ImageInput::filled(h, w, [1.0; 3]);
    let (ch, cw) = (h / GRID, w / GRID);
    for o in &scene.objects {
        let (y0, x0) = (o.row * ch, o.col * cw);
        let rgb = o.color.rgb8().map(|v| v as f64 / 255.0);
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                // Cell-relative coordinates in [0, 1].
                let u = (y - y0) as f64 + 0.5;
                let v = (x - x0) as f64 + 0.5;
                let (fy, fx) = (u / ch as f64, v / cw as f64);
                if covers(o.shape, fy, fx) {
                    for (c, val) in rgb.iter().enumerate() {
                        img.set(c, y, x, *val);
                    }
                }
            }
        }
    }
    Ok(img)
}

fn covers(shape: Shape, fy: f64, fx: f64) -> bool {
    const MARGIN: f64 = 0.15;
    match shape {
        Shape::Square => (MARGIN..1.0 - MARGIN).contains(&fy) && (MARGIN..1.0 - MARGIN).contains(&fx),
        Shape::Circle => (fy - 0.5).powi(2) + (fx - 0.5).powi(2) <= 0.35 * 0.35,
        Shape::Triangle => {
            // Apex at top centre, base along the bottom margin.
            if !(MARGIN..1.0 - MARGIN).contains(&fy) {
                return false;
            }
            let t = (fy - MARGIN) / (1.0 - 2.0 * MARGIN);
            (fx - 0.5).abs() <= t * (0.5 - MARGIN)
        }
    }
}

pub fn caption_of(scene: &Scene) -> String {
    let objs = scene.canonical();
    if objs.is_empty() {
        return "an empty canvas".to_string();
    }
    objs.iter()
        .map(|o| format!("a {} at row {} column {}", o.describe(), o.row, o.col))
        .collect::<Vec<_>>()
        .join(" , ")
}

/// Inverse of [`caption_of`].
pub fn parse_caption(text: &str) -> Result<Scene> {
    if text.trim() == "an empty canvas" {
        return Ok(Scene::default());
    }
    let bad = || Error::Scene(format!("unparseable caption: {text}"));
    let mut objects = Vec::new();
    for part in text.split(" , ") {
        let w: Vec<&str> = part.split_whitespace().collect();
        if w.len() != 8 || w[0] != "a" || w[3] != "at" || w[4] != "row" || w[6] != "column" {
            return Err(bad());
        }
        objects.push(SceneObject {
            color: Color::parse(w[1]).ok_or_else(bad)?,
            shape: Shape::parse(w[2]).ok_or_else(bad)?,
            row: w[5].parse().map_err(|_| bad())?,
            col: w[7].parse().map_err(|_| bad())?,
        });
    }
    Scene::new(objects)
}

/// Shapes and colors only, in shuffled order: a noisier, position-free
/// caption standing in for web alt-text.
pub fn web_caption_of(scene: &Scene, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<String> = scene.objects.iter().map(SceneObject::describe).collect();
    parts.shuffle(&mut rng);
    if parts.is_empty() {
        "photo of a canvas".to_string()
    } else {
        format!("photo with {}", parts.join(" , "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    ColorOf,
    CountColor,
    Relative,
}

fn unique_objects(scene: &Scene) -> Vec<SceneObject> {
    scene
        .objects
        .iter()
        .filter(|o| scene.objects.iter().filter(|p| p.color == o.color && p.shape == o.shape).count() == 1)
        .copied()
        .collect()
}

/// Question kinds that have a well-defined answer for `scene`.
pub fn applicable_kinds(scene: &Scene) -> Vec<QaKind> {
    let mut kinds = Vec::new();
    if Shape::ALL.iter().any(|&s| scene.objects.iter().filter(|o| o.shape == s).count() == 1) {
        kinds.push(QaKind::ColorOf);
    }
    if !scene.objects.is_empty() {
        kinds.push(QaKind::CountColor);
    }
    if unique_objects(scene).len() >= 2 {
        kinds.push(QaKind::Relative);
    }
    kinds
}

/// Random question about `scene` with its exact answer.
pub fn qa_of(scene: &Scene, seed: u64) -> Result<(String, String)> {
    let kinds = applicable_kinds(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = *kinds.choose(&mut rng).ok_or_else(|| Error::Generation("no question applies to an empty scene".into()))?;
    qa_of_kind(scene, kind, &mut rng)
}

pub fn qa_of_kind<R: Rng + ?Sized>(scene: &Scene, kind: QaKind, rng: &mut R) -> Result<(String, String)> {
    let question = match kind {
        QaKind::ColorOf => {
            let singles: Vec<Shape> =
                Shape::ALL.into_iter().filter(|&s| scene.objects.iter().filter(|o| o.shape == s).count() == 1).collect();
            let s = singles.choose(rng).ok_or_else(|| Error::Generation("no unique shape to ask about".into()))?;
            format!("what color is the {} ?", s.name())
        }
        QaKind::CountColor => {
            let present: Vec<Color> = scene.objects.iter().map(|o| o.color).collect();
            let color = if present.is_empty() || rng.random_bool(0.25) {
                *Color::ALL.choose(rng).expect("non-empty")
            } else {
                *present.choose(rng).expect("non-empty")
            };
            format!("how many {} shapes are there ?", color.name())
        }
        QaKind::Relative => {
            let uniq = unique_objects(scene);
            if uniq.len() < 2 {
                return Err(Error::Generation("relative questions need two distinguishable objects".into()));
            }
            let picked: Vec<&SceneObject> = uniq.choose_multiple(rng, 2).collect();
            let (a, b) = (picked[0], picked[1]);
            let axis = if a.col != b.col { "left or right" } else { "above or below" };
            format!("is the {} {axis} of the {} ?", a.describe(), b.describe())
        }
    };
    let answer = answer_question(scene, &question)?;
    Ok((question, answer))
}

fn find_object(scene: &Scene, color: &str, shape: &str) -> Result<SceneObject> {
    let (c, s) = (Color::parse(color), Shape::parse(shape));
    let hits: Vec<&SceneObject> = scene.objects.iter().filter(|o| Some(o.color) == c && Some(o.shape) == s).collect();
    match hits.as_slice() {
        [one] => Ok(**one),
        _ => Err(Error::Generation(format!("{color} {shape} does not identify one object"))),
    }
}

/// Answers a templated question from the scene alone.
pub fn answer_question(scene: &Scene, question: &str) -> Result<String> {
    let w: Vec<&str> = question.split_whitespace().collect();
    let bad = || Error::Generation(format!("unrecognized question: {question}"));
    match w.as_slice() {
        ["what", "color", "is", "the", shape, "?"] => {
            let s = Shape::parse(shape).ok_or_else(bad)?;
            let hits: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.shape == s).collect();
            match hits.as_slice() {
                [one] => Ok(one.color.name().to_string()),
                _ => Err(Error::Generation(format!("the scene does not hold exactly one {shape}"))),
            }
        }
        ["how", "many", color, "shapes", "are", "there", "?"] => {
            let c = Color::parse(color).ok_or_else(bad)?;
            Ok(scene.objects.iter().filter(|o| o.color == c).count().to_string())
        }
        ["is", "the", c1, s1, first, "or", _, "of", "the", c2, s2, "?"] => {
            let a = find_object(scene, c1, s1)?;
            let b = find_object(scene, c2, s2)?;
            match *first {
                "left" if a.col != b.col => Ok(if a.col < b.col { "left" } else { "right" }.to_string()),
                "above" if a.row != b.row => Ok(if a.row < b.row { "above" } else { "below" }.to_string()),
                _ => Err(bad()),
            }
        }
        _ => Err(bad()),
    }
}

/// Instruction-format sample: either a detailed-description request or a
/// wrapped question.
pub fn instruction_of(scene: &Scene, seed: u64) -> Result<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if scene.objects.is_empty() || rng.random_bool(0.5) {
        return Ok(("user : describe the image . assistant :".to_string(), caption_of(scene)));
    }
    let (q, a) = qa_of(scene, rng.random())?;
    Ok((format!("user : {q} assistant :"), a))
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

/// Deterministic language-only sentence: true arithmetic or a simple
/// subject-verb-object clause.
pub fn text_only(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        let a = rng.random_range(0..=10);
        let b = rng.random_range(0..=10);
        if rng.random_bool(0.5) {
            format!("{} plus {} equals {}", NUMBER_WORDS[a], NUMBER_WORDS[b], NUMBER_WORDS[a + b])
        } else {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            format!("{} minus {} equals {}", NUMBER_WORDS[hi], NUMBER_WORDS[lo], NUMBER_WORDS[hi - lo])
        }
    } else {
        const DET: [&str; 2] = ["the", "a"];
        const ADJ: [&str; 4] = ["big", "small", "happy", "old"];
        const NOUN: [&str; 8] = ["cat", "dog", "bird", "fish", "tree", "house", "car", "ball"];
        const VERB: [&str; 4] = ["sees", "likes", "chases", "finds"];
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
        let (d1, a1, n1) = (pick(&mut rng, &DET), pick(&mut rng, &ADJ), pick(&mut rng, &NOUN));
        let v = pick(&mut rng, &VERB);
        let (d2, a2, n2) = (pick(&mut rng, &DET), pick(&mut rng, &ADJ), pick(&mut rng, &NOUN));
        format!("{d1} {a1} {n1} {v} {d2} {a2} {n2}")
    }
}

/// Number word value, for checking arithmetic sentences.
pub fn number_value(word: &str) -> Option<usize> {
    NUMBER_WORDS.iter().position(|w| *w == word)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Caption,
    WebCaption,
    Qa,
    Instruction,
    TextOnly,
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SampleKind::Caption => "caption",
            SampleKind::WebCaption => "web_caption",
            SampleKind::Qa => "qa",
            SampleKind::Instruction => "instruction",
            SampleKind::TextOnly => "text_only",
        };
        f.write_str(s)
    }
}

/// One supervised example. Image-bearing kinds carry their scene; the
/// image is rendered at whatever canvas the consumer requests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub kind: SampleKind,
    pub seed: u64,
    pub scene: Option<Scene>,
    pub prompt: String,
    pub target: String,
}

impl Sample {
    /// Builds a sample of `kind` for `scene` (ignored for text-only).
    pub fn of_kind(kind: SampleKind, scene: &Scene, seed: u64) -> Result<Self> {
        let (scene, prompt, target) = match kind {
            SampleKind::Caption => (Some(scene.clone()), "describe the image .".to_string(), caption_of(scene)),
            SampleKind::WebCaption => (Some(scene.clone()), "describe the image .".to_string(), web_caption_of(scene, seed)),
            SampleKind::Qa => {
                let (q, a) = qa_of(scene, seed)?;
                (Some(scene.clone()), q, a)
            }
            SampleKind::Instruction => {
                let (p, t) = instruction_of(scene, seed)?;
                (Some(scene.clone()), p, t)
            }
            SampleKind::TextOnly => (None, String::new(), text_only(seed)),
        };
        Ok(Sample { kind, seed, scene, prompt, target })
    }

    /// Same scene, re-expressed as another kind.
    pub fn reformat(&self, kind: SampleKind) -> Result<Self> {
        let scene = self.scene.clone().unwrap_or_default();
        Sample::of_kind(kind, &scene, self.seed)
    }

    /// Same scene as `kind`, with a new seed picking the question or wording.
    pub fn reexpress(&self, kind: SampleKind, seed: u64) -> Result<Self> {
        let scene = self.scene.clone().unwrap_or_default();
        Sample::of_kind(kind, &scene, seed)
    }

    pub fn has_image(&self) -> bool {
        self.scene.is_some()
    }

    /// Prompt ids as they follow the image segment (`[BOS]` first for
    /// language-only samples).
    pub fn prompt_ids(&self, tok: &Tokenizer) -> Vec<u32> {
        let mut ids = Vec::new();
        if self.scene.is_none() {
            ids.push(BOS);
        }
        ids.extend(tok.encode(&self.prompt));
        ids
    }

    pub fn target_ids(&self, tok: &Tokenizer) -> Vec<u32> {
        let mut ids = tok.encode(&self.target);
        ids.push(EOS);
        ids
    }

    pub fn render(&self, canvas: usize) -> Result<Option<ImageInput>> {
        self.scene.as_ref().map(|s| render(s, canvas, canvas)).transpose()
    }

    /// Prompt-only sequence for generation.
    pub fn prompt_sequence(&self, tok: &Tokenizer, canvas: usize, context: usize) -> Result<TokenSequence> {
        let img = match self.render(canvas)? {
            Some(img) => image_sequence(img)?,
            None => TokenSequence::empty(),
        };
        concat_multimodal(img, &self.prompt_ids(tok), context)
    }

    /// Full training sequence: image, prompt, target, `[EOS]`. Only the
    /// target and `[EOS]` are supervised.
    pub fn training_sequence(&self, tok: &Tokenizer, canvas: usize, context: usize) -> Result<TokenSequence> {
        let mut ids = self.prompt_ids(tok);
        let prompt_len = ids.len();
        ids.extend(self.target_ids(tok));
        let img = match self.render(canvas)? {
            Some(img) => image_sequence(img)?,
            None => TokenSequence::empty(),
        };
        let mut seq = concat_multimodal(img, &ids, context)?;
        let start = seq.len() - ids.len();
        for t in &mut seq.tokens[start..start + prompt_len] {
            t.loss_mask = false;
        }
        Ok(seq)
    }
}

/// Mix of sample kinds for corpus generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kinds: Vec<(SampleKind, f64)>,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            kinds: vec![
                (SampleKind::Caption, 0.3),
                (SampleKind::Qa, 0.3),
                (SampleKind::Instruction, 0.2),
                (SampleKind::TextOnly, 0.2),
            ],
            min_objects: 1,
            max_objects: MAX_OBJECTS,
        }
    }
}

/// Deterministic corpus: sample `i` depends only on `(seed, i)`.
pub fn generate_corpus(n: usize, seed: u64, spec: &CorpusSpec) -> Result<Vec<Sample>> {
    let total: f64 = spec.kinds.iter().map(|(_, w)| w).sum();
    if spec.kinds.is_empty() || total <= 0.0 {
        return Err(Error::Config("corpus spec needs at least one kind with positive weight".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut pick = rng.random_range(0.0..total);
            let mut kind = spec.kinds[0].0;
            for &(k, w) in &spec.kinds {
                if pick < w {
                    kind = k;
                    break;
                }
                pick -= w;
            }
            let scene = Scene::random(&mut rng, spec.min_objects.max(usize::from(kind != SampleKind::TextOnly)), spec.max_objects);
            Sample::of_kind(kind, &scene, rng.random())
        })
        .collect()
}

/// Image attachment of a corpus row: a PPM path relative to the corpus file
/// or the PPM bytes inlined as lowercase hex.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Ppm(String),
    PpmHex(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub id: usize,
    #[serde(flatten)]
    pub sample: Sample,
    pub image: Option<ImageRef>,
}

/// How images are written next to a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageStorage {
    /// `images/<id>.ppm` beside the corpus file.
    Files,
    InlineHex,
}

/// Writes `corpus.jsonl` (and `images/` when requested) under `dir`.
pub fn write_corpus(dir: &Path, samples: &[Sample], canvas: usize, storage: ImageStorage) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img_dir = dir.join("images");
    if storage == ImageStorage::Files && samples.iter().any(Sample::has_image) {
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    }
    let path = dir.join("corpus.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (id, s) in samples.iter().enumerate() {
        let image = match s.render(canvas)? {
            None => None,
            Some(img) => Some(match storage {
                ImageStorage::Files => {
                    let rel = format!("images/{id:06}.ppm");
                    let p = dir.join(&rel);
                    std::fs::write(&p, img.to_ppm()).map_err(|e| Error::io(&p, e))?;
                    ImageRef::Ppm(rel)
                }
                ImageStorage::InlineHex => ImageRef::PpmHex(hex::encode(img.to_ppm())),
            }),
        };
        let row = CorpusRow { id, sample: s.clone(), image };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// Loads the image attached to a corpus row.
pub fn load_row_image(corpus_dir: &Path, row: &CorpusRow) -> Result<Option<ImageInput>> {
    match &row.image {
        None => Ok(None),
        Some(ImageRef::Ppm(rel)) => ImageInput::load_ppm(&corpus_dir.join(rel)).map(Some),
        Some(ImageRef::PpmHex(h)) => {
            let bytes = hex::decode(h).map_err(|e| Error::Dimension(format!("bad inline image hex: {e}")))?;
            ImageInput::from_ppm(&bytes).map(Some)
        }
    }
}
