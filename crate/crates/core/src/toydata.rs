//! Procedural sprite corpus with exact masks and captions, a deterministic
//! joint image/text embedder, a token encoder for the denoiser's text input,
//! and the subject-benchmark builder.
//!
//! Every example is a pure function of (seed, id): 1–3 colored shapes on a
//! plain background, a template caption with spatial relations ("a large red
//! square left of a small blue circle"), and per-object masks that match the
//! rendered pixels exactly (an object's mask covers the pixels where it is
//! topmost).

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, Element, Tensor};

// ---------------------------------------------------------------------------
// Vocabulary and geometry
// ---------------------------------------------------------------------------

pub const COLOR_NAMES: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "cyan", "orange", "magenta",
];

/// Sprite colors in [0,1] RGB.
pub const COLOR_RGB: [[f64; 3]; 8] = [
    [1.00, 0.05, 0.05], // red
    [0.05, 0.80, 0.05], // green
    [0.05, 0.05, 1.00], // blue
    [1.00, 1.00, 0.05], // yellow
    [0.60, 0.05, 0.80], // purple
    [0.05, 0.90, 0.90], // cyan
    [1.00, 0.55, 0.05], // orange
    [1.00, 0.05, 0.70], // magenta
];

/// Background colors in [0,1] RGB (neutral so sprites stay distinct).
pub const BG_RGB: [[f64; 3]; 3] = [
    [0.00, 0.00, 0.00],
    [0.45, 0.45, 0.45],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Bar,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Bar];

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Bar => "bar",
        }
    }
    pub fn index(&self) -> usize {
        match self {
            Shape::Square => 0,
            Shape::Circle => 1,
            Shape::Triangle => 2,
            Shape::Bar => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Large,
}

impl SizeBucket {
    pub fn name(&self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Large => "large",
        }
    }
    pub fn index(&self) -> usize {
        match self {
            SizeBucket::Small => 0,
            SizeBucket::Large => 1,
        }
    }
    /// Pixel extent of a shape's bounding box at a given canvas size.
    pub fn extent(&self, canvas: usize) -> usize {
        let small = ((canvas as f64) / 4.0).round().max(3.0) as usize;
        match self {
            SizeBucket::Small => small,
            SizeBucket::Large => ((canvas as f64) * 0.45).round().max((small + 2) as f64) as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: usize,
    pub size_bucket: SizeBucket,
    /// Top-left corner of the shape's bounding box.
    pub x: usize,
    pub y: usize,
}

impl ObjectSpec {
    pub fn extent(&self, canvas: usize) -> usize {
        self.size_bucket.extent(canvas)
    }
    pub fn center(&self, canvas: usize) -> (f64, f64) {
        let e = self.extent(canvas) as f64;
        (self.x as f64 + (e - 1.0) / 2.0, self.y as f64 + (e - 1.0) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub canvas: usize,
    pub background: usize,
    pub objects: Vec<ObjectSpec>,
}

/// Minimum fraction of an object's own pixels that must stay visible
/// (topmost) after later objects are drawn over it.
pub const VISIBILITY_MIN_FRAC: f64 = 0.3;

/// Default corpus resolution.
pub const DEFAULT_IMAGE_SIZE: usize = 16;

/// Pixels covered by a shape with bounding box `e`×`e` at top-left (tx, ty).
/// Bars are `e` wide and `max(1, e/3)` tall, vertically centered in the box.
pub fn shape_pixels(shape: Shape, e: usize, tx: usize, ty: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    match shape {
        Shape::Square => {
            for y in ty..ty + e {
                for x in tx..tx + e {
                    out.push((x, y));
                }
            }
        }
        Shape::Circle => {
            let c = (e as f64 - 1.0) / 2.0;
            let r2 = (e as f64 / 2.0).powi(2);
            for j in 0..e {
                for i in 0..e {
                    let dx = i as f64 - c;
                    let dy = j as f64 - c;
                    if dx * dx + dy * dy <= r2 {
                        out.push((tx + i, ty + j));
                    }
                }
            }
        }
        Shape::Triangle => {
            // Apex at the top, widening linearly to the base; bounding-box
            // fill ratio ~0.5 separates it from circles (~0.77) and squares.
            let cx = (e as f64 - 1.0) / 2.0;
            let narrowing = e as f64 / (e as f64 + 1.0);
            for j in 0..e {
                let hw = (j as f64 + 1.0) / 2.0 * narrowing;
                for i in 0..e {
                    if (i as f64 - cx).abs() <= hw {
                        out.push((tx + i, ty + j));
                    }
                }
            }
        }
        Shape::Bar => {
            let h = (e / 3).max(1);
            let top = ty + (e - h) / 2;
            for y in top..top + h {
                for x in tx..tx + e {
                    out.push((x, y));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Image buffer
// ---------------------------------------------------------------------------

/// Planar RGB image, values in [-1, 1], layout `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; 3 * width * height] }
    }

    /// Uniform fill with a [0,1]-domain color.
    pub fn filled(width: usize, height: usize, rgb01: [f64; 3]) -> Self {
        let mut img = Image::zeros(width, height);
        for c in 0..3 {
            let v = rgb01[c] * 2.0 - 1.0;
            let plane = &mut img.data[c * width * height..(c + 1) * width * height];
            plane.iter_mut().for_each(|p| *p = v);
        }
        img
    }

    fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        c * self.width * self.height + y * self.width + x
    }

    /// Pixel in [0,1] RGB.
    pub fn get01(&self, x: usize, y: usize) -> [f64; 3] {
        [
            (self.data[self.idx(0, x, y)] + 1.0) / 2.0,
            (self.data[self.idx(1, x, y)] + 1.0) / 2.0,
            (self.data[self.idx(2, x, y)] + 1.0) / 2.0,
        ]
    }

    pub fn set01(&mut self, x: usize, y: usize, rgb01: [f64; 3]) {
        for c in 0..3 {
            let i = self.idx(c, x, y);
            self.data[i] = rgb01[c] * 2.0 - 1.0;
        }
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let data: Vec<E> = self.data.iter().map(|&v| E::from_f64(v)).collect();
        Tensor::from_vec(data, &[3, self.height, self.width]).expect("image tensor")
    }

    /// Accepts `[3,H,W]` or `[1,3,H,W]`.
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self> {
        let s = t.shape().to_vec();
        let (c, h, w) = match s.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [1, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::dim(format!("image tensor must be [3,H,W], got {s:?}"))),
        };
        if c != 3 {
            return Err(Error::dim(format!("image tensor must have 3 channels, got {c}")));
        }
        let data: Vec<f64> = t.to_vec().iter().map(|v| v.to_f64()).collect();
        Ok(Image { width: w, height: h, data })
    }

    pub fn save_png<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get01(x, y);
                let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([q(p[0]), q(p[1]), q(p[2])]));
            }
        }
        buf.save(path.as_ref())
            .map_err(|e| Error::format(format!("png save failed: {e}")))
    }

    pub fn load_png<P: AsRef<Path>>(path: P) -> Result<Self> {
        let img = image::open(path.as_ref())
            .map_err(|e| Error::format(format!("png load failed: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set01(x, y, [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ]);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Example generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ToyExample {
    pub id: usize,
    pub image: Image,
    pub caption: String,
    /// Per-object visibility masks (length canvas²); an entry is true where
    /// that object is the topmost rendered object.
    pub masks: Vec<Vec<bool>>,
    pub spec: SpriteSpec,
}

/// Renders a spec: background, then objects in order (later objects on top).
pub fn render_sprites(spec: &SpriteSpec) -> (Image, Vec<Vec<bool>>) {
    let s = spec.canvas;
    let mut img = Image::filled(s, s, BG_RGB[spec.background]);
    let mut owner: Vec<Option<usize>> = vec![None; s * s];
    for (i, obj) in spec.objects.iter().enumerate() {
        for (x, y) in shape_pixels(obj.shape, obj.extent(s), obj.x, obj.y) {
            img.set01(x, y, COLOR_RGB[obj.color]);
            owner[y * s + x] = Some(i);
        }
    }
    let masks = (0..spec.objects.len())
        .map(|i| owner.iter().map(|o| *o == Some(i)).collect())
        .collect();
    (img, masks)
}

/// Deterministic caption: objects in draw order, joined by the spatial
/// relation of consecutive centers.
pub fn caption_for(spec: &SpriteSpec) -> String {
    let mut parts: Vec<String> = Vec::new();
    for (i, obj) in spec.objects.iter().enumerate() {
        parts.push(format!(
            "a {} {} {}",
            obj.size_bucket.name(),
            COLOR_NAMES[obj.color],
            obj.shape.name()
        ));
        if i + 1 < spec.objects.len() {
            let (ax, ay) = obj.center(spec.canvas);
            let (bx, by) = spec.objects[i + 1].center(spec.canvas);
            let (dx, dy) = (bx - ax, by - ay);
            let rel = if dx.abs() >= dy.abs() {
                if dx > 0.0 { "left of" } else { "right of" }
            } else if dy > 0.0 {
                "above"
            } else {
                "below"
            };
            parts.push(rel.to_string());
        }
    }
    parts.join(" ")
}

fn gen_example_attempt<R: rand::Rng>(r: &mut R, canvas: usize, n_obj: usize) -> Option<SpriteSpec> {
    let background = r.gen_range(0..BG_RGB.len());
    // Distinct colors per example keep captions and blob analysis unambiguous.
    let mut palette: Vec<usize> = (0..COLOR_RGB.len()).collect();
    for i in 0..n_obj {
        let j = r.gen_range(i..palette.len());
        palette.swap(i, j);
    }
    let mut objects = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let shape = SHAPES[r.gen_range(0..SHAPES.len())];
        let size_bucket = if r.gen_range(0..2) == 0 { SizeBucket::Small } else { SizeBucket::Large };
        let e = size_bucket.extent(canvas);
        if e >= canvas {
            return None;
        }
        let x = r.gen_range(0..=canvas - e);
        let y = r.gen_range(0..=canvas - e);
        objects.push(ObjectSpec { shape, color: palette[i], size_bucket, x, y });
    }
    let spec = SpriteSpec { canvas, background, objects };

    // Visibility: each object keeps at least VISIBILITY_MIN_FRAC of its own
    // pixels topmost; consecutive centers must differ (caption relations).
    let full: Vec<usize> = spec
        .objects
        .iter()
        .map(|o| shape_pixels(o.shape, o.extent(canvas), o.x, o.y).len())
        .collect();
    let (_, masks) = render_sprites(&spec);
    for (i, mask) in masks.iter().enumerate() {
        let visible = mask.iter().filter(|&&m| m).count();
        if (visible as f64) < VISIBILITY_MIN_FRAC * full[i] as f64 || visible == 0 {
            return None;
        }
    }
    for w in spec.objects.windows(2) {
        if w[0].center(canvas) == w[1].center(canvas) {
            return None;
        }
    }
    Some(spec)
}

/// One example, a pure function of (seed, id, canvas).
pub fn generate_example(seed: u64, id: usize, canvas: usize) -> ToyExample {
    let mut r = rng::stream_keyed(seed, "toy-example", &[id as u64]);
    // The object count is drawn once and held fixed across layout retries;
    // redrawing it on rejection would bias counts toward easy layouts.
    let n_obj = r.gen_range(1..=3usize);
    let spec = loop {
        if let Some(s) = gen_example_attempt(&mut r, canvas, n_obj) {
            break s;
        }
    };
    let (image, masks) = render_sprites(&spec);
    let caption = caption_for(&spec);
    ToyExample { id, image, caption, masks, spec }
}

/// Deterministic corpus at the default resolution.
pub fn generate_corpus(seed: u64, n: usize) -> Vec<ToyExample> {
    generate_corpus_sized(seed, n, DEFAULT_IMAGE_SIZE)
}

pub fn generate_corpus_sized(seed: u64, n: usize, canvas: usize) -> Vec<ToyExample> {
    use rayon::prelude::*;
    // Each example draws from its own id-keyed stream, so the parallel and
    // sequential orders produce identical corpora.
    (0..n).into_par_iter().map(|id| generate_example(seed, id, canvas)).collect()
}

/// The example's largest-area visible object (area stands in for detector
/// confidence): its object index and occlusion-aware pixel mask.
pub fn largest_visible_object(ex: &ToyExample) -> Option<(usize, &[bool])> {
    ex.masks
        .iter()
        .enumerate()
        .max_by_key(|(_, m)| m.iter().filter(|&&v| v).count())
        .map(|(i, m)| (i, m.as_slice()))
}

// ---------------------------------------------------------------------------
// Joint embedder
// ---------------------------------------------------------------------------

pub const EMBED_DIM: usize = 64;
pub const EMBEDDER_ID: &str = "toy-embed-v1";

// Feature layout (shared between image and text sides where meaningful):
const F_COLOR: usize = 0; //  8 dims: per-color area/mention weight
const F_SHAPE: usize = 8; //  4 dims
const F_PAIR: usize = 12; // 32 dims: color × shape
const F_SIZE: usize = 44; //  2 dims
const F_REL: usize = 46; //  4 dims: left/right/above/below (text only)
const F_SPATIAL: usize = 50; // 12 dims: 2×2 quadrant RGB means (image only)
const F_GLOBAL: usize = 62; //  2 dims: object fraction, brightness (image only)

const W_COLOR: f64 = 1.0;
const W_SHAPE: f64 = 1.0;
const W_PAIR: f64 = 1.5;
const W_SIZE: f64 = 0.5;
const W_REL: f64 = 0.5;
const W_SPATIAL: f64 = 0.15;
const W_GLOBAL: f64 = 0.1;

fn normalize(mut f: Vec<f64>) -> Vec<f64> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        f[0] = 1.0;
    } else {
        f.iter_mut().for_each(|v| *v /= n);
    }
    f
}

fn nearest_prototype(p: [f64; 3]) -> Option<usize> {
    // Returns Some(color index) for sprite colors, None for backgrounds.
    let d2 = |a: [f64; 3], b: [f64; 3]| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let mut best = (f64::INFINITY, None);
    for (i, c) in COLOR_RGB.iter().enumerate() {
        let d = d2(p, *c);
        if d < best.0 {
            best = (d, Some(i));
        }
    }
    for b in BG_RGB.iter() {
        let d = d2(p, *b);
        if d < best.0 {
            best = (d, None);
        }
    }
    best.1
}

/// Classifies a pixel blob by bounding-box statistics. Mirrors the renderer's
/// geometry: bars are elongated, triangles half-fill their box, circles
/// ~0.77, squares 1.0.
fn classify_blob(pixels: &[(usize, usize)]) -> (Shape, usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(x, y) in pixels {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let extent = w.max(h);
    let aspect = w.max(h) as f64 / w.min(h).max(1) as f64;
    let fill = pixels.len() as f64 / (w * h) as f64;
    let shape = if aspect >= 2.0 {
        Shape::Bar
    } else if fill <= 0.70 {
        Shape::Triangle
    } else if fill <= 0.88 {
        Shape::Circle
    } else {
        Shape::Square
    };
    (shape, extent)
}

/// Unit-norm joint-space embedding of an image (any resolution).
pub fn embed_image(img: &Image) -> Vec<f64> {
    let mut f = vec![0.0; EMBED_DIM];
    let total = (img.width * img.height) as f64;
    let mut color_pixels: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    let mut object_px = 0usize;
    let mut brightness = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get01(x, y);
            brightness += (p[0] + p[1] + p[2]) / 3.0;
            if let Some(c) = nearest_prototype(p) {
                color_pixels.entry(c).or_default().push((x, y));
                object_px += 1;
            }
            // Quadrant RGB means.
            let qx = if x * 2 >= img.width { 1 } else { 0 };
            let qy = if y * 2 >= img.height { 1 } else { 0 };
            let q = qy * 2 + qx;
            for c in 0..3 {
                f[F_SPATIAL + q * 3 + c] += p[c];
            }
        }
    }
    for q in 0..4 {
        for c in 0..3 {
            f[F_SPATIAL + q * 3 + c] *= W_SPATIAL / (total / 4.0);
        }
    }
    f[F_GLOBAL] = W_GLOBAL * object_px as f64 / total;
    f[F_GLOBAL + 1] = W_GLOBAL * brightness / total;

    let size_threshold = |canvas: usize| {
        let small = SizeBucket::Small.extent(canvas) as f64;
        let large = SizeBucket::Large.extent(canvas) as f64;
        (small + large) / 2.0
    };
    let thresh = size_threshold(img.width.max(img.height));
    for (color, pixels) in color_pixels {
        if pixels.len() < 3 {
            continue;
        }
        let frac = pixels.len() as f64 / total;
        let (shape, extent) = classify_blob(&pixels);
        f[F_COLOR + color] += W_COLOR * frac;
        f[F_SHAPE + shape.index()] += W_SHAPE * frac;
        f[F_PAIR + color * 4 + shape.index()] += W_PAIR * frac;
        let bucket = if (extent as f64) >= thresh { SizeBucket::Large } else { SizeBucket::Small };
        f[F_SIZE + bucket.index()] += W_SIZE * frac;
    }
    normalize(f)
}

/// The closed caption vocabulary: attribute words plus grammar filler. The
/// token encoder and the text embedder reject anything outside it.
pub fn vocab() -> &'static [&'static str] {
    &[
        "a", "an", "small", "large", "red", "green", "blue", "yellow", "purple", "cyan",
        "orange", "magenta", "square", "circle", "triangle", "bar", "left", "right", "above",
        "below", "of", "with", "nice", "one", "photo", "picture", "here",
    ]
}

fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c == ',' || c == '.').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

struct ParsedCaption {
    /// (color, size, shape) with color/size optional.
    objects: Vec<(Option<usize>, Option<SizeBucket>, Shape)>,
    relations: [usize; 4], // left / right / above / below counts
}

fn parse_caption(caption: &str) -> Result<ParsedCaption> {
    let filler = ["a", "an", "of", "with", "nice", "one", "photo", "picture", "here"];
    let mut objects = Vec::new();
    let mut relations = [0usize; 4];
    let mut pending_color: Option<usize> = None;
    let mut pending_size: Option<SizeBucket> = None;
    for tok in tokenize(caption) {
        if filler.contains(&tok.as_str()) {
            continue;
        }
        if let Some(ci) = COLOR_NAMES.iter().position(|c| *c == tok) {
            pending_color = Some(ci);
        } else if tok == "small" {
            pending_size = Some(SizeBucket::Small);
        } else if tok == "large" {
            pending_size = Some(SizeBucket::Large);
        } else if let Some(shape) = SHAPES.iter().find(|s| s.name() == tok) {
            objects.push((pending_color.take(), pending_size.take(), *shape));
        } else if tok == "left" {
            relations[0] += 1;
        } else if tok == "right" {
            relations[1] += 1;
        } else if tok == "above" {
            relations[2] += 1;
        } else if tok == "below" {
            relations[3] += 1;
        } else {
            return Err(Error::contract(format!(
                "caption token '{tok}' is outside the closed vocabulary"
            )));
        }
    }
    Ok(ParsedCaption { objects, relations })
}

/// Unit-norm joint-space embedding of a caption (closed vocabulary).
pub fn embed_text(caption: &str) -> Result<Vec<f64>> {
    let parsed = parse_caption(caption)?;
    let mut f = vec![0.0; EMBED_DIM];
    let k = parsed.objects.len().max(1) as f64;
    for (color, size, shape) in &parsed.objects {
        f[F_SHAPE + shape.index()] += W_SHAPE / k;
        if let Some(c) = color {
            f[F_COLOR + c] += W_COLOR / k;
            f[F_PAIR + c * 4 + shape.index()] += W_PAIR / k;
        }
        if let Some(s) = size {
            f[F_SIZE + s.index()] += W_SIZE / k;
        }
    }
    let total_rel: usize = parsed.relations.iter().sum();
    if total_rel > 0 {
        for (r, &count) in parsed.relations.iter().enumerate() {
            f[F_REL + r] += W_REL * count as f64 / total_rel as f64;
        }
    }
    Ok(normalize(f))
}

// ---------------------------------------------------------------------------
// Token encoder (text input to the denoiser)
// ---------------------------------------------------------------------------

/// Fixed text sequence length fed to the model; shorter captions are padded
/// with zero vectors (a zero key contributes a zero value in attention).
pub const TEXT_MAX_TOKENS: usize = 20;

/// Seed for the fixed token-embedding table — independent of corpus seeds so
/// the text interface is stable across datasets.
const TOKEN_EMBED_SEED: u64 = 0x746f_6b65_6e73;

fn token_vector<E: Element>(token_id: usize, dim: usize) -> Vec<E> {
    let mut r = rng::stream_keyed(TOKEN_EMBED_SEED, "token-embed", &[token_id as u64]);
    let scale = (1.0 / dim as f64).sqrt();
    rng::normal_vec::<f64, _>(&mut r, dim)
        .into_iter()
        .map(|v| E::from_f64(v * scale))
        .collect()
}

/// Encodes one caption to a fixed-length `[TEXT_MAX_TOKENS, dim]` tensor.
pub fn encode_caption<E: Element>(caption: &str, dim: usize) -> Result<Tensor<E>> {
    let toks = tokenize(caption);
    if toks.len() > TEXT_MAX_TOKENS {
        return Err(Error::contract(format!(
            "caption has {} tokens, max {TEXT_MAX_TOKENS}",
            toks.len()
        )));
    }
    let voc = vocab();
    let mut data = vec![E::ZERO; TEXT_MAX_TOKENS * dim];
    for (i, tok) in toks.iter().enumerate() {
        let id = voc
            .iter()
            .position(|v| v == tok)
            .ok_or_else(|| Error::contract(format!("unknown caption token '{tok}'")))?;
        data[i * dim..(i + 1) * dim].copy_from_slice(&token_vector::<E>(id, dim));
    }
    Tensor::from_vec(data, &[TEXT_MAX_TOKENS, dim])
}

/// Stacks captions into `[B, TEXT_MAX_TOKENS, dim]`.
pub fn encode_captions<E: Element>(captions: &[&str], dim: usize) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(captions.len() * TEXT_MAX_TOKENS * dim);
    for cap in captions {
        data.extend(encode_caption::<E>(cap, dim)?.to_vec());
    }
    Tensor::from_vec(data, &[captions.len(), TEXT_MAX_TOKENS, dim])
}

// ---------------------------------------------------------------------------
// Corpus persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    caption: String,
    spec: SpriteSpec,
    image: String,
    mask: String,
}

/// Writes images/, masks/ (one indexed PNG per example: 0 background, i+1 for
/// object i) and manifest.jsonl.
pub fn save_corpus<P: AsRef<Path>>(dir: P, corpus: &[ToyExample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for ex in corpus {
        let image_rel = format!("images/{:06}.png", ex.id);
        let mask_rel = format!("masks/{:06}.png", ex.id);
        ex.image.save_png(dir.join(&image_rel))?;

        let s = ex.spec.canvas;
        let mut owner = image::GrayImage::new(s as u32, s as u32);
        for (i, mask) in ex.masks.iter().enumerate() {
            for y in 0..s {
                for x in 0..s {
                    if mask[y * s + x] {
                        owner.put_pixel(x as u32, y as u32, image::Luma([(i + 1) as u8]));
                    }
                }
            }
        }
        owner
            .save(dir.join(&mask_rel))
            .map_err(|e| Error::format(format!("mask save failed: {e}")))?;

        let row = ManifestRow {
            id: ex.id,
            caption: ex.caption.clone(),
            spec: ex.spec.clone(),
            image: image_rel,
            mask: mask_rel,
        };
        manifest.push_str(&serde_json::to_string(&row).map_err(|e| Error::format(e.to_string()))?);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(())
}

pub fn load_corpus<P: AsRef<Path>>(dir: P) -> Result<Vec<ToyExample>> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in manifest.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow =
            serde_json::from_str(line).map_err(|e| Error::format(format!("manifest: {e}")))?;
        let image = Image::load_png(dir.join(&row.image))?;
        let mask_img = image::open(dir.join(&row.mask))
            .map_err(|e| Error::format(format!("mask load failed: {e}")))?
            .to_luma8();
        let s = row.spec.canvas;
        let n_obj = row.spec.objects.len();
        let mut masks = vec![vec![false; s * s]; n_obj];
        for y in 0..s {
            for x in 0..s {
                let v = mask_img.get_pixel(x as u32, y as u32).0[0] as usize;
                if v > 0 && v <= n_obj {
                    masks[v - 1][y * s + x] = true;
                }
            }
        }
        out.push(ToyExample { id: row.id, image, caption: row.caption, masks, spec: row.spec });
    }
    if out.is_empty() {
        return Err(Error::contract("corpus directory holds no examples".to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Subject benchmark (crop-conditioning eval set)
// ---------------------------------------------------------------------------

/// One benchmark entry: the chosen subject, its crop, the caption-generator
/// prompt, and five synthetic captions that reveal the subject's type but not
/// its pose or position.
#[derive(Debug, Clone)]
pub struct SubjectExample {
    pub example_id: usize,
    pub label: String,
    /// Index of the chosen object in the source example.
    pub object_index: usize,
    /// Tight crop of the subject, background zeroed.
    pub crop: Image,
    pub prompt: String,
    pub captions: Vec<String>,
}

const SUBJECT_CAPTION_TEMPLATES: [&str; 5] = [
    "a {}",
    "a nice {}",
    "one {}",
    "a photo of a {}",
    "a picture of a {}",
];

/// Demonstrations preceding the final query line in the caption prompt.
const PROMPT_DEMOS: [(&str, &str); 3] = [
    ("square", "a photo of a square"),
    ("bar", "one bar"),
    ("circle", "a nice circle"),
];

pub fn subject_prompt(label: &str) -> String {
    let mut p = String::new();
    for (l, c) in PROMPT_DEMOS {
        p.push_str(&format!("Detected: {l} | Caption: {c}\n"));
    }
    p.push_str(&format!("Detected: {label} | Caption:"));
    p
}

pub fn subject_captions(label: &str) -> Vec<String> {
    SUBJECT_CAPTION_TEMPLATES
        .iter()
        .map(|t| t.replace("{}", label))
        .collect()
}

/// Builds the subject benchmark: per example, the largest-area visible object
/// (area stands in for detector confidence) is cropped if it passes the area
/// filters; examples with no surviving object are skipped.
pub fn subgen_build(
    corpus: &[ToyExample],
    filters: &crate::conditioning::AreaFilters,
) -> Vec<SubjectExample> {
    let mut out = Vec::new();
    for ex in corpus {
        let Some((obj_idx, mask)) = largest_visible_object(ex) else { continue };
        let Some(crop) = crate::conditioning::crop_subject(&ex.image, mask, filters) else {
            continue;
        };
        let label = ex.spec.objects[obj_idx].shape.name().to_string();
        out.push(SubjectExample {
            example_id: ex.id,
            object_index: obj_idx,
            prompt: subject_prompt(&label),
            captions: subject_captions(&label),
            label,
            crop,
        });
    }
    out
}
