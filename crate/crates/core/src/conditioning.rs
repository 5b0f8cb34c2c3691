//! The three ways a conditioning image reaches the model:
//!
//! * **retrieval** — a nearest-neighbor index over the corpus in the joint
//!   embedding space, queried by caption (text→image) or by image
//!   (image→image), with a stochastic mix of ground-truth and retrieved
//!   sources during training;
//! * **subject crops** — tight masked crops of one object, area-filtered and
//!   affine-jittered so the model can't copy pose or position;
//! * **scenes** — flat color layouts painted from object masks in a fixed
//!   palette order, so "first object" always means "first palette color".

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toydata::{embed_image, embed_text, Image, ToyExample, COLOR_RGB, EMBEDDER_ID};

// ---------------------------------------------------------------------------
// Retrieval index
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Entries keyed by caption embeddings (text → image retrieval).
    Text,
    /// Entries keyed by image embeddings (image → image retrieval).
    Image,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::contract(format!(
                "unknown modality '{other}' (expected 'text' or 'image')"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub id: u64,
    /// Unit-norm embedding in the joint space.
    pub embedding: Vec<f64>,
    pub image_ref: String,
    pub caption_ref: String,
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub modality: Modality,
    pub dim: usize,
    pub embedder_id: String,
    pub entries: Vec<IndexEntry>,
}

impl RetrievalIndex {
    /// Embeds every corpus example under the requested modality.
    pub fn build(corpus: &[ToyExample], modality: Modality) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot build an index from an empty corpus".to_string()));
        }
        let mut entries = Vec::with_capacity(corpus.len());
        for ex in corpus {
            let embedding = match modality {
                Modality::Text => embed_text(&ex.caption)?,
                Modality::Image => embed_image(&ex.image),
            };
            entries.push(IndexEntry {
                id: ex.id as u64,
                embedding,
                image_ref: format!("images/{:06}.png", ex.id),
                caption_ref: ex.caption.clone(),
            });
        }
        let dim = entries[0].embedding.len();
        Ok(RetrievalIndex { modality, dim, embedder_id: EMBEDDER_ID.to_string(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-k inner-product search: scores descending, ties broken by
    /// ascending id. `k == 0` returns empty; `k > len` is a contract error.
    pub fn query(&self, embedding: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
        if embedding.len() != self.dim {
            return Err(Error::dim(format!(
                "query dim {} != index dim {}",
                embedding.len(),
                self.dim
            )));
        }
        if k > self.entries.len() {
            return Err(Error::contract(format!(
                "k={k} exceeds index size {}",
                self.entries.len()
            )));
        }
        let mut scored: Vec<(u64, f64)> = self
            .entries
            .iter()
            .map(|e| {
                let s: f64 = e.embedding.iter().zip(embedding).map(|(a, b)| a * b).sum();
                (e.id, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Binary layout: magic, version, modality byte, dim (u32 LE), count
    /// (u64 LE), embedder id, then per entry `id u64 LE` + `dim × f64 LE`.
    /// Human-readable refs go to a `.meta.jsonl` sidecar.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"XFRINDEX");
        buf.push(1u8);
        buf.push(match self.modality {
            Modality::Text => 0,
            Modality::Image => 1,
        });
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.embedder_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.embedder_id.as_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&e.id.to_le_bytes());
            for v in &e.embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;

        #[derive(Serialize)]
        struct Row<'a> {
            id: u64,
            image_ref: &'a str,
            caption_ref: &'a str,
        }
        let mut meta = String::new();
        for e in &self.entries {
            let row = Row { id: e.id, image_ref: &e.image_ref, caption_ref: &e.caption_ref };
            meta.push_str(&serde_json::to_string(&row).map_err(|e| Error::format(e.to_string()))?);
            meta.push('\n');
        }
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::format("index file truncated".to_string()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != b"XFRINDEX" {
            return Err(Error::format("not an index file (bad magic)".to_string()));
        }
        if take(&mut pos, 1)?[0] != 1 {
            return Err(Error::format("unsupported index version".to_string()));
        }
        let modality = match take(&mut pos, 1)?[0] {
            0 => Modality::Text,
            1 => Modality::Image,
            m => return Err(Error::format(format!("bad modality byte {m}"))),
        };
        let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let embedder_id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
            .map_err(|_| Error::format("embedder id not utf-8".to_string()))?;

        #[derive(Deserialize)]
        struct Row {
            id: u64,
            image_ref: String,
            caption_ref: String,
        }
        let meta = std::fs::read_to_string(sidecar_path(path))?;
        let mut refs = std::collections::HashMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let row: Row =
                serde_json::from_str(line).map_err(|e| Error::format(format!("sidecar: {e}")))?;
            refs.insert(row.id, (row.image_ref, row.caption_ref));
        }

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                embedding.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let (image_ref, caption_ref) = refs
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::format(format!("sidecar missing refs for id {id}")))?;
            entries.push(IndexEntry { id, embedding, image_ref, caption_ref });
        }
        if pos != buf.len() {
            return Err(Error::format("trailing bytes in index file".to_string()));
        }
        Ok(RetrievalIndex { modality, dim, embedder_id, entries })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.jsonl");
    std::path::PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// Training-time source mixing
// ---------------------------------------------------------------------------

/// Probability mix over where the conditioning image comes from at train
/// time. Must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMix {
    pub ground_truth: f64,
    pub text_retrieval: f64,
    pub image_retrieval: f64,
}

impl Default for SourceMix {
    fn default() -> Self {
        SourceMix { ground_truth: 0.4, text_retrieval: 0.4, image_retrieval: 0.2 }
    }
}

impl SourceMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.ground_truth, self.text_retrieval, self.image_retrieval];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract(format!("source mix has a negative entry: {self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("source mix sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Which conditioning source produced a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GroundTruth,
    TextRetrieved,
    ImageRetrieved,
    Crop,
    Scene,
    None,
}

#[derive(Debug, Clone)]
pub struct ConditioningSpec {
    pub source: Source,
    pub payload: Option<Image>,
    /// Human-readable origin, e.g. "text-retrieval:42".
    pub provenance: String,
}

impl ConditioningSpec {
    pub fn none() -> Self {
        ConditioningSpec { source: Source::None, payload: None, provenance: "none".to_string() }
    }
}

/// Ablation switches matching the source-mix rows of the comparison table.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SourceAblation {
    pub drop_ground_truth: bool,
    pub drop_image_retrieval: bool,
}

impl SourceAblation {
    /// Zeroes dropped sources and renormalizes; all-zero is a contract error.
    pub fn apply(&self, mix: &SourceMix) -> Result<SourceMix> {
        mix.validate()?;
        let gt = if self.drop_ground_truth { 0.0 } else { mix.ground_truth };
        let ir = if self.drop_image_retrieval { 0.0 } else { mix.image_retrieval };
        let tr = mix.text_retrieval;
        let sum = gt + tr + ir;
        if sum <= 0.0 {
            return Err(Error::contract(
                "source ablation removed every active source".to_string(),
            ));
        }
        Ok(SourceMix { ground_truth: gt / sum, text_retrieval: tr / sum, image_retrieval: ir / sum })
    }
}

/// One cumulative draw over the mix.
pub fn sample_source<R: rand::Rng>(mix: &SourceMix, r: &mut R) -> Source {
    let u: f64 = r.gen();
    if u < mix.ground_truth {
        Source::GroundTruth
    } else if u < mix.ground_truth + mix.text_retrieval {
        Source::TextRetrieved
    } else {
        Source::ImageRetrieved
    }
}

/// Draws a conditioning image for one training example: ground truth, or the
/// nearest non-self neighbor by caption / by image. With `exclude_self` the
/// query example itself is never returned (top-2 search, skip own id).
#[allow(clippy::too_many_arguments)]
pub fn retrieve_for_training<R: rand::Rng>(
    example_idx: usize,
    corpus: &[ToyExample],
    text_index: &RetrievalIndex,
    image_index: &RetrievalIndex,
    r: &mut R,
    mix: &SourceMix,
    ablation: &SourceAblation,
    exclude_self: bool,
) -> Result<ConditioningSpec> {
    let mix = ablation.apply(mix)?;
    let ex = corpus
        .get(example_idx)
        .ok_or_else(|| Error::contract(format!("example index {example_idx} out of range")))?;
    let source = sample_source(&mix, r);
    let (index, query) = match source {
        Source::GroundTruth => {
            return Ok(ConditioningSpec {
                source,
                payload: Some(ex.image.clone()),
                provenance: format!("ground-truth:{}", ex.id),
            });
        }
        Source::TextRetrieved => (text_index, embed_text(&ex.caption)?),
        Source::ImageRetrieved => (image_index, embed_image(&ex.image)),
        _ => unreachable!("sample_source only draws training sources"),
    };
    let k = if exclude_self { 2.min(index.len()) } else { 1 };
    let hits = index.query(&query, k)?;
    let hit = hits
        .iter()
        .find(|(id, _)| !exclude_self || *id != ex.id as u64)
        .ok_or_else(|| {
            Error::contract(format!(
                "retrieval for example {} found no non-self neighbor",
                ex.id
            ))
        })?;
    let hit_ex = corpus
        .iter()
        .find(|e| e.id as u64 == hit.0)
        .ok_or_else(|| Error::contract(format!("retrieved id {} not in corpus", hit.0)))?;
    let tag = match source {
        Source::TextRetrieved => "text-retrieval",
        Source::ImageRetrieved => "image-retrieval",
        _ => unreachable!(),
    };
    Ok(ConditioningSpec {
        source,
        payload: Some(hit_ex.image.clone()),
        provenance: format!("{tag}:{}", hit.0),
    })
}

// ---------------------------------------------------------------------------
// Subject crops
// ---------------------------------------------------------------------------

/// Reference resolution for the full-scale area filters.
pub const PAPER_RESOLUTION: usize = 512;

/// Objects outside [min_area, max_area] (in pixels) are not usable subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaFilters {
    pub min_area: f64,
    pub max_area: f64,
}

impl AreaFilters {
    /// Full-scale constants (raw pixel counts at 512×512 inputs).
    pub fn paper() -> Self {
        AreaFilters { min_area: 200.0, max_area: 900.0 }
    }

    /// Desk-scale filters as canvas fractions: at least 2% of the canvas
    /// (enough pixels to carry shape), at most 25% (a full-frame object
    /// leaves nothing to generate around).
    pub fn toy_default(canvas: usize) -> Self {
        let total = (canvas * canvas) as f64;
        AreaFilters { min_area: 0.02 * total, max_area: 0.25 * total }
    }

    pub fn passes(&self, area: usize) -> bool {
        let a = area as f64;
        a >= self.min_area && a <= self.max_area
    }
}

/// Tight bounding-box crop of the masked object: masked pixels keep their
/// values, everything else is zero. Returns None when the mask is empty or
/// the object fails the area filters.
pub fn crop_subject(image: &Image, mask: &[bool], filters: &AreaFilters) -> Option<Image> {
    debug_assert_eq!(mask.len(), image.width * image.height, "mask length mismatch");
    if mask.len() != image.width * image.height {
        return None;
    }
    let area = mask.iter().filter(|&&m| m).count();
    if area == 0 || !filters.passes(area) {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..image.height {
        for x in 0..image.width {
            if mask[y * image.width + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask[(y0 + y) * image.width + (x0 + x)] {
                for c in 0..3 {
                    out.data[c * w * h + y * w + x] =
                        image.data[c * image.width * image.height + (y0 + y) * image.width + (x0 + x)];
                }
            }
        }
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Affine augmentation
// ---------------------------------------------------------------------------

/// Random placement of a crop onto a square canvas. `scale` resizes the crop
/// itself (1.0 keeps its pixel size), `translate_frac` offsets the center by
/// up to that fraction of the canvas on each axis, `degrees` rotates about
/// the crop center. Draw order: scale, angle, dx, dy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: [f64; 2],
    pub translate_frac: f64,
    pub degrees: [f64; 2],
}

impl AffineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale[0] > 0.0 && self.scale[1] >= self.scale[0]) {
            return Err(Error::contract(format!("bad scale range {:?}", self.scale)));
        }
        if !(self.translate_frac >= 0.0 && self.translate_frac.is_finite()) {
            return Err(Error::contract(format!("bad translate fraction {}", self.translate_frac)));
        }
        if !(self.degrees[1] >= self.degrees[0]
            && self.degrees[0] >= 0.0
            && self.degrees[1] <= 360.0)
        {
            return Err(Error::contract(format!("bad degree range {:?}", self.degrees)));
        }
        Ok(())
    }
}

/// Training-time jitter: heavy rescaling, offsets, free rotation.
pub const TRAIN_AFFINE: AffineParams =
    AffineParams { scale: [0.2, 4.0], translate_frac: 0.3, degrees: [0.0, 180.0] };

/// Inference-time placement: fixed small scale, centered, unrotated.
pub const INFERENCE_AFFINE: AffineParams =
    AffineParams { scale: [0.3, 0.3], translate_frac: 0.0, degrees: [0.0, 0.0] };

/// Places `crop` on a `canvas`×`canvas` image under a random affine draw.
/// Inverse nearest-neighbor sampling; pixels that map outside the crop stay
/// zero. The identity draw (scale 1, no offset, no rotation) reproduces the
/// crop pixel-for-pixel, centered.
pub fn augment_affine<R: rand::Rng>(
    crop: &Image,
    params: &AffineParams,
    canvas: usize,
    r: &mut R,
) -> Result<Image> {
    params.validate()?;
    if crop.width == 0 || crop.height == 0 || canvas == 0 {
        return Err(Error::dim("empty crop or canvas".to_string()));
    }
    let scale = r.gen_range(params.scale[0]..=params.scale[1]);
    let angle = r.gen_range(params.degrees[0]..=params.degrees[1]).to_radians();
    let t = params.translate_frac * canvas as f64;
    let dx = r.gen_range(-t..=t);
    let dy = r.gen_range(-t..=t);

    let mut cos = angle.cos();
    let mut sin = angle.sin();
    // Snap near-exact right angles so 0°/180° land on integer pixel offsets.
    if cos.abs() < 1e-12 {
        cos = 0.0;
    }
    if sin.abs() < 1e-12 {
        sin = 0.0;
    }

    let out_cx = (canvas as f64 - 1.0) / 2.0 + dx;
    let out_cy = (canvas as f64 - 1.0) / 2.0 + dy;
    let in_cx = (crop.width as f64 - 1.0) / 2.0;
    let in_cy = (crop.height as f64 - 1.0) / 2.0;

    // Round halves down: keeps the identity draw lossless for any crop size.
    let snap = |v: f64| (v - 0.5).ceil() as isize;

    let mut out = Image::zeros(canvas, canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let u = x as f64 - out_cx;
            let v = y as f64 - out_cy;
            let xi = (u * cos + v * sin) / scale + in_cx;
            let yi = (-u * sin + v * cos) / scale + in_cy;
            let (sx, sy) = (snap(xi), snap(yi));
            if sx >= 0 && sy >= 0 && (sx as usize) < crop.width && (sy as usize) < crop.height {
                let (sx, sy) = (sx as usize, sy as usize);
                for c in 0..3 {
                    out.data[c * canvas * canvas + y * canvas + x] =
                        crop.data[c * crop.width * crop.height + sy * crop.width + sx];
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// Palette order for scene layouts, as indices into the sprite color table.
/// The i-th scene object is always painted the i-th palette color, so object
/// order in the caption determines color assignment.
pub const SCENE_PALETTE: [usize; 8] = [6, 1, 0, 2, 3, 4, 5, 7]; // orange, green, red, blue, ...

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub label: String,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
}

/// Paints the layout image (black background, palette colors in object
/// order, later objects on top) and returns it with the label suffix
/// ("square, circle") that gets appended to the caption.
pub fn render_scene(scene: &SceneSpec) -> Result<(Image, String)> {
    if scene.objects.len() > SCENE_PALETTE.len() {
        return Err(Error::contract(format!(
            "scene has {} objects, palette holds {}",
            scene.objects.len(),
            SCENE_PALETTE.len()
        )));
    }
    let s = scene.canvas;
    let mut img = Image::filled(s, s, [0.0, 0.0, 0.0]);
    for (i, obj) in scene.objects.iter().enumerate() {
        if obj.mask.len() != s * s {
            return Err(Error::dim(format!(
                "scene object {i} mask length {} != {}",
                obj.mask.len(),
                s * s
            )));
        }
        let color = COLOR_RGB[SCENE_PALETTE[i]];
        for y in 0..s {
            for x in 0..s {
                if obj.mask[y * s + x] {
                    img.set01(x, y, color);
                }
            }
        }
    }
    let suffix = scene
        .objects
        .iter()
        .map(|o| o.label.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    Ok((img, suffix))
}

/// Scene layout of a corpus example: its masks with shape names as labels.
pub fn scene_from_example(ex: &ToyExample) -> SceneSpec {
    SceneSpec {
        canvas: ex.spec.canvas,
        objects: ex
            .spec
            .objects
            .iter()
            .zip(&ex.masks)
            .map(|(o, m)| SceneObject { label: o.shape.name().to_string(), mask: m.clone() })
            .collect(),
    }
}

/// Caption fed to the model alongside a scene layout.
pub fn scene_caption(base: &str, suffix: &str) -> String {
    if suffix.is_empty() {
        base.to_string()
    } else {
        format!("{base} with {suffix}")
    }
}
