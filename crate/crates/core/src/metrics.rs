//! Distribution distance and alignment metrics over the joint embedder's
//! feature space, plus the benchmark harness that turns a generator and an
//! evaluation split into comparable report rows.
//!
//! The distance between image sets is the Fréchet distance between Gaussian
//! moment summaries of their embedded features; alignment is the cosine
//! between an image embedding and a caption embedding. Feature space is the
//! 64-dimensional toy embedder, so absolute values are meaningful only
//! relative to other rows produced by the same harness — every report says so
//! in its header.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::conditioning::{
    augment_affine, render_scene, scene_caption, scene_from_example, AffineParams, AreaFilters,
    RetrievalIndex,
};
use crate::error::{Error, Result};
use crate::toydata::{embed_image, embed_text, Image, ToyExample};

// ---------------------------------------------------------------------------
// Small dense symmetric linear algebra (row-major `Vec<f64>` matrices).
// ---------------------------------------------------------------------------

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for p in 0..d {
            let av = a[i * d + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * d..(p + 1) * d];
            let orow = &mut out[i * d..(i + 1) * d];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn symmetrize(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
        }
    }
    out
}

fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, v)` with `v` row-major and its *columns* the eigenvectors,
/// so `a == v * diag(eigenvalues) * v^T` up to roundoff.
fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        let scale = (0..d)
            .map(|i| m[i * d + i].abs())
            .fold(0.0_f64, f64::max)
            .max(1e-300);
        if off.sqrt() <= 1e-14 * scale * d as f64 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // m <- g^T m g with g the (p,q) rotation [[c, s], [-s, c]].
                for i in 0..d {
                    let mip = m[i * d + p];
                    let miq = m[i * d + q];
                    m[i * d + p] = c * mip - s * miq;
                    m[i * d + q] = s * mip + c * miq;
                }
                for j in 0..d {
                    let mpj = m[p * d + j];
                    let mqj = m[q * d + j];
                    m[p * d + j] = c * mpj - s * mqj;
                    m[q * d + j] = s * mpj + c * mqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let evals = (0..d).map(|i| m[i * d + i]).collect();
    (evals, v)
}

/// Eigenvalues of a symmetric matrix that must be positive semidefinite up to
/// a relative tolerance; eigenvalues inside the tolerance band are clamped to
/// zero, anything more negative is a contract violation.
fn psd_eigenvalues(a: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    let (evals, _) = jacobi_eigen(a, d);
    let max = evals.iter().fold(0.0_f64, |acc, &l| acc.max(l.abs()));
    let tol = 1e-8 * max.max(1.0);
    for &l in &evals {
        if l < -tol {
            return Err(Error::contract(format!(
                "{what} is not positive semidefinite (eigenvalue {l:.3e}, tolerance {tol:.3e})"
            )));
        }
    }
    Ok(evals.into_iter().map(|l| l.max(0.0)).collect())
}

/// Symmetric PSD square root via eigendecomposition with negative-eigenvalue
/// clamping at zero.
fn sqrt_psd(a: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    let (evals, v) = jacobi_eigen(a, d);
    let max = evals.iter().fold(0.0_f64, |acc, &l| acc.max(l.abs()));
    let tol = 1e-8 * max.max(1.0);
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let l = evals[k];
        if l < -tol {
            return Err(Error::contract(format!(
                "{what} is not positive semidefinite (eigenvalue {l:.3e}, tolerance {tol:.3e})"
            )));
        }
        let r = l.max(0.0).sqrt();
        if r == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v[i * d + k] * r;
            if vik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += vik * v[j * d + k];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Feature statistics.
// ---------------------------------------------------------------------------

/// Gaussian moment summary of a set of feature vectors: sample mean and
/// unbiased sample covariance (denominator `count - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, exactly symmetric by construction.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Moment summary of `features` (each a dim-d vector, at least two).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::contract(format!(
                "feature statistics need at least 2 vectors, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::dim("feature vectors must be non-empty".to_string()));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::dim(format!(
                    "feature {} has dim {}, expected {d}",
                    i,
                    f.len()
                )));
            }
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, &x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        let denom = n - 1.0;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FeatureStats { mean, cov, count: features.len() })
    }

    /// Checks the representation invariants: at least two samples, square
    /// covariance, symmetry within 1e-10.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.count < 2 {
            return Err(Error::contract(format!(
                "feature statistics count {} < 2",
                self.count
            )));
        }
        if self.cov.len() != d * d {
            return Err(Error::dim(format!(
                "covariance has {} entries, expected {}",
                self.cov.len(),
                d * d
            )));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let diff = (self.cov[i * d + j] - self.cov[j * d + i]).abs();
                if diff > 1e-10 {
                    return Err(Error::contract(format!(
                        "covariance asymmetry {diff:.3e} at ({i},{j}) exceeds 1e-10"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Count-weighted combination of two summaries, exactly equivalent (up to
    /// roundoff) to computing the summary of the pooled feature set.
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        let d = self.dim();
        if other.dim() != d {
            return Err(Error::dim(format!(
                "cannot merge stats of dim {d} and {}",
                other.dim()
            )));
        }
        self.validate()?;
        other.validate()?;
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let mut mean = vec![0.0; d];
        for i in 0..d {
            mean[i] = (na * self.mean[i] + nb * other.mean[i]) / n;
        }
        // Unbiased covariances carry (n-1) scale: recover scatter matrices,
        // add the between-group rank-one term, re-normalize.
        let mut cov = vec![0.0; d * d];
        let w = na * nb / n;
        for i in 0..d {
            let di = self.mean[i] - other.mean[i];
            for j in i..d {
                let dj = self.mean[j] - other.mean[j];
                let scatter = self.cov[i * d + j] * (na - 1.0)
                    + other.cov[i * d + j] * (nb - 1.0)
                    + w * di * dj;
                let v = scatter / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FeatureStats { mean, cov, count: self.count + other.count })
    }
}

/// Moment summary of a set of images under the joint embedder.
pub fn image_stats(images: &[Image]) -> Result<FeatureStats> {
    let features: Vec<Vec<f64>> = images.iter().map(embed_image).collect();
    FeatureStats::from_features(&features)
}

// ---------------------------------------------------------------------------
// Fréchet distance.
// ---------------------------------------------------------------------------

/// Fréchet distance between Gaussian summaries:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The product square-root trace is computed through the symmetrized form
/// `sqrt(S_a)^T S_b sqrt(S_a)` with eigenvalue clamping, the standard
/// numerically robust recipe. Nonnegative, symmetric in its arguments, zero
/// exactly when the moments coincide.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::dim(format!(
            "feature stats dims differ: {d} vs {}",
            b.dim()
        )));
    }
    a.validate()?;
    b.validate()?;
    let sa = symmetrize(&a.cov, d);
    let sb = symmetrize(&b.cov, d);
    // Both inputs must be PSD within tolerance; checking b through its own
    // eigenvalues gives the clearer error than failing inside the product.
    psd_eigenvalues(&sb, d, "second covariance")?;
    let ra = sqrt_psd(&sa, d, "first covariance")?;
    let prod = mat_mul(&mat_mul(&ra, &sb, d), &ra, d);
    let m = symmetrize(&prod, d);
    let (evals, _) = jacobi_eigen(&m, d);
    let tr_sqrt: f64 = evals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let mut dmu2 = 0.0;
    for i in 0..d {
        let diff = a.mean[i] - b.mean[i];
        dmu2 += diff * diff;
    }
    let fd = dmu2 + trace(&sa, d) + trace(&sb, d) - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

// ---------------------------------------------------------------------------
// Alignment.
// ---------------------------------------------------------------------------

/// Cosine similarity of two equal-length vectors; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&y| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Alignment of an image with a caption: cosine of their joint embeddings,
/// in [-1, 1].
pub fn alignment_score(image: &Image, caption: &str) -> Result<f64> {
    let vi = embed_image(image);
    let vt = embed_text(caption)?;
    cosine(&vi, &vt)
}

/// Mean image-caption alignment over parallel slices.
pub fn mean_text_alignment(images: &[Image], captions: &[String]) -> Result<f64> {
    if images.len() != captions.len() {
        return Err(Error::dim(format!(
            "{} images vs {} captions",
            images.len(),
            captions.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::contract("mean alignment of an empty set".to_string()));
    }
    let mut total = 0.0;
    for (img, cap) in images.iter().zip(captions) {
        total += alignment_score(img, cap)?;
    }
    Ok(total / images.len() as f64)
}

/// Mean image-image alignment over parallel slices (cosine of image
/// embeddings; used for subject fidelity against a reference crop).
pub fn mean_image_alignment(images: &[Image], refs: &[Image]) -> Result<f64> {
    if images.len() != refs.len() {
        return Err(Error::dim(format!(
            "{} images vs {} references",
            images.len(),
            refs.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::contract("mean alignment of an empty set".to_string()));
    }
    let mut total = 0.0;
    for (img, r) in images.iter().zip(refs) {
        total += cosine(&embed_image(img), &embed_image(r))?;
    }
    Ok(total / images.len() as f64)
}

/// Spearman rank correlation with average ranks for ties; NaN-free for
/// non-empty inputs of equal length with nonzero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim(format!(
            "spearman over {} vs {} points",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::contract(
            "spearman needs at least two points".to_string(),
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::contract(
            "spearman undefined when one input is constant".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Average rank over the tie block, 1-based.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Evaluation cases.
// ---------------------------------------------------------------------------

/// How the conditioned image for an evaluation case is obtained.
pub enum CondMode<'a> {
    /// No conditioned image (text-to-image baseline).
    None,
    /// Condition on the example's own image (reconstruction protocol).
    GroundTruth,
    /// Condition on the nearest neighbor of the example's caption embedding
    /// in an index built over the training split.
    Retrieved {
        index: &'a RetrievalIndex,
        train: &'a [ToyExample],
    },
    /// Condition on the example's subject crop, rescaled by `scale` and
    /// centered on an otherwise empty canvas.
    Crop { scale: f64, filters: AreaFilters },
    /// Condition on the rendered scene layout; the caption gains the
    /// color-assignment suffix.
    Scene,
}

impl CondMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            CondMode::None => "none",
            CondMode::GroundTruth => "ground-truth",
            CondMode::Retrieved { .. } => "retrieved",
            CondMode::Crop { .. } => "crop",
            CondMode::Scene => "scene",
        }
    }
}

/// One evaluation case: the caption to condition text on, the conditioned
/// image (if any), the real image that defines the reference distribution,
/// and an optional subject reference for fidelity scoring.
pub struct EvalCase {
    pub example_id: usize,
    pub caption: String,
    pub real: Image,
    pub cond: Option<Image>,
    /// Reference the generated image should stay faithful to: the retrieved
    /// or ground-truth image, or the unscaled subject crop.
    pub subject_ref: Option<Image>,
    pub provenance: String,
}

/// Prepares evaluation cases for a conditioning mode. Crop mode skips
/// examples whose subject fails the area filters, so case lists prepared at
/// different scales stay aligned (the skip set does not depend on scale).
pub fn prepare_eval_cases(
    examples: &[ToyExample],
    mode: &CondMode,
    seed: u64,
) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::with_capacity(examples.len());
    for ex in examples {
        let caption = ex.caption.clone();
        let case = match mode {
            CondMode::None => EvalCase {
                example_id: ex.id,
                caption,
                real: ex.image.clone(),
                cond: None,
                subject_ref: None,
                provenance: "none".to_string(),
            },
            CondMode::GroundTruth => EvalCase {
                example_id: ex.id,
                caption,
                real: ex.image.clone(),
                cond: Some(ex.image.clone()),
                subject_ref: Some(ex.image.clone()),
                provenance: format!("ground-truth:{}", ex.id),
            },
            CondMode::Retrieved { index, train } => {
                let by_id: HashMap<u64, &ToyExample> =
                    train.iter().map(|t| (t.id as u64, t)).collect();
                let query = embed_text(&ex.caption)?;
                let hits = index.query(&query, 1)?;
                let (hit_id, _) = hits.first().ok_or_else(|| {
                    Error::contract("retrieval index returned no neighbors".to_string())
                })?;
                let neighbor = by_id.get(hit_id).ok_or_else(|| {
                    Error::contract(format!(
                        "index entry {hit_id} is not present in the provided training split"
                    ))
                })?;
                EvalCase {
                    example_id: ex.id,
                    caption,
                    real: ex.image.clone(),
                    cond: Some(neighbor.image.clone()),
                    subject_ref: Some(neighbor.image.clone()),
                    provenance: format!("{}-retrieval:{hit_id}", index.modality.name()),
                }
            }
            CondMode::Crop { scale, filters } => {
                let Some((obj_idx, mask)) = crate::toydata::largest_visible_object(ex) else {
                    continue;
                };
                let Some(crop) = crate::conditioning::crop_subject(&ex.image, mask, filters)
                else {
                    continue;
                };
                let params = AffineParams {
                    scale: [*scale, *scale],
                    translate_frac: 0.0,
                    degrees: [0.0, 0.0],
                };
                let mut r = crate::numerics::rng::stream_keyed(
                    seed,
                    "eval-crop-affine",
                    &[ex.id as u64],
                );
                let cond = augment_affine(&crop, &params, ex.spec.canvas, &mut r)?;
                EvalCase {
                    example_id: ex.id,
                    caption,
                    real: ex.image.clone(),
                    cond: Some(cond),
                    subject_ref: Some(crop),
                    provenance: format!("crop:{}:{obj_idx}@{scale}", ex.id),
                }
            }
            CondMode::Scene => {
                let spec = scene_from_example(ex);
                let (img, suffix) = render_scene(&spec)?;
                EvalCase {
                    example_id: ex.id,
                    caption: scene_caption(&ex.caption, &suffix),
                    real: ex.image.clone(),
                    cond: Some(img),
                    subject_ref: None,
                    provenance: format!("scene:{}", ex.id),
                }
            }
        };
        cases.push(case);
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Benchmark harness.
// ---------------------------------------------------------------------------

/// Header line carried by every report format.
pub const REPORT_NOTE: &str =
    "Desk-scale toy benchmark; absolute values are not comparable to full-scale published numbers.";

/// One report row: a labeled configuration with its scores.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchmarkRow {
    /// Mechanism or configuration under evaluation.
    pub label: String,
    /// Sweep coordinate (`"index-size=2000"`, `"scale=0.3"`, ...), empty for
    /// plain rows.
    pub variant: String,
    pub frechet: f64,
    pub text_alignment: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject_alignment: Option<f64>,
    pub sample_count: usize,
}

/// Errors unless the training and evaluation id sets are disjoint.
pub fn ensure_disjoint(train_ids: &[usize], eval_ids: &[usize]) -> Result<()> {
    let train: HashSet<usize> = train_ids.iter().copied().collect();
    for id in eval_ids {
        if train.contains(id) {
            return Err(Error::contract(format!(
                "evaluation example {id} appears in the training set"
            )));
        }
    }
    Ok(())
}

/// Runs one benchmark configuration: generates an image per case through
/// `generate`, then scores the generated set against the cases' real images
/// (Fréchet), captions (text alignment), and subject references (subject
/// alignment, present only when every case carries a reference).
pub fn run_benchmark(
    label: &str,
    variant: &str,
    train_ids: &[usize],
    cases: &[EvalCase],
    generate: &mut dyn FnMut(usize, &EvalCase) -> Result<Image>,
) -> Result<BenchmarkRow> {
    let eval_ids: Vec<usize> = cases.iter().map(|c| c.example_id).collect();
    ensure_disjoint(train_ids, &eval_ids)?;
    if cases.len() < 2 {
        return Err(Error::contract(format!(
            "benchmark needs at least 2 evaluation cases, got {}",
            cases.len()
        )));
    }
    let mut generated = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        generated.push(generate(i, case)?);
    }
    let real: Vec<Image> = cases.iter().map(|c| c.real.clone()).collect();
    let captions: Vec<String> = cases.iter().map(|c| c.caption.clone()).collect();
    let frechet = frechet_distance(&image_stats(&real)?, &image_stats(&generated)?)?;
    let text_alignment = mean_text_alignment(&generated, &captions)?;
    let subject_alignment = if cases.iter().all(|c| c.subject_ref.is_some()) {
        let refs: Vec<Image> = cases
            .iter()
            .map(|c| c.subject_ref.clone().expect("checked above"))
            .collect();
        Some(mean_image_alignment(&generated, &refs)?)
    } else {
        None
    };
    Ok(BenchmarkRow {
        label: label.to_string(),
        variant: variant.to_string(),
        frechet,
        text_alignment,
        subject_alignment,
        sample_count: cases.len(),
    })
}

// ---------------------------------------------------------------------------
// Report writers.
// ---------------------------------------------------------------------------

/// Fixed-width UTF-8 table with the comparability note as its first line.
pub fn render_table(rows: &[BenchmarkRow]) -> String {
    let mut label_w = "configuration".len();
    let mut variant_w = "variant".len();
    for r in rows {
        label_w = label_w.max(r.label.len());
        variant_w = variant_w.max(r.variant.len());
    }
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(REPORT_NOTE);
    out.push('\n');
    out.push_str(&format!(
        "{:<label_w$}  {:<variant_w$}  {:>10}  {:>10}  {:>10}  {:>7}\n",
        "configuration", "variant", "frechet", "text-align", "subj-align", "samples"
    ));
    let width = label_w + variant_w + 10 * 3 + 7 + 2 * 5;
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for r in rows {
        let subj = match r.subject_alignment {
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<label_w$}  {:<variant_w$}  {:>10.4}  {:>10.4}  {:>10}  {:>7}\n",
            r.label, r.variant, r.frechet, r.text_alignment, subj, r.sample_count
        ));
    }
    out
}

/// JSONL report: a meta line carrying the comparability note, then one
/// object per row.
pub fn rows_to_jsonl(rows: &[BenchmarkRow]) -> Result<String> {
    let mut out = String::new();
    let meta = serde_json::json!({ "type": "meta", "note": REPORT_NOTE });
    out.push_str(&serde_json::to_string(&meta).map_err(|e| Error::format(e.to_string()))?);
    out.push('\n');
    for r in rows {
        let mut value =
            serde_json::to_value(r).map_err(|e| Error::format(e.to_string()))?;
        value["type"] = serde_json::Value::String("row".to_string());
        out.push_str(&serde_json::to_string(&value).map_err(|e| Error::format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// CSV sweep/plot data: note comment, header, one line per row. Labels and
/// variants are quoted; numeric fields use full precision.
pub fn rows_to_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(REPORT_NOTE);
    out.push('\n');
    out.push_str("label,variant,frechet,text_alignment,subject_alignment,sample_count\n");
    for r in rows {
        let subj = match r.subject_alignment {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "\"{}\",\"{}\",{},{},{},{}\n",
            r.label.replace('"', "\"\""),
            r.variant.replace('"', "\"\""),
            r.frechet,
            r.text_alignment,
            subj,
            r.sample_count
        ));
    }
    out
}

/// Convenience: builds the nearest-neighbor copying generator used by the
/// non-generative baseline rows (output = conditioned image, resized to the
/// real image's canvas if needed by the caller).
pub fn copy_generator() -> impl FnMut(usize, &EvalCase) -> Result<Image> {
    |_, case: &EvalCase| {
        case.cond.clone().ok_or_else(|| {
            Error::contract("copy generator needs a conditioned image".to_string())
        })
    }
}
