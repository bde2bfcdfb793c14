//! Face datasets: in-memory sets, disk manifests, and the synthetic generator.
//!
//! A dataset is a flat list of `(face, identity)` entries with contiguous
//! integer identities. On disk it is a `manifest.tsv` of `relative_path<TAB>identity`
//! rows next to 8-bit grayscale PNGs; in memory faces are shared via `Arc` so
//! splits and subsets never copy pixels.
//!
//! The synthetic generator draws identity-specific low-frequency fields plus
//! face-like parts (eyes, brows, nose, mouth) at aligned canonical positions,
//! then applies per-image photometric jitter, a small translation, and noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::AlignedFace;
use crate::io::derive_seed;
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct FaceEntry<S: Scalar> {
    pub face: Arc<AlignedFace<S>>,
    pub identity: u32,
}

/// An in-memory dataset with uniform face dimensions.
#[derive(Clone, Default)]
pub struct FaceSet<S: Scalar> {
    entries: Vec<FaceEntry<S>>,
}

impl<S: Scalar> FaceSet<S> {
    pub fn new(entries: Vec<FaceEntry<S>>) -> Result<Self> {
        if let Some(first) = entries.first() {
            let dims = first.face.pixels().dim();
            for e in &entries {
                if e.face.pixels().dim() != dims {
                    return Err(Error::shape(
                        format!("{dims:?}"),
                        format!("{:?}", e.face.pixels().dim()),
                    ));
                }
            }
        }
        Ok(FaceSet { entries })
    }

    pub fn empty() -> Self {
        FaceSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: FaceEntry<S>) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.face.pixels().dim() != entry.face.pixels().dim() {
                return Err(Error::shape(
                    format!("{:?}", first.face.pixels().dim()),
                    format!("{:?}", entry.face.pixels().dim()),
                ));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &FaceEntry<S> {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &FaceEntry<S>> {
        self.entries.iter()
    }

    /// `(channels, height, width)` of the faces; `None` when empty.
    pub fn face_dims(&self) -> Option<(usize, usize, usize)> {
        self.entries.first().map(|e| e.face.pixels().dim())
    }

    /// Number of classes assuming contiguous labels `0..k`.
    pub fn identity_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.identity as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn indices_by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            map.entry(e.identity).or_default().push(i);
        }
        map
    }

    /// Entry subset (shares pixel storage).
    pub fn subset(&self, indices: &[usize]) -> Result<FaceSet<S>> {
        let mut entries = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = self
                .entries
                .get(i)
                .ok_or_else(|| Error::invalid_argument(format!("index {i} out of range")))?;
            entries.push(e.clone());
        }
        FaceSet::new(entries)
    }
}

// ---------------------------------------------------------------------------
// Synthetic faces
// ---------------------------------------------------------------------------

/// Parameters of the synthetic face generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
}

struct IdentityParams {
    coarse: Array2<f64>,
    eye_y: f64,
    eye_x_l: f64,
    eye_x_r: f64,
    eye_rx: f64,
    eye_ry: f64,
    eye_value: f64,
    brow_y: f64,
    brow_value: f64,
    nose_half_width: f64,
    nose_value: f64,
    mouth_y: f64,
    mouth_rx: f64,
    mouth_ry: f64,
    mouth_value: f64,
}

const COARSE_ROWS: usize = 7;
const COARSE_COLS: usize = 6;

fn sample_identity(rng: &mut ChaCha8Rng) -> IdentityParams {
    let mut coarse = Array2::zeros((COARSE_ROWS, COARSE_COLS));
    for v in coarse.iter_mut() {
        *v = rng.random_range(0.40..0.72);
    }
    IdentityParams {
        coarse,
        eye_y: 0.36 + rng.random_range(-0.02..0.02),
        eye_x_l: 0.30 + rng.random_range(-0.02..0.02),
        eye_x_r: 0.70 + rng.random_range(-0.02..0.02),
        eye_rx: rng.random_range(0.055..0.085),
        eye_ry: rng.random_range(0.040..0.060),
        eye_value: rng.random_range(0.03..0.30),
        brow_y: rng.random_range(0.26..0.29),
        brow_value: rng.random_range(0.10..0.45),
        nose_half_width: rng.random_range(0.040..0.070),
        nose_value: rng.random_range(0.45..0.80),
        mouth_y: 0.75 + rng.random_range(-0.015..0.015),
        mouth_rx: rng.random_range(0.13..0.19),
        mouth_ry: rng.random_range(0.028..0.050),
        mouth_value: rng.random_range(0.05..0.35),
    }
}

pub(crate) fn bilinear_upsample(coarse: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ch, cw) = coarse.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let fy = if h > 1 {
            y as f64 / (h - 1) as f64 * (ch - 1) as f64
        } else {
            0.0
        };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = if w > 1 {
                x as f64 / (w - 1) as f64 * (cw - 1) as f64
            } else {
                0.0
            };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let tx = fx - x0 as f64;
            let top = coarse[(y0, x0)] * (1.0 - tx) + coarse[(y0, x1)] * tx;
            let bot = coarse[(y1, x0)] * (1.0 - tx) + coarse[(y1, x1)] * tx;
            out[(y, x)] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

pub(crate) fn fill_ellipse(img: &mut Array2<f64>, cy: f64, cx: f64, ry: f64, rx: f64, value: f64) {
    let (h, w) = img.dim();
    let y0 = ((cy - ry).floor().max(0.0)) as usize;
    let y1 = ((cy + ry).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - rx).floor().max(0.0)) as usize;
    let x1 = ((cx + rx).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                img[(y, x)] = value;
            }
        }
    }
}

pub(crate) fn fill_rect(img: &mut Array2<f64>, y0: f64, y1: f64, x0: f64, x1: f64, value: f64) {
    let (h, w) = img.dim();
    let ya = y0.max(0.0) as usize;
    let yb = (y1.min(h as f64 - 1.0)).max(0.0) as usize;
    let xa = x0.max(0.0) as usize;
    let xb = (x1.min(w as f64 - 1.0)).max(0.0) as usize;
    for y in ya..=yb {
        for x in xa..=xb {
            img[(y, x)] = value;
        }
    }
}

fn render_base(p: &IdentityParams, h: usize, w: usize) -> Array2<f64> {
    let hf = h as f64;
    let wf = w as f64;
    let mut img = bilinear_upsample(&p.coarse, h, w);

    // Face oval: darken everything outside.
    let (oc_y, oc_x, or_y, or_x) = (0.54 * hf, 0.50 * wf, 0.48 * hf, 0.45 * wf);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 - oc_y) / or_y;
            let dx = (x as f64 - oc_x) / or_x;
            if dy * dy + dx * dx > 1.0 {
                img[(y, x)] = img[(y, x)] * 0.30 + 0.05;
            }
        }
    }

    // Brows.
    for ex in [p.eye_x_l, p.eye_x_r] {
        fill_rect(
            &mut img,
            p.brow_y * hf,
            (p.brow_y + 0.025) * hf,
            (ex - 0.08) * wf,
            (ex + 0.08) * wf,
            p.brow_value,
        );
    }

    // Eyes.
    for ex in [p.eye_x_l, p.eye_x_r] {
        fill_ellipse(
            &mut img,
            p.eye_y * hf,
            ex * wf,
            p.eye_ry * hf,
            p.eye_rx * wf,
            p.eye_value,
        );
    }

    // Nose: a wedge widening toward its base.
    let nose_top = 0.40 * hf;
    let nose_bottom = 0.58 * hf;
    for y in nose_top as usize..=(nose_bottom as usize).min(h - 1) {
        let t = (y as f64 - nose_top) / (nose_bottom - nose_top).max(1.0);
        let half = (0.01 + t * p.nose_half_width) * wf;
        let x0 = (0.5 * wf - half).max(0.0) as usize;
        let x1 = ((0.5 * wf + half) as usize).min(w - 1);
        for x in x0..=x1 {
            img[(y, x)] = p.nose_value;
        }
    }

    // Mouth.
    fill_ellipse(
        &mut img,
        p.mouth_y * hf,
        0.50 * wf,
        p.mouth_ry * hf,
        p.mouth_rx * wf,
        p.mouth_value,
    );

    img
}

fn render_variation(base: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (h, w) = base.dim();
    let dy = rng.random_range(-2i64..=2);
    let dx = rng.random_range(-2i64..=2);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp_amp = rng.random_range(0.0..0.10);
    let gain = rng.random_range(0.88..1.12);
    let bias = rng.random_range(-0.05..0.05);
    let sigma = rng.random_range(0.008..0.025);
    let noise = Normal::new(0.0, sigma).expect("sigma is positive");

    let mut out = Array2::zeros((h, w));
    let (ct, st) = (theta.cos(), theta.sin());
    for y in 0..h {
        for x in 0..w {
            // Translation with edge clamping.
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            let mut v = base[(sy, sx)];
            v = (v - 0.5) * gain + 0.5 + bias;
            v += ramp_amp * ((x as f64 / w as f64 - 0.5) * ct + (y as f64 / h as f64 - 0.5) * st);
            v += noise.sample(rng);
            out[(y, x)] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Deterministically generates the dataset described by `spec`.
pub fn generate_faces<S: Scalar>(spec: &SyntheticFaceSpec) -> Result<FaceSet<S>> {
    if spec.identities == 0 || spec.images_per_identity == 0 {
        return Err(Error::invalid_argument(
            "identities and images_per_identity must be positive",
        ));
    }
    if spec.image_height < 16 || spec.image_width < 16 {
        return Err(Error::invalid_argument(
            "synthetic faces need at least 16x16 pixels",
        ));
    }
    let mut entries = Vec::with_capacity(spec.identities * spec.images_per_identity);
    for id in 0..spec.identities {
        let mut id_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("identity-{id}")));
        let params = sample_identity(&mut id_rng);
        let base = render_base(&params, spec.image_height, spec.image_width);
        for img in 0..spec.images_per_identity {
            let mut img_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("image-{id}-{img}")));
            let rendered = render_variation(&base, &mut img_rng);
            let mut pixels = Array3::zeros((1, spec.image_height, spec.image_width));
            for y in 0..spec.image_height {
                for x in 0..spec.image_width {
                    pixels[(0, y, x)] = S::from64(rendered[(y, x)]);
                }
            }
            entries.push(FaceEntry {
                face: Arc::new(AlignedFace::new(pixels)?),
                identity: id as u32,
            });
        }
    }
    FaceSet::new(entries)
}

// ---------------------------------------------------------------------------
// Disk manifests
// ---------------------------------------------------------------------------

/// Writes `set` under `dir` as grayscale PNGs plus `manifest.tsv`, returning the
/// manifest path. Pixels are quantized to 8 bits.
pub fn save_face_set<S: Scalar>(dir: &Path, set: &FaceSet<S>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, e) in set.iter().enumerate() {
        let rel = format!("images/id_{:04}/img_{:04}.png", e.identity, i);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_gray_png(&path, e.face.as_ref())?;
        manifest.push_str(&format!("{rel}\t{}\n", e.identity));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Loads a dataset written by [`save_face_set`] (or any manifest of
/// `relative_path<TAB>identity` rows).
pub fn load_face_set<S: Scalar>(manifest_path: &Path) -> Result<FaceSet<S>> {
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::invalid_argument("manifest path has no parent directory"))?;
    let text = std::fs::read_to_string(manifest_path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, id) = line.split_once('\t').ok_or_else(|| {
            Error::format(format!(
                "manifest line {} is not 'path<TAB>identity': {line:?}",
                lineno + 1
            ))
        })?;
        let identity: u32 = id.trim().parse().map_err(|_| {
            Error::format(format!("manifest line {}: bad identity {id:?}", lineno + 1))
        })?;
        let face = read_gray_png::<S>(&dir.join(rel))?;
        entries.push(FaceEntry {
            face: Arc::new(face),
            identity,
        });
    }
    FaceSet::new(entries)
}

pub(crate) fn write_gray_png<S: Scalar>(path: &Path, face: &AlignedFace<S>) -> Result<()> {
    if face.channels() != 1 {
        return Err(Error::invalid_argument(
            "PNG export supports single-channel faces",
        ));
    }
    let (h, w) = (face.height(), face.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = face.pixels()[(0, y, x)].into64();
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub(crate) fn read_gray_png<S: Scalar>(path: &Path) -> Result<AlignedFace<S>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::zeros((1, h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            pixels[(0, y as usize, x as usize)] =
                S::from64(f64::from(img.get_pixel(x, y).0[0]) / 255.0);
        }
    }
    AlignedFace::new(pixels)
}
