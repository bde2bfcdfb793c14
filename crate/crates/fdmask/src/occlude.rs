//! Occlusion synthesis: texture corpus, block-targeted occluders, training
//! pairs, and free-form random occluders.
//!
//! Occluders are grayscale textures tiled over a pixel rectangle. Tiling is
//! anchored at the image origin so re-pasting the same texture over a larger
//! region extends the pattern instead of restarting it. Textures live in a
//! corpus keyed by id and are partitioned into train/test splits by id hash
//! so the two phases never share an occluder.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FaceSet;
use crate::error::{Error, Result};
use crate::face::{AlignedFace, OcclusionRegion};
use crate::geom::Rect;
use crate::grid::{BlockId, GridSpec};
use crate::io::sha256_hex;
use crate::scalar::Scalar;

/// Which phase a texture may be used in. Train textures build PDSN pairs;
/// test textures corrupt evaluation probes. The split is disjoint by id hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSplit {
    Train,
    Test,
}

impl TextureSplit {
    fn tag(self) -> &'static str {
        match self {
            TextureSplit::Train => "train",
            TextureSplit::Test => "test",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "train" => Ok(TextureSplit::Train),
            "test" => Ok(TextureSplit::Test),
            other => Err(Error::format(format!("unknown texture split {other:?}"))),
        }
    }
}

pub struct OccluderTexture<S: Scalar> {
    id: String,
    split: TextureSplit,
    pixels: Array2<S>,
}

impl<S: Scalar> OccluderTexture<S> {
    pub fn new(id: String, split: TextureSplit, pixels: Array2<S>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::invalid_argument("texture must be non-empty"));
        }
        for &v in pixels.iter() {
            let v = v.into64();
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_argument(
                    "texture values must be finite and in [0, 1]",
                ));
            }
        }
        Ok(OccluderTexture { id, split, pixels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn split(&self) -> TextureSplit {
        self.split
    }

    pub fn pixels(&self) -> &Array2<S> {
        &self.pixels
    }

    /// Texture value at image coordinates, tiled from the image origin.
    fn at(&self, y: usize, x: usize) -> S {
        let (th, tw) = self.pixels.dim();
        self.pixels[(y % th, x % tw)]
    }
}

/// Splits a texture id by hash parity so train/test never share a texture.
pub fn split_for_id(id: &str) -> TextureSplit {
    let digest = sha256_hex(id.as_bytes());
    // First hex digit even → train.
    let first = u8::from_str_radix(&digest[0..1], 16).expect("hex digest");
    if first % 2 == 0 {
        TextureSplit::Train
    } else {
        TextureSplit::Test
    }
}

/// A set of occluder textures addressable by id.
pub struct OccluderCorpus<S: Scalar> {
    textures: BTreeMap<String, OccluderTexture<S>>,
}

impl<S: Scalar> OccluderCorpus<S> {
    pub fn new(textures: Vec<OccluderTexture<S>>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in textures {
            let id = t.id.clone();
            if map.insert(id.clone(), t).is_some() {
                return Err(Error::invalid_argument(format!("duplicate texture id {id}")));
            }
        }
        Ok(OccluderCorpus { textures: map })
    }

    /// Generates `count` textures of `size`×`size` pixels, deterministically
    /// from `seed`: checkerboards, stripes, uniform noise, solid tones, and
    /// two portrait-like kinds (smooth mid-tone gradients carrying dark blobs
    /// or a bright bar). The portrait-like kinds matter for evaluation:
    /// features corrupted by them resemble someone else's face rather than
    /// generic clutter, which is the regime where discarding a corrupted
    /// element outperforms merely down-weighting it.
    pub fn procedural(count: usize, size: usize, seed: u64) -> Result<Self> {
        if count == 0 || size == 0 {
            return Err(Error::invalid_argument(
                "texture count and size must be positive",
            ));
        }
        let mut textures = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::io::derive_seed(
                seed,
                &format!("texture-{i}"),
            ));
            let id = format!("tex-{i:04}");
            let mut pixels = Array2::zeros((size, size));
            // One dark and one bright tone: every geometric texture then
            // contrasts strongly with the mid-tone portraits it covers, so
            // an occluded pixel is genuinely replaced rather than blended
            // into a similar value.
            let tone_a = rng.random_range(0.0..0.35);
            let tone_b = rng.random_range(0.65..1.0);
            match i % 6 {
                0 => {
                    // Checkerboard.
                    let cell = rng.random_range(3..9usize);
                    for ((y, x), v) in pixels.indexed_iter_mut() {
                        let on = (y / cell + x / cell) % 2 == 0;
                        *v = S::from64(if on { tone_a } else { tone_b });
                    }
                }
                1 => {
                    // Diagonal stripes.
                    let period = rng.random_range(4..12usize);
                    let slope = rng.random_range(0..3usize);
                    for ((y, x), v) in pixels.indexed_iter_mut() {
                        let on = (x + slope * y) % period < period / 2;
                        *v = S::from64(if on { tone_a } else { tone_b });
                    }
                }
                2 => {
                    // Uniform noise between the two tones.
                    let lo = tone_a.min(tone_b);
                    let hi = tone_a.max(tone_b);
                    for v in pixels.iter_mut() {
                        *v = S::from64(if hi > lo {
                            rng.random_range(lo..hi)
                        } else {
                            lo
                        });
                    }
                }
                3 => {
                    // Solid tone, dark or bright.
                    let tone = if rng.random_bool(0.5) { tone_a } else { tone_b };
                    for v in pixels.iter_mut() {
                        *v = S::from64(tone);
                    }
                }
                4 => {
                    // Portrait-like: smooth mid-tone gradient with a pair of
                    // dark elliptical blobs above a dark mouth-like ellipse.
                    let mut coarse = Array2::zeros((3, 3));
                    for v in coarse.iter_mut() {
                        *v = rng.random_range(0.40..0.72);
                    }
                    let mut patch = crate::dataset::bilinear_upsample(&coarse, size, size);
                    let sf = size as f64;
                    let blob_value = rng.random_range(0.03..0.30);
                    let blob_y = rng.random_range(0.25..0.45);
                    for blob_x in [rng.random_range(0.20..0.38), rng.random_range(0.62..0.80)]
                    {
                        crate::dataset::fill_ellipse(
                            &mut patch,
                            blob_y * sf,
                            blob_x * sf,
                            rng.random_range(0.06..0.12) * sf,
                            rng.random_range(0.09..0.16) * sf,
                            blob_value,
                        );
                    }
                    crate::dataset::fill_ellipse(
                        &mut patch,
                        rng.random_range(0.68..0.85) * sf,
                        0.5 * sf,
                        rng.random_range(0.05..0.10) * sf,
                        rng.random_range(0.18..0.32) * sf,
                        rng.random_range(0.05..0.35),
                    );
                    for (v, &p) in pixels.iter_mut().zip(patch.iter()) {
                        *v = S::from64(p);
                    }
                }
                _ => {
                    // Portrait-like: smooth mid-tone gradient with a bright
                    // vertical bar flanked by a dark brow-like band.
                    let mut coarse = Array2::zeros((3, 3));
                    for v in coarse.iter_mut() {
                        *v = rng.random_range(0.40..0.72);
                    }
                    let mut patch = crate::dataset::bilinear_upsample(&coarse, size, size);
                    let sf = size as f64;
                    let bar_x = rng.random_range(0.35..0.65);
                    let bar_half = rng.random_range(0.05..0.11);
                    crate::dataset::fill_rect(
                        &mut patch,
                        rng.random_range(0.15..0.35) * sf,
                        rng.random_range(0.70..0.90) * sf,
                        (bar_x - bar_half) * sf,
                        (bar_x + bar_half) * sf,
                        rng.random_range(0.45..0.80),
                    );
                    crate::dataset::fill_rect(
                        &mut patch,
                        rng.random_range(0.08..0.16) * sf,
                        rng.random_range(0.18..0.26) * sf,
                        0.12 * sf,
                        0.88 * sf,
                        rng.random_range(0.10..0.45),
                    );
                    for (v, &p) in pixels.iter_mut().zip(patch.iter()) {
                        *v = S::from64(p);
                    }
                }
            }
            textures.push(OccluderTexture::new(id.clone(), split_for_id(&id), pixels)?);
        }
        OccluderCorpus::new(textures)
    }

    pub fn len(&self) -> usize {
        self.textures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.textures.is_empty()
    }

    /// Missing textures surface as an I/O error: the id names an occluder
    /// image that cannot be loaded.
    pub fn get(&self, id: &str) -> Result<&OccluderTexture<S>> {
        self.textures.get(id).ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("occluder texture {id:?} not in corpus"),
            ))
        })
    }

    pub fn ids(&self, split: TextureSplit) -> Vec<&str> {
        self.textures
            .values()
            .filter(|t| t.split == split)
            .map(|t| t.id.as_str())
            .collect()
    }

    pub fn sample<R: Rng>(&self, split: TextureSplit, rng: &mut R) -> Result<&OccluderTexture<S>> {
        let ids = self.ids(split);
        let id = ids
            .choose(rng)
            .ok_or_else(|| Error::invalid_state(format!("no textures in {} split", split.tag())))?;
        self.get(id)
    }

    /// Writes PNGs plus `index.tsv` (`id<TAB>split<TAB>path`) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::new();
        for t in self.textures.values() {
            let rel = format!("{}.png", t.id);
            let (h, w) = t.pixels.dim();
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = t.pixels[(y, x)].into64();
                    img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
                }
            }
            img.save(dir.join(&rel))?;
            index.push_str(&format!("{}\t{}\t{rel}\n", t.id, t.split.tag()));
        }
        let index_path = dir.join("index.tsv");
        std::fs::write(&index_path, index)?;
        Ok(index_path)
    }

    pub fn load(index_path: &Path) -> Result<Self> {
        let dir = index_path
            .parent()
            .ok_or_else(|| Error::invalid_argument("index path has no parent directory"))?;
        let text = std::fs::read_to_string(index_path)?;
        let mut textures = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (id, tag, rel) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(Error::format(format!(
                        "texture index line {} is not 'id<TAB>split<TAB>path'",
                        lineno + 1
                    )))
                }
            };
            let img = image::open(dir.join(rel))?.into_luma8();
            let (w, h) = img.dimensions();
            let mut pixels = Array2::zeros((h as usize, w as usize));
            for y in 0..h {
                for x in 0..w {
                    pixels[(y as usize, x as usize)] =
                        S::from64(f64::from(img.get_pixel(x, y).0[0]) / 255.0);
                }
            }
            textures.push(OccluderTexture::new(
                id.to_string(),
                TextureSplit::from_tag(tag)?,
                pixels,
            )?);
        }
        OccluderCorpus::new(textures)
    }
}

use rand::SeedableRng;

/// A texture id plus the pixel rectangle it is pasted over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub texture_id: String,
    pub placement: Rect,
}

/// Replaces the pixels of `face` under `region` with `texture` (tiled from the
/// image origin, replicated across channels).
pub fn paste_region<S: Scalar>(
    face: &AlignedFace<S>,
    region: &OcclusionRegion,
    texture: &OccluderTexture<S>,
) -> Result<AlignedFace<S>> {
    if region.dims() != (face.height(), face.width()) {
        return Err(Error::shape(
            format!("{}x{}", face.height(), face.width()),
            format!("{:?}", region.dims()),
        ));
    }
    let mut out = face.clone();
    let mask = region.mask();
    let channels = face.channels();
    let pix = out.pixels_mut();
    for ((y, x), &m) in mask.indexed_iter() {
        if m == 1 {
            let v = texture.at(y, x);
            for c in 0..channels {
                pix[(c, y, x)] = v;
            }
        }
    }
    Ok(out)
}

/// Fraction of `block`'s rectangle covered by `rect`.
pub fn block_coverage(grid: &GridSpec, block: BlockId, rect: &Rect) -> Result<f64> {
    let block_rect = grid.block_rect(block)?;
    let inter = block_rect.intersect(rect);
    Ok(inter.area() as f64 / block_rect.area() as f64)
}

/// Pastes the occluder over `face` so that it covers at least half of
/// `block`'s rectangle. Returns the corrupted face and the exact region.
pub fn occlude_block<S: Scalar>(
    face: &AlignedFace<S>,
    grid: &GridSpec,
    block: BlockId,
    corpus: &OccluderCorpus<S>,
    spec: &OccluderSpec,
) -> Result<(AlignedFace<S>, OcclusionRegion)> {
    if (grid.image_height(), grid.image_width()) != (face.height(), face.width()) {
        return Err(Error::shape(
            format!("{}x{}", grid.image_height(), grid.image_width()),
            format!("{}x{}", face.height(), face.width()),
        ));
    }
    grid.validate_block(block)?;
    if spec.placement.is_empty() {
        return Err(Error::invalid_argument("occluder placement must be non-empty"));
    }
    if !spec.placement.fits_in(face.height(), face.width()) {
        return Err(Error::invalid_argument(
            "occluder placement must lie within image bounds",
        ));
    }
    let coverage = block_coverage(grid, block, &spec.placement)?;
    if coverage < 0.5 {
        return Err(Error::invalid_argument(format!(
            "occluder covers only {coverage:.2} of block {block}; need at least 0.5"
        )));
    }
    let texture = corpus.get(&spec.texture_id)?;
    let region = OcclusionRegion::from_rect(face.height(), face.width(), spec.placement)?;
    let occluded = paste_region(face, &region, texture)?;
    Ok((occluded, region))
}

/// Samples a rectangle guaranteed to cover at least half of `block`: the
/// block's own rectangle scaled by [1.0, 1.4) per axis and shifted by up to a
/// quarter of the block size, then clamped into the image (clamping only ever
/// moves the rectangle back toward the block).
pub fn rect_over_block<R: Rng>(grid: &GridSpec, block: BlockId, rng: &mut R) -> Result<Rect> {
    let b = grid.block_rect(block)?;
    let (img_h, img_w) = (grid.image_height(), grid.image_width());
    let scale_h = rng.random_range(1.0..1.4);
    let scale_w = rng.random_range(1.0..1.4);
    let shift_y = rng.random_range(-0.25..0.25) * b.height as f64;
    let shift_x = rng.random_range(-0.25..0.25) * b.width as f64;

    let h = ((b.height as f64 * scale_h).round() as usize).clamp(1, img_h);
    let w = ((b.width as f64 * scale_w).round() as usize).clamp(1, img_w);
    let cy = b.y as f64 + b.height as f64 / 2.0 + shift_y;
    let cx = b.x as f64 + b.width as f64 / 2.0 + shift_x;
    let y = (cy - h as f64 / 2.0).round().max(0.0) as usize;
    let x = (cx - w as f64 / 2.0).round().max(0.0) as usize;
    let y = y.min(img_h - h);
    let x = x.min(img_w - w);
    let rect = Rect::new(x, y, w, h);
    // Integer rounding can dip below half coverage when blocks are only a few
    // pixels wide; fall back to the exact block rectangle in that case.
    if block_coverage(grid, block, &rect)? >= 0.5 {
        Ok(rect)
    } else {
        Ok(b)
    }
}

/// A clean/occluded image pair for mask-generator training.
pub struct TrainingPair<S: Scalar> {
    pub clean: Arc<AlignedFace<S>>,
    pub occluded: Arc<AlignedFace<S>>,
    pub identity: u32,
    pub target_block: BlockId,
    pub occluded_blocks: BTreeSet<BlockId>,
    pub region: OcclusionRegion,
}

/// Draws training pairs occluded on a chosen block, optionally extending the
/// occlusion onto one uniformly-chosen 4-neighbor with probability `p_aug`.
pub struct PairSampler<'a, S: Scalar> {
    dataset: &'a FaceSet<S>,
    corpus: &'a OccluderCorpus<S>,
    grid: GridSpec,
    split: TextureSplit,
    p_aug: f64,
}

impl<'a, S: Scalar> PairSampler<'a, S> {
    pub fn new(
        dataset: &'a FaceSet<S>,
        corpus: &'a OccluderCorpus<S>,
        grid: GridSpec,
        split: TextureSplit,
        p_aug: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_aug) {
            return Err(Error::invalid_argument("p_aug must lie in [0, 1]"));
        }
        if let Some((_, h, w)) = dataset.face_dims() {
            if (h, w) != (grid.image_height(), grid.image_width()) {
                return Err(Error::shape(
                    format!("{}x{}", grid.image_height(), grid.image_width()),
                    format!("{h}x{w}"),
                ));
            }
        }
        Ok(PairSampler {
            dataset,
            corpus,
            grid,
            split,
            p_aug,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Draws one pair with the sampler's configured augmentation probability.
    pub fn sample<R: Rng>(&self, target_block: BlockId, rng: &mut R) -> Result<TrainingPair<S>> {
        self.sample_with_p_aug(target_block, self.p_aug, rng)
    }

    /// Draws one pair with an explicit augmentation probability.
    /// A pair whose occluder covers the target block's rectangle exactly —
    /// no placement jitter and no extra blocks. Used when distilling a
    /// dictionary entry, so that every collected mask reflects the same
    /// corrupted image region and only the face and texture vary.
    pub fn sample_canonical<R: Rng>(
        &self,
        target_block: BlockId,
        rng: &mut R,
    ) -> Result<TrainingPair<S>> {
        if self.dataset.is_empty() {
            return Err(Error::invalid_state("cannot sample pairs from an empty dataset"));
        }
        self.grid.validate_block(target_block)?;
        let entry = self.dataset.entry(rng.random_range(0..self.dataset.len()));
        let texture = self.corpus.sample(self.split, rng)?;
        let spec = OccluderSpec {
            texture_id: texture.id().to_string(),
            placement: self.grid.block_rect(target_block)?,
        };
        let (occluded, region) =
            occlude_block(entry.face.as_ref(), &self.grid, target_block, self.corpus, &spec)?;
        Ok(TrainingPair {
            clean: Arc::clone(&entry.face),
            occluded: Arc::new(occluded),
            identity: entry.identity,
            target_block,
            occluded_blocks: BTreeSet::from([target_block]),
            region,
        })
    }

    pub fn sample_with_p_aug<R: Rng>(
        &self,
        target_block: BlockId,
        p_aug: f64,
        rng: &mut R,
    ) -> Result<TrainingPair<S>> {
        if !(0.0..=1.0).contains(&p_aug) {
            return Err(Error::invalid_argument("p_aug must lie in [0, 1]"));
        }
        if self.dataset.is_empty() {
            return Err(Error::invalid_state("cannot sample pairs from an empty dataset"));
        }
        self.grid.validate_block(target_block)?;
        let entry = self.dataset.entry(rng.random_range(0..self.dataset.len()));

        let rect = rect_over_block(&self.grid, target_block, rng)?;
        let texture = self.corpus.sample(self.split, rng)?;
        let spec = OccluderSpec {
            texture_id: texture.id().to_string(),
            placement: rect,
        };
        let (mut occluded, mut region) =
            occlude_block(entry.face.as_ref(), &self.grid, target_block, self.corpus, &spec)?;
        let mut occluded_blocks = BTreeSet::from([target_block]);

        if p_aug > 0.0 && rng.random_bool(p_aug) {
            let neighbors = self.grid.four_neighbors(target_block)?;
            let &neighbor = neighbors.get(rng.random_range(0..neighbors.len())).unwrap();
            let rect2 = rect_over_block(&self.grid, neighbor, rng)?;
            let texture2 = self.corpus.sample(self.split, rng)?;
            let spec2 = OccluderSpec {
                texture_id: texture2.id().to_string(),
                placement: rect2,
            };
            let (aug, region2) =
                occlude_block(&occluded, &self.grid, neighbor, self.corpus, &spec2)?;
            occluded = aug;
            region = region.union(&region2)?;
            occluded_blocks.insert(neighbor);
        }

        Ok(TrainingPair {
            clean: Arc::clone(&entry.face),
            occluded: Arc::new(occluded),
            identity: entry.identity,
            target_block,
            occluded_blocks,
            region,
        })
    }
}

/// Pastes a random rectangle whose expected area is `area_fraction` of the
/// image: both side lengths are drawn uniformly from [0.5a, 1.5a] with
/// a = sqrt(area_fraction·H·W), so E[h·w] = a².
pub fn random_occlude<S: Scalar, R: Rng>(
    face: &AlignedFace<S>,
    corpus: &OccluderCorpus<S>,
    split: TextureSplit,
    area_fraction: f64,
    rng: &mut R,
) -> Result<(AlignedFace<S>, OcclusionRegion)> {
    if !(0.0..1.0).contains(&area_fraction) || area_fraction == 0.0 {
        return Err(Error::invalid_argument("area_fraction must lie in (0, 1)"));
    }
    let (img_h, img_w) = (face.height(), face.width());
    let a = (area_fraction * img_h as f64 * img_w as f64).sqrt();
    let h = (rng.random_range(0.5 * a..1.5 * a).round() as usize).clamp(1, img_h);
    let w = (rng.random_range(0.5 * a..1.5 * a).round() as usize).clamp(1, img_w);
    let y = rng.random_range(0..=img_h - h);
    let x = rng.random_range(0..=img_w - w);
    let rect = Rect::new(x, y, w, h);
    let texture = corpus.sample(split, rng)?;
    let region = OcclusionRegion::from_rect(img_h, img_w, rect)?;
    let occluded = paste_region(face, &region, texture)?;
    Ok((occluded, region))
}

/// Horizontal band over the eyes: rows [0.28H, 0.45H), columns [0.15W, 0.85W).
pub fn sunglasses_region(image_height: usize, image_width: usize) -> Result<OcclusionRegion> {
    let h = image_height as f64;
    let w = image_width as f64;
    let rect = Rect::new(
        (0.15 * w).round() as usize,
        (0.28 * h).round() as usize,
        ((0.85 - 0.15) * w).round() as usize,
        ((0.45 - 0.28) * h).round() as usize,
    );
    OcclusionRegion::from_rect(image_height, image_width, rect)
}

/// Band over the lower face: rows [0.62H, H), full width.
pub fn scarf_region(image_height: usize, image_width: usize) -> Result<OcclusionRegion> {
    let h = image_height as f64;
    let y = (0.62 * h).round() as usize;
    let rect = Rect::new(0, y, image_width, image_height - y);
    OcclusionRegion::from_rect(image_height, image_width, rect)
}
