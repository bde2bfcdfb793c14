//! Diagnostics: the median elementwise deviation (MED) statistic that
//! motivates per-element feature discarding, per-channel profiles of it,
//! receptive-field arithmetic for localizing it, mean-mask rendering, and the
//! ablation bookkeeping grid.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FaceSet;
use crate::dictionary::MaskDictionary;
use crate::error::{Error, Result};
use crate::face::{AlignedFace, OcclusionRegion};
use crate::geom::Rect;
use crate::grid::BlockId;
use crate::io::derive_seed;
use crate::occlude::{paste_region, OccluderTexture};
use crate::scalar::Scalar;
use crate::trunk::TrunkNet;

/// Default divisor guard: post-activation features contain exact zeros, so
/// the relative change is computed against `max(|clean|, epsilon)`.
pub const RELATIVE_CHANGE_EPSILON: f64 = 1e-6;

/// Elementwise `|clean - occluded| / max(|clean|, epsilon)`.
pub fn relative_change<S: Scalar>(
    clean: &Array3<S>,
    occluded: &Array3<S>,
    epsilon: f64,
) -> Result<Array3<f64>> {
    if clean.dim() != occluded.dim() {
        return Err(Error::shape(
            format!("{:?}", clean.dim()),
            format!("{:?}", occluded.dim()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid_argument("epsilon must be positive"));
    }
    let mut out = Array3::zeros(clean.dim());
    for ((o, &c), &v) in out.iter_mut().zip(clean.iter()).zip(occluded.iter()) {
        let c = c.into64();
        *o = (c - v.into64()).abs() / c.abs().max(epsilon);
    }
    Ok(out)
}

/// Elementwise median of per-pair relative feature changes under one fixed
/// occluder placement.
#[derive(Clone, Debug)]
pub struct MedReport {
    med: Array3<f64>,
    texture_id: String,
    placement: Rect,
    sample_count: usize,
    epsilon: f64,
}

impl MedReport {
    pub fn med(&self) -> &Array3<f64> {
        &self.med
    }

    pub fn texture_id(&self) -> &str {
        &self.texture_id
    }

    pub fn placement(&self) -> Rect {
        self.placement
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Lower median: the 1-based order statistic `ceil(n/2)` of a slice.
/// Deterministic for even counts (no averaging of the two middle values).
fn lower_median(values: &mut [f64]) -> f64 {
    let idx = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(idx, f64::total_cmp);
    *m
}

/// Computes the MED volume over `faces`: every face is occluded with the SAME
/// texture and placement, per-pair relative changes are taken against the
/// clean features, and each element's lower median across the pairs is
/// reported. The sample count is `faces.len()`.
pub fn med<S: Scalar>(
    trunk: &TrunkNet<S>,
    faces: &[&AlignedFace<S>],
    texture: &OccluderTexture<S>,
    placement: Rect,
    epsilon: f64,
) -> Result<MedReport> {
    if faces.is_empty() {
        return Err(Error::invalid_argument("need at least one face"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid_argument("epsilon must be positive"));
    }
    let (h, w) = (faces[0].height(), faces[0].width());
    if placement.is_empty() || !placement.fits_in(h, w) {
        return Err(Error::invalid_argument(format!(
            "placement {placement:?} must be non-empty and inside {h}x{w}"
        )));
    }
    let region = OcclusionRegion::from_rect(h, w, placement)?;
    let clean_feats = trunk.conv_features(faces)?;
    let occluded: Vec<AlignedFace<S>> = faces
        .iter()
        .map(|f| paste_region(f, &region, texture))
        .collect::<Result<_>>()?;
    let occ_refs: Vec<&AlignedFace<S>> = occluded.iter().collect();
    let occ_feats = trunk.conv_features(&occ_refs)?;

    let dims = trunk.feature_shape().dims();
    let n = faces.len();
    // changes[pair][element], elements in channel-major order.
    let mut changes = Vec::with_capacity(n);
    for (c, o) in clean_feats.iter().zip(occ_feats.iter()) {
        let r = relative_change(c.values(), o.values(), epsilon)?;
        changes.push(r.into_raw_vec_and_offset().0);
    }
    let k = dims.0 * dims.1 * dims.2;
    let mut med_flat = Vec::with_capacity(k);
    let mut column = vec![0.0f64; n];
    for e in 0..k {
        for (p, row) in changes.iter().enumerate() {
            column[p] = row[e];
        }
        med_flat.push(lower_median(&mut column));
    }
    Ok(MedReport {
        med: Array3::from_shape_vec(dims, med_flat).expect("length checked"),
        texture_id: texture.id().to_string(),
        placement,
        sample_count: n,
        epsilon,
    })
}

/// Draws `n` distinct faces from the set (seeded shuffle) and runs [`med`].
pub fn med_sampled<S: Scalar>(
    trunk: &TrunkNet<S>,
    set: &FaceSet<S>,
    texture: &OccluderTexture<S>,
    placement: Rect,
    n: usize,
    epsilon: f64,
    seed: u64,
) -> Result<MedReport> {
    if n == 0 || n > set.len() {
        return Err(Error::invalid_argument(format!(
            "need 1 <= n <= {} faces, got {n}",
            set.len()
        )));
    }
    let mut indices: Vec<usize> = (0..set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "med-faces"));
    indices.shuffle(&mut rng);
    indices.truncate(n);
    let faces: Vec<&AlignedFace<S>> = indices
        .iter()
        .map(|&i| set.entry(i).face.as_ref())
        .collect();
    med(trunk, &faces, texture, placement, epsilon)
}

/// Mean and max MED of one channel's feature plane.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelMedStats {
    pub channel: usize,
    pub mean: f64,
    pub max: f64,
}

/// Per-channel MED summary (one row per channel, in channel order).
pub fn channel_profile(report: &MedReport) -> Vec<ChannelMedStats> {
    let (c, _, _) = report.med.dim();
    (0..c)
        .map(|ch| {
            let plane = report.med.index_axis(ndarray::Axis(0), ch);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ChannelMedStats {
                channel: ch,
                mean,
                max,
            }
        })
        .collect()
}

/// Coefficient of variation (population std / mean) of per-channel means.
pub fn channel_mean_cv(stats: &[ChannelMedStats]) -> f64 {
    let n = stats.len() as f64;
    let mean = stats.iter().map(|s| s.mean).sum::<f64>() / n;
    let var = stats.iter().map(|s| (s.mean - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Inclusive input pixel range `(y0, y1, x0, x1)` feeding one output position
/// of a conv stack, composed layer by layer from `(kernel, stride, pad)`
/// triples. Bounds may fall outside the image where padding contributes.
pub fn receptive_field(
    geometry: &[(usize, usize, usize)],
    y: usize,
    x: usize,
) -> (isize, isize, isize, isize) {
    let (mut y0, mut y1) = (y as isize, y as isize);
    let (mut x0, mut x1) = (x as isize, x as isize);
    for &(k, s, p) in geometry.iter().rev() {
        let (k, s, p) = (k as isize, s as isize, p as isize);
        y0 = y0 * s - p;
        y1 = y1 * s - p + k - 1;
        x0 = x0 * s - p;
        x1 = x1 * s - p + k - 1;
    }
    (y0, y1, x0, x1)
}

fn rf_intersects_rect(rf: (isize, isize, isize, isize), rect: Rect) -> bool {
    let (y0, y1, x0, x1) = rf;
    let ry0 = rect.y as isize;
    let ry1 = rect.bottom() as isize - 1;
    let rx0 = rect.x as isize;
    let rx1 = rect.right() as isize - 1;
    y0 <= ry1 && y1 >= ry0 && x0 <= rx1 && x1 >= rx0
}

/// Mean MED split by whether a feature position's receptive field touches
/// the occluder rectangle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RfSplit {
    pub covered_mean: f64,
    pub uncovered_mean: f64,
    pub covered_positions: usize,
    pub uncovered_positions: usize,
}

impl RfSplit {
    /// covered mean / uncovered mean (infinite when nothing is uncovered).
    pub fn ratio(&self) -> f64 {
        self.covered_mean / self.uncovered_mean
    }
}

/// Classifies each spatial position of the MED volume by receptive-field
/// overlap with the report's occluder placement and averages MED (over all
/// channels) within each class.
pub fn med_rf_split(
    report: &MedReport,
    geometry: &[(usize, usize, usize)],
) -> Result<RfSplit> {
    let (c, h, w) = report.med.dim();
    let mut covered_sum = 0.0;
    let mut covered_n = 0usize;
    let mut uncovered_sum = 0.0;
    let mut uncovered_n = 0usize;
    for yy in 0..h {
        for xx in 0..w {
            let rf = receptive_field(geometry, yy, xx);
            let touched = rf_intersects_rect(rf, report.placement);
            for ch in 0..c {
                let v = report.med[(ch, yy, xx)];
                if touched {
                    covered_sum += v;
                    covered_n += 1;
                } else {
                    uncovered_sum += v;
                    uncovered_n += 1;
                }
            }
        }
    }
    if covered_n == 0 || uncovered_n == 0 {
        return Err(Error::invalid_argument(
            "occluder placement must leave both covered and uncovered feature positions",
        ));
    }
    Ok(RfSplit {
        covered_mean: covered_sum / covered_n as f64,
        uncovered_mean: uncovered_sum / uncovered_n as f64,
        covered_positions: covered_n / c,
        uncovered_positions: uncovered_n / c,
    })
}

/// Renders a block's stored mean mask as one grayscale plane per channel,
/// mapping [0,1] linearly to [0,255].
pub fn render_mean_mask<S: Scalar>(
    dict: &MaskDictionary<S>,
    block: BlockId,
) -> Result<Vec<Array2<u8>>> {
    let mean = dict.mean(block).ok_or_else(|| {
        Error::invalid_state(format!("block {block} has no stored mean mask"))
    })?;
    let (c, h, w) = mean.values().dim();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = Array2::from_shape_fn((h, w), |(y, x)| {
            (mean.values()[(ch, y, x)].into64() * 255.0).round() as u8
        });
        out.push(plane);
    }
    Ok(out)
}

/// Writes the rendered planes as PNGs named `mean-mask-block{B}-ch{C}.png`.
pub fn write_mean_mask_pngs<S: Scalar>(
    dict: &MaskDictionary<S>,
    block: BlockId,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let planes = render_mean_mask(dict, block)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(planes.len());
    for (ch, plane) in planes.iter().enumerate() {
        let (h, w) = plane.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x as u32, y as u32, image::Luma([plane[(y, x)]]));
            }
        }
        let path = dir.join(format!("mean-mask-block{:02}-ch{ch:02}.png", block.index()));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// One ablation cell: a labeled setting and either its metric or the error
/// that prevented it. A failed cell never aborts the grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub axis: String,
    pub setting: String,
    pub seed: u64,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

/// Collected ablation results across axes (mask threshold sweep, mask
/// variants, differential on/off).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn new() -> Self {
        AblationGrid::default()
    }

    pub fn record(
        &mut self,
        axis: impl Into<String>,
        setting: impl Into<String>,
        seed: u64,
        outcome: Result<f64>,
    ) {
        let (metric, error) = match outcome {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.cells.push(AblationCell {
            axis: axis.into(),
            setting: setting.into(),
            seed,
            metric,
            error,
        });
    }

    pub fn axis(&self, axis: &str) -> Vec<&AblationCell> {
        self.cells.iter().filter(|c| c.axis == axis).collect()
    }

    pub fn cell(&self, axis: &str, setting: &str) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.axis == axis && c.setting == setting)
    }

    pub fn failed(&self) -> Vec<&AblationCell> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }
}
