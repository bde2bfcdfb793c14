//! Masked matching: compose a probe's feature discarding mask from its
//! occluded blocks, apply it to BOTH probe and gallery features, and score by
//! cosine similarity.
//!
//! The gallery caches top-layer convolutional features once; because the mask
//! depends on the probe, only the cheap head (pooling + fc) re-runs per probe.
//! Plain (unmasked) identification and verification are deliberately separate
//! code paths so masked runs with an empty occlusion set can be checked
//! bitwise against them.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array3;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FaceSet;
use crate::dictionary::{smallest_by_value, zero_count_for, Fdm, MaskDictionary};
use crate::error::{Error, Result};
use crate::face::{AlignedFace, OcclusionRegion};
use crate::grid::{BlockId, GridSpec};
use crate::io::derive_seed;
use crate::occlude::PairSampler;
use crate::scalar::Scalar;
use crate::trunk::{ConvFeature, Embedding, FitSchedule, TrainReport, TrainSample, TrunkNet};

/// Fraction of a block that must be covered before its dictionary entry
/// joins the composition.
pub const COMPOSE_COVERAGE: f64 = 0.5;

/// Which mask payload multiplies the features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    /// The binarized dictionary entries, AND-composed.
    Binary,
    /// The raw mean masks, multiplied elementwise.
    Soft,
    /// Soft values with the same top-`tau*K` cut zeroed (kept values stay at
    /// their soft value, not 1).
    SoftBinary,
}

impl MaskVariant {
    pub fn tag(self) -> &'static str {
        match self {
            MaskVariant::Binary => "binary",
            MaskVariant::Soft => "soft",
            MaskVariant::SoftBinary => "soft_binary",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "binary" => Ok(MaskVariant::Binary),
            "soft" => Ok(MaskVariant::Soft),
            "soft_binary" => Ok(MaskVariant::SoftBinary),
            other => Err(Error::invalid_argument(format!(
                "unknown mask variant {other:?} (expected binary, soft, or soft_binary)"
            ))),
        }
    }
}

fn check_dictionary<S: Scalar>(trunk: &TrunkNet<S>, dict: &MaskDictionary<S>) -> Result<()> {
    if dict.trunk_id() != trunk.id() {
        return Err(Error::invalid_state(format!(
            "dictionary belongs to trunk {} but got {}",
            dict.trunk_id(),
            trunk.id()
        )));
    }
    if dict.feature_shape() != trunk.feature_shape() {
        return Err(Error::invalid_state(format!(
            "dictionary feature shape {:?} does not match trunk {:?}",
            dict.feature_shape().dims(),
            trunk.feature_shape().dims()
        )));
    }
    Ok(())
}

/// Splits an occluded-block set into the central blocks that carry dictionary
/// entries; peripheral blocks contribute nothing (all-ones).
fn contributing_blocks<S: Scalar>(
    dict: &MaskDictionary<S>,
    grid: &GridSpec,
    blocks: &BTreeSet<BlockId>,
) -> Result<Vec<BlockId>> {
    let mut central = Vec::new();
    for &block in blocks {
        grid.validate_block(block)?;
        if grid.is_central(block)? {
            if dict.entry(block).is_none() {
                return Err(Error::invalid_state(format!(
                    "dictionary has no entry for central block {block}"
                )));
            }
            central.push(block);
        }
    }
    Ok(central)
}

/// ANDs the dictionary entries of the occluded central blocks. Peripheral
/// blocks and the empty set yield all-ones (nothing is discarded).
pub fn compose_fdm<S: Scalar>(
    dict: &MaskDictionary<S>,
    grid: &GridSpec,
    blocks: &BTreeSet<BlockId>,
) -> Result<Fdm> {
    let central = contributing_blocks(dict, grid, blocks)?;
    let mut out = Fdm::ones(dict.feature_shape());
    for block in central {
        out = out.and(dict.fdm(block).expect("checked above"))?;
    }
    Ok(out)
}

/// The mask volume a variant multiplies into the features. The empty
/// contribution set yields exact all-ones for every variant.
pub fn apply_variant<S: Scalar>(
    dict: &MaskDictionary<S>,
    grid: &GridSpec,
    blocks: &BTreeSet<BlockId>,
    variant: MaskVariant,
) -> Result<Array3<S>> {
    let central = contributing_blocks(dict, grid, blocks)?;
    if central.is_empty() {
        return Ok(Array3::ones(dict.feature_shape().dims()));
    }
    match variant {
        MaskVariant::Binary => Ok(compose_fdm(dict, grid, blocks)?.as_multiplier()),
        MaskVariant::Soft => soft_product(dict, &central),
        MaskVariant::SoftBinary => {
            // The soft product with its own bottom τ-quantile zeroed, under
            // the same (value, flat index) order binarization uses. With a
            // single contributing block the product is that block's mean
            // mask, so the zero set is exactly the binary entry's.
            let mut out = soft_product(dict, &central)?;
            let count = zero_count_for(dict.tau(), out.len());
            let flat = out.as_slice_mut().expect("standard layout");
            for i in smallest_by_value(flat, count) {
                flat[i] = S::zero();
            }
            Ok(out)
        }
    }
}

fn soft_product<S: Scalar>(dict: &MaskDictionary<S>, central: &[BlockId]) -> Result<Array3<S>> {
    let mut out = Array3::<S>::ones(dict.feature_shape().dims());
    for &block in central {
        let mean = dict.mean(block).ok_or_else(|| {
            Error::invalid_state(format!(
                "soft variants need stored mean masks; block {block} has none"
            ))
        })?;
        out *= mean.values();
    }
    Ok(out)
}

/// Head pass over a cached convolutional feature with a mask volume
/// multiplied in.
fn masked_head<S: Scalar>(
    trunk: &TrunkNet<S>,
    feature: &ConvFeature<S>,
    volume: &Array3<S>,
) -> Result<Embedding<S>> {
    if feature.values().dim() != volume.dim() {
        return Err(Error::shape(
            format!("{:?}", feature.values().dim()),
            format!("{:?}", volume.dim()),
        ));
    }
    let masked = ConvFeature::new(feature.values() * volume, feature.checkpoint().clone());
    trunk.forward_head(&masked)
}

/// Embeds a face with a binary mask multiplied into its top convolutional
/// features before the head.
pub fn masked_embed<S: Scalar>(
    trunk: &TrunkNet<S>,
    face: &AlignedFace<S>,
    fdm: &Fdm,
) -> Result<Embedding<S>> {
    let feature = trunk.forward_conv(face)?;
    masked_head(trunk, &feature, &fdm.as_multiplier())
}

/// Cosine similarity of two embeddings (unit-normalized dot product).
pub fn cosine_similarity<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> S {
    a.normalized()
        .iter()
        .zip(b.normalized().iter())
        .map(|(&x, &y)| x * y)
        .sum()
}

/// A probe face together with its occlusion evidence and composed mask.
#[derive(Clone)]
pub struct ProbeContext<S: Scalar> {
    face: Arc<AlignedFace<S>>,
    identity: u32,
    occlusion: OcclusionRegion,
    blocks: BTreeSet<BlockId>,
    fdm: Fdm,
}

impl<S: Scalar> ProbeContext<S> {
    /// Derives the occluded-block set from the region (coverage >= 0.5 of a
    /// block) and composes the mask.
    pub fn new(
        dict: &MaskDictionary<S>,
        grid: &GridSpec,
        face: Arc<AlignedFace<S>>,
        identity: u32,
        occlusion: OcclusionRegion,
    ) -> Result<Self> {
        if face.height() != grid.image_height() || face.width() != grid.image_width() {
            return Err(Error::shape(
                format!("{}x{}", grid.image_height(), grid.image_width()),
                format!("{}x{}", face.height(), face.width()),
            ));
        }
        let blocks = grid.region_to_blocks(&occlusion, COMPOSE_COVERAGE)?;
        let fdm = compose_fdm(dict, grid, &blocks)?;
        Ok(ProbeContext {
            face,
            identity,
            occlusion,
            blocks,
            fdm,
        })
    }

    /// A probe with no occlusion: empty block set, all-ones mask.
    pub fn unoccluded(
        dict: &MaskDictionary<S>,
        grid: &GridSpec,
        face: Arc<AlignedFace<S>>,
        identity: u32,
    ) -> Result<Self> {
        let region = OcclusionRegion::empty(grid.image_height(), grid.image_width());
        Self::new(dict, grid, face, identity, region)
    }

    pub fn face(&self) -> &Arc<AlignedFace<S>> {
        &self.face
    }

    pub fn identity(&self) -> u32 {
        self.identity
    }

    pub fn occlusion(&self) -> &OcclusionRegion {
        &self.occlusion
    }

    pub fn blocks(&self) -> &BTreeSet<BlockId> {
        &self.blocks
    }

    pub fn fdm(&self) -> &Fdm {
        &self.fdm
    }
}

/// One scored probe/gallery comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchResult {
    pub score: f64,
    pub probe_identity: u32,
    pub gallery_identity: u32,
}

/// Scores a probe against one gallery face, applying the probe's mask to
/// BOTH sides before comparing.
pub fn match_probe<S: Scalar>(
    trunk: &TrunkNet<S>,
    probe: &ProbeContext<S>,
    gallery_face: &AlignedFace<S>,
    gallery_identity: u32,
) -> Result<MatchResult> {
    let p = masked_embed(trunk, probe.face(), probe.fdm())?;
    let g = masked_embed(trunk, gallery_face, probe.fdm())?;
    Ok(MatchResult {
        score: cosine_similarity(&p, &g).into64(),
        probe_identity: probe.identity(),
        gallery_identity,
    })
}

/// Gallery faces with their top convolutional features cached once. The mask
/// depends on the probe, so embeddings cannot be precomputed; only the head
/// re-runs per probe mask.
pub struct Gallery<S: Scalar> {
    features: Vec<ConvFeature<S>>,
    identities: Vec<u32>,
}

impl<S: Scalar> Gallery<S> {
    pub fn new(trunk: &TrunkNet<S>, faces: &[(&AlignedFace<S>, u32)]) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::invalid_argument("gallery must not be empty"));
        }
        let refs: Vec<&AlignedFace<S>> = faces.iter().map(|(f, _)| *f).collect();
        let features = trunk.conv_features(&refs)?;
        Ok(Gallery {
            features,
            identities: faces.iter().map(|&(_, id)| id).collect(),
        })
    }

    pub fn from_face_set(trunk: &TrunkNet<S>, set: &FaceSet<S>) -> Result<Self> {
        let faces: Vec<(&AlignedFace<S>, u32)> = set
            .iter()
            .map(|e| (e.face.as_ref(), e.identity))
            .collect();
        Self::new(trunk, &faces)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn identity(&self, index: usize) -> u32 {
        self.identities[index]
    }

    /// Embeddings of every gallery entry under one mask volume.
    fn masked_embeddings(
        &self,
        trunk: &TrunkNet<S>,
        volume: &Array3<S>,
    ) -> Result<Vec<Embedding<S>>> {
        self.features
            .iter()
            .map(|f| masked_head(trunk, f, volume))
            .collect()
    }

    /// Plain embeddings (no mask anywhere in the arithmetic).
    fn plain_embeddings(&self, trunk: &TrunkNet<S>) -> Result<Vec<Embedding<S>>> {
        self.features.iter().map(|f| trunk.forward_head(f)).collect()
    }
}

/// Gallery entries ranked against one probe, best first.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRanking {
    pub probe_identity: u32,
    pub predicted_identity: u32,
    pub correct: bool,
    /// `(gallery index, gallery identity, cosine score)` sorted by descending
    /// score, ties by ascending gallery index.
    pub ranking: Vec<(usize, u32, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub rank1_accuracy: f64,
    pub rankings: Vec<ProbeRanking>,
}

fn rank_scores(probe_identity: u32, scored: Vec<(usize, u32, f64)>) -> ProbeRanking {
    let mut ranking = scored;
    ranking.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let predicted = ranking[0].1;
    ProbeRanking {
        probe_identity,
        predicted_identity: predicted,
        correct: predicted == probe_identity,
        ranking,
    }
}

fn summarize(rankings: Vec<ProbeRanking>) -> IdentifyReport {
    let correct = rankings.iter().filter(|r| r.correct).count();
    IdentifyReport {
        rank1_accuracy: correct as f64 / rankings.len() as f64,
        rankings,
    }
}

/// Rank-1 identification with each probe's mask applied to both itself and
/// every gallery feature.
pub fn identify<S: Scalar>(
    trunk: &TrunkNet<S>,
    dict: &MaskDictionary<S>,
    grid: &GridSpec,
    probes: &[ProbeContext<S>],
    gallery: &Gallery<S>,
    variant: MaskVariant,
) -> Result<IdentifyReport> {
    check_dictionary(trunk, dict)?;
    if gallery.is_empty() {
        return Err(Error::invalid_argument("gallery must not be empty"));
    }
    if probes.is_empty() {
        return Err(Error::invalid_argument("need at least one probe"));
    }
    let mut rankings = Vec::with_capacity(probes.len());
    for probe in probes {
        let volume = apply_variant(dict, grid, probe.blocks(), variant)?;
        let feature = trunk.forward_conv(probe.face())?;
        let p = masked_head(trunk, &feature, &volume)?;
        let gallery_embs = gallery.masked_embeddings(trunk, &volume)?;
        let scored = gallery_embs
            .iter()
            .enumerate()
            .map(|(i, g)| (i, gallery.identity(i), cosine_similarity(&p, g).into64()))
            .collect();
        rankings.push(rank_scores(probe.identity(), scored));
    }
    Ok(summarize(rankings))
}

/// Plain rank-1 identification: the trunk pipeline with no mask volume in
/// the arithmetic at all. Kept as a separate code path so masked runs with
/// empty occlusion sets can be verified against it bitwise.
pub fn identify_plain<S: Scalar>(
    trunk: &TrunkNet<S>,
    probes: &[(&AlignedFace<S>, u32)],
    gallery: &Gallery<S>,
) -> Result<IdentifyReport> {
    if gallery.is_empty() {
        return Err(Error::invalid_argument("gallery must not be empty"));
    }
    if probes.is_empty() {
        return Err(Error::invalid_argument("need at least one probe"));
    }
    let gallery_embs = gallery.plain_embeddings(trunk)?;
    let mut rankings = Vec::with_capacity(probes.len());
    for &(face, identity) in probes {
        let p = trunk.forward_head(&trunk.forward_conv(face)?)?;
        let scored = gallery_embs
            .iter()
            .enumerate()
            .map(|(i, g)| (i, gallery.identity(i), cosine_similarity(&p, g).into64()))
            .collect();
        rankings.push(rank_scores(identity, scored));
    }
    Ok(summarize(rankings))
}

/// One verification trial: cosine score and whether the pair shares an
/// identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyTrial {
    pub score: f64,
    pub same: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub trials: Vec<VerifyTrial>,
}

fn verdict_accuracy(trials: &[VerifyTrial], threshold: f64) -> f64 {
    let correct = trials
        .iter()
        .filter(|t| (t.score >= threshold) == t.same)
        .count();
    correct as f64 / trials.len() as f64
}

/// Verification over labeled pairs: accept iff score >= threshold. When
/// either side is occluded the mask is composed over the UNION of both block
/// sets and applied to both faces.
pub fn verify<S: Scalar>(
    trunk: &TrunkNet<S>,
    dict: &MaskDictionary<S>,
    grid: &GridSpec,
    pairs: &[(ProbeContext<S>, ProbeContext<S>)],
    threshold: f64,
    variant: MaskVariant,
) -> Result<VerifyReport> {
    check_dictionary(trunk, dict)?;
    if pairs.is_empty() {
        return Err(Error::invalid_argument("need at least one pair"));
    }
    let mut trials = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let union: BTreeSet<BlockId> = a.blocks().union(b.blocks()).copied().collect();
        let volume = apply_variant(dict, grid, &union, variant)?;
        let ea = masked_head(trunk, &trunk.forward_conv(a.face())?, &volume)?;
        let eb = masked_head(trunk, &trunk.forward_conv(b.face())?, &volume)?;
        trials.push(VerifyTrial {
            score: cosine_similarity(&ea, &eb).into64(),
            same: a.identity() == b.identity(),
        });
    }
    Ok(VerifyReport {
        threshold,
        accuracy: verdict_accuracy(&trials, threshold),
        trials,
    })
}

/// Plain verification: no mask volume anywhere in the arithmetic.
pub fn verify_plain<S: Scalar>(
    trunk: &TrunkNet<S>,
    pairs: &[(ProbeContext<S>, ProbeContext<S>)],
    threshold: f64,
) -> Result<VerifyReport> {
    if pairs.is_empty() {
        return Err(Error::invalid_argument("need at least one pair"));
    }
    let mut trials = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let ea = trunk.forward_head(&trunk.forward_conv(a.face())?)?;
        let eb = trunk.forward_head(&trunk.forward_conv(b.face())?)?;
        trials.push(VerifyTrial {
            score: cosine_similarity(&ea, &eb).into64(),
            same: a.identity() == b.identity(),
        });
    }
    Ok(VerifyReport {
        threshold,
        accuracy: verdict_accuracy(&trials, threshold),
        trials,
    })
}

/// One operating point of a threshold sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    pub accuracy: f64,
}

/// Sweeps the accept threshold over every distinct score (plus sentinels
/// below and above all of them) and reports TPR/FPR/accuracy at each.
pub fn roc_points(trials: &[VerifyTrial]) -> Result<Vec<RocPoint>> {
    if trials.is_empty() {
        return Err(Error::invalid_argument("need at least one trial"));
    }
    let positives = trials.iter().filter(|t| t.same).count();
    let negatives = trials.len() - positives;
    let mut thresholds: Vec<f64> = trials.iter().map(|t| t.score).collect();
    thresholds.push(f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut out = Vec::with_capacity(thresholds.len());
    for thr in thresholds {
        let tp = trials.iter().filter(|t| t.same && t.score >= thr).count();
        let fp = trials.iter().filter(|t| !t.same && t.score >= thr).count();
        let tn = negatives - fp;
        out.push(RocPoint {
            threshold: thr,
            true_positive_rate: if positives == 0 {
                0.0
            } else {
                tp as f64 / positives as f64
            },
            false_positive_rate: if negatives == 0 {
                0.0
            } else {
                fp as f64 / negatives as f64
            },
            accuracy: (tp + tn) as f64 / trials.len() as f64,
        });
    }
    Ok(out)
}

/// The sweep point with the highest accuracy (ties: lowest threshold).
pub fn best_operating_point(trials: &[VerifyTrial]) -> Result<RocPoint> {
    let points = roc_points(trials)?;
    let mut best = points[0].clone();
    for p in points {
        if p.accuracy > best.accuracy {
            best = p;
        }
    }
    Ok(best)
}

/// Settings for the post-dictionary trunk finetune on (occluded face, mask)
/// pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Probability that a sampled occlusion also covers one neighboring block.
    pub p_aug: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            samples_per_epoch: 512,
            batch_size: 32,
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            p_aug: 0.5,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid_argument(
                "samples_per_epoch and batch_size must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid_argument("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::invalid_argument("p_aug must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Finetunes a copy of the trunk on occluded faces whose top features are
/// gated by the composed dictionary mask for their occlusion. The dictionary
/// is NOT rebuilt — its entries are carried over verbatim and re-stamped for
/// the new checkpoint. Zero epochs returns a byte-identical trunk.
pub fn finetune_stage3<S: Scalar>(
    trunk: &TrunkNet<S>,
    dict: &MaskDictionary<S>,
    sampler: &PairSampler<'_, S>,
    config: &FinetuneConfig,
) -> Result<(TrunkNet<S>, MaskDictionary<S>, TrainReport)> {
    check_dictionary(trunk, dict)?;
    config.validate()?;
    let grid = *sampler.grid();
    let central = grid.central_blocks();
    let schedule = FitSchedule {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        lr_step_epochs: vec![],
        lr_step_factor: 1.0,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        seed: derive_seed(config.seed, "finetune-shuffle"),
    };
    let mut tuned = TrunkNet::from_bytes(&trunk.to_bytes())?;
    let report = tuned.fit(&schedule, |epoch, _| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("finetune-epoch-{epoch}")));
        let mut samples = Vec::with_capacity(config.samples_per_epoch);
        for _ in 0..config.samples_per_epoch {
            let block = *central.choose(&mut rng).expect("grid has central blocks");
            let pair = sampler.sample_with_p_aug(block, config.p_aug, &mut rng)?;
            let fdm = compose_fdm(dict, &grid, &pair.occluded_blocks)?;
            samples.push(TrainSample {
                face: pair.occluded,
                label: pair.identity,
                feature_mask: Some(Arc::new(fdm.as_multiplier())),
            });
        }
        Ok(samples)
    })?;
    let restamped = dict.restamped(tuned.id().clone());
    Ok((tuned, restamped, report))
}
