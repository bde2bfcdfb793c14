//! Per-block mask generators trained with the pairwise differential siamese
//! objective against a frozen trunk.
//!
//! A generator maps the absolute feature difference of a clean/occluded pair
//! to a soft mask over the top conv volume. Training minimizes
//!
//! ```text
//! total = cls + lambda * diff
//! cls   = -log p_y(head(mask * f(occluded)))      (scaled cosine softmax)
//! diff  = sum |mask * f(clean) - mask * f(occluded)|
//! ```
//!
//! with the same mask multiplying both sides of the difference term. The
//! trunk is taken by shared reference throughout: its parameters and
//! normalization statistics cannot change here by construction. The
//! classification term reuses the trunk's scale but not its training margin —
//! the generator is not trying to re-separate classes, only to keep the
//! masked feature classifiable.

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BlockId;
use crate::io::{
    container_id, derive_seed, load_bytes, read_container, save_bytes, write_container,
    ArtifactId, TensorSet,
};
use crate::loss::cosine_margin_loss_batch;
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{BatchNorm2d, Conv2d, PRelu, SgdParams, Sigmoid};
use crate::occlude::{PairSampler, TrainingPair};
use crate::scalar::Scalar;
use crate::trunk::{ConvFeature, FeatureShape, TrunkNet};

const GENERATOR_MAGIC: &[u8; 8] = b"FDMGENMK";

/// Fixed scale of the output normalization. Steepens the sigmoid so every
/// per-pair mask is near-binary: an element noticeably above its channel's
/// population lands near 1, one below lands near 0. A steep transition keeps
/// the averaged mask bimodal, which the thresholded-weight matching variant
/// relies on (kept weights should sit near one, not trail off toward the
/// cut).
const OUTPUT_STEEPNESS: f64 = 6.0;

/// Fixed shift of the output normalization. With the scale above, the mask
/// crosses 0.5 at roughly two thirds of a standard deviation below the
/// channel mean, so a fresh generator keeps about three quarters of the
/// elements — matching the regime of the downstream discarding threshold —
/// and the kept plateau sits tightly near one.
const KEEP_SHIFT: f64 = 4.0;

/// A soft mask over the top conv volume; every element lies in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SoftMask<S: Scalar> {
    values: Array3<S>,
}

impl<S: Scalar> SoftMask<S> {
    pub fn new(values: Array3<S>) -> Result<Self> {
        for &v in values.iter() {
            let v = v.into64();
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_argument(
                    "soft mask values must be finite and in [0, 1]",
                ));
            }
        }
        Ok(SoftMask { values })
    }

    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    pub fn into_values(self) -> Array3<S> {
        self.values
    }
}

/// Architecture and optimization settings for one block's mask generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskGeneratorConfig {
    pub target_block: BlockId,
    /// Channel width of the hidden conv block (0 → match feature channels).
    pub hidden_width: usize,
    /// Weight of the differential term.
    pub lambda: f64,
    /// Training pairs drawn for this block; one eighth is held out for the
    /// differential-loss curve.
    pub pair_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Probability that a pair additionally occludes one 4-neighbor.
    pub p_aug: f64,
    pub seed: u64,
}

impl Default for MaskGeneratorConfig {
    /// Settings for the center block of a 5×5 grid with seed 0; serves as
    /// the base that partial config files override.
    fn default() -> Self {
        MaskGeneratorConfig::for_block(BlockId::new(13), 0)
    }
}

impl MaskGeneratorConfig {
    pub fn for_block(target_block: BlockId, seed: u64) -> Self {
        MaskGeneratorConfig {
            target_block,
            hidden_width: 0,
            lambda: 10.0,
            pair_count: 384,
            epochs: 6,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            p_aug: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid_argument("lambda must be non-negative"));
        }
        if self.pair_count < 8 {
            return Err(Error::invalid_argument("pair_count must be at least 8"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid_argument(
                "epochs and batch_size must be positive",
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid_argument("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::invalid_argument("p_aug must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    config: MaskGeneratorConfig,
    feature_shape: FeatureShape,
    trunk_id: String,
    trained: bool,
}

/// A conv/PReLU/batchnorm block, an output conv, a fixed standardizing
/// normalization, and a sigmoid, mapping the differential input to a soft
/// mask of the same shape.
///
/// The output normalization's affine parameters are constants, not trained:
/// the scale stays large so per-pair masks are near-binary, and the shift
/// stays zero. Freezing them makes the generator collapse-proof under the
/// summed differential penalty — a uniform downward push on every element is
/// removed by the standardization, so training can only reorder which
/// elements sit above or below their channel's population, never drive the
/// whole mask to zero.
pub struct MaskGenerator<S: Scalar> {
    config: MaskGeneratorConfig,
    shape: FeatureShape,
    trunk_id: ArtifactId,
    conv1: Conv2d<S>,
    prelu1: PRelu<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    sigmoid: Sigmoid<S>,
    trained: bool,
    id: ArtifactId,
}

impl<S: Scalar> MaskGenerator<S> {
    pub fn new(
        config: MaskGeneratorConfig,
        shape: FeatureShape,
        trunk_id: ArtifactId,
    ) -> Result<Self> {
        config.validate()?;
        if shape.is_empty() {
            return Err(Error::invalid_argument("feature shape must be non-empty"));
        }
        let hidden = if config.hidden_width == 0 {
            shape.channels
        } else {
            config.hidden_width
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &format!("mask-generator-{}", config.target_block),
        ));
        let conv1 = Conv2d::new(shape.channels, hidden, 3, 1, 1, &mut rng);
        let conv2 = Conv2d::new(hidden, shape.channels, 3, 1, 1, &mut rng);
        let mut bn2 = BatchNorm2d::new(shape.channels);
        bn2.fill_gamma(S::from64(OUTPUT_STEEPNESS));
        bn2.fill_beta(S::from64(KEEP_SHIFT));
        let mut gen = MaskGenerator {
            shape,
            trunk_id,
            conv1,
            prelu1: PRelu::new(hidden),
            bn1: BatchNorm2d::new(hidden),
            conv2,
            bn2,
            sigmoid: Sigmoid::new(),
            trained: false,
            id: ArtifactId::from_hex(String::new()),
            config,
        };
        gen.refresh_id();
        Ok(gen)
    }

    pub fn config(&self) -> &MaskGeneratorConfig {
        &self.config
    }

    pub fn target_block(&self) -> BlockId {
        self.config.target_block
    }

    pub fn trunk_id(&self) -> &ArtifactId {
        &self.trunk_id
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn id(&self) -> &ArtifactId {
        &self.id
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn check_volume(&self, v: &Array3<S>) -> Result<()> {
        if v.dim() != self.shape.dims() {
            return Err(Error::shape(
                format!("{:?}", self.shape.dims()),
                format!("{:?}", v.dim()),
            ));
        }
        Ok(())
    }

    fn forward_infer(&self, x: &Array4<S>) -> Array4<S> {
        let mut t = self.conv1.forward_infer(x);
        t = self.prelu1.forward_infer(&t);
        t = self.bn1.forward_infer(&t);
        t = self.conv2.forward_infer(&t);
        t = self.bn2.forward_infer(&t);
        self.sigmoid.forward_infer(&t)
    }

    fn forward_train(&mut self, x: &Array4<S>) -> Array4<S> {
        let mut t = self.conv1.forward_train(x);
        t = self.prelu1.forward_train(&t);
        t = self.bn1.forward_train(&t);
        t = self.conv2.forward_train(&t);
        t = self.bn2.forward_train(&t);
        self.sigmoid.forward_train(&t)
    }

    fn backward(&mut self, dmask: &Array4<S>) {
        let mut d = self.sigmoid.backward(dmask);
        d = self.bn2.backward(&d);
        d = self.conv2.backward(&d, true).expect("input gradient requested");
        d = self.bn1.backward(&d);
        d = self.prelu1.backward(&d);
        let _ = self.conv1.backward(&d, false);
    }

    fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.prelu1.zero_grad();
        self.bn1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
    }

    fn sgd_step(&mut self, p: SgdParams<S>) {
        self.conv1.sgd_step(p);
        self.prelu1.sgd_step(p.without_decay());
        self.bn1.sgd_step(p.without_decay());
        self.conv2.sgd_step(p);
        // bn2 deliberately takes no step: its affine parameters are fixed.
    }

    pub(crate) fn collect_params(&self, out: &mut Vec<S>) {
        self.conv1.collect_params(out);
        self.prelu1.collect_params(out);
        self.bn1.collect_params(out);
        self.conv2.collect_params(out);
    }

    pub(crate) fn set_params(&mut self, it: &mut impl Iterator<Item = S>) {
        self.conv1.set_params(it);
        self.prelu1.set_params(it);
        self.bn1.set_params(it);
        self.conv2.set_params(it);
    }

    pub(crate) fn collect_grads(&self, out: &mut Vec<S>) {
        self.conv1.collect_grads(out);
        self.prelu1.collect_grads(out);
        self.bn1.collect_grads(out);
        self.conv2.collect_grads(out);
    }

    /// Flattened copies of every trainable parameter, in a stable order.
    /// The fixed output-normalization affine is not trainable and is not
    /// included.
    pub fn parameters(&self) -> Vec<S> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    /// Replaces the trainable parameters from a flat slice in the order of
    /// [`Self::parameters`].
    pub fn set_parameters(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.parameters().len() {
            return Err(Error::invalid_argument(format!(
                "expected {} parameters, got {}",
                self.parameters().len(),
                flat.len()
            )));
        }
        self.set_params(&mut flat.iter().copied());
        Ok(())
    }

    /// Batch loss components and the analytic gradient of the total loss
    /// with respect to [`Self::parameters`], without an optimizer step.
    /// Uses training-mode statistics, so repeated calls at the same
    /// parameters return the same loss.
    pub fn loss_gradients(
        &mut self,
        trunk: &TrunkNet<S>,
        batch: &[&PairFeatures<S>],
    ) -> Result<(PdsnLossComponents<S>, Vec<S>)> {
        let components = pdsn_step(self, trunk, batch, None)?;
        let mut grads = Vec::new();
        self.collect_grads(&mut grads);
        Ok((components, grads))
    }

    /// Soft mask for one differential input (inference mode).
    pub fn generate_mask(&self, diff: &Array3<S>) -> Result<SoftMask<S>> {
        self.check_volume(diff)?;
        let batch = diff.view().insert_axis(Axis(0)).to_owned();
        let out = self.forward_infer(&batch);
        SoftMask::new(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Batched inference-mode masks, one per input volume.
    pub(crate) fn masks_infer(&self, diffs: &Array4<S>) -> Array4<S> {
        self.forward_infer(diffs)
    }

    // -- persistence -------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = GeneratorMeta {
            config: self.config.clone(),
            feature_shape: self.shape,
            trunk_id: self.trunk_id.as_str().to_string(),
            trained: self.trained,
        };
        let meta_json = serde_json::to_string(&meta).expect("config serializes");
        let mut tensors = TensorSet::new();
        self.conv1.write_tensors("conv1", &mut tensors);
        self.prelu1.write_tensors("prelu1", &mut tensors);
        self.bn1.write_tensors("bn1", &mut tensors);
        self.conv2.write_tensors("conv2", &mut tensors);
        self.bn2.write_tensors("bn2", &mut tensors);
        write_container(GENERATOR_MAGIC, &meta_json, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta_json, mut tensors, id) = read_container::<S>(GENERATOR_MAGIC, bytes)?;
        let meta: GeneratorMeta = serde_json::from_str(&meta_json)
            .map_err(|e| Error::format(format!("bad generator metadata: {e}")))?;
        let mut gen = MaskGenerator::new(
            meta.config,
            meta.feature_shape,
            ArtifactId::from_hex(meta.trunk_id),
        )?;
        gen.conv1.read_tensors("conv1", &mut tensors)?;
        gen.prelu1.read_tensors("prelu1", &mut tensors)?;
        gen.bn1.read_tensors("bn1", &mut tensors)?;
        gen.conv2.read_tensors("conv2", &mut tensors)?;
        gen.bn2.read_tensors("bn2", &mut tensors)?;
        gen.trained = meta.trained;
        gen.id = id;
        Ok(gen)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<ArtifactId> {
        let bytes = self.to_bytes();
        save_bytes(path, &bytes)?;
        container_id(&bytes)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&load_bytes(path)?)
    }

    fn refresh_id(&mut self) {
        self.id = container_id(&self.to_bytes()).expect("fresh bytes always hash");
    }
}

/// `|f(occluded) - f(clean)|`, the generator's input. Both features must come
/// from the same checkpoint.
pub fn diff_input<S: Scalar>(
    clean: &ConvFeature<S>,
    occluded: &ConvFeature<S>,
) -> Result<Array3<S>> {
    if clean.checkpoint() != occluded.checkpoint() {
        return Err(Error::invalid_state(
            "clean and occluded features come from different checkpoints",
        ));
    }
    if clean.values().dim() != occluded.values().dim() {
        return Err(Error::shape(
            format!("{:?}", clean.values().dim()),
            format!("{:?}", occluded.values().dim()),
        ));
    }
    let mut out = occluded.values() - clean.values();
    out.mapv_inplace(|v| v.abs());
    Ok(out)
}

/// The three reported loss values; `total = cls + lambda * diff` holds
/// exactly because that is how `total` is computed.
#[derive(Clone, Copy, Debug)]
pub struct PdsnLossComponents<S: Scalar> {
    pub total: S,
    pub cls: S,
    pub diff: S,
    pub lambda: f64,
}

/// Cached trunk features of one training pair.
pub struct PairFeatures<S: Scalar> {
    pub clean: Array3<S>,
    pub occluded: Array3<S>,
    pub label: u32,
}

/// Extracts and caches trunk features for a batch of pairs (the trunk is
/// frozen, so features never need recomputation during generator training).
pub fn cache_pair_features<S: Scalar>(
    trunk: &TrunkNet<S>,
    pairs: &[TrainingPair<S>],
) -> Result<Vec<PairFeatures<S>>> {
    let clean_faces: Vec<&crate::face::AlignedFace<S>> =
        pairs.iter().map(|p| p.clean.as_ref()).collect();
    let occ_faces: Vec<&crate::face::AlignedFace<S>> =
        pairs.iter().map(|p| p.occluded.as_ref()).collect();
    let clean = trunk.conv_features(&clean_faces)?;
    let occ = trunk.conv_features(&occ_faces)?;
    Ok(pairs
        .iter()
        .zip(clean)
        .zip(occ)
        .map(|((p, c), o)| PairFeatures {
            clean: c.values().clone(),
            occluded: o.values().clone(),
            label: p.identity,
        })
        .collect())
}

fn batch_volumes<S: Scalar>(volumes: Vec<&Array3<S>>, shape: FeatureShape) -> Array4<S> {
    let (c, h, w) = shape.dims();
    let mut out = Array4::zeros((volumes.len(), c, h, w));
    for (i, v) in volumes.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(v);
    }
    out
}

/// Classification loss of a masked occluded feature batch under the trunk's
/// scaled cosine softmax (no margin), plus its gradient with respect to the
/// masked volumes. The trunk is used read-only.
fn masked_cls_batch<S: Scalar>(
    trunk: &TrunkNet<S>,
    masked: &Array4<S>,
    labels: &[u32],
) -> Result<(S, Array4<S>)> {
    let (_, _, h, w) = masked.dim();
    let pooled = global_avg_pool(masked);
    let emb = trunk.head().forward_infer(&pooled);
    let out = cosine_margin_loss_batch(trunk.classifier(), &emb, labels, trunk.scale(), 0.0)?;
    let dpool = trunk.head().input_grad(&out.grad_embeddings);
    let dmasked = global_avg_pool_backward(&dpool, h, w);
    Ok((out.loss, dmasked))
}

/// Classification loss of one occluded feature under a forced mask, reported
/// exactly as the training objective sees it (inference-mode trunk head).
pub fn masked_classification_loss<S: Scalar>(
    trunk: &TrunkNet<S>,
    occluded: &ConvFeature<S>,
    mask: &SoftMask<S>,
    label: u32,
) -> Result<S> {
    if occluded.values().dim() != mask.values().dim() {
        return Err(Error::shape(
            format!("{:?}", occluded.values().dim()),
            format!("{:?}", mask.values().dim()),
        ));
    }
    let masked = (occluded.values() * mask.values())
        .insert_axis(Axis(0));
    let (loss, _) = masked_cls_batch(trunk, &masked, &[label])?;
    Ok(loss)
}

/// One training step over a feature batch: forward in train mode, loss,
/// gradient accumulation into the generator. Returns the batch's components.
/// `apply_update` controls whether an SGD step follows (the finite-difference
/// oracle wants gradients without updates).
fn pdsn_step<S: Scalar>(
    gen: &mut MaskGenerator<S>,
    trunk: &TrunkNet<S>,
    batch: &[&PairFeatures<S>],
    params: Option<SgdParams<S>>,
) -> Result<PdsnLossComponents<S>> {
    let shape = gen.feature_shape();
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid_argument("empty batch"));
    }
    let lambda = gen.config.lambda;
    let clean = batch_volumes(batch.iter().map(|p| &p.clean).collect(), shape);
    let occ = batch_volumes(batch.iter().map(|p| &p.occluded).collect(), shape);
    let labels: Vec<u32> = batch.iter().map(|p| p.label).collect();

    let mut diff_abs = &occ - &clean;
    diff_abs.mapv_inplace(|v| v.abs());

    gen.zero_grad();
    let mask = gen.forward_train(&diff_abs);

    // Classification term on the masked occluded features.
    let masked_occ = &mask * &occ;
    let (cls, dmasked) = masked_cls_batch(trunk, &masked_occ, &labels)?;

    // Differential term: sum |mask*(clean-occ)| = sum(mask * diff_abs) since
    // the mask is strictly positive; averaged over the batch.
    let diff_sum: S = (&mask * &diff_abs).iter().copied().sum();
    let diff = diff_sum / S::from64(n as f64);

    let total = cls + S::from64(lambda) * diff;
    if !total.into64().is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite mask-generator loss (cls {cls}, diff {diff})"
        )));
    }

    // d total / d mask = dcls/dmask + (lambda/n) * diff_abs,
    // where dcls/dmask = dcls/dmasked * occ.
    let mut dmask = &dmasked * &occ;
    let scale = S::from64(lambda / n as f64);
    dmask.zip_mut_with(&diff_abs, |d, &a| *d += scale * a);
    gen.backward(&dmask);
    if let Some(p) = params {
        gen.sgd_step(p);
    }

    Ok(PdsnLossComponents {
        total,
        cls,
        diff,
        lambda,
    })
}

/// Inference-mode loss of one pair, for reporting and tests.
pub fn pdsn_loss<S: Scalar>(
    gen: &MaskGenerator<S>,
    trunk: &TrunkNet<S>,
    pair: &TrainingPair<S>,
) -> Result<PdsnLossComponents<S>> {
    let feats = cache_pair_features(trunk, std::slice::from_ref(pair))?;
    pdsn_loss_features(gen, trunk, &feats[0])
}

/// Inference-mode loss from cached features.
pub fn pdsn_loss_features<S: Scalar>(
    gen: &MaskGenerator<S>,
    trunk: &TrunkNet<S>,
    feats: &PairFeatures<S>,
) -> Result<PdsnLossComponents<S>> {
    gen.check_volume(&feats.clean)?;
    gen.check_volume(&feats.occluded)?;
    let lambda = gen.config.lambda;
    let mut diff_abs = &feats.occluded - &feats.clean;
    diff_abs.mapv_inplace(|v| v.abs());
    let mask = gen
        .generate_mask(&diff_abs)
        .expect("shape already validated");

    let masked_occ = (mask.values() * &feats.occluded).insert_axis(Axis(0));
    let (cls, _) = masked_cls_batch(trunk, &masked_occ, &[feats.label])?;
    let diff: S = (mask.values() * &diff_abs).iter().copied().sum();
    let total = cls + S::from64(lambda) * diff;
    Ok(PdsnLossComponents {
        total,
        cls,
        diff,
        lambda,
    })
}

/// Mean differential loss over held-out pairs with the current generator
/// (inference mode).
fn holdout_diff<S: Scalar>(gen: &MaskGenerator<S>, feats: &[PairFeatures<S>]) -> f64 {
    let shape = gen.feature_shape();
    let mut diffs = Array4::zeros((feats.len(), shape.channels, shape.height, shape.width));
    for (i, f) in feats.iter().enumerate() {
        let mut d = &f.occluded - &f.clean;
        d.mapv_inplace(|v| v.abs());
        diffs.index_axis_mut(Axis(0), i).assign(&d);
    }
    let masks = gen.masks_infer(&diffs);
    let mut total = 0.0;
    for i in 0..feats.len() {
        let m = masks.index_axis(Axis(0), i);
        let mut d = &feats[i].occluded - &feats[i].clean;
        d.mapv_inplace(|v| v.abs());
        total += (&m * &d).iter().map(|v| v.into64()).sum::<f64>();
    }
    total / feats.len() as f64
}

/// Loss curves of one generator training run. `holdout_diff[0]` is the
/// held-out differential loss at initialization; entry `e + 1` follows epoch
/// `e`. `component_ratio` is `cls / (lambda * diff)` per epoch — the harness
/// checks it stays within loose bounds after warmup.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdsnTrainReport {
    pub epoch_total: Vec<f64>,
    pub epoch_cls: Vec<f64>,
    pub epoch_diff: Vec<f64>,
    pub holdout_diff: Vec<f64>,
    pub component_ratio: Vec<f64>,
}

/// Trains a mask generator for `config.target_block` against a frozen trunk.
/// The block must be one of the grid's central blocks; peripheral blocks use
/// the all-ones convention and have no generator.
pub fn train_mask_generator<S: Scalar>(
    trunk: &TrunkNet<S>,
    sampler: &PairSampler<'_, S>,
    config: &MaskGeneratorConfig,
) -> Result<(MaskGenerator<S>, PdsnTrainReport)> {
    config.validate()?;
    if !trunk.is_trained() {
        return Err(Error::invalid_state(
            "mask generators train against a trained trunk",
        ));
    }
    if !sampler.grid().is_central(config.target_block)? {
        return Err(Error::invalid_argument(format!(
            "block {} is peripheral; only central blocks get generators",
            config.target_block
        )));
    }

    // Draw pairs and freeze their trunk features once.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &format!("pdsn-pairs-{}", config.target_block),
    ));
    let mut pairs = Vec::with_capacity(config.pair_count);
    for _ in 0..config.pair_count {
        pairs.push(sampler.sample_with_p_aug(config.target_block, config.p_aug, &mut rng)?);
    }
    let features = cache_pair_features(trunk, &pairs)?;
    drop(pairs);
    let holdout_len = (features.len() / 8).max(1);
    let (holdout, train) = features.split_at(holdout_len);

    let mut gen = MaskGenerator::new(config.clone(), trunk.feature_shape(), trunk.id().clone())?;
    let params = SgdParams::<S>::new(config.learning_rate, config.momentum, config.weight_decay);

    let mut report = PdsnTrainReport {
        epoch_total: Vec::with_capacity(config.epochs),
        epoch_cls: Vec::with_capacity(config.epochs),
        epoch_diff: Vec::with_capacity(config.epochs),
        holdout_diff: vec![holdout_diff(&gen, holdout)],
        component_ratio: Vec::with_capacity(config.epochs),
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut cls, mut dif) = (0.0, 0.0, 0.0);
        let mut seen = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PairFeatures<S>> = chunk.iter().map(|&i| &train[i]).collect();
            let out = pdsn_step(&mut gen, trunk, &batch, Some(params))?;
            let b = batch.len() as f64;
            tot += out.total.into64() * b;
            cls += out.cls.into64() * b;
            dif += out.diff.into64() * b;
            seen += b;
        }
        report.epoch_total.push(tot / seen);
        report.epoch_cls.push(cls / seen);
        report.epoch_diff.push(dif / seen);
        let denom = config.lambda * (dif / seen);
        report
            .component_ratio
            .push(if denom > 0.0 { (cls / seen) / denom } else { f64::INFINITY });
        report.holdout_diff.push(holdout_diff(&gen, holdout));
    }

    gen.trained = true;
    gen.refresh_id();
    Ok((gen, report))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{generate_faces, FaceSet, SyntheticFaceSpec};
    use crate::grid::GridSpec;
    use crate::occlude::{OccluderCorpus, TextureSplit};
    use crate::trunk::{train_trunk, TrunkConfig};

    fn tiny_trunk_config() -> TrunkConfig {
        TrunkConfig {
            input_channels: 1,
            image_height: 32,
            image_width: 32,
            conv_widths: vec![4, 8],
            embedding_dim: 16,
            class_count: 4,
            scale: 24.0,
            margin: 0.2,
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.03,
            lr_step_epochs: vec![6],
            lr_step_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 7,
        }
    }

    fn tiny_world() -> (TrunkNet<f32>, FaceSet<f32>, OccluderCorpus<f32>, GridSpec) {
        let set = generate_faces(&SyntheticFaceSpec {
            identities: 4,
            images_per_identity: 4,
            image_height: 32,
            image_width: 32,
            seed: 31,
        })
        .unwrap();
        let (trunk, _) = train_trunk(&set, &tiny_trunk_config()).unwrap();
        let corpus = OccluderCorpus::procedural(16, 12, 5).unwrap();
        let grid = GridSpec::new(32, 32, 5).unwrap();
        (trunk, set, corpus, grid)
    }

    #[test]
    fn diff_input_is_absolute_and_symmetric() {
        let (trunk, set, corpus, grid) = tiny_world();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = sampler.sample(BlockId::new(13), &mut rng).unwrap();
        let clean = trunk.forward_conv(pair.clean.as_ref()).unwrap();
        let occ = trunk.forward_conv(pair.occluded.as_ref()).unwrap();

        let d1 = diff_input(&clean, &occ).unwrap();
        let d2 = diff_input(&occ, &clean).unwrap();
        assert_eq!(d1, d2, "|a-b| = |b-a|");
        assert!(d1.iter().all(|&v| v >= 0.0));

        let dz = diff_input(&clean, &clean).unwrap();
        assert!(dz.iter().all(|&v| v == 0.0), "identical features give zeros");
    }

    #[test]
    fn generated_masks_live_in_the_open_unit_interval() {
        let (trunk, set, corpus, grid) = tiny_world();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = sampler.sample(BlockId::new(13), &mut rng).unwrap();
        let clean = trunk.forward_conv(pair.clean.as_ref()).unwrap();
        let occ = trunk.forward_conv(pair.occluded.as_ref()).unwrap();
        let diff = diff_input(&clean, &occ).unwrap();

        let gen = MaskGenerator::<f32>::new(
            MaskGeneratorConfig::for_block(BlockId::new(13), 3),
            trunk.feature_shape(),
            trunk.id().clone(),
        )
        .unwrap();
        let mask = gen.generate_mask(&diff).unwrap();
        assert_eq!(mask.values().dim(), trunk.feature_shape().dims());
        assert!(mask.values().iter().all(|&v| v > 0.0 && v < 1.0));

        let again = gen.generate_mask(&diff).unwrap();
        assert_eq!(mask.values(), again.values(), "inference is deterministic");
    }

    #[test]
    fn forced_ones_mask_reduces_to_trunk_loss() {
        let (trunk, set, corpus, grid) = tiny_world();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = sampler.sample(BlockId::new(13), &mut rng).unwrap();
        let occ = trunk.forward_conv(pair.occluded.as_ref()).unwrap();
        let ones = SoftMask::new(Array3::ones(trunk.feature_shape().dims())).unwrap();

        let masked = masked_classification_loss(&trunk, &occ, &ones, pair.identity).unwrap();

        // The trunk's own margin-free classification loss on the same face.
        let emb = trunk.forward_head(&occ).unwrap();
        let probs = trunk.classify(&emb).unwrap();
        // Same value through two formulas (log-sum-exp vs softmax-then-log),
        // so allow single-precision round-off.
        let direct = -(probs[pair.identity as usize] as f64).ln();
        assert!(
            (masked as f64 - direct).abs() <= 1e-4 * (1.0 + direct.abs()),
            "masked {masked} vs direct {direct}"
        );
    }

    #[test]
    fn loss_components_decompose_exactly() {
        let (trunk, set, corpus, grid) = tiny_world();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = sampler.sample(BlockId::new(8), &mut rng).unwrap();
        let gen = MaskGenerator::<f32>::new(
            MaskGeneratorConfig::for_block(BlockId::new(8), 9),
            trunk.feature_shape(),
            trunk.id().clone(),
        )
        .unwrap();
        let out = pdsn_loss(&gen, &trunk, &pair).unwrap();
        assert_eq!(
            out.total,
            out.cls + out.lambda as f32 * out.diff,
            "decomposition is exact as reported"
        );

        // A pair with identical images has zero differential loss exactly.
        let clean_pair = TrainingPair {
            clean: Arc::clone(&pair.clean),
            occluded: Arc::clone(&pair.clean),
            identity: pair.identity,
            target_block: pair.target_block,
            occluded_blocks: pair.occluded_blocks.clone(),
            region: pair.region.clone(),
        };
        let out = pdsn_loss(&gen, &trunk, &clean_pair).unwrap();
        assert_eq!(out.diff, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // f64 end to end; tiny shapes: C=4 feature maps of 3x3, 3 classes.
        let cfg = TrunkConfig {
            input_channels: 1,
            image_height: 12,
            image_width: 12,
            conv_widths: vec![4, 4],
            embedding_dim: 6,
            class_count: 3,
            scale: 8.0,
            margin: 0.2,
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.01,
            lr_step_epochs: vec![],
            lr_step_factor: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 11,
        };
        let trunk = TrunkNet::<f64>::new(cfg).unwrap();
        let shape = trunk.feature_shape();
        assert_eq!(shape.dims(), (4, 3, 3));

        let mut gen = MaskGenerator::<f64>::new(
            MaskGeneratorConfig {
                hidden_width: 3,
                ..MaskGeneratorConfig::for_block(BlockId::new(13), 17)
            },
            shape,
            trunk.id().clone(),
        )
        .unwrap();

        // Synthetic feature pairs with non-trivial differences.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut feats = Vec::new();
        for label in 0..2u32 {
            let mut clean = Array3::<f64>::zeros(shape.dims());
            let mut occluded = Array3::<f64>::zeros(shape.dims());
            for v in clean.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
            for (o, &c) in occluded.iter_mut().zip(clean.iter()) {
                *o = c + rand::Rng::random_range(&mut rng, -0.8..0.8);
            }
            feats.push(PairFeatures {
                clean,
                occluded,
                label,
            });
        }
        let batch: Vec<&PairFeatures<f64>> = feats.iter().collect();

        let analytic = {
            pdsn_step(&mut gen, &trunk, &batch, None).unwrap();
            let mut g = Vec::new();
            gen.collect_grads(&mut g);
            g
        };
        let mut params = Vec::new();
        gen.collect_params(&mut params);

        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += eps;
            gen.set_params(&mut plus.into_iter());
            let lp = pdsn_step(&mut gen, &trunk, &batch, None).unwrap().total;

            let mut minus = params.clone();
            minus[i] -= eps;
            gen.set_params(&mut minus.into_iter());
            let lm = pdsn_step(&mut gen, &trunk, &batch, None).unwrap().total;

            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / (1.0 + numeric.abs());
            max_rel = max_rel.max(rel);
            assert!(
                rel <= 1e-3,
                "param {i}: analytic {} vs numeric {numeric} (rel {rel})",
                analytic[i]
            );
        }
        gen.set_params(&mut params.into_iter());
        assert!(max_rel < 1e-3, "worst relative error {max_rel}");
    }

    #[test]
    fn training_freezes_trunk_and_reduces_holdout_diff() {
        let (trunk, set, corpus, grid) = tiny_world();
        let trunk_before = trunk.to_bytes();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.5).unwrap();
        let config = MaskGeneratorConfig {
            pair_count: 64,
            epochs: 4,
            batch_size: 16,
            ..MaskGeneratorConfig::for_block(BlockId::new(13), 23)
        };
        let (gen, report) = train_mask_generator(&trunk, &sampler, &config).unwrap();

        assert_eq!(trunk.to_bytes(), trunk_before, "trunk is bit-identical");
        assert!(gen.is_trained());
        assert_eq!(gen.trunk_id(), trunk.id());
        assert_eq!(report.epoch_total.len(), 4);
        assert_eq!(report.holdout_diff.len(), 5);
        assert!(
            report.holdout_diff.last().unwrap() < report.holdout_diff.first().unwrap(),
            "held-out differential loss should fall: {:?}",
            report.holdout_diff
        );
    }

    #[test]
    fn peripheral_blocks_are_rejected() {
        let (trunk, set, corpus, grid) = tiny_world();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.5).unwrap();
        let config = MaskGeneratorConfig::for_block(BlockId::new(1), 23);
        assert!(matches!(
            train_mask_generator(&trunk, &sampler, &config),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn generator_checkpoint_round_trips() {
        let (trunk, set, corpus, grid) = tiny_world();
        let sampler = PairSampler::new(&set, &corpus, grid, TextureSplit::Train, 0.5).unwrap();
        let config = MaskGeneratorConfig {
            pair_count: 32,
            epochs: 2,
            ..MaskGeneratorConfig::for_block(BlockId::new(12), 29)
        };
        let (gen, _) = train_mask_generator(&trunk, &sampler, &config).unwrap();
        let bytes = gen.to_bytes();
        let loaded = MaskGenerator::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes, "save -> load -> save is identity");
        assert_eq!(loaded.id(), gen.id());
        assert_eq!(loaded.target_block(), BlockId::new(12));
        assert_eq!(loaded.trunk_id(), trunk.id());

        // Identical masks after reload.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pair = sampler.sample(BlockId::new(12), &mut rng).unwrap();
        let feats = cache_pair_features(&trunk, &[pair]).unwrap();
        let mut d = &feats[0].occluded - &feats[0].clean;
        d.mapv_inplace(|v| v.abs());
        let a = gen.generate_mask(&d).unwrap();
        let b = loaded.generate_mask(&d).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
