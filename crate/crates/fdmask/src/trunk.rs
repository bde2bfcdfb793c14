//! The trunk CNN: a stack of stride-2 conv/batchnorm/ReLU stages producing the
//! top conv feature volume `f(x)`, a global-pool + fully-connected head `F`
//! producing the embedding, and a cosine-margin classifier for training.
//!
//! The same fitting loop drives initial training and both finetune flavors
//! (occluded-baseline and masked); callers supply a sample provider per epoch,
//! and each sample may carry a multiplicative feature-space mask that is
//! applied to the top conv volume on both the forward and backward pass.
//!
//! Checkpoints are canonical binary containers whose trailing content hash is
//! the checkpoint id; features and embeddings carry the id of the checkpoint
//! that produced them so mixed-checkpoint comparisons fail loudly.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::AlignedFace;
use crate::io::{
    container_id, load_bytes, read_container, save_bytes, write_container, ArtifactId, TensorSet,
};
use crate::loss::{class_probabilities, cosine_logits, cosine_margin_loss_batch, margin_loss_single};
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{sgd_update, BatchNorm2d, Conv2d, Linear, Relu, SgdParams};
use crate::scalar::Scalar;

const TRUNK_MAGIC: &[u8; 8] = b"FDMTRUNK";

/// Shape of the top conv feature volume `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    /// Total element count — the mask length `K`.
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Architecture and optimization settings for the trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrunkConfig {
    pub input_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Output width of each stride-2 conv stage; the last entry is the top
    /// conv channel count.
    pub conv_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub class_count: usize,
    /// Cosine-logit scale `s`.
    pub scale: f64,
    /// Target-class cosine margin `m`.
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `lr_step_factor`.
    pub lr_step_epochs: Vec<usize>,
    pub lr_step_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            input_channels: 1,
            image_height: 80,
            image_width: 72,
            conv_widths: vec![8, 16, 24, 32],
            embedding_dim: 64,
            class_count: 2,
            scale: 30.0,
            margin: 0.35,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            lr_step_epochs: vec![20, 26],
            lr_step_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 1,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::invalid_argument("input dimensions must be positive"));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::invalid_argument(
                "conv_widths must be non-empty and positive",
            ));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid_argument("embedding_dim must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::invalid_argument("class_count must be at least 2"));
        }
        if self.scale <= 0.0 || !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid_argument(
                "scale must be positive and margin in [0, 1)",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch_size must be positive"));
        }
        if self.learning_rate <= 0.0 || self.lr_step_factor <= 0.0 {
            return Err(Error::invalid_argument(
                "learning_rate and lr_step_factor must be positive",
            ));
        }
        self.feature_shape()?;
        Ok(())
    }

    /// Shape of the top conv volume implied by the stage geometry
    /// (kernel 3, stride 2, pad 1 per stage).
    pub fn feature_shape(&self) -> Result<FeatureShape> {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for _ in &self.conv_widths {
            if h < 2 || w < 2 {
                return Err(Error::invalid_argument(format!(
                    "image {}x{} too small for {} stride-2 stages",
                    self.image_height,
                    self.image_width,
                    self.conv_widths.len()
                )));
            }
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        Ok(FeatureShape {
            channels: *self.conv_widths.last().expect("non-empty widths"),
            height: h,
            width: w,
        })
    }

    fn schedule(&self) -> FitSchedule {
        FitSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_step_epochs: self.lr_step_epochs.clone(),
            lr_step_factor: self.lr_step_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

/// Top conv feature volume tagged with the checkpoint that produced it.
#[derive(Clone, Debug)]
pub struct ConvFeature<S: Scalar> {
    values: Array3<S>,
    checkpoint: ArtifactId,
}

impl<S: Scalar> ConvFeature<S> {
    pub(crate) fn new(values: Array3<S>, checkpoint: ArtifactId) -> Self {
        ConvFeature { values, checkpoint }
    }

    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    pub fn checkpoint(&self) -> &ArtifactId {
        &self.checkpoint
    }

    pub fn shape(&self) -> FeatureShape {
        let (c, h, w) = self.values.dim();
        FeatureShape {
            channels: c,
            height: h,
            width: w,
        }
    }
}

/// Pre-classifier embedding tagged with its source checkpoint.
#[derive(Clone, Debug)]
pub struct Embedding<S: Scalar> {
    values: Array1<S>,
    checkpoint: ArtifactId,
}

impl<S: Scalar> Embedding<S> {
    pub(crate) fn new(values: Array1<S>, checkpoint: ArtifactId) -> Self {
        Embedding { values, checkpoint }
    }

    pub fn values(&self) -> &Array1<S> {
        &self.values
    }

    pub fn checkpoint(&self) -> &ArtifactId {
        &self.checkpoint
    }

    /// Unit-normalized copy for cosine scoring (epsilon-guarded).
    pub fn normalized(&self) -> Array1<S> {
        let norm: S = self
            .values
            .iter()
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
            .max(S::from64(crate::loss::NORM_EPSILON));
        self.values.mapv(|v| v / norm)
    }
}

/// One training sample: a face, its label, and an optional multiplicative
/// feature-space mask applied to the top conv volume.
#[derive(Clone)]
pub struct TrainSample<S: Scalar> {
    pub face: Arc<AlignedFace<S>>,
    pub label: u32,
    pub feature_mask: Option<Arc<Array3<S>>>,
}

/// Optimization schedule for one fitting run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_step_epochs: Vec<usize>,
    pub lr_step_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Loss curve and end-of-run accuracy of a fitting run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Fraction of the final epoch's samples whose top cosine matches their
    /// label, measured in inference mode after the last update.
    pub final_train_accuracy: f64,
}

struct ConvStage<S: Scalar> {
    conv: Conv2d<S>,
    bn: BatchNorm2d<S>,
    relu: Relu<S>,
}

#[derive(Serialize, Deserialize)]
struct TrunkMeta {
    config: TrunkConfig,
    trained: bool,
    final_train_accuracy: Option<f64>,
}

/// The trunk network. Inference methods take `&self` and never mutate
/// parameters or normalization statistics.
pub struct TrunkNet<S: Scalar> {
    config: TrunkConfig,
    stages: Vec<ConvStage<S>>,
    head: Linear<S>,
    classifier: Array2<S>,
    classifier_vel: Array2<S>,
    trained: bool,
    final_train_accuracy: Option<f64>,
    id: ArtifactId,
}

impl<S: Scalar> TrunkNet<S> {
    /// Fresh network with seeded random initialization.
    pub fn new(config: TrunkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut stages = Vec::with_capacity(config.conv_widths.len());
        let mut c_in = config.input_channels;
        for &c_out in &config.conv_widths {
            stages.push(ConvStage {
                conv: Conv2d::new(c_in, c_out, 3, 2, 1, &mut rng),
                bn: BatchNorm2d::new(c_out),
                relu: Relu::new(),
            });
            c_in = c_out;
        }
        let shape = config.feature_shape()?;
        let head = Linear::new(shape.channels, config.embedding_dim, &mut rng);
        let mut classifier = Array2::zeros((config.class_count, config.embedding_dim));
        crate::nn::init::fill_normal(
            classifier.as_slice_mut().expect("owned array is contiguous"),
            crate::nn::init::xavier_std(config.embedding_dim, config.class_count),
            &mut rng,
        );
        let classifier_vel = Array2::zeros(classifier.dim());
        let mut net = TrunkNet {
            config,
            stages,
            head,
            classifier,
            classifier_vel,
            trained: false,
            final_train_accuracy: None,
            id: ArtifactId::from_hex(String::new()),
        };
        net.refresh_id();
        Ok(net)
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.config.feature_shape().expect("validated at construction")
    }

    pub fn id(&self) -> &ArtifactId {
        &self.id
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.final_train_accuracy
    }

    pub fn scale(&self) -> f64 {
        self.config.scale
    }

    pub fn margin(&self) -> f64 {
        self.config.margin
    }

    /// `(kernel, stride, pad)` of each conv stage, input to output order.
    pub fn conv_geometry(&self) -> Vec<(usize, usize, usize)> {
        self.stages.iter().map(|s| s.conv.geometry()).collect()
    }

    pub(crate) fn head(&self) -> &Linear<S> {
        &self.head
    }

    pub(crate) fn classifier(&self) -> &Array2<S> {
        &self.classifier
    }

    // -- forward paths -----------------------------------------------------

    fn check_face(&self, face: &AlignedFace<S>) -> Result<()> {
        let got = (face.channels(), face.height(), face.width());
        let want = (
            self.config.input_channels,
            self.config.image_height,
            self.config.image_width,
        );
        if got != want {
            return Err(Error::shape(format!("{want:?}"), format!("{got:?}")));
        }
        Ok(())
    }

    fn faces_to_batch(&self, faces: &[&AlignedFace<S>]) -> Result<Array4<S>> {
        let (c, h, w) = (
            self.config.input_channels,
            self.config.image_height,
            self.config.image_width,
        );
        let mut x = Array4::zeros((faces.len(), c, h, w));
        for (i, face) in faces.iter().enumerate() {
            self.check_face(face)?;
            x.index_axis_mut(Axis(0), i).assign(face.pixels());
        }
        Ok(x)
    }

    /// All conv stages in inference mode.
    pub(crate) fn conv_raw_infer(&self, x: &Array4<S>) -> Array4<S> {
        let mut t = self.stages[0].conv.forward_infer(x);
        t = self.stages[0].bn.forward_infer(&t);
        t = self.stages[0].relu.forward_infer(&t);
        for stage in &self.stages[1..] {
            t = stage.conv.forward_infer(&t);
            t = stage.bn.forward_infer(&t);
            t = stage.relu.forward_infer(&t);
        }
        t
    }

    /// Head (global average pool + fully-connected) in inference mode.
    pub(crate) fn head_raw_infer(&self, volumes: &Array4<S>) -> Array2<S> {
        let pooled = global_avg_pool(volumes);
        self.head.forward_infer(&pooled)
    }

    /// Top conv feature of one face.
    pub fn forward_conv(&self, face: &AlignedFace<S>) -> Result<ConvFeature<S>> {
        Ok(self.conv_features(&[face])?.pop().expect("one output"))
    }

    /// Top conv features for many faces, batched internally.
    pub fn conv_features(&self, faces: &[&AlignedFace<S>]) -> Result<Vec<ConvFeature<S>>> {
        let mut out = Vec::with_capacity(faces.len());
        for chunk in faces.chunks(32.max(1)) {
            let x = self.faces_to_batch(chunk)?;
            let t = self.conv_raw_infer(&x);
            for i in 0..chunk.len() {
                out.push(ConvFeature::new(
                    t.index_axis(Axis(0), i).to_owned(),
                    self.id.clone(),
                ));
            }
        }
        Ok(out)
    }

    fn check_feature(&self, feature: &ConvFeature<S>) -> Result<()> {
        if feature.checkpoint() != &self.id {
            return Err(Error::invalid_state(format!(
                "feature was produced by checkpoint {} but this trunk is {}",
                feature.checkpoint(),
                self.id
            )));
        }
        let shape = self.feature_shape();
        if feature.values.dim() != shape.dims() {
            return Err(Error::shape(
                format!("{:?}", shape.dims()),
                format!("{:?}", feature.values.dim()),
            ));
        }
        Ok(())
    }

    /// Embedding from a top conv feature.
    pub fn forward_head(&self, feature: &ConvFeature<S>) -> Result<Embedding<S>> {
        self.check_feature(feature)?;
        let (c, h, w) = feature.values.dim();
        let volume = feature
            .values
            .view()
            .into_shape_with_order((1, c, h, w))
            .expect("adding a unit axis");
        let emb = self.head_raw_infer(&volume.to_owned());
        Ok(Embedding::new(
            emb.index_axis(Axis(0), 0).to_owned(),
            self.id.clone(),
        ))
    }

    /// Full forward pass (conv stages + head) in one call.
    pub fn forward_embedding(&self, face: &AlignedFace<S>) -> Result<Embedding<S>> {
        self.check_face(face)?;
        let x = self.faces_to_batch(&[face])?;
        let t = self.conv_raw_infer(&x);
        let emb = self.head_raw_infer(&t);
        Ok(Embedding::new(
            emb.index_axis(Axis(0), 0).to_owned(),
            self.id.clone(),
        ))
    }

    /// Embeddings for many faces, batched internally; row i corresponds to
    /// `faces[i]`.
    pub fn embeddings(&self, faces: &[&AlignedFace<S>]) -> Result<Array2<S>> {
        let mut out = Array2::zeros((faces.len(), self.config.embedding_dim));
        let mut row = 0;
        for chunk in faces.chunks(32.max(1)) {
            let x = self.faces_to_batch(chunk)?;
            let t = self.conv_raw_infer(&x);
            let emb = self.head_raw_infer(&t);
            for i in 0..chunk.len() {
                out.row_mut(row).assign(&emb.row(i));
                row += 1;
            }
        }
        Ok(out)
    }

    /// Class probabilities for an embedding. Requires a trained classifier.
    pub fn classify(&self, embedding: &Embedding<S>) -> Result<Array1<S>> {
        if !self.trained {
            return Err(Error::invalid_state(
                "classifier is untrained; fit the trunk first",
            ));
        }
        if embedding.checkpoint() != &self.id {
            return Err(Error::invalid_state(format!(
                "embedding from checkpoint {} fed to trunk {}",
                embedding.checkpoint(),
                self.id
            )));
        }
        let batch = embedding
            .values
            .view()
            .insert_axis(Axis(0))
            .to_owned();
        let probs = class_probabilities(&self.classifier, &batch, self.config.scale)?;
        Ok(probs.index_axis(Axis(0), 0).to_owned())
    }

    /// Margin loss of one embedding against its label.
    pub fn margin_loss(&self, embedding: &Embedding<S>, label: u32) -> Result<S> {
        margin_loss_single(
            &self.classifier,
            &embedding.values.view(),
            label,
            self.config.scale,
            self.config.margin,
        )
    }

    /// Fraction of faces whose top classifier cosine matches their label
    /// (inference mode).
    pub fn accuracy(&self, faces: &[&AlignedFace<S>], labels: &[u32]) -> Result<f64> {
        if faces.len() != labels.len() || faces.is_empty() {
            return Err(Error::invalid_argument(
                "need equal non-zero numbers of faces and labels",
            ));
        }
        let emb = self.embeddings(faces)?;
        let cos = cosine_logits(&self.classifier, &emb);
        let mut correct = 0usize;
        for (i, row) in cos.axis_iter(Axis(0)).enumerate() {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == labels[i] as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / faces.len() as f64)
    }

    // -- training ----------------------------------------------------------

    fn zero_all_grads(&mut self) {
        for stage in &mut self.stages {
            stage.conv.zero_grad();
            stage.bn.zero_grad();
        }
        self.head.zero_grad();
    }

    fn step_all(&mut self, p: SgdParams<S>) {
        for stage in &mut self.stages {
            stage.conv.sgd_step(p);
            stage.bn.sgd_step(p.without_decay());
        }
        self.head.sgd_step(p);
    }

    /// Runs SGD over epochs of samples produced by `provider`. Every sample's
    /// optional feature mask multiplies the top conv volume (forward and
    /// backward). Zero-epoch schedules leave the network untouched.
    pub fn fit<F>(&mut self, schedule: &FitSchedule, mut provider: F) -> Result<TrainReport>
    where
        F: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<TrainSample<S>>>,
    {
        if schedule.batch_size == 0 {
            return Err(Error::invalid_argument("batch_size must be positive"));
        }
        if schedule.epochs == 0 {
            return Ok(TrainReport {
                epoch_losses: Vec::new(),
                final_train_accuracy: self.final_train_accuracy.unwrap_or(0.0),
            });
        }
        let shape = self.feature_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let mut epoch_losses = Vec::with_capacity(schedule.epochs);
        let mut last_samples: Vec<TrainSample<S>> = Vec::new();

        for epoch in 0..schedule.epochs {
            let samples = provider(epoch, &mut rng)?;
            if samples.is_empty() {
                return Err(Error::invalid_argument(format!(
                    "provider returned no samples for epoch {epoch}"
                )));
            }
            for s in &samples {
                if s.label as usize >= self.config.class_count {
                    return Err(Error::invalid_argument(format!(
                        "label {} outside class count {}",
                        s.label, self.config.class_count
                    )));
                }
                if let Some(mask) = &s.feature_mask {
                    if mask.dim() != shape.dims() {
                        return Err(Error::shape(
                            format!("{:?}", shape.dims()),
                            format!("{:?}", mask.dim()),
                        ));
                    }
                }
            }
            let steps: usize = schedule
                .lr_step_epochs
                .iter()
                .filter(|&&e| epoch >= e)
                .count();
            let lr = schedule.learning_rate * schedule.lr_step_factor.powi(steps as i32);
            let params = SgdParams::<S>::new(lr, schedule.momentum, schedule.weight_decay);

            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for batch_ids in order.chunks(schedule.batch_size) {
                let faces: Vec<&AlignedFace<S>> = batch_ids
                    .iter()
                    .map(|&i| samples[i].face.as_ref())
                    .collect();
                let labels: Vec<u32> = batch_ids.iter().map(|&i| samples[i].label).collect();
                let x = self.faces_to_batch(&faces)?;

                // Forward.
                let mut t = x;
                for stage in &mut self.stages {
                    t = stage.conv.forward_train(&t);
                    t = stage.bn.forward_train(&t);
                    t = stage.relu.forward_train(&t);
                }
                for (bi, &i) in batch_ids.iter().enumerate() {
                    if let Some(mask) = &samples[i].feature_mask {
                        let mut slot = t.index_axis_mut(Axis(0), bi);
                        slot *= &mask.view();
                    }
                }
                let pooled = global_avg_pool(&t);
                let emb = self.head.forward_train(&pooled);
                let out = cosine_margin_loss_batch(
                    &self.classifier,
                    &emb,
                    &labels,
                    self.config.scale,
                    self.config.margin,
                )?;
                let batch_loss = out.loss.into64();
                if !batch_loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch} (lr {lr})"
                    )));
                }
                loss_sum += batch_loss * batch_ids.len() as f64;

                // Backward.
                self.zero_all_grads();
                let dpool = self.head.backward(&out.grad_embeddings);
                let mut d = global_avg_pool_backward(&dpool, shape.height, shape.width);
                for (bi, &i) in batch_ids.iter().enumerate() {
                    if let Some(mask) = &samples[i].feature_mask {
                        let mut slot = d.index_axis_mut(Axis(0), bi);
                        slot *= &mask.view();
                    }
                }
                for (si, stage) in self.stages.iter_mut().enumerate().rev() {
                    d = stage.relu.backward(&d);
                    d = stage.bn.backward(&d);
                    match stage.conv.backward(&d, si > 0) {
                        Some(dx) => d = dx,
                        None => break,
                    }
                }

                // Update.
                sgd_update(
                    self.classifier.as_slice_mut().expect("contiguous"),
                    out.grad_weights.as_slice().expect("contiguous"),
                    self.classifier_vel.as_slice_mut().expect("contiguous"),
                    params.lr,
                    params.momentum,
                    params.weight_decay,
                );
                self.step_all(params);
            }
            epoch_losses.push(loss_sum / samples.len() as f64);
            if epoch + 1 == schedule.epochs {
                last_samples = samples;
            }
        }

        self.trained = true;
        let faces: Vec<&AlignedFace<S>> = last_samples.iter().map(|s| s.face.as_ref()).collect();
        let labels: Vec<u32> = last_samples.iter().map(|s| s.label).collect();
        let final_train_accuracy = self.accuracy(&faces, &labels)?;
        self.final_train_accuracy = Some(final_train_accuracy);
        self.refresh_id();
        Ok(TrainReport {
            epoch_losses,
            final_train_accuracy,
        })
    }

    // -- persistence ---------------------------------------------------------

    /// Canonical serialized form; the trailing hash is the checkpoint id.
    /// Momentum buffers are deliberately excluded: a checkpoint is the
    /// network's state, not the optimizer's.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = TrunkMeta {
            config: self.config.clone(),
            trained: self.trained,
            final_train_accuracy: self.final_train_accuracy,
        };
        let meta_json = serde_json::to_string(&meta).expect("config serializes");
        let mut tensors = TensorSet::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.conv.write_tensors(&format!("stage{i}.conv"), &mut tensors);
            stage.bn.write_tensors(&format!("stage{i}.bn"), &mut tensors);
        }
        self.head.write_tensors("head", &mut tensors);
        tensors.push(
            "classifier.weight",
            vec![self.config.class_count, self.config.embedding_dim],
            self.classifier.iter().copied().collect(),
        );
        write_container(TRUNK_MAGIC, &meta_json, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta_json, mut tensors, id) = read_container::<S>(TRUNK_MAGIC, bytes)?;
        let meta: TrunkMeta = serde_json::from_str(&meta_json)
            .map_err(|e| Error::format(format!("bad trunk metadata: {e}")))?;
        let mut net = TrunkNet::new(meta.config)?;
        for (i, stage) in net.stages.iter_mut().enumerate() {
            stage.conv.read_tensors(&format!("stage{i}.conv"), &mut tensors)?;
            stage.bn.read_tensors(&format!("stage{i}.bn"), &mut tensors)?;
        }
        net.head.read_tensors("head", &mut tensors)?;
        let cls = tensors.pull(
            "classifier.weight",
            &[net.config.class_count, net.config.embedding_dim],
        )?;
        net.classifier = Array2::from_shape_vec(
            (net.config.class_count, net.config.embedding_dim),
            cls,
        )
        .expect("validated length");
        net.trained = meta.trained;
        net.final_train_accuracy = meta.final_train_accuracy;
        net.id = id;
        Ok(net)
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

/// Trains a fresh trunk on a labeled face set with the config's schedule.
pub fn train_trunk<S: Scalar>(
    dataset: &crate::dataset::FaceSet<S>,
    config: &TrunkConfig,
) -> Result<(TrunkNet<S>, TrainReport)> {
    config.validate()?;
    if dataset.identity_count() < 2 {
        return Err(Error::invalid_argument(
            "training needs at least two identities",
        ));
    }
    if dataset.identity_count() > config.class_count {
        return Err(Error::invalid_argument(format!(
            "dataset has {} identities but class_count is {}",
            dataset.identity_count(),
            config.class_count
        )));
    }
    let samples: Vec<TrainSample<S>> = dataset
        .iter()
        .map(|e| TrainSample {
            face: Arc::clone(&e.face),
            label: e.identity,
            feature_mask: None,
        })
        .collect();
    let mut net = TrunkNet::new(config.clone())?;
    let report = net.fit(&config.schedule(), |_, _| Ok(samples.clone()))?;
    Ok((net, report))
}
