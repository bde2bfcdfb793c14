//! Mask dictionary: per-block mean soft masks binarized into feature
//! discarding masks (FDMs).
//!
//! For each central block, a trained generator is fed a stream of fresh
//! occluded pairs; each soft mask is min-max normalized and folded into a
//! running elementwise mean (accumulated in double precision regardless of
//! the working scalar type). Binarization zeroes the `floor(tau*K)` smallest
//! mean values — ties broken toward the lowest flat index in channel-major
//! order — and keeps the rest as ones.
//!
//! The dictionary file stores each FDM bit-packed (LSB-first within each
//! byte, channel-major element order) plus the mean masks, and round-trips
//! byte-exactly; its trailing content hash is the artifact id.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::BlockId;
use crate::io::{derive_seed, load_bytes, save_bytes, ArtifactId, ByteReader, ByteWriter, FORMAT_VERSION};
use crate::occlude::PairSampler;
use crate::pdsn::{cache_pair_features, MaskGenerator, SoftMask};
use crate::scalar::Scalar;
use crate::trunk::{FeatureShape, TrunkNet};

const DICTIONARY_MAGIC: &[u8; 8] = b"FDMDICT\0";

/// Rescales a soft mask to span `[0, 1]`. A constant mask carries no ranking
/// information and maps to all 0.5.
pub fn minmax_normalize<S: Scalar>(mask: &SoftMask<S>) -> SoftMask<S> {
    let values = mask.values();
    let mut lo = S::infinity();
    let mut hi = S::neg_infinity();
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let out = if hi > lo {
        let span = hi - lo;
        values.mapv(|v| (v - lo) / span)
    } else {
        Array3::from_elem(values.dim(), S::from64(0.5))
    };
    SoftMask::new(out).expect("normalized values stay in [0, 1]")
}

/// Elementwise mean of soft masks with the pair count that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanMask<S: Scalar> {
    values: Array3<S>,
    pair_count: usize,
}

impl<S: Scalar> MeanMask<S> {
    pub fn new(values: Array3<S>, pair_count: usize) -> Result<Self> {
        if pair_count == 0 {
            return Err(Error::invalid_argument("pair_count must be at least 1"));
        }
        for &v in values.iter() {
            let v = v.into64();
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid_argument(
                    "mean mask values must be finite and in [0, 1]",
                ));
            }
        }
        Ok(MeanMask { values, pair_count })
    }

    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
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

/// Streaming elementwise mean in double precision: `m += (x - m) / k`.
/// Commutes with [`merge`](Self::merge), so masks may be folded in any
/// grouping.
#[derive(Clone, Debug)]
pub struct MeanAccumulator {
    mean: Array3<f64>,
    count: usize,
}

impl MeanAccumulator {
    pub fn new(shape: FeatureShape) -> Self {
        MeanAccumulator {
            mean: Array3::zeros(shape.dims()),
            count: 0,
        }
    }

    pub fn push<S: Scalar>(&mut self, mask: &SoftMask<S>) -> Result<()> {
        if mask.values().dim() != self.mean.dim() {
            return Err(Error::shape(
                format!("{:?}", self.mean.dim()),
                format!("{:?}", mask.values().dim()),
            ));
        }
        self.count += 1;
        let k = self.count as f64;
        for (m, &v) in self.mean.iter_mut().zip(mask.values().iter()) {
            *m += (v.into64() - *m) / k;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MeanAccumulator) -> Result<()> {
        if other.mean.dim() != self.mean.dim() {
            return Err(Error::shape(
                format!("{:?}", self.mean.dim()),
                format!("{:?}", other.mean.dim()),
            ));
        }
        if other.count == 0 {
            return Ok(());
        }
        let total = (self.count + other.count) as f64;
        let wa = self.count as f64 / total;
        let wb = other.count as f64 / total;
        for (m, &o) in self.mean.iter_mut().zip(other.mean.iter()) {
            *m = *m * wa + o * wb;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Rounds the double-precision mean into the working scalar type. The
    /// binarization cut is taken after this rounding, so what is stored is
    /// exactly what was ranked.
    pub fn finalize<S: Scalar>(&self) -> Result<MeanMask<S>> {
        if self.count == 0 {
            return Err(Error::invalid_state("no masks accumulated"));
        }
        MeanMask::new(self.mean.mapv(|v| S::from64(v)), self.count)
    }
}

/// Batch mean of soft masks (sum-then-divide in double precision).
pub fn mean_mask<S: Scalar>(masks: &[SoftMask<S>]) -> Result<MeanMask<S>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid_argument("need at least one mask"))?;
    let dims = first.values().dim();
    let mut sum = Array3::<f64>::zeros(dims);
    for m in masks {
        if m.values().dim() != dims {
            return Err(Error::shape(format!("{dims:?}"), format!("{:?}", m.values().dim())));
        }
        for (s, &v) in sum.iter_mut().zip(m.values().iter()) {
            *s += v.into64();
        }
    }
    let n = masks.len() as f64;
    MeanMask::new(sum.mapv(|v| S::from64(v / n)), masks.len())
}

/// A binary feature discarding mask: 1 keeps a feature element, 0 discards it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fdm {
    bits: Array3<u8>,
}

impl Fdm {
    pub fn new(bits: Array3<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid_argument("FDM bits must be 0 or 1"));
        }
        Ok(Fdm { bits })
    }

    pub fn ones(shape: FeatureShape) -> Self {
        Fdm {
            bits: Array3::ones(shape.dims()),
        }
    }

    pub fn bits(&self) -> &Array3<u8> {
        &self.bits
    }

    pub fn shape(&self) -> FeatureShape {
        let (c, h, w) = self.bits.dim();
        FeatureShape {
            channels: c,
            height: h,
            width: w,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn zero_count(&self) -> usize {
        self.len() - self.ones_count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Elementwise logical AND.
    pub fn and(&self, other: &Fdm) -> Result<Fdm> {
        if self.bits.dim() != other.bits.dim() {
            return Err(Error::shape(
                format!("{:?}", self.bits.dim()),
                format!("{:?}", other.bits.dim()),
            ));
        }
        let mut bits = self.bits.clone();
        bits.zip_mut_with(&other.bits, |a, &b| *a &= b);
        Ok(Fdm { bits })
    }

    /// The mask as a multiplicative volume of exact zeros and ones.
    pub fn as_multiplier<S: Scalar>(&self) -> Array3<S> {
        self.bits.mapv(|b| if b == 1 { S::one() } else { S::zero() })
    }

    /// Flat bits in channel-major order, packed LSB-first into bytes.
    pub fn packed(&self) -> Vec<u8> {
        let slice = self.bits.as_slice().expect("standard layout");
        let mut out = vec![0u8; slice.len().div_ceil(8)];
        for (i, &b) in slice.iter().enumerate() {
            out[i / 8] |= b << (i % 8);
        }
        out
    }

    pub fn unpack(shape: FeatureShape, packed: &[u8]) -> Result<Fdm> {
        let k = shape.len();
        if packed.len() != k.div_ceil(8) {
            return Err(Error::format(format!(
                "packed FDM has {} bytes, expected {}",
                packed.len(),
                k.div_ceil(8)
            )));
        }
        let mut flat = Vec::with_capacity(k);
        for i in 0..k {
            flat.push((packed[i / 8] >> (i % 8)) & 1);
        }
        Ok(Fdm {
            bits: Array3::from_shape_vec(shape.dims(), flat).expect("length checked"),
        })
    }
}

/// How many elements `binarize` zeroes: `floor(tau * K)`, computed with a
/// relative epsilon so decimal fractions that are exact in intent (0.15 * 20)
/// do not land one below the integer they denote.
pub fn zero_count_for(tau: f64, k: usize) -> usize {
    (tau * k as f64 + 1e-9 * k.max(1) as f64).floor() as usize
}

/// Indices of the `count` smallest values under the deterministic
/// (value, flat index) order that binarization uses.
pub(crate) fn smallest_by_value<S: Scalar>(flat: &[S], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..flat.len()).collect();
    if count == 0 {
        return Vec::new();
    }
    order.select_nth_unstable_by(count - 1, |&a, &b| {
        flat[a]
            .partial_cmp(&flat[b])
            .expect("mask values are finite")
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Zeroes the `floor(tau*K)` smallest mean values (ties: lowest flat index in
/// channel-major order) and keeps the rest as ones.
pub fn binarize<S: Scalar>(mean: &MeanMask<S>, tau: f64) -> Result<Fdm> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid_argument(format!(
            "tau must lie in [0, 1), got {tau}"
        )));
    }
    let flat = mean.values().as_slice().expect("standard layout");
    let k = flat.len();
    let mut bits = vec![1u8; k];
    for i in smallest_by_value(flat, zero_count_for(tau, k)) {
        bits[i] = 0;
    }
    Ok(Fdm {
        bits: Array3::from_shape_vec(mean.values().dim(), bits).expect("length preserved"),
    })
}

/// Generates `pair_count` soft masks from fresh pairs occluded on the
/// generator's block (no neighbor augmentation), min-max normalizing each.
pub fn collect_masks<S: Scalar>(
    trunk: &TrunkNet<S>,
    generator: &MaskGenerator<S>,
    sampler: &PairSampler<'_, S>,
    pair_count: usize,
    seed: u64,
) -> Result<Vec<SoftMask<S>>> {
    if pair_count < 1 {
        return Err(Error::invalid_argument("pair_count must be at least 1"));
    }
    if generator.trunk_id() != trunk.id() {
        return Err(Error::invalid_state(format!(
            "generator was trained against trunk {} but got {}",
            generator.trunk_id(),
            trunk.id()
        )));
    }
    let block = generator.target_block();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("dict-pairs-{block}")));
    let mut masks = Vec::with_capacity(pair_count);
    // Batch the trunk feature extraction.
    let chunk = 32usize;
    let mut remaining = pair_count;
    while remaining > 0 {
        let n = remaining.min(chunk);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            pairs.push(sampler.sample_canonical(block, &mut rng)?);
        }
        let feats = cache_pair_features(trunk, &pairs)?;
        for f in &feats {
            let mut d = &f.occluded - &f.clean;
            d.mapv_inplace(|v| v.abs());
            let mask = generator.generate_mask(&d)?;
            masks.push(minmax_normalize(&mask));
        }
        remaining -= n;
    }
    Ok(masks)
}

/// One block's dictionary entry: the binary mask and the mean it came from.
#[derive(Clone, Debug)]
pub struct DictEntry<S: Scalar> {
    pub fdm: Fdm,
    pub mean: Option<MeanMask<S>>,
}

/// FDMs for every central block of the grid, tied to one trunk checkpoint.
pub struct MaskDictionary<S: Scalar> {
    tau: f64,
    shape: FeatureShape,
    trunk_id: ArtifactId,
    entries: BTreeMap<u32, DictEntry<S>>,
}

impl<S: Scalar> MaskDictionary<S> {
    pub fn from_entries(
        tau: f64,
        shape: FeatureShape,
        trunk_id: ArtifactId,
        entries: BTreeMap<u32, DictEntry<S>>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::invalid_argument("tau must lie in [0, 1)"));
        }
        for (block, e) in &entries {
            if e.fdm.shape() != shape {
                return Err(Error::shape(
                    format!("{:?}", shape.dims()),
                    format!("block {block}: {:?}", e.fdm.shape().dims()),
                ));
            }
            if let Some(mean) = &e.mean {
                if mean.shape() != shape {
                    return Err(Error::shape(
                        format!("{:?}", shape.dims()),
                        format!("block {block} mean: {:?}", mean.shape().dims()),
                    ));
                }
            }
        }
        Ok(MaskDictionary {
            tau,
            shape,
            trunk_id,
            entries,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn trunk_id(&self) -> &ArtifactId {
        &self.trunk_id
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.entries.keys().map(|&i| BlockId::new(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, block: BlockId) -> Option<&DictEntry<S>> {
        self.entries.get(&block.index())
    }

    pub fn fdm(&self, block: BlockId) -> Option<&Fdm> {
        self.entries.get(&block.index()).map(|e| &e.fdm)
    }

    pub fn mean(&self, block: BlockId) -> Option<&MeanMask<S>> {
        self.entries.get(&block.index()).and_then(|e| e.mean.as_ref())
    }

    /// Same entries declared compatible with a different trunk checkpoint.
    /// Used after trunk finetuning, where the masks are kept fixed by design;
    /// not public because arbitrary re-stamping would defeat the compat checks.
    pub(crate) fn restamped(&self, trunk_id: ArtifactId) -> MaskDictionary<S> {
        MaskDictionary {
            tau: self.tau,
            shape: self.shape,
            trunk_id,
            entries: self.entries.clone(),
        }
    }

    /// New dictionary with the stored means re-cut at a different tau.
    pub fn rebinarize(&self, tau: f64) -> Result<MaskDictionary<S>> {
        let mut entries = BTreeMap::new();
        for (&block, e) in &self.entries {
            let mean = e.mean.as_ref().ok_or_else(|| {
                Error::invalid_state(format!(
                    "block {block} has no stored mean mask; cannot rebinarize"
                ))
            })?;
            entries.insert(
                block,
                DictEntry {
                    fdm: binarize(mean, tau)?,
                    mean: Some(mean.clone()),
                },
            );
        }
        MaskDictionary::from_entries(tau, self.shape, self.trunk_id.clone(), entries)
    }

    // -- persistence -------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.push_bytes(DICTIONARY_MAGIC);
        w.push_u32(FORMAT_VERSION);
        w.push_u8(S::DTYPE.tag());
        w.push_f64(self.tau);
        w.push_u64(self.shape.channels as u64);
        w.push_u64(self.shape.height as u64);
        w.push_u64(self.shape.width as u64);
        w.push_str(self.trunk_id.as_str());
        w.push_u32(self.entries.len() as u32);
        for (&block, e) in &self.entries {
            w.push_u32(block);
            let packed = e.fdm.packed();
            w.push_u64(packed.len() as u64);
            w.push_bytes(&packed);
            match &e.mean {
                Some(mean) => {
                    w.push_u8(1);
                    w.push_u64(mean.pair_count() as u64);
                    for &v in mean.values().iter() {
                        v.write_le(w.buf_mut());
                    }
                }
                None => w.push_u8(0),
            }
        }
        let digest = Sha256::digest(w.as_slice());
        let mut bytes = w.into_bytes();
        bytes.extend_from_slice(&digest);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::format("dictionary shorter than its hash"));
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != hash {
            return Err(Error::format("dictionary hash mismatch (corrupt file)"));
        }
        let mut r = ByteReader::new(body);
        let magic = r.read_bytes(8)?;
        if magic != DICTIONARY_MAGIC {
            return Err(Error::format("not a mask dictionary file"));
        }
        let version = r.read_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let tag = r.read_u8()?;
        if tag != S::DTYPE.tag() {
            return Err(Error::format(format!(
                "dictionary stores dtype tag {tag}, expected {}",
                S::DTYPE.tag()
            )));
        }
        let tau = r.read_f64()?;
        let shape = FeatureShape {
            channels: r.read_u64()? as usize,
            height: r.read_u64()? as usize,
            width: r.read_u64()? as usize,
        };
        let trunk_id = ArtifactId::from_hex(r.read_str()?);
        let count = r.read_u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let block = r.read_u32()?;
            let packed_len = r.read_u64()? as usize;
            let packed = r.read_bytes(packed_len)?.to_vec();
            let fdm = Fdm::unpack(shape, &packed)?;
            let mean = match r.read_u8()? {
                0 => None,
                1 => {
                    let pair_count = r.read_u64()? as usize;
                    let k = shape.len();
                    let mut values = Vec::with_capacity(k);
                    let width = S::DTYPE.byte_width();
                    let raw = r.read_bytes(k * width)?;
                    for i in 0..k {
                        values.push(S::read_le(&raw[i * width..(i + 1) * width]));
                    }
                    Some(MeanMask::new(
                        Array3::from_shape_vec(shape.dims(), values).expect("length checked"),
                        pair_count,
                    )?)
                }
                other => {
                    return Err(Error::format(format!("bad mean-mask flag {other}")));
                }
            };
            entries.insert(block, DictEntry { fdm, mean });
        }
        if r.remaining() != 0 {
            return Err(Error::format("trailing bytes after dictionary entries"));
        }
        MaskDictionary::from_entries(tau, shape, trunk_id, entries)
    }

    pub fn id(&self) -> ArtifactId {
        let bytes = self.to_bytes();
        let hash = &bytes[bytes.len() - 32..];
        ArtifactId::from_hex(hash.iter().map(|b| format!("{b:02x}")).collect::<String>())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<ArtifactId> {
        save_bytes(path, &self.to_bytes())?;
        Ok(self.id())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&load_bytes(path)?)
    }
}

/// Builds the dictionary from one trained generator per central block.
/// All generators must target distinct central blocks of the sampler's grid
/// and share the trunk's checkpoint id.
pub fn build_dictionary<S: Scalar>(
    trunk: &TrunkNet<S>,
    generators: &[MaskGenerator<S>],
    sampler: &PairSampler<'_, S>,
    tau: f64,
    pair_count: usize,
    seed: u64,
) -> Result<MaskDictionary<S>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid_argument("tau must lie in [0, 1)"));
    }
    let central: Vec<BlockId> = sampler.grid().central_blocks();
    if generators.len() != central.len() {
        return Err(Error::invalid_state(format!(
            "need one generator per central block ({} blocks, got {} generators)",
            central.len(),
            generators.len()
        )));
    }
    let mut entries = BTreeMap::new();
    for gen in generators {
        if gen.trunk_id() != trunk.id() {
            return Err(Error::invalid_state(format!(
                "generator for block {} belongs to trunk {}, not {}",
                gen.target_block(),
                gen.trunk_id(),
                trunk.id()
            )));
        }
        let block = gen.target_block();
        if !central.contains(&block) {
            return Err(Error::invalid_state(format!(
                "generator targets peripheral block {block}"
            )));
        }
        let masks = collect_masks(trunk, gen, sampler, pair_count, seed)?;
        let mut acc = MeanAccumulator::new(trunk.feature_shape());
        for m in &masks {
            acc.push(m)?;
        }
        let mean = acc.finalize::<S>()?;
        let fdm = binarize(&mean, tau)?;
        if entries
            .insert(
                block.index(),
                DictEntry {
                    fdm,
                    mean: Some(mean),
                },
            )
            .is_some()
        {
            return Err(Error::invalid_state(format!(
                "two generators target block {block}"
            )));
        }
    }
    MaskDictionary::from_entries(tau, trunk.feature_shape(), trunk.id().clone(), entries)
}
