//! Binary artifact containers.
//!
//! Checkpoints and dictionaries are written as self-describing little-endian
//! containers: a magic tag, a format version, a dtype tag, a JSON metadata echo,
//! a table of named tensors, and a trailing SHA-256 over everything before it.
//! The hex digest of that hash is the artifact id. Serialization is canonical —
//! saving, loading, and saving again produces identical bytes.

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub const FORMAT_VERSION: u32 = 1;

/// Content hash identity of a serialized artifact (hex SHA-256).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArtifactId(Arc<str>);

impl ArtifactId {
    pub fn from_hex(hex: impl Into<String>) -> Self {
        ArtifactId(Arc::from(hex.into()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(out, "{b:02x}").expect("writing to String cannot fail");
    }
    out
}

/// Stable sub-seed derivation: every training phase and sampler gets its own
/// stream derived from the run seed and a purpose tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

// ---------------------------------------------------------------------------
// Little-endian primitives
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn push_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn push_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn push_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn push_bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn push_str(&mut self, v: &str) {
        self.push_u64(v.len() as u64);
        self.buf.extend_from_slice(v.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn buf_mut(&mut self) -> &mut Vec<u8> {
        &mut self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::format(format!(
                "truncated artifact: wanted {len} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn read_bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        self.take(len)
    }

    pub fn read_str(&mut self) -> Result<String> {
        let len = self.read_u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format("artifact string is not valid UTF-8"))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

// ---------------------------------------------------------------------------
// Named tensors
// ---------------------------------------------------------------------------

/// Ordered collection of named tensors headed for (or read from) a container.
pub struct TensorSet<S: Scalar> {
    entries: Vec<(String, Vec<usize>, Vec<S>)>,
}

impl<S: Scalar> Default for TensorSet<S> {
    fn default() -> Self {
        TensorSet {
            entries: Vec::new(),
        }
    }
}

impl<S: Scalar> TensorSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<S>) {
        let name = name.into();
        let expected: usize = dims.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "tensor {name}: data length does not match dims"
        );
        self.entries.push((name, dims, data));
    }

    /// Removes the named tensor, checking its dims.
    pub fn pull(&mut self, name: &str, dims: &[usize]) -> Result<Vec<S>> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::format(format!("artifact is missing tensor '{name}'")))?;
        let (_, got_dims, data) = self.entries.remove(idx);
        if got_dims != dims {
            return Err(Error::shape(
                format!("{dims:?} for tensor '{name}'"),
                format!("{got_dims:?}"),
            ));
        }
        Ok(data)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _, _)| n.as_str()).collect()
    }
}

// ---------------------------------------------------------------------------
// Containers
// ---------------------------------------------------------------------------

/// Serializes a container: magic, version, dtype, metadata JSON, tensors, hash.
pub fn write_container<S: Scalar>(magic: &[u8; 8], meta_json: &str, tensors: &TensorSet<S>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.push_bytes(magic);
    w.push_u32(FORMAT_VERSION);
    w.push_u8(S::DTYPE.tag());
    w.push_str(meta_json);
    w.push_u32(tensors.entries.len() as u32);
    for (name, dims, data) in &tensors.entries {
        w.push_str(name);
        w.push_u8(dims.len() as u8);
        for &d in dims {
            w.push_u64(d as u64);
        }
        w.push_u64((data.len() * S::DTYPE.byte_width()) as u64);
        for &v in data {
            v.write_le(w.buf_mut());
        }
    }
    let digest = Sha256::digest(w.as_slice());
    let mut bytes = w.into_bytes();
    bytes.extend_from_slice(&digest);
    bytes
}

/// Parses a container produced by [`write_container`], verifying magic, version,
/// dtype and the trailing content hash. Returns `(meta_json, tensors, artifact id)`.
pub fn read_container<S: Scalar>(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(String, TensorSet<S>, ArtifactId)> {
    if bytes.len() < 32 {
        return Err(Error::format("artifact shorter than its hash"));
    }
    let (body, hash) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != hash {
        return Err(Error::format("artifact hash mismatch (corrupt file)"));
    }
    let id = ArtifactId::from_hex(sha256_hex_of_digest(hash));

    let mut r = ByteReader::new(body);
    let got_magic = r.read_bytes(8)?;
    if got_magic != magic {
        return Err(Error::format(format!(
            "wrong artifact kind: expected magic {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(got_magic)
        )));
    }
    let version = r.read_u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported artifact version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let dtype_tag = r.read_u8()?;
    let dtype = Dtype::from_tag(dtype_tag)
        .ok_or_else(|| Error::format(format!("unknown dtype tag {dtype_tag}")))?;
    if dtype != S::DTYPE {
        return Err(Error::format(format!(
            "artifact stores {} values but {} was requested",
            dtype.name(),
            S::DTYPE.name()
        )));
    }
    let meta_json = r.read_str()?;
    let count = r.read_u32()? as usize;
    let mut tensors = TensorSet::new();
    for _ in 0..count {
        let name = r.read_str()?;
        let ndim = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64()? as usize);
        }
        let byte_len = r.read_u64()? as usize;
        let elems: usize = dims.iter().product();
        if byte_len != elems * S::DTYPE.byte_width() {
            return Err(Error::format(format!(
                "tensor '{name}': byte length {byte_len} does not match dims {dims:?}"
            )));
        }
        let raw = r.read_bytes(byte_len)?;
        let width = S::DTYPE.byte_width();
        let data = (0..elems).map(|i| S::read_le(&raw[i * width..])).collect();
        tensors.push(name, dims, data);
    }
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes after tensor table"));
    }
    Ok((meta_json, tensors, id))
}

fn sha256_hex_of_digest(digest: &[u8]) -> String {
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(out, "{b:02x}").expect("writing to String cannot fail");
    }
    out
}

/// The artifact id a byte buffer will carry: SHA-256 of everything but the hash
/// itself (the buffer must already end with the 32-byte hash).
pub fn container_id(bytes: &[u8]) -> Result<ArtifactId> {
    if bytes.len() < 32 {
        return Err(Error::format("artifact shorter than its hash"));
    }
    Ok(ArtifactId::from_hex(sha256_hex(
        &bytes[..bytes.len() - 32],
    )))
}

pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}
