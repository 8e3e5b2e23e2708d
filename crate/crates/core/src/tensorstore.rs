//! Bit-exact persistence: tensor files, checkpoint archives and dataset
//! descriptors.
//!
//! Tensor file layout (all integers little-endian `u32`):
//!
//! ```text
//! "GTNS" | version | dtype | ndim | dims[ndim] | payload (row-major LE scalars)
//! ```
//!
//! dtype 1 is float32, 2 is int32. A checkpoint archive is
//! `entry_count | (name_len | name | tensor file)* | manifest_len | manifest JSON`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::net::params::{ParamStore, Role};
use crate::raster::{ImageTensor, LabelMask, IGNORE};

pub const MAGIC: &[u8; 4] = b"GTNS";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    I32 = 2,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::I32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

/// A dense n-d tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl DenseTensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(dims, TensorData::F32(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::checked(dims, TensorData::I32(data))
    }

    fn checked(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::UnsupportedRank(dims.len()));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} hold {n} elements, data has {}", data.len())));
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Serialized byte image in the tensor file layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.len() > MAX_RANK {
            return Err(Error::UnsupportedRank(self.dims.len()));
        }
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.dtype() as u32);
        put_u32(&mut out, self.dims.len() as u32);
        for &d in &self.dims {
            put_u32(&mut out, u32::try_from(d).map_err(|_| Error::DimsOverflow)?);
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    /// Parses one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4).map_err(|_| Error::BadMagic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(r.u32()?)?;
        let ndim = r.u32()? as usize;
        if ndim > MAX_RANK {
            return Err(Error::UnsupportedRank(ndim));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n = element_count(&dims)?;
        let nbytes = n.checked_mul(4).ok_or(Error::DimsOverflow)?;
        let payload = r.take(nbytes).map_err(|_| Error::TruncatedPayload)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Ok((DenseTensor { dims, data }, r.pos))
    }
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (u32::MAX as usize))
        .ok_or(Error::DimsOverflow)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedPayload)?;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = DenseTensor::from_bytes(&bytes)?;
    if used != bytes.len() {
        return Err(Error::MalformedArchive(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

impl From<&ImageTensor> for DenseTensor {
    fn from(img: &ImageTensor) -> Self {
        DenseTensor {
            dims: vec![img.channels, img.height, img.width],
            data: TensorData::F32(img.data.clone()),
        }
    }
}

impl From<&LabelMask> for DenseTensor {
    fn from(m: &LabelMask) -> Self {
        DenseTensor {
            dims: vec![m.height, m.width],
            data: TensorData::I32(m.data.clone()),
        }
    }
}

impl TryFrom<DenseTensor> for ImageTensor {
    type Error = Error;
    fn try_from(t: DenseTensor) -> Result<Self> {
        match (t.dims.as_slice(), t.data) {
            (&[c, h, w], TensorData::F32(v)) => ImageTensor::new(c, h, w, v),
            (dims, _) => Err(Error::Shape(format!("expected float32 CxHxW image, got {dims:?}"))),
        }
    }
}

impl TryFrom<DenseTensor> for LabelMask {
    type Error = Error;
    fn try_from(t: DenseTensor) -> Result<Self> {
        match (t.dims.as_slice(), t.data) {
            (&[h, w], TensorData::I32(v)) => LabelMask::new(h, w, v),
            (dims, _) => Err(Error::Shape(format!("expected int32 HxW mask, got {dims:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Structured metadata stored at the tail of a checkpoint archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub step: u64,
    pub config_digest: String,
    pub seed: u64,
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
    pub buffers: Vec<String>,
    /// Adam step counter, present when optimizer moments are stored.
    pub optimizer_step: Option<u64>,
}

/// First and second AdamW moments for every trainable tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub first: BTreeMap<String, Mat<f32>>,
    pub second: BTreeMap<String, Mat<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub moments: Option<OptimizerMoments>,
    pub manifest: Manifest,
}

const PARAM_PREFIX: &str = "param/";
const BUFFER_PREFIX: &str = "buffer/";
const FIRST_PREFIX: &str = "adamw.m/";
const SECOND_PREFIX: &str = "adamw.v/";

fn mat_tensor(m: &Mat<f32>) -> DenseTensor {
    DenseTensor {
        dims: vec![m.rows, m.cols],
        data: TensorData::F32(m.data.clone()),
    }
}

fn tensor_mat(name: &str, t: DenseTensor) -> Result<Mat<f32>> {
    match (t.dims.as_slice(), t.data) {
        (&[r, c], TensorData::F32(v)) => Ok(Mat::from_vec(r, c, v)),
        (dims, _) => Err(Error::MalformedArchive(format!("entry `{name}` is not a float32 matrix ({dims:?})"))),
    }
}

/// Builds the manifest describing `params` (partition lists are filled in).
pub fn manifest_for(params: &ParamStore<f32>, step: u64, config_digest: &str, seed: u64) -> Manifest {
    Manifest {
        step,
        config_digest: config_digest.to_string(),
        seed,
        frozen: params.names_with_role(Role::Frozen),
        trainable: params.names_with_role(Role::Trainable),
        buffers: params.buffer_names(),
        optimizer_step: None,
    }
}

/// Serializes a checkpoint to bytes. The manifest's partition lists are
/// rewritten from `params` so they can never disagree with the entries.
pub fn checkpoint_bytes(
    params: &ParamStore<f32>,
    moments: Option<&OptimizerMoments>,
    manifest: &Manifest,
) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, DenseTensor)> = Vec::new();
    for (name, p) in params.iter() {
        entries.push((format!("{PARAM_PREFIX}{name}"), mat_tensor(&p.value)));
    }
    for (name, b) in params.buffers() {
        entries.push((format!("{BUFFER_PREFIX}{name}"), mat_tensor(b)));
    }
    let mut manifest = manifest.clone();
    manifest.frozen = params.names_with_role(Role::Frozen);
    manifest.trainable = params.names_with_role(Role::Trainable);
    manifest.buffers = params.buffer_names();
    manifest.optimizer_step = None;
    if let Some(m) = moments {
        manifest.optimizer_step = Some(m.step);
        for (name, t) in &m.first {
            entries.push((format!("{FIRST_PREFIX}{name}"), mat_tensor(t)));
        }
        for (name, t) in &m.second {
            entries.push((format!("{SECOND_PREFIX}{name}"), mat_tensor(t)));
        }
    }
    let mut out = Vec::new();
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in &entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&t.to_bytes()?);
    }
    let json = serde_json::to_vec(&manifest)?;
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn save_checkpoint(
    params: &ParamStore<f32>,
    moments: Option<&OptimizerMoments>,
    manifest: &Manifest,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(params, moments, manifest)?).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint archive. With `expected_digest` set, the manifest's
/// config digest must match (strict mode).
pub fn checkpoint_from_bytes(bytes: &[u8], expected_digest: Option<&str>) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut entries: BTreeMap<String, DenseTensor> = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedArchive("entry name is not UTF-8".into()))?
            .to_string();
        let (t, used) = DenseTensor::from_bytes(&bytes[r.pos..])?;
        r.pos += used;
        if entries.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateEntry(name));
        }
    }
    let mlen = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
    if r.pos != bytes.len() {
        return Err(Error::MalformedArchive("trailing bytes after manifest".into()));
    }
    if let Some(expected) = expected_digest {
        if expected != manifest.config_digest {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found: manifest.config_digest.clone(),
            });
        }
    }

    let mut params = ParamStore::new();
    let mut seen = BTreeSet::new();
    for (names, role) in [(&manifest.frozen, Role::Frozen), (&manifest.trainable, Role::Trainable)] {
        for name in names {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateEntry(name.clone()));
            }
            let key = format!("{PARAM_PREFIX}{name}");
            let t = entries.remove(&key).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            params.insert(name.clone(), tensor_mat(name, t)?, role);
        }
    }
    for name in &manifest.buffers {
        let key = format!("{BUFFER_PREFIX}{name}");
        let t = entries.remove(&key).ok_or_else(|| Error::MissingParameter(name.clone()))?;
        params.insert_buffer(name.clone(), tensor_mat(name, t)?);
    }
    let moments = match manifest.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = OptimizerMoments {
                step,
                ..Default::default()
            };
            for name in &manifest.trainable {
                for (prefix, dst) in [(FIRST_PREFIX, &mut m.first), (SECOND_PREFIX, &mut m.second)] {
                    let key = format!("{prefix}{name}");
                    let t = entries.remove(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
                    dst.insert(name.clone(), tensor_mat(&key, t)?);
                }
            }
            Some(m)
        }
    };
    if let Some(extra) = entries.keys().next() {
        return Err(Error::MalformedArchive(format!("entry `{extra}` not listed in manifest")));
    }
    Ok(Checkpoint {
        params,
        moments,
        manifest,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected_digest)
}

// ---------------------------------------------------------------------------
// Datasets

/// A budgeted target label: `(image index, pixel index, class id)`.
pub type BudgetLabel = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDatasetDescriptor {
    pub class_count: usize,
    pub channel_count: usize,
    pub height: usize,
    pub width: usize,
    pub image_paths: Vec<String>,
    pub mask_paths: Vec<String>,
    #[serde(default)]
    pub labeled_budget: Vec<BudgetLabel>,
}

impl DomainDatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.channel_count == 0 {
            return Err(Error::InvalidDataset("class_count and channel_count must be positive".into()));
        }
        if self.image_paths.len() != self.mask_paths.len() {
            return Err(Error::InvalidDataset(format!(
                "{} images but {} masks",
                self.image_paths.len(),
                self.mask_paths.len()
            )));
        }
        let pixels = self.height * self.width;
        for &(img, pix, cls) in &self.labeled_budget {
            if img >= self.image_paths.len() {
                return Err(Error::InvalidDataset(format!("budget image index {img} out of range")));
            }
            if pix >= pixels {
                return Err(Error::InvalidDataset(format!("budget pixel index {pix} >= {pixels}")));
            }
            if cls >= self.class_count {
                return Err(Error::InvalidDataset(format!(
                    "budget class id {cls} >= class_count {}",
                    self.class_count
                )));
            }
        }
        Ok(())
    }
}

/// A domain dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub descriptor: DomainDatasetDescriptor,
    pub images: Vec<ImageTensor>,
    pub masks: Vec<LabelMask>,
}

impl DomainData {
    /// Checks the descriptor plus raster shapes and that budget labels agree
    /// with the masks.
    pub fn validate(&self) -> Result<()> {
        let d = &self.descriptor;
        d.validate()?;
        if self.images.len() != d.image_paths.len() || self.masks.len() != d.image_paths.len() {
            return Err(Error::InvalidDataset("raster count differs from descriptor".into()));
        }
        if self.images.is_empty() {
            return Err(Error::InvalidDataset("dataset has no images".into()));
        }
        for (img, mask) in self.images.iter().zip(&self.masks) {
            if img.channels != d.channel_count || img.height != d.height || img.width != d.width {
                return Err(Error::InvalidDataset("image shape differs from descriptor".into()));
            }
            if mask.height != d.height || mask.width != d.width {
                return Err(Error::InvalidDataset("mask shape differs from descriptor".into()));
            }
            if mask.data.iter().any(|&v| v != IGNORE && (v < 0 || v as usize >= d.class_count)) {
                return Err(Error::InvalidDataset("mask class id out of range".into()));
            }
        }
        for &(img, pix, cls) in &d.labeled_budget {
            if self.masks[img].data[pix] != cls as i32 {
                return Err(Error::InvalidDataset(format!(
                    "budget label ({img}, {pix}) = {cls} disagrees with the mask"
                )));
            }
        }
        Ok(())
    }
}

pub const META_FILE: &str = "meta.json";

/// Writes `images/NNN.gt`, `masks/NNN.gt` and `meta.json` under `dir`.
/// Paths recorded in the descriptor are relative to `dir`.
pub fn write_domain(dir: impl AsRef<Path>, data: &DomainData) -> Result<()> {
    let dir = dir.as_ref();
    data.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let d = &data.descriptor;
    for (i, (img, mask)) in data.images.iter().zip(&data.masks).enumerate() {
        write_tensor(&DenseTensor::from(img), dir.join(&d.image_paths[i]))?;
        write_tensor(&DenseTensor::from(mask), dir.join(&d.mask_paths[i]))?;
    }
    let meta = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(d)?;
    fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
}

pub fn read_domain(dir: impl AsRef<Path>) -> Result<DomainData> {
    let dir = dir.as_ref();
    let meta = dir.join(META_FILE);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let descriptor: DomainDatasetDescriptor = serde_json::from_str(&text)?;
    descriptor.validate()?;
    let resolve = |p: &String| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    };
    let images = descriptor
        .image_paths
        .iter()
        .map(|p| read_tensor(resolve(p)).and_then(ImageTensor::try_from))
        .collect::<Result<Vec<_>>>()?;
    let masks = descriptor
        .mask_paths
        .iter()
        .map(|p| read_tensor(resolve(p)).and_then(LabelMask::try_from))
        .collect::<Result<Vec<_>>>()?;
    let data = DomainData {
        descriptor,
        images,
        masks,
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_2x2_layout() {
        let t = DenseTensor::f32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.to_bytes().unwrap();
        assert_eq!(&b[0..4], b"GTNS");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &2u32.to_le_bytes());
        assert_eq!(b.len(), 24 + 16);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn scalar_int_payload() {
        let t = DenseTensor::i32(vec![1], vec![7]).unwrap();
        let b = t.to_bytes().unwrap();
        assert_eq!(&b[b.len() - 4..], &[7, 0, 0, 0]);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
    }

    #[test]
    fn header_errors() {
        let t = DenseTensor::f32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut b = t.to_bytes().unwrap();
        b.truncate(b.len() - 3);
        assert_eq!(DenseTensor::from_bytes(&b).unwrap_err().to_string(), "truncated payload");
        let mut b = t.to_bytes().unwrap();
        b[0..4].copy_from_slice(b"XXXX");
        assert_eq!(DenseTensor::from_bytes(&b).unwrap_err().to_string(), "bad magic");
        let mut b = t.to_bytes().unwrap();
        b[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(DenseTensor::from_bytes(&b), Err(Error::UnsupportedDtype(9))));
        let mut b = t.to_bytes().unwrap();
        b[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        b[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(DenseTensor::from_bytes(&b), Err(Error::DimsOverflow)));
    }

    #[test]
    fn rank_above_four_rejected() {
        assert!(matches!(
            DenseTensor::f32(vec![1, 1, 1, 1, 1], vec![0.0]),
            Err(Error::UnsupportedRank(5))
        ));
    }

    #[test]
    fn descriptor_rejects_out_of_range() {
        let mut d = DomainDatasetDescriptor {
            class_count: 3,
            channel_count: 2,
            height: 4,
            width: 4,
            image_paths: vec!["a".into()],
            mask_paths: vec!["b".into()],
            labeled_budget: vec![(0, 15, 2)],
        };
        d.validate().unwrap();
        d.labeled_budget = vec![(0, 16, 2)];
        assert!(d.validate().is_err());
        d.labeled_budget = vec![(0, 3, 3)];
        assert!(d.validate().is_err());
        d.labeled_budget = vec![(1, 3, 0)];
        assert!(d.validate().is_err());
        d.labeled_budget.clear();
        d.mask_paths.push("c".into());
        assert!(d.validate().is_err());
    }
}
