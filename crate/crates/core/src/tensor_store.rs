//! `CRFT` tensor files and the JSON-lines dataset manifest.
//!
//! Layout of a tensor file (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CRFT"
//! version u16      1
//! dtype   u8       1 = f32, 2 = u8
//! ndim    u8       2 or 3
//! dims    ndim x u32
//! payload row-major values in dims order
//! ```
//!
//! The manifest is UTF-8 JSON lines. The first line is the header record
//! `{"manifest_version":1}`; every further line is one [`ManifestEntry`].

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CrasError, Result};
use crate::tensor::{FeatureMap, Mask};

pub const TENSOR_MAGIC: [u8; 4] = *b"CRFT";
pub const TENSOR_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

/// In-memory form of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl Tensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            Tensor::F32 { dims, .. } | Tensor::U8 { dims, .. } => dims,
        }
    }

    fn dtype(&self) -> (u8, usize) {
        match self {
            Tensor::F32 { .. } => (DTYPE_F32, 4),
            Tensor::U8 { .. } => (DTYPE_U8, 1),
        }
    }

    fn len(&self) -> usize {
        match self {
            Tensor::F32 { data, .. } => data.len(),
            Tensor::U8 { data, .. } => data.len(),
        }
    }

    pub fn into_feature_map(self) -> Result<FeatureMap<f32>> {
        match self {
            Tensor::F32 { dims, data } if dims.len() == 3 => {
                FeatureMap::new(dims[0], dims[1], dims[2], data)
            }
            Tensor::F32 { dims, data } if dims.len() == 2 => {
                FeatureMap::new(1, dims[0], dims[1], data)
            }
            other => Err(CrasError::BadHeader(format!(
                "expected a float feature map, found {:?} tensor with dims {:?}",
                other.dtype().0,
                other.dims()
            ))),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            Tensor::U8 { dims, data } if dims.len() == 2 => Mask::new(dims[0], dims[1], data),
            Tensor::U8 { dims, data } if dims.len() == 3 && dims[0] == 1 => {
                Mask::new(dims[1], dims[2], data)
            }
            other => Err(CrasError::BadHeader(format!(
                "expected a u8 mask, found dims {:?}",
                other.dims()
            ))),
        }
    }
}

impl From<&FeatureMap<f32>> for Tensor {
    fn from(map: &FeatureMap<f32>) -> Self {
        let (c, h, w) = map.dims();
        Tensor::F32 {
            dims: vec![c, h, w],
            data: map.as_slice().to_vec(),
        }
    }
}

impl From<&Mask> for Tensor {
    fn from(mask: &Mask) -> Self {
        Tensor::U8 {
            dims: vec![mask.height(), mask.width()],
            data: mask.as_slice().to_vec(),
        }
    }
}

/// Serializes a tensor to its exact byte representation.
pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>> {
    let dims = tensor.dims();
    if !(2..=3).contains(&dims.len()) {
        return Err(CrasError::BadHeader(format!(
            "ndim must be 2 or 3, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(CrasError::BadHeader(format!("invalid dims {dims:?}")));
    }
    let count: usize = dims.iter().product();
    if count != tensor.len() {
        return Err(CrasError::Length {
            expected: count,
            found: tensor.len(),
        });
    }
    let (dtype, size) = tensor.dtype();
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + count * size);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match tensor {
        Tensor::F32 { data, .. } => {
            for (index, v) in data.iter().enumerate() {
                if !v.is_finite() {
                    return Err(CrasError::NonFinite { index });
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::U8 { data, .. } => out.extend_from_slice(data),
    }
    Ok(out)
}

/// Parses one tensor record from the front of `bytes`, returning it together
/// with the number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < 8 {
        return Err(CrasError::Length {
            expected: 8,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != TENSOR_MAGIC {
        return Err(CrasError::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(CrasError::UnsupportedVersion(version));
    }
    let dtype = bytes[6];
    let ndim = bytes[7] as usize;
    if !(2..=3).contains(&ndim) {
        return Err(CrasError::BadHeader(format!("ndim must be 2 or 3, got {ndim}")));
    }
    let header_len = 8 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(CrasError::Length {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[8..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(CrasError::BadHeader(format!("zero dimension in {dims:?}")));
    }
    let size = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(CrasError::BadHeader(format!("unknown dtype {other}"))),
    };
    let count: usize = dims.iter().product();
    let total = header_len + count * size;
    if bytes.len() < total {
        return Err(CrasError::Length {
            expected: total,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header_len..total];
    let tensor = if dtype == DTYPE_F32 {
        let mut data = Vec::with_capacity(count);
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(CrasError::NonFinite { index });
            }
            data.push(v);
        }
        Tensor::F32 { dims, data }
    } else {
        Tensor::U8 {
            dims,
            data: payload.to_vec(),
        }
    };
    Ok((tensor, total))
}

/// Parses a complete tensor file; trailing bytes are a length error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (tensor, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CrasError::Length {
            expected: used,
            found: bytes.len(),
        });
    }
    Ok(tensor)
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CrasError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CrasError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CrasError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CrasError::io(path, e))?;
    tmp.persist(path).map_err(|e| CrasError::io(path, e.error))?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let bytes = encode_tensor(tensor)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CrasError::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &FeatureMap<f32>) -> Result<()> {
    write_tensor(path, &Tensor::from(map))
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    read_tensor(path)?.into_feature_map()
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_tensor(path, &Tensor::from(mask))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    read_tensor(path)?.into_mask()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub category: String,
    pub sample_id: String,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
}

#[derive(Clone, Debug, Default)]
pub struct ManifestOptions {
    /// Check that every referenced tensor and mask file exists.
    pub check_files: bool,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Distinct categories in lexicographic order.
    pub categories: Vec<String>,
}

impl DatasetManifest {
    /// Validates entries and collects the ordered category set.
    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut categories = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(CrasError::Manifest(format!("duplicate path {}", e.path)));
            }
            if e.category.is_empty() || e.sample_id.is_empty() {
                return Err(CrasError::Manifest(format!(
                    "entry {} has an empty category or sample_id",
                    e.path
                )));
            }
            if e.split == Split::Train && e.label == Label::Anomalous {
                return Err(CrasError::Manifest(format!(
                    "train entry {} is labeled anomalous",
                    e.path
                )));
            }
            if e.label == Label::Anomalous && e.mask_path.is_none() {
                return Err(CrasError::Manifest(format!(
                    "anomalous entry {} has no mask_path",
                    e.path
                )));
            }
            categories.insert(e.category.clone());
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
            categories: categories.into_iter().collect(),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.binary_search_by(|c| c.as_str().cmp(category)).ok()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            let refs = std::iter::once(&e.path).chain(e.mask_path.iter());
            for rel in refs {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(CrasError::Manifest(format!(
                        "missing file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestHeader {
            manifest_version: MANIFEST_VERSION,
        })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let mut entries = Vec::new();
        if let Some((lineno, first)) = lines.next() {
            let value: serde_json::Value = serde_json::from_str(first).map_err(|e| {
                CrasError::Manifest(format!("line {}: {e}", lineno + 1))
            })?;
            match value.get("manifest_version") {
                Some(v) => {
                    let version = v.as_u64().unwrap_or(0);
                    if version != MANIFEST_VERSION as u64 {
                        return Err(CrasError::Manifest(format!(
                            "unsupported manifest_version {v}"
                        )));
                    }
                }
                None => entries.push(parse_entry(lineno, first)?),
            }
        }
        for (lineno, line) in lines {
            entries.push(parse_entry(lineno, line)?);
        }
        DatasetManifest::from_entries(root, entries)
    }
}

fn parse_entry(lineno: usize, line: &str) -> Result<ManifestEntry> {
    serde_json::from_str(line).map_err(|e| CrasError::Manifest(format!("line {}: {e}", lineno + 1)))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_manifest_with(path, &ManifestOptions::default())
}

pub fn load_manifest_with(path: impl AsRef<Path>, opts: &ManifestOptions) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CrasError::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = DatasetManifest::parse_jsonl(root, &text)?;
    if opts.check_files {
        manifest.check_files()?;
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    write_atomic(path.as_ref(), manifest.to_jsonl()?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, category: &str, split: Split, label: Label) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            category: category.into(),
            sample_id: path.into(),
            split,
            label,
            mask_path: (label == Label::Anomalous).then(|| format!("{path}.mask")),
            level: None,
        }
    }

    #[test]
    fn zero_tensor_is_68_bytes() {
        let map = FeatureMap::<f32>::zeros(3, 2, 2);
        let bytes = encode_tensor(&Tensor::from(&map)).unwrap();
        assert_eq!(bytes.len(), 68);
        assert_eq!(&bytes[..4], b"CRFT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 3);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
    }

    #[test]
    fn nan_reports_flat_index() {
        let mut map = FeatureMap::<f32>::zeros(2, 2, 2);
        map.set(1, 0, 1, f32::NAN);
        let err = encode_tensor(&Tensor::from(&map)).unwrap_err();
        assert!(matches!(err, CrasError::NonFinite { index: 5 }), "{err}");
    }

    #[test]
    fn distinct_read_errors() {
        let map = FeatureMap::<f32>::from_fn(2, 2, 2, |c, h, w| (c + h + w) as f32);
        let good = encode_tensor(&Tensor::from(&map)).unwrap();

        let mut magic = good.clone();
        magic[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_tensor(&magic).unwrap_err().code(), "bad-magic");

        let mut version = good.clone();
        version[4] = 2;
        assert_eq!(decode_tensor(&version).unwrap_err().code(), "bad-version");

        let truncated = &good[..good.len() - 1];
        assert_eq!(decode_tensor(truncated).unwrap_err().code(), "bad-length");
    }

    #[test]
    fn file_roundtrip_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let map = FeatureMap::<f32>::from_fn(3, 4, 5, |c, h, w| c as f32 - 0.5 * h as f32 + w as f32 * 1e-3);
        let p = dir.path().join("a.crft");
        write_feature_map(&p, &map).unwrap();
        assert_eq!(read_feature_map(&p).unwrap(), map);

        let mut mask = Mask::zeros(4, 5);
        mask.set(1, 2, 255);
        let mp = dir.path().join("m.crft");
        write_mask(&mp, &mask).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), mask);
    }

    #[test]
    fn manifest_orders_categories() {
        let m = DatasetManifest::from_entries(
            ".",
            vec![
                entry("x", "b", Split::Train, Label::Normal),
                entry("y", "a", Split::Test, Label::Anomalous),
            ],
        )
        .unwrap();
        assert_eq!(m.categories, vec!["a", "b"]);
    }

    #[test]
    fn manifest_rejects_anomalous_train_and_duplicates() {
        let err = DatasetManifest::from_entries(".", vec![entry("x", "a", Split::Train, Label::Anomalous)]);
        assert!(matches!(err, Err(CrasError::Manifest(_))));
        let err = DatasetManifest::from_entries(
            ".",
            vec![
                entry("x", "a", Split::Train, Label::Normal),
                entry("x", "b", Split::Train, Label::Normal),
            ],
        );
        assert!(matches!(err, Err(CrasError::Manifest(m)) if m.contains("duplicate")));
    }

    #[test]
    fn manifest_jsonl_roundtrip_with_header() {
        let names = ["o", "n", "m", "l", "k", "j", "i", "h", "g", "f", "e", "d", "c", "b", "a"];
        let entries: Vec<_> = names
            .iter()
            .enumerate()
            .map(|(i, c)| entry(&format!("f{i}"), &format!("cat_{c}"), Split::Train, Label::Normal))
            .collect();
        let m = DatasetManifest::from_entries(".", entries).unwrap();
        let text = m.to_jsonl().unwrap();
        assert!(text.starts_with("{\"manifest_version\":1}\n"));
        let back = DatasetManifest::parse_jsonl(".", &text).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.categories.len(), 15);
        assert_eq!(back.categories[0], "cat_a");
        assert_eq!(back.categories[14], "cat_o");
    }

    #[test]
    fn eager_validation_finds_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::from_entries(dir.path(), vec![entry("nope.crft", "a", Split::Train, Label::Normal)])
            .unwrap();
        write_manifest(dir.path().join("manifest.jsonl"), &m).unwrap();
        let opts = ManifestOptions { check_files: true };
        let err = load_manifest_with(dir.path().join("manifest.jsonl"), &opts).unwrap_err();
        assert!(err.to_string().contains("nope.crft"));
    }
}
