//! Binary embedding file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   b"BAMP"        4 bytes
//! version u16 = 1        2 bytes
//! dim     u32            4 bytes
//! count   u64            8 bytes
//! count × { class_id u32, split u8 (0 = train, 1 = test), dim × f32 }
//! ```
//!
//! An optional plain-text sidecar (`<file>.manifest`) holds the dataset name
//! on its first line followed by one class name per line, in class-id order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StoreError;

pub const MAGIC: [u8; 4] = *b"BAMP";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes before the first record.
pub const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// One backbone feature vector with its label. Vectors are stored raw,
/// never normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub vector: Vec<f32>,
    pub class_id: u32,
    pub split: Split,
}

impl LabeledEmbedding {
    pub fn new(vector: Vec<f32>, class_id: u32, split: Split) -> Self {
        Self { vector, class_id, split }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Per-class record counts and dataset identity, derived from the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub class_count: usize,
    pub train_counts: BTreeMap<u32, usize>,
    pub test_counts: BTreeMap<u32, usize>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn from_records(name: &str, dim: usize, records: &[LabeledEmbedding]) -> Self {
        let mut train_counts = BTreeMap::new();
        let mut test_counts = BTreeMap::new();
        for r in records {
            train_counts.entry(r.class_id).or_insert(0);
            test_counts.entry(r.class_id).or_insert(0);
            match r.split {
                Split::Train => *train_counts.get_mut(&r.class_id).unwrap() += 1,
                Split::Test => *test_counts.get_mut(&r.class_id).unwrap() += 1,
            }
        }
        Self {
            name: name.to_string(),
            dim,
            class_count: train_counts.len(),
            train_counts,
            test_counts,
            class_names: Vec::new(),
        }
    }

    /// Sorted class ids present in the dataset.
    pub fn class_ids(&self) -> Vec<u32> {
        self.train_counts.keys().copied().collect()
    }

    /// Checks the invariants a dataset must satisfy before a protocol run.
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.dim == 0 {
            return Err(StoreError::Invalid("dimension must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(StoreError::Invalid(format!(
                "dataset needs at least 2 classes, found {}",
                self.class_count
            )));
        }
        if let Some((c, _)) = self.test_counts.iter().find(|(_, &n)| n == 0) {
            return Err(StoreError::Invalid(format!("class {c} has no test samples")));
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes `records` in the binary embedding format.
pub fn write_embeddings(records: &[LabeledEmbedding], path: &Path) -> Result<(), StoreError> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    if let Some(bad) = records.iter().find(|r| r.vector.len() != dim) {
        return Err(StoreError::MixedDimensions { expected: dim, found: bad.vector.len() });
    }
    let dim32 = u32::try_from(dim).map_err(|_| StoreError::Invalid("dimension exceeds u32".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&r.class_id.to_le_bytes())?;
        w.write_all(&[r.split.to_byte()])?;
        for v in &r.vector {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the plain-text sidecar next to an embedding file.
pub fn write_sidecar(path: &Path, name: &str, class_names: &[String]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(sidecar_path(path))?);
    writeln!(w, "{name}")?;
    for c in class_names {
        writeln!(w, "{c}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Option<(String, Vec<String>)>, StoreError> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(side)?;
    let mut lines = text.lines();
    let name = lines.next().unwrap_or_default().trim().to_string();
    let classes = lines.map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    Ok(Some((name, classes)))
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::Truncated,
        _ => StoreError::Io(e),
    })
}

/// Reads an embedding file (and its sidecar, if present).
pub fn load_embeddings(path: &Path) -> Result<(DatasetManifest, Vec<LabeledEmbedding>), StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    read_exact_or_truncated(&mut r, &mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let mut b4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut b8)?;
    let count = u64::from_le_bytes(b8);

    // Bound the allocation by what the file can actually hold.
    let file_len = std::fs::metadata(path)?.len();
    let record_len = 5 + 4 * dim as u64;
    let available = file_len.saturating_sub(HEADER_LEN as u64) / record_len;
    if count > available {
        return Err(StoreError::Truncated);
    }

    let mut records = Vec::with_capacity(count as usize);
    let mut payload = vec![0u8; 4 * dim];
    for index in 0..count {
        read_exact_or_truncated(&mut r, &mut b4)?;
        let class_id = u32::from_le_bytes(b4);
        let mut b1 = [0u8; 1];
        read_exact_or_truncated(&mut r, &mut b1)?;
        let split = Split::from_byte(b1[0]).ok_or(StoreError::BadSplit { index, value: b1[0] })?;
        read_exact_or_truncated(&mut r, &mut payload)?;
        let vector: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { index });
        }
        records.push(LabeledEmbedding { vector, class_id, split });
    }

    let (name, class_names) = match read_sidecar(path)? {
        Some(s) => s,
        None => (
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            Vec::new(),
        ),
    };
    let mut manifest = DatasetManifest::from_records(&name, dim, &records);
    manifest.class_names = class_names;
    Ok((manifest, records))
}
