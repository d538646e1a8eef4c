//! Binary checkpoint of a trained base session.
//!
//! Layout (little-endian): magic `BAMK`, version u16, config hash u64,
//! class count u32 followed by the class ids (u32 each), head dimensions
//! `d, r` (u32), activation u8, residual u8, then `W_down`, `W_up`, `W_cls`
//! as column-major f64. A trailing u8 flags a prototype bank; when set, each
//! class stores its prototype count u32, the prototypes (d × f64 each) and
//! their cumulative masses (f64 each).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::bank::PrototypeBank;
use super::head::{Activation, BottleneckHead};
use super::TrainConfig;
use crate::hypersphere::UnitVector;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BAMK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint was trained with a different configuration (hash {found:016x}, expected {expected:016x})")]
    ConfigMismatch { expected: u64, found: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub class_ids: Vec<u32>,
    pub head: BottleneckHead,
    pub bank: Option<PrototypeBank>,
}

impl Checkpoint {
    pub fn ensure_matches(&self, expected: u64) -> Result<(), CheckpointError> {
        if self.config_hash == expected {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch { expected, found: self.config_hash })
        }
    }
}

/// Hash of the training configuration together with the base class ids.
pub fn config_hash(config: &TrainConfig, class_ids: &[u32]) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for c in class_ids {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<'a>(w: &mut impl Write, vs: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ckpt.config_hash.to_le_bytes())?;
    put_u32(&mut w, ckpt.class_ids.len())?;
    for &c in &ckpt.class_ids {
        w.write_all(&c.to_le_bytes())?;
    }
    let head = &ckpt.head;
    put_u32(&mut w, head.dim())?;
    put_u32(&mut w, head.bottleneck())?;
    w.write_all(&[head.activation.as_byte(), u8::from(head.residual)])?;
    put_f64s(&mut w, head.w_down.iter())?;
    put_f64s(&mut w, head.w_up.iter())?;
    put_f64s(&mut w, head.w_cls.iter())?;
    match &ckpt.bank {
        None => w.write_all(&[0])?,
        Some(bank) => {
            w.write_all(&[1])?;
            for (ps, mass) in bank.prototypes.iter().zip(&bank.mass) {
                put_u32(&mut w, ps.len())?;
                for p in ps {
                    put_f64s(&mut w, p.iter())?;
                }
                put_f64s(&mut w, mass.iter())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated".into()),
            _ => CheckpointError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    let magic = r.bytes::<4>()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.bytes()?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_hash = u64::from_le_bytes(r.bytes()?);
    let classes = r.u32()?;
    let class_ids = (0..classes).map(|_| Ok(u32::from_le_bytes(r.bytes()?))).collect::<Result<Vec<_>, CheckpointError>>()?;
    let d = r.u32()?;
    let rank = r.u32()?;
    let [act, residual] = r.bytes::<2>()?;
    let activation = Activation::from_byte(act).ok_or_else(|| CheckpointError::Malformed(format!("activation byte {act}")))?;
    let w_down = DMatrix::from_vec(d, rank, r.f64s(d * rank)?);
    let w_up = DMatrix::from_vec(rank, d, r.f64s(rank * d)?);
    let w_cls = DMatrix::from_vec(d, classes, r.f64s(d * classes)?);
    let head = BottleneckHead { w_down, w_up, w_cls, activation, residual: residual != 0 };
    if !head.is_finite() {
        return Err(CheckpointError::Malformed("non-finite head parameters".into()));
    }
    let bank = match r.bytes::<1>()?[0] {
        0 => None,
        1 => {
            let mut prototypes = Vec::with_capacity(classes);
            let mut mass = Vec::with_capacity(classes);
            for _ in 0..classes {
                let k = r.u32()?;
                let ps = (0..k)
                    .map(|_| {
                        let v = DVector::from_vec(r.f64s(d)?);
                        if (v.norm() - 1.0).abs() > 1e-9 {
                            return Err(CheckpointError::Malformed("prototype is not unit-norm".into()));
                        }
                        Ok(UnitVector::new_unchecked(v))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                prototypes.push(ps);
                mass.push(r.f64s(k)?);
            }
            Some(PrototypeBank { class_ids: class_ids.clone(), prototypes, mass })
        }
        other => return Err(CheckpointError::Malformed(format!("bank flag {other}"))),
    };
    let mut rest = Vec::new();
    r.0.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { config_hash, class_ids, head, bank })
}
