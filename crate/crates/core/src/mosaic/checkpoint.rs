//! Binary checkpoint format.
//!
//! ```text
//! "SKAM" | u32 version | u32 config length | config JSON
//! per parameter, in name order:
//!     u16 name length | name | u8 rank | u32 dims... | f32 data...
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::MosaicModel;
use super::{MosaicConfig, MosaicError};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKAM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &MosaicModel<f32>, mut w: W) -> Result<(), MosaicError> {
    let cfg = serde_json::to_vec(&model.config).map_err(|e| MosaicError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    for (name, t) in &model.params {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], MosaicError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| MosaicError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, MosaicError> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, MosaicError> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| MosaicError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MosaicModel<f32>, MosaicError> {
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != CHECKPOINT_MAGIC {
        return Err(MosaicError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(MosaicError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let cfg: MosaicConfig = serde_json::from_slice(&read_vec(&mut r, len)?)
        .map_err(|e| MosaicError::Checkpoint(format!("config: {e}")))?;
    let expected = super::model::param_shapes(&cfg).len();
    let mut params = BTreeMap::new();
    for _ in 0..expected {
        let n = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let name = String::from_utf8(read_vec(&mut r, n)?)
            .map_err(|_| MosaicError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_array::<_, 1>(&mut r)?[0] as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = read_vec(&mut r, count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(MosaicError::Checkpoint("trailing bytes".into()));
    }
    MosaicModel::from_params(cfg, params)
}

pub fn save_checkpoint(model: &MosaicModel<f32>, path: &Path) -> Result<(), MosaicError> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<MosaicModel<f32>, MosaicError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
