//! `NFF1` container: a named map of f32 tensors with a bit-exact round trip.
//!
//! Layout, all little-endian: magic `NFF1`, u32 entry count, then per entry
//! u32 name length, name bytes, u32 ndim, u32 dims..., f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::AudioError;
use crate::grad::Tensor;

pub const NFF_MAGIC: &[u8; 4] = b"NFF1";

/// Ordered name -> tensor map; insertion order is the file order.
pub type FeatureMap = IndexMap<String, Tensor<f32>>;

pub fn save_features(map: &FeatureMap, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(map, &mut w)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMap, AudioError> {
    let mut r = BufReader::new(File::open(path)?);
    read_features(&mut r)
}

pub fn write_features(map: &FeatureMap, w: &mut impl Write) -> Result<(), AudioError> {
    for (name, t) in map {
        if !t.all_finite() {
            return Err(AudioError::Invalid(format!("entry `{}` contains non-finite values", name)));
        }
    }
    w.write_all(NFF_MAGIC)?;
    w.write_all(&(map.len() as u32).to_le_bytes())?;
    for (name, t) in map {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<FeatureMap, AudioError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| AudioError::Malformed("truncated magic".into()))?;
    if &magic != NFF_MAGIC {
        return Err(AudioError::Malformed(format!("bad magic {:?}, expected NFF1", magic)));
    }
    let count = read_u32(r)? as usize;
    let mut map = FeatureMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| AudioError::Malformed("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| AudioError::Malformed("entry name is not UTF-8".into()))?;
        if map.contains_key(&name) {
            return Err(AudioError::Malformed(format!("duplicate entry name `{}`", name)));
        }
        let ndim = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| AudioError::Malformed(format!("truncated data for `{}`", name)))?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| AudioError::Malformed(format!("entry `{}`: {}", name, e)))?;
        map.insert(name, t);
    }
    Ok(map)
}

fn read_u32(r: &mut impl Read) -> Result<u32, AudioError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| AudioError::Malformed("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}
