//! Binary container for named tensor maps: checkpoint parameter blobs and
//! optimizer state. Round trips are bit-exact; f64 payloads are stored as
//! little-endian bit patterns.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EMOD";
const VERSION: u8 = 1;

pub fn write_tensor_map(path: &Path, map: &BTreeMap<String, Tensor>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(map.len() as u64).to_le_bytes())?;
    for (name, tensor) in map {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for dim in &tensor.shape {
            w.write_all(&(*dim as u64).to_le_bytes())?;
        }
        for x in &tensor.data {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_map(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a tensor-map file"));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|_| bad("truncated header"))?;
    if version[0] != VERSION {
        return Err(bad(&format!("unsupported version {}", version[0])));
    }
    let count = read_u64(&mut r).map_err(|_| bad("truncated entry count"))?;

    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(|_| bad("truncated name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("name is not utf-8"))?;
        let ndim = read_u32(&mut r).map_err(|_| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let dim = read_u64(&mut r).map_err(|_| bad("truncated shape"))? as usize;
            numel = numel
                .checked_mul(dim)
                .ok_or_else(|| bad("tensor size overflow"))?;
            shape.push(dim);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let bits = read_u64(&mut r).map_err(|_| bad("truncated tensor data"))?;
            data.push(f64::from_bits(bits));
        }
        if map.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(bad(&format!("duplicate entry '{name}'")));
        }
    }
    Ok(map)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
