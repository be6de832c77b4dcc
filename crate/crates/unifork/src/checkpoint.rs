//! Binary checkpoint format.
//!
//! Layout: magic bytes "UFRK", version u32, then per tensor:
//! (name-length u32, name bytes, dtype tag u8, rank u32, dims u32 each,
//! raw little-endian f64 data). Tensors appear in parameter-store order,
//! so save → load → save is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::graph::ParamStore;
use crate::model::{ForkedTransformer, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UFRK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_params<W: Write>(store: &ParamStore, w: &mut W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut store = ParamStore::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| CheckpointError::Truncated)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Truncated)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(|_| CheckpointError::Truncated)?;
        if dtype[0] != DTYPE_F64 {
            return Err(CheckpointError::BadDtype(dtype[0]));
        }
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.insert(&name, Tensor::new(shape, data));
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

/// Write `<base>.ufrk` plus a `<base>.json` config sidecar.
pub fn save_model(model: &ForkedTransformer, base: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = base.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(base.with_extension("ufrk"))?);
    write_params(&model.params, &mut w)?;
    w.flush()?;
    let cfg = serde_json::to_string_pretty(&model.cfg).expect("config serializes");
    std::fs::write(base.with_extension("json"), cfg)?;
    Ok(())
}

pub fn load_model(base: &Path) -> Result<ForkedTransformer, CheckpointError> {
    let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(
        base.with_extension("json"),
    )?)
    .map_err(|e| CheckpointError::Io(std::io::Error::other(e)))?;
    let mut r = BufReader::new(File::open(base.with_extension("ufrk"))?);
    let params = read_params(&mut r)?;
    Ok(ForkedTransformer { cfg, params })
}
