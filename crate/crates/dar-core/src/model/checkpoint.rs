//! Model checkpoints: flat binary with a JSON config echo and named f32
//! parameter blocks. Loading against an expected config rejects mismatches.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError};
use crate::tensor::{Param, ParamSet};

const MAGIC: &[u8; 8] = b"DARCKPT\x01";

pub fn save(path: &Path, cfg: &ModelConfig, set: &ParamSet<f32>) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let echo = serde_json::to_string(cfg).map_err(|e| ModelError::Format(e.to_string()))?;
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(echo.as_bytes())?;
    w.write_all(&(set.params.len() as u32).to_le_bytes())?;
    for p in &set.params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(p.trainable)])?;
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamSet<f32>), ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!("bad checkpoint magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut echo = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut echo)?;
    let cfg: ModelConfig =
        serde_json::from_slice(&echo).map_err(|e| ModelError::Format(format!("config echo: {}", e)))?;
    r.read_exact(&mut b4)?;
    let n_params = u32::from_le_bytes(b4) as usize;
    let mut set = ParamSet::new();
    for _ in 0..n_params {
        r.read_exact(&mut b4)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| ModelError::Format(e.to_string()))?;
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut p = Param::new(name, shape, data);
        p.trainable = flag[0] != 0;
        set.push(p);
    }
    Ok((cfg, set))
}

/// Load a checkpoint, rejecting it unless its config echo matches `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<ParamSet<f32>, ModelError> {
    let (cfg, set) = load(path)?;
    if &cfg != expected {
        return Err(ModelError::CheckpointMismatch(format!(
            "checkpoint built for {:?}, run expects {:?}",
            cfg, expected
        )));
    }
    Ok(set)
}
