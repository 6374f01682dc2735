//! Versioned binary checkpoint: model config, step counter, and every
//! parameter block with a shape header. Byte-stable for identical
//! trajectories, so checkpoint equality doubles as a determinism check.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::{ModelConfig, ModelError, ParamLayout, ToyMaeModel};

const MAGIC: u32 = u32::from_le_bytes(*b"CKP1");
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &ToyMaeModel, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let cfg_json = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    let blocks = model.layout().blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (i, b) in blocks.iter().enumerate() {
        let name = b.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(b.rows as u32).to_le_bytes());
        out.extend_from_slice(&(b.cols as u32).to_le_bytes());
        for v in &model.params()[model.layout().range(i)] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ToyMaeModel, u64), ModelError> {
    let mut r = bytes;
    let magic = read_u32(&mut r)?;
    if magic != MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:#x}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let step = read_u64(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    if r.len() < cfg_len {
        return Err(ModelError::Checkpoint("truncated config".into()));
    }
    let cfg: ModelConfig = serde_json::from_slice(&r[..cfg_len])
        .map_err(|e| ModelError::Checkpoint(format!("config parse: {e}")))?;
    r = &r[cfg_len..];
    cfg.validate()?;

    let (layout, _) = ParamLayout::build(&cfg);
    let n_blocks = read_u32(&mut r)? as usize;
    if n_blocks != layout.blocks().len() {
        return Err(ModelError::Checkpoint(format!(
            "block count {n_blocks} does not match layout ({})",
            layout.blocks().len()
        )));
    }
    let mut params = vec![0.0; layout.total()];
    for i in 0..n_blocks {
        let name_len = read_u16(&mut r)? as usize;
        if r.len() < name_len {
            return Err(ModelError::Checkpoint("truncated block name".into()));
        }
        let name = std::str::from_utf8(&r[..name_len])
            .map_err(|_| ModelError::Checkpoint("block name not utf8".into()))?
            .to_string();
        r = &r[name_len..];
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let expected = &layout.blocks()[i];
        if name != expected.name || rows != expected.rows || cols != expected.cols {
            return Err(ModelError::Checkpoint(format!(
                "block {i} is '{name}' ({rows}x{cols}), layout expects '{}' ({}x{})",
                expected.name, expected.rows, expected.cols
            )));
        }
        let range = layout.range(i);
        for slot in &mut params[range] {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
    }
    if !r.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after last block",
            r.len()
        )));
    }
    let model = ToyMaeModel::from_parts(cfg, params)?;
    Ok((model, step))
}

fn read_u16(r: &mut &[u8]) -> Result<u16, ModelError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_checkpoint(path: &Path, model: &ToyMaeModel, step: u64) -> Result<(), ModelError> {
    let bytes = encode_checkpoint(model, step);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyMaeModel, u64), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
