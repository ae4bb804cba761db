//! Weight checkpoints.
//!
//! Little-endian layout: magic `"SEPW"`, version u16, then the config as
//! `in_channels, input_len, num_blocks, block_width, kernel_size` (u32
//! each), `dropout_p` (f64), `pool_out, classifier_hidden, num_classes`
//! (u32 each), the payload length in floats (u64), and the f32 payload:
//! every learnable tensor in [`SepCnnConfig::param_layout`] order, followed
//! by each block's batch-norm running mean and running variance.

use std::fs;
use std::path::Path;

use super::{SepCnn, SepCnnConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SEPW";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4 + 8 + 3 * 4 + 8;

pub fn encode_checkpoint(model: &SepCnn<f32>) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.in_channels,
        cfg.input_len,
        cfg.num_blocks,
        cfg.block_width,
        cfg.kernel_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    for v in [cfg.pool_out, cfg.classifier_hidden, cfg.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let payload: Vec<f32> = model
        .params()
        .iter()
        .flatten()
        .copied()
        .chain((0..cfg.num_blocks).flat_map(|b| {
            model
                .running_mean(b)
                .iter()
                .chain(model.running_var(b))
                .copied()
                .collect::<Vec<_>>()
        }))
        .collect();
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SepCnn<f32>> {
    let fmt = |offset: usize, detail: String| Error::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), "checkpoint header truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt(0, "bad magic, expected \"SEPW\"".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fmt(4, format!("unsupported checkpoint version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let cfg = SepCnnConfig {
        in_channels: u32_at(6),
        input_len: u32_at(10),
        num_blocks: u32_at(14),
        block_width: u32_at(18),
        kernel_size: u32_at(22),
        dropout_p: f64::from_le_bytes(bytes[26..34].try_into().unwrap()),
        pool_out: u32_at(34),
        classifier_hidden: u32_at(38),
        num_classes: u32_at(42),
    };
    cfg.validate()
        .map_err(|e| fmt(6, format!("invalid model config: {e}")))?;
    let declared = u64::from_le_bytes(bytes[46..54].try_into().unwrap()) as usize;
    let mut model = SepCnn::<f32>::new(cfg.clone(), 0)?;
    let expected = model.count_parameters() + 2 * cfg.num_blocks * cfg.block_width;
    if declared != expected {
        return Err(fmt(
            46,
            format!("payload declares {declared} floats, config needs {expected}"),
        ));
    }
    if bytes.len() != HEADER_LEN + 4 * expected {
        return Err(fmt(
            bytes.len().min(HEADER_LEN + 4 * expected),
            format!(
                "expected {} payload bytes, found {}",
                4 * expected,
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for p in model.params_mut() {
        p.iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    for b in 0..cfg.num_blocks {
        let (rm, rv) = model.running_mut(b);
        rm.iter_mut().for_each(|v| *v = values.next().unwrap());
        rv.iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    if let Some(b) = (0..cfg.num_blocks).find(|&b| model.running_var(b).iter().any(|&v| v < 0.0)) {
        return Err(fmt(HEADER_LEN, format!("negative running variance in block {b}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SepCnn<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SepCnn<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
