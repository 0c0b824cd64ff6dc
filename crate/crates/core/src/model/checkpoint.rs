//! PRSM checkpoint format: magic "PRSM", version u32 LE, a key=value config
//! header block (u32 length + UTF-8), tensor count u32, then per tensor:
//! name length u16 LE + UTF-8 name, rank u8, dims u32 LE each, float32 LE
//! row-major data.

use super::{ModelConfig, ModelError};
use crate::numerics::{Params, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PRSM_MAGIC: [u8; 4] = *b"PRSM";
pub const PRSM_VERSION: u32 = 1;

fn config_block(cfg: &ModelConfig) -> String {
    let dilations: Vec<String> = cfg.dilation_schedule.iter().map(|d| d.to_string()).collect();
    format!(
        "input_dim={}\ntdnn_kernel={}\ntdnn_stride={}\nencoder_layers={}\nmodel_dim={}\nheads={}\nffn_dim={}\nconv_kernel={}\ndilations={}\nembedding_dim={}\ndiar_streams={}\n",
        cfg.input_dim,
        cfg.tdnn_kernel,
        cfg.tdnn_stride,
        cfg.encoder_layers,
        cfg.model_dim,
        cfg.heads,
        cfg.ffn_dim,
        cfg.conv_kernel,
        dilations.join(","),
        cfg.embedding_dim,
        cfg.diar_streams,
    )
}

fn parse_config_block(text: &str) -> Result<ModelConfig, ModelError> {
    let mut cfg = ModelConfig::default();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Checkpoint(format!("bad config line: {line}")))?;
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| ModelError::Checkpoint(format!("bad value for {key}: {v}")))
        };
        match key {
            "input_dim" => cfg.input_dim = parse_usize(value)?,
            "tdnn_kernel" => cfg.tdnn_kernel = parse_usize(value)?,
            "tdnn_stride" => cfg.tdnn_stride = parse_usize(value)?,
            "encoder_layers" => cfg.encoder_layers = parse_usize(value)?,
            "model_dim" => cfg.model_dim = parse_usize(value)?,
            "heads" => cfg.heads = parse_usize(value)?,
            "ffn_dim" => cfg.ffn_dim = parse_usize(value)?,
            "conv_kernel" => cfg.conv_kernel = parse_usize(value)?,
            "embedding_dim" => cfg.embedding_dim = parse_usize(value)?,
            "diar_streams" => cfg.diar_streams = parse_usize(value)?,
            "dilations" => {
                cfg.dilation_schedule = value
                    .split(',')
                    .map(|v| {
                        v.parse::<usize>().map_err(|_| {
                            ModelError::Checkpoint(format!("bad dilation: {v}"))
                        })
                    })
                    .collect::<Result<Vec<usize>, ModelError>>()?;
            }
            other => {
                return Err(ModelError::Checkpoint(format!(
                    "unknown config key: {other}"
                )))
            }
        }
    }
    Ok(cfg)
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &Params) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&PRSM_MAGIC)?;
    w.write_all(&PRSM_VERSION.to_le_bytes())?;
    let block = config_block(cfg);
    w.write_all(&(block.len() as u32).to_le_bytes())?;
    w.write_all(block.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Params), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != PRSM_MAGIC {
        return Err(ModelError::Checkpoint("bad magic (expected PRSM)".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != PRSM_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    r.read_exact(&mut u32buf)?;
    let block_len = u32::from_le_bytes(u32buf) as usize;
    let mut block = vec![0u8; block_len];
    r.read_exact(&mut block)?;
    let cfg = parse_config_block(
        std::str::from_utf8(&block)
            .map_err(|_| ModelError::Checkpoint("config block is not UTF-8".into()))?,
    )?;
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(
            &name,
            Tensor::new(shape, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
        );
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy();
        let params = cfg.init_params(3);
        let p1 = dir.path().join("a.prsm");
        let p2 = dir.path().join("b.prsm");
        save_checkpoint(&p1, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        save_checkpoint(&p2, &cfg2, &params2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.prsm");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
