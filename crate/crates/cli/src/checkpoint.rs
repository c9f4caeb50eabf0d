//! Binary checkpoint container.
//!
//! Fixed layout, little-endian throughout:
//!
//! ```text
//! magic            b"DFSQ"
//! version          u32            (currently 1)
//! config_len       u32
//! config           config_len bytes of JSON (the ModelConfig echo)
//! step             u64
//! seed             u64            RNG seed
//! rng_word_pos     u128           RNG stream position after init
//! tensor_count     u32
//! tensor*          name_len u32, name bytes (UTF-8), rank u32,
//!                  extents u64 * rank, raw floats at the config's
//!                  precision (f32 or f64), row-major
//! ```
//!
//! Tensors are written in name order, so saving is a pure function of the
//! checkpoint contents and a load/save round trip is byte-identical.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use dfsq_core::tensor::{Precision, Real, TensorData};
use dfsq_core::train::Checkpoint;
use dfsq_core::ModelConfig;

const MAGIC: &[u8; 4] = b"DFSQ";
const VERSION: u32 = 1;

pub fn encode<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&ckpt.config).context("serializing config echo")?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.config.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &ext in tensor.shape() {
            out.extend_from_slice(&(ext as u64).to_le_bytes());
        }
        match T::PRECISION {
            Precision::F32 => {
                for v in tensor.data() {
                    out.extend_from_slice(&(Real::to_f64(*v) as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for v in tensor.data() {
                    out.extend_from_slice(&Real::to_f64(*v).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

/// Parse only the configuration echo, to learn the precision before
/// choosing the scalar type.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        bail!("not a checkpoint: bad magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len)?).context("parsing config echo")?;
    Ok(config)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let config = peek_config(bytes)?;
    if config.precision != T::PRECISION {
        bail!(
            "checkpoint stores {} tensors, loader instantiated at {}",
            config.precision,
            T::PRECISION
        );
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(4)?;
    r.u32()?;
    let config_len = r.u32()? as usize;
    r.take(config_len)?;
    let step = r.u64()?;
    let seed = r.u64()?;
    if seed != config.seed {
        bail!("checkpoint seed {seed} disagrees with its config echo {}", config.seed);
    }
    let rng_word_pos = r.u128()?;
    let tensor_count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .context("tensor name is not UTF-8")?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match T::PRECISION {
            Precision::F32 => {
                for _ in 0..numel {
                    let v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    data.push(T::from_f64(v as f64));
                }
            }
            Precision::F64 => {
                for _ in 0..numel {
                    let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    data.push(T::from_f64(v));
                }
            }
        }
        let tensor = TensorData::new(shape, data).map_err(|e| anyhow!("{e}"))?;
        tensors.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        bail!("checkpoint has {} trailing bytes", bytes.len() - r.pos);
    }
    Ok(Checkpoint {
        config,
        step,
        rng_word_pos,
        tensors,
    })
}

pub fn save<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;
    use dfsq_core::train::Checkpoint;
    use dfsq_core::Model;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut cfg = default_config();
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.d_ff_agg = 8;
        let model = Model::<f32>::init(&cfg).unwrap();
        let ckpt = Checkpoint::from_model(&model, 17, 12345);
        let bytes = encode(&ckpt).unwrap();
        let loaded = decode::<f32>(&bytes).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.rng_word_pos, 12345);
        assert_eq!(loaded.config, cfg);
        let bytes2 = encode(&loaded).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let mut cfg = default_config();
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.d_ff_agg = 8;
        let model = Model::<f32>::init(&cfg).unwrap();
        let bytes = encode(&Checkpoint::from_model(&model, 0, 0)).unwrap();
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        assert!(peek_config(b"NOPE....").is_err());
    }
}
