//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CELLCKPT" | u32 version | u8 model kind
//! u32 len | config as key=value text
//! u32 tensor count
//!   per tensor: u16 name len | name | u8 group | u8 rank | u32 dims.. | f64 data..
//! manifest text (one "name group shape" line per tensor) | u64 manifest len
//! ```

use cellcount_autograd::Tensor;

use super::{
    CountingModel, DensityModel, ModelConfig, ModelError, ModelKind, ParamGroup, ParamStore, RegressionModel, Result,
};

const MAGIC: &[u8; 8] = b"CELLCKPT";
pub const VERSION: u32 = 1;

/// A model restored from a checkpoint.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Density(DensityModel),
    Regression(RegressionModel),
}

impl LoadedModel {
    pub fn as_model(&self) -> &dyn CountingModel {
        match self {
            LoadedModel::Density(m) => m,
            LoadedModel::Regression(m) => m,
        }
    }
}

pub fn encode_checkpoint(model: &dyn CountingModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.kind().code());
    let mut cfg = model.config().clone();
    cfg.encoder_trainable = model.params().encoder_trainable();
    let text = cfg.to_kv();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.params().params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut manifest = String::new();
    for p in params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.group.code());
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let group = match p.group {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Head => "head",
        };
        manifest.push_str(&format!("{} {} {:?}\n", p.name, group, shape));
    }
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| ModelError::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LoadedModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = ModelKind::from_code(c.u8()?).ok_or_else(|| ModelError::Checkpoint("unknown model kind".into()))?;
    let cfg_len = c.u32()? as usize;
    let cfg = ModelConfig::from_kv(c.str(cfg_len)?)?;
    let count = c.u32()? as usize;
    let mut store = ParamStore::new(cfg.encoder_trainable);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = c.str(name_len)?.to_string();
        let group = ParamGroup::from_code(c.u8()?)
            .ok_or_else(|| ModelError::Checkpoint(format!("{name}: unknown parameter group")))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.push(name, group, Tensor::new(shape, data)?);
    }
    let rest = bytes.len() - c.pos;
    if rest < 8 {
        return Err(ModelError::Checkpoint("missing manifest footer".into()));
    }
    let footer = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
    if footer != rest - 8 {
        return Err(ModelError::Checkpoint("manifest length mismatch".into()));
    }
    Ok(match kind {
        ModelKind::Density => LoadedModel::Density(DensityModel::from_params(cfg, store)?),
        ModelKind::Regression => LoadedModel::Regression(RegressionModel::from_params(cfg, store)?),
    })
}

/// Text manifest stored at the end of a checkpoint.
pub fn checkpoint_manifest(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 8 {
        return Err(ModelError::Checkpoint("missing manifest footer".into()));
    }
    let n = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
    let start = (bytes.len() - 8)
        .checked_sub(n)
        .ok_or_else(|| ModelError::Checkpoint("manifest length mismatch".into()))?;
    String::from_utf8(bytes[start..bytes.len() - 8].to_vec())
        .map_err(|_| ModelError::Checkpoint("non-UTF-8 manifest".into()))
}
