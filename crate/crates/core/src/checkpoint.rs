//! Binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "QECCKPT1"
//! version    u32      currently 1
//! manifest   u32 length + UTF-8 TOML of the NetworkConfig
//! count      u32      number of arrays
//! per array:
//!   name     u32 length + UTF-8 ("layer0.w1", "layer0.b1", ...)
//!   ndim     u32
//!   dims     ndim × u64
//!   values   prod(dims) × f64
//! ```

use std::path::Path;

use crate::autodiff::MlpParams;
use crate::capsnet::{NetworkConfig, NetworkParams};
use crate::error::{QecError, Result};
use crate::pointcloud::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"QECCKPT1";
pub const VERSION: u32 = 1;

const NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| QecError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| QecError::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = toml::to_string(&self.config).map_err(|e| QecError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &manifest);
        put_u32(&mut out, (4 * self.params.layers.len()) as u32);
        for (l, layer) in self.params.layers.iter().enumerate() {
            for ((name, data), shape) in NAMES.iter().zip(layer.arrays()).zip(layer.shapes()) {
                put_str(&mut out, &format!("layer{l}.{name}"));
                put_u32(&mut out, shape.len() as u32);
                for d in &shape {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(QecError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(QecError::Checkpoint(format!("unsupported version {version}")));
        }
        let config: NetworkConfig =
            toml::from_str(&r.string()?).map_err(|e| QecError::Checkpoint(format!("manifest: {e}")))?;
        config.validate()?;
        let count = r.u32()? as usize;
        if count != 4 * config.layers.len() {
            return Err(QecError::Checkpoint(format!("{count} arrays for {} layers", config.layers.len())));
        }
        let mut layers = Vec::with_capacity(config.layers.len());
        for (l, lc) in config.layers.iter().enumerate() {
            let mut arrays: [Vec<f64>; 4] = Default::default();
            for (k, name) in NAMES.iter().enumerate() {
                let got = r.string()?;
                let want = format!("layer{l}.{name}");
                if got != want {
                    return Err(QecError::Checkpoint(format!("expected array {want}, found {got}")));
                }
                let ndim = r.u32()? as usize;
                let mut len = 1usize;
                for _ in 0..ndim {
                    len = len
                        .checked_mul(r.u64()? as usize)
                        .ok_or_else(|| QecError::Checkpoint("array too large".into()))?;
                }
                let bytes = r.take(len.checked_mul(8).ok_or_else(|| QecError::Checkpoint("array too large".into()))?)?;
                arrays[k] = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            }
            let [w1, b1, w2, b2] = arrays;
            layers.push(MlpParams {
                n_in: lc.mlp_in(),
                hidden: config.hidden,
                n_out: lc.mlp_out(),
                activation: config.activation,
                w1,
                b1,
                w2,
                b2,
            });
        }
        if r.pos != buf.len() {
            return Err(QecError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Self::new(config, NetworkParams { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
