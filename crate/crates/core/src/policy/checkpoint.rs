//! Binary checkpoint format.
//!
//! Layout: magic `VQARLCK\0`, u32 format version, u64 header length, JSON
//! header, then every tensor as little-endian f64 in row-major order. Adapter
//! tensors (if any) follow the base tensors, `down` before `up` per target.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterTarget, LowRankAdapter};
use super::model::{PolicyConfig, PolicyParams};
use super::Policy;
use crate::error::{config_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"VQARLCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterHeader {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub vocab_hash: String,
    pub config: PolicyConfig,
    pub tensors: Vec<TensorEntry>,
    pub adapter: Option<AdapterHeader>,
    /// Free-form run metadata (stage, step, whether an adapter was merged...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn write_block(out: &mut Vec<u8>, t: &Array2<f64>) {
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(policy: &Policy, vocab_hash: &str, meta: serde_json::Value) -> Result<Vec<u8>> {
    let cfg = *policy.config();
    let header = Header {
        format_version: FORMAT_VERSION,
        vocab_hash: vocab_hash.to_string(),
        config: cfg,
        tensors: cfg
            .tensor_names()
            .into_iter()
            .zip(cfg.tensor_shapes())
            .map(|(name, (r, c))| TensorEntry { name, shape: [r, c] })
            .collect(),
        adapter: policy.adapter.as_ref().map(|a| AdapterHeader {
            rank: a.rank(),
            alpha: a.alpha(),
            targets: a.targets().iter().map(|t| t.name.clone()).collect(),
        }),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in policy.params.tensors() {
        write_block(&mut out, t);
    }
    if let Some(a) = &policy.adapter {
        for t in a.targets() {
            write_block(&mut out, &t.down);
            write_block(&mut out, &t.up);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Input("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn block(&mut self, shape: (usize, usize)) -> Result<Array2<f64>> {
        let bytes = self.take(shape.0 * shape.1 * 8)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec(shape, vals).expect("block size matches shape"))
    }
}

/// Parses a checkpoint. When `vocab_hash` is given it must match the stored one.
pub fn from_bytes(bytes: &[u8], vocab_hash: Option<&str>) -> Result<(Policy, Header)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Input("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(config_err(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    if let Some(h) = vocab_hash {
        if h != header.vocab_hash {
            return Err(config_err(format!(
                "checkpoint vocabulary {} does not match {h}",
                header.vocab_hash
            )));
        }
    }
    let cfg = header.config;
    cfg.validate()?;
    let shapes = cfg.tensor_shapes();
    let names = cfg.tensor_names();
    if header.tensors.len() != shapes.len()
        || header
            .tensors
            .iter()
            .zip(names.iter().zip(&shapes))
            .any(|(e, (n, s))| e.name != *n || e.shape != [s.0, s.1])
    {
        return Err(config_err("checkpoint tensor table does not match its config"));
    }
    let tensors = shapes.iter().map(|&s| r.block(s)).collect::<Result<Vec<_>>>()?;
    let params = PolicyParams::from_tensors(cfg, tensors)?;
    let adapter = match &header.adapter {
        None => None,
        Some(ah) => {
            let mut targets = Vec::new();
            for name in &ah.targets {
                let tensor = names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| config_err(format!("unknown adapter target {name}")))?;
                let (rows, cols) = shapes[tensor];
                let down = r.block((rows, ah.rank))?;
                let up = r.block((ah.rank, cols))?;
                targets.push(AdapterTarget { name: name.clone(), tensor, down, up });
            }
            Some(LowRankAdapter::from_parts(ah.rank, ah.alpha, targets, &cfg)?)
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Input("trailing bytes after checkpoint".into()));
    }
    Ok((Policy { params, adapter }, header))
}

pub fn save(path: &Path, policy: &Policy, vocab_hash: &str, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(policy, vocab_hash, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<(Policy, Header)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, vocab_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::AdapterConfig;
    use crate::seed::rng_for;

    fn small() -> PolicyConfig {
        PolicyConfig { vocab_size: 7, width: 4, layers: 1, mlp_hidden: 6, context: 8 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small();
        let mut rng = rng_for(3, "t", &[]);
        let params = PolicyParams::init(cfg, &mut rng).unwrap();
        let mut adapter = LowRankAdapter::init(&AdapterConfig { rank: 2, ..Default::default() }, &cfg, &mut rng).unwrap();
        adapter.targets_mut()[0].up.fill(0.25);
        let p = Policy { params, adapter: Some(adapter) };
        let bytes = to_bytes(&p, "abc", serde_json::json!({"stage": "a"})).unwrap();
        let (q, h) = from_bytes(&bytes, Some("abc")).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.meta["stage"], "a");
        assert_eq!(to_bytes(&q, "abc", h.meta.clone()).unwrap(), bytes);
    }

    #[test]
    fn vocab_mismatch_is_config_error() {
        let mut rng = rng_for(3, "t", &[]);
        let p = Policy::new(PolicyParams::init(small(), &mut rng).unwrap());
        let bytes = to_bytes(&p, "abc", serde_json::Value::Null).unwrap();
        let err = from_bytes(&bytes, Some("xyz")).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Config);
        assert!(from_bytes(&bytes[..bytes.len() - 1], None).is_err());
        assert!(from_bytes(b"garbage!", None).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut rng = rng_for(4, "t", &[]);
        let p = Policy::new(PolicyParams::init(small(), &mut rng).unwrap());
        save(&path, &p, "h", serde_json::Value::Null).unwrap();
        assert_eq!(load(&path, None).unwrap().0, p);
    }
}
