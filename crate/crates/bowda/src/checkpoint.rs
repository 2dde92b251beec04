//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, 32-byte config digest, u32 blob count,
//! then blobs in a fixed order. Tensor blobs store little-endian f32 values
//! with their shape and trainable flag; byte blobs carry opaque state such as
//! serialized RNG streams and counters. All integers are little-endian.
//! Parsing is strict: any trailing or missing byte is an error.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::tensor::Shape;

const MAGIC: &[u8; 8] = b"BWDACKPT";
const VERSION: u32 = 1;
const MAX_BLOBS: usize = 1 << 16;
const MAX_NAME: usize = 4096;
const MAX_VALUES: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    Tensor { shape: Shape, trainable: bool, values: Vec<f32> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub data: BlobData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    blobs: Vec<Blob>,
}

/// SHA-256 of the canonical JSON encoding of a config value.
pub fn config_digest<C: Serialize>(cfg: &C) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(cfg)
        .map_err(|e| Error::Json { context: "config digest".into(), message: e.to_string() })?;
    Ok(Sha256::digest(&json).into())
}

impl Checkpoint {
    pub fn new(config_digest: [u8; 32]) -> Self {
        Checkpoint { config_digest, blobs: Vec::new() }
    }

    pub fn blobs(&self) -> &[Blob] {
        &self.blobs
    }

    pub fn push_tensor(&mut self, name: &str, shape: Shape, trainable: bool, values: Vec<f32>) {
        debug_assert_eq!(shape.len(), values.len(), "{name}");
        self.blobs.push(Blob {
            name: name.to_string(),
            data: BlobData::Tensor { shape, trainable, values },
        });
    }

    pub fn push_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.blobs.push(Blob { name: name.to_string(), data: BlobData::Bytes(bytes) });
    }

    pub fn get(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob '{name}'")))
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            BlobData::Bytes(b) => Ok(b),
            BlobData::Tensor { .. } => {
                Err(Error::Checkpoint(format!("blob '{name}' is a tensor, expected bytes")))
            }
        }
    }

    /// Stores every entry of `params` under `prefix` + entry name.
    pub fn append_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for e in params.iter() {
            self.push_tensor(&format!("{prefix}{}", e.name), e.shape, e.trainable, e.values.clone());
        }
    }

    /// Rebuilds a parameter set from every tensor blob under `prefix`, in
    /// stored order.
    pub fn extract_params(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let mut params = ParamSet::new();
        for b in &self.blobs {
            if let Some(name) = b.name.strip_prefix(prefix) {
                match &b.data {
                    BlobData::Tensor { shape, trainable, values } => {
                        params.add(name, *shape, values.clone(), *trainable);
                    }
                    BlobData::Bytes(_) => {
                        return Err(Error::Checkpoint(format!(
                            "blob '{}' under tensor prefix '{prefix}' holds raw bytes",
                            b.name
                        )));
                    }
                }
            }
        }
        if params.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under prefix '{prefix}'")));
        }
        Ok(params)
    }

    pub fn ensure_digest(&self, expected: [u8; 32]) -> Result<()> {
        if self.config_digest != expected {
            return Err(Error::Checkpoint(
                "config digest mismatch: checkpoint was written for a different configuration"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            match &b.data {
                BlobData::Tensor { shape, trainable, values } => {
                    out.push(0);
                    out.push(u8::from(*trainable));
                    for d in [shape.n, shape.c, shape.d, shape.h, shape.w] {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                BlobData::Bytes(bytes) => {
                    out.push(1);
                    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { data, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let count = r.u32()? as usize;
        if count > MAX_BLOBS {
            return Err(Error::Checkpoint(format!("blob count {count} exceeds limit")));
        }
        let mut blobs = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME {
                return Err(Error::Checkpoint(format!("name length {name_len} exceeds limit")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
                .to_string();
            let kind = r.u8()?;
            let data = match kind {
                0 => {
                    let trainable = match r.u8()? {
                        0 => false,
                        1 => true,
                        v => {
                            return Err(Error::Checkpoint(format!(
                                "bad trainable flag {v} for '{name}'"
                            )))
                        }
                    };
                    let mut dims = [0usize; 5];
                    for d in &mut dims {
                        *d = r.u64_len()?;
                    }
                    let n = r.u64_len()?;
                    if n > MAX_VALUES {
                        return Err(Error::Checkpoint(format!(
                            "value count {n} for '{name}' exceeds limit"
                        )));
                    }
                    let expected = dims
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
                    if expected != n {
                        return Err(Error::Checkpoint(format!(
                            "'{name}': shape {dims:?} implies {expected} values, header says {n}"
                        )));
                    }
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                        Error::Checkpoint("value byte length overflow".into())
                    })?)?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    BlobData::Tensor {
                        shape: Shape::new(dims[0], dims[1], dims[2], dims[3], dims[4]),
                        trainable,
                        values,
                    }
                }
                1 => {
                    let n = r.u64_len()?;
                    BlobData::Bytes(r.take(n)?.to_vec())
                }
                k => return Err(Error::Checkpoint(format!("unknown blob kind {k}"))),
            };
            blobs.push(Blob { name, data });
        }
        if r.pos != data.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after final blob",
                data.len() - r.pos
            )));
        }
        Ok(Checkpoint { config_digest, blobs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&data)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64_len(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
        usize::try_from(v).map_err(|_| Error::Checkpoint("length exceeds address space".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_snet, SNetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new([7u8; 32]);
        c.push_tensor(
            "w",
            Shape::new(2, 1, 1, 1, 3),
            true,
            vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, 3.25e-7, 1e30],
        );
        c.push_bytes("rng/main", vec![0, 1, 2, 254, 255]);
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        // Serialized form itself is stable.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn params_roundtrip_preserves_order_and_flags() {
        let cfg = SNetConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = init_snet::<f32>(&cfg, &mut rng).unwrap();
        let mut c = Checkpoint::new(config_digest(&cfg).unwrap());
        c.append_params("snet/", &params);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let restored = back.extract_params("snet/").unwrap();
        assert_eq!(restored, params);
        let names: Vec<&str> = restored.iter().map(|e| e.name.as_str()).collect();
        let orig: Vec<&str> = params.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, orig);
    }

    #[test]
    fn rejects_corrupt_containers() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTMAGIC").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn digest_distinguishes_configs() {
        let a = config_digest(&SNetConfig::desk()).unwrap();
        let b = config_digest(&SNetConfig::full()).unwrap();
        assert_ne!(a, b);
        let c = Checkpoint::new(a);
        assert!(c.ensure_digest(a).is_ok());
        assert!(c.ensure_digest(b).is_err());
    }

    #[test]
    fn missing_blob_is_reported_by_name() {
        let c = sample();
        let err = c.get("nope").unwrap_err().to_string();
        assert!(err.contains("nope"));
    }

    #[test]
    fn write_and_read_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample();
        c.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), c);
    }
}
