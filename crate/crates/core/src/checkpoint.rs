//! Versioned binary container for named tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//! `b"DIRLCKPT"`, `u32` version, `u32` meta count, per entry
//! `{u32 len, key, u32 len, value}`, `u32` tensor count, per tensor
//! `{u32 len, name, u32 rank, u64 dims…, f64 payload…}`.

use std::path::Path;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::ssl::DirlConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, vals: &[f64]) {
        self.buf.reserve(vals.len() * 8);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.data.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
    }

    pub fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for d in t.shape() {
                w.u64(*d as u64);
            }
            w.f64s(t.data());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut meta = Vec::new();
        for _ in 0..r.u32()? {
            meta.push((r.str()?, r.str()?));
        }
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or("shape overflow")?;
            let data = r.f64s(len)?;
            let t = Tensor::new(&shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
            params.add(name, t);
        }
        if !r.done() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

/// Encoder-only checkpoint: patch projection, position embedding and blocks.
pub fn extractor_checkpoint(set: &ParamSet, cfg: &DirlConfig, extra_meta: &[(String, String)]) -> Checkpoint {
    let mut meta = vec![("kind".to_string(), "extractor".to_string())];
    meta.extend(
        cfg.to_pairs()
            .into_iter()
            .filter(|(k, _)| k.starts_with("encoder."))
            .map(|(k, v)| (k.to_string(), v)),
    );
    meta.extend_from_slice(extra_meta);
    let mut params = ParamSet::new();
    for (name, t) in set.iter() {
        if name.starts_with("encoder.") {
            params.add(name, t.clone());
        }
    }
    Checkpoint { meta, params }
}

/// Loads an extractor checkpoint and binds an encoder to it.
pub fn load_extractor(path: &Path) -> Result<(Encoder, ParamSet)> {
    let ck = Checkpoint::read(path)?;
    extractor_from(&ck).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn extractor_from(ck: &Checkpoint) -> Result<(Encoder, ParamSet)> {
    if ck.meta("kind") != Some("extractor") {
        return Err(Error::Checkpoint("not an extractor checkpoint".into()));
    }
    let cfg = DirlConfig::from_pairs(ck.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let enc_cfg: EncoderConfig = cfg.encoder;
    let encoder = Encoder::locate(&ck.params, &enc_cfg)?;
    Ok((encoder, ck.params.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut params = ParamSet::new();
        params.add("a", Tensor::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap());
        params.add("b.c", Tensor::vector(vec![std::f64::consts::PI]));
        let ck = Checkpoint {
            meta: vec![("kind".into(), "test".into()), ("ü".into(), "".into())],
            params,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((na, ta), (nb, tb)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::default();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn extractor_keeps_only_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DirlConfig::default();
        let mut set = ParamSet::new();
        crate::ssl::DirlModel::init(&mut set, &cfg, crate::ssl::Variant::Dirl, true, &mut rng).unwrap();
        let ck = extractor_checkpoint(&set, &cfg, &[]);
        assert!(ck.params.iter().all(|(n, _)| n.starts_with("encoder.")));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (enc, p) = extractor_from(&back).unwrap();
        assert_eq!(enc.blocks.len(), cfg.encoder.depth);
        assert_eq!(p.len(), ck.params.len());
        let no_kind = Checkpoint {
            meta: vec![],
            params: ParamSet::new(),
        };
        assert!(extractor_from(&no_kind).is_err());
    }
}
