//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SEMFUSE\0"
//! version  u32      1
//! n_meta   u32      then n_meta × (key: str, value: str)
//! n_tensor u32      then n_tensor × (name: str, rank: u32, dims: rank × u64, rank-product × f32)
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes. Metadata
//! holds the `model.*`/`train.*` configuration, `kind` (`fusion` or
//! `joint`) and free-form run information. Tensors are the fusion
//! parameters followed, for `joint`, by the `seg.*` parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::params::ParamStore;
use crate::seg::SegModel;
use crate::tensor::Tensor;
use crate::types::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SEMFUSE\0";
pub const VERSION: u32 = 1;

const SEG_PREFIX: &str = "seg.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fusion: FusionModel,
    pub seg: Option<SegModel>,
    /// Run information such as phase and epoch; keys must not start with
    /// `model.` or `train.`.
    pub info: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(fusion: FusionModel, seg: Option<SegModel>) -> Self {
        Self {
            fusion,
            seg,
            info: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        self.fusion.config()
    }

    pub fn kind(&self) -> &'static str {
        if self.seg.is_some() {
            "joint"
        } else {
            "fusion"
        }
    }

    /// SHA-256 of the serialized archive.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());

        let mut meta: Vec<(String, String)> = vec![("kind".into(), self.kind().into())];
        meta.extend(self.config().to_kv());
        meta.extend(self.info.iter().map(|(k, v)| (k.clone(), v.clone())));
        put_u32(&mut out, meta.len());
        for (k, v) in &meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }

        let seg_params = self.seg.as_ref().map(SegModel::params);
        let tensors: Vec<(&str, &Tensor)> = self
            .fusion
            .params()
            .iter()
            .chain(seg_params.into_iter().flat_map(ParamStore::iter))
            .collect();
        put_u32(&mut out, tensors.len());
        for (name, t) in tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend((v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }

        let mut kind = None;
        let mut config_kv = Vec::new();
        let mut info = BTreeMap::new();
        for _ in 0..r.u32()? {
            let (k, v) = (r.str()?, r.str()?);
            if k == "kind" {
                kind = Some(v);
            } else if k.starts_with("model.") || k.starts_with("train.") {
                config_kv.push((k, v));
            } else {
                info.insert(k, v);
            }
        }
        let config = TrainConfig::from_kv(config_kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;

        let mut fusion_params = ParamStore::new();
        let mut seg_params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| Error::Checkpoint("dimension overflow".into()))?,
                );
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: dimension overflow")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data)?;
            if name.starts_with(SEG_PREFIX) {
                seg_params.insert(name, t)?;
            } else {
                fusion_params.insert(name, t)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let seg = match kind.as_deref() {
            Some("fusion") if seg_params.is_empty() => None,
            Some("joint") => Some(SegModel::from_parts(
                config.class_count,
                config.seg_width,
                config.seed,
                seg_params,
            )?),
            Some(k) => {
                return Err(Error::Checkpoint(format!(
                    "unexpected content for kind {k:?}"
                )))
            }
            None => return Err(Error::Checkpoint("missing kind".into())),
        };
        let fusion = FusionModel::from_parts(config, fusion_params)?;
        Ok(Self { fusion, seg, info })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend(u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
