//! Binary parameter files.
//!
//! ```text
//! "MMFM"                  magic
//! u16                     format version
//! u64 + bytes             JSON header
//! u32                     array count
//! per array:
//!   u16 + bytes           name (UTF-8)
//!   u8                    dtype tag (0 = f32, 1 = f64)
//!   u8 + u64 × rank       dims
//!   payload               little-endian values
//! ```
//!
//! All integers are little-endian. Checkpoints carry `{manifest, stage, step}`
//! in the header; optimizer moments are stored as arrays named `opt.m.<param>`
//! and `opt.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::manifest::RunManifest;
use super::TrainError;
use crate::model::{component_hash, Component, MultimodalModel, ParamStore};
use crate::numeric::{DType, Scalar, Tensor};
use crate::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8; 4] = b"MMFM";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    manifest: RunManifest,
    stage: Stage,
    step: u64,
    optimizer_steps: u64,
    adamw: AdamWConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: RunManifest,
    pub stage: Stage,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<MultimodalModel<f32>, TrainError> {
        Ok(MultimodalModel::from_params(self.manifest.model.clone(), self.params.clone())?)
    }

    pub fn component_hash(&self, c: Component) -> String {
        component_hash(&self.params, c)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let (adamw, optimizer_steps) = match &self.optimizer {
            Some(o) => (o.config, o.steps),
            None => (AdamWConfig::default(), 0),
        };
        let header = CheckpointHeader {
            manifest: self.manifest.clone(),
            stage: self.stage,
            step: self.step,
            optimizer_steps,
            adamw,
        };
        let mut arrays: Vec<(String, &[f32], Vec<usize>)> =
            self.params.iter().map(|(n, t)| (n.clone(), t.data(), t.shape().to_vec())).collect();
        if let Some(o) = &self.optimizer {
            let (m, v) = o.moments();
            for (prefix, moments) in [("opt.m.", m), ("opt.v.", v)] {
                for (n, data) in moments {
                    arrays.push((format!("{prefix}{n}"), data.as_slice(), vec![data.len()]));
                }
            }
        }
        write_file(path, &header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (header, arrays): (CheckpointHeader, _) = read_file(path)?;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for (name, t) in arrays {
            if let Some(n) = name.strip_prefix("opt.m.") {
                m.insert(n.to_string(), t.into_data());
            } else if let Some(n) = name.strip_prefix("opt.v.") {
                v.insert(n.to_string(), t.into_data());
            } else {
                params.insert(name, t);
            }
        }
        let optimizer = (header.optimizer_steps > 0)
            .then(|| AdamW::from_state(header.adamw, header.optimizer_steps, m, v));
        // Shapes must agree with the manifest's architecture.
        MultimodalModel::from_params(header.manifest.model.clone(), params.clone())?;
        Ok(Checkpoint { manifest: header.manifest, stage: header.stage, step: header.step, params, optimizer })
    }
}

/// Writes a header and named arrays, going through a temporary file and a rename.
pub fn write_file<H: Serialize, T: Scalar>(
    path: &Path,
    header: &H,
    arrays: &[(String, &[T], Vec<usize>)],
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, data, dims) in arrays {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TrainError::Format(format!("array {name}: dims {dims:?} do not match {} values", data.len())));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.tag());
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data.iter() {
            v.write_le(&mut buf);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TrainError::Format(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Reads a file written by [`write_file`]. Arrays must be stored as `f32`.
pub fn read_file<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(String, Tensor<f32>)>), TrainError> {
    read_file_as::<H, f32>(path)
}

/// [`read_file`] for arrays stored as `T`.
pub fn read_file_as<H: DeserializeOwned, T: Scalar>(path: &Path) -> Result<(H, Vec<(String, Tensor<T>)>), TrainError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).map_err(|_| TrainError::Format("file too short for magic".into()))? != MAGIC {
        return Err(TrainError::Format(format!("{} is not an MMFM file (bad magic)", path.display())));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(TrainError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    let hlen = r.u64()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| TrainError::Format("array name is not UTF-8".into()))?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| TrainError::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(TrainError::Format(format!("array {name} has dtype {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| TrainError::Format(format!("array {name} dims overflow")))?;
        let width = dtype.width();
        let payload = r.take(len.checked_mul(width).ok_or_else(|| TrainError::Format("payload overflow".into()))?)?;
        let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(dims, data).map_err(|e| TrainError::Format(format!("array {name}: {e}")))?;
        arrays.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Format(format!("{} trailing bytes after the last array", bytes.len() - r.pos)));
    }
    Ok((header, arrays))
}
