//! Model checkpoints: a directory holding `meta.json` and a binary tensor
//! archive `tensors.bin`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{TrainingConfig, Vae};
use crate::diffusion::DiffusionModel;
use crate::disentangle::FairnessConfig;
use crate::dp::PrivacyReport;
use crate::error::{FlipError, Result};
use crate::params::ParamStore;
use crate::schema_io::FittedTransform;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FLIPTNSR";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub transform: FittedTransform,
    pub vae: Vae,
    /// Current weights.
    pub theta: ParamStore,
    /// Frozen weights at the end of the representation phase.
    pub theta0: Option<ParamStore>,
    pub diffusion: Option<DiffusionModel>,
    pub training: TrainingConfig,
    pub fairness: Option<FairnessConfig>,
    pub privacy: Option<PrivacyReport>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    transform: FittedTransform,
    vae: Vae,
    diffusion: Option<DiffusionModel>,
    training: TrainingConfig,
    fairness: Option<FairnessConfig>,
    privacy: Option<PrivacyReport>,
    has_theta0: bool,
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn append_store(out: &mut Vec<(String, Array2<f64>)>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.names().iter().zip(store.tensors()) {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

/// Serialize named tensors: magic, version, count, then per tensor the
/// UTF-8 name, its shape and little-endian `f64` data.
pub fn encode_tensors(tensors: &[(String, Array2<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION);
    write_u64(&mut out, tensors.len() as u64);
    for (name, t) in tensors {
        write_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        write_u64(&mut out, t.nrows() as u64);
        write_u64(&mut out, t.ncols() as u64);
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FlipError::Checkpoint("tensor archive truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Array2<f64>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FlipError::Checkpoint("not a tensor archive".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FlipError::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| FlipError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let bytes = r.take(rows * cols * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| FlipError::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(FlipError::Checkpoint("trailing bytes in tensor archive".into()));
    }
    Ok(out)
}

fn collect_store(tensors: &[(String, Array2<f64>)], prefix: &str) -> ParamStore {
    let mut store = ParamStore::new();
    let p = format!("{prefix}/");
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(&p) {
            store.add(rest, t.clone());
        }
    }
    store
}

fn check_layout(loaded: &ParamStore, reference: &ParamStore, what: &str) -> Result<()> {
    let same = loaded.names() == reference.names()
        && loaded
            .tensors()
            .iter()
            .zip(reference.tensors())
            .all(|(a, b)| a.dim() == b.dim());
    if same {
        Ok(())
    } else {
        Err(FlipError::Checkpoint(format!("{what} weights do not match the stored architecture")))
    }
}

impl ModelCheckpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| FlipError::io(dir, e))?;
        let meta = Meta {
            version: CHECKPOINT_VERSION,
            transform: self.transform.clone(),
            vae: self.vae.clone(),
            diffusion: self.diffusion.clone(),
            training: self.training.clone(),
            fairness: self.fairness.clone(),
            privacy: self.privacy.clone(),
            has_theta0: self.theta0.is_some(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| FlipError::io(&meta_path, e))?;
        let mut tensors = Vec::new();
        append_store(&mut tensors, "theta", &self.theta);
        if let Some(t0) = &self.theta0 {
            append_store(&mut tensors, "theta0", t0);
        }
        if let Some(d) = &self.diffusion {
            append_store(&mut tensors, "diffusion", &d.params);
        }
        let path = dir.join("tensors.bin");
        let mut f = fs::File::create(&path).map_err(|e| FlipError::io(&path, e))?;
        f.write_all(&encode_tensors(&tensors)).map_err(|e| FlipError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| FlipError::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(FlipError::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
        }
        let path = dir.join("tensors.bin");
        let mut buf = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| FlipError::io(&path, e))?;
        let tensors = decode_tensors(&buf)?;
        let (_, reference) = Vae::build(&meta.transform.schema, meta.vae.config.clone(), 0);
        let theta = collect_store(&tensors, "theta");
        check_layout(&theta, &reference, "model")?;
        let theta0 = if meta.has_theta0 {
            let t0 = collect_store(&tensors, "theta0");
            check_layout(&t0, &reference, "reference")?;
            Some(t0)
        } else {
            None
        };
        let diffusion = match meta.diffusion {
            Some(mut d) => {
                let fresh = DiffusionModel::new(d.dim, d.config.clone(), 0)?;
                let params = collect_store(&tensors, "diffusion");
                check_layout(&params, &fresh.params, "diffusion")?;
                d.params = params;
                Some(d)
            }
            None => None,
        };
        Ok(Self {
            transform: meta.transform,
            vae: meta.vae,
            theta,
            theta0,
            diffusion,
            training: meta.training,
            fairness: meta.fairness,
            privacy: meta.privacy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn archive_roundtrip_is_exact() {
        let t = vec![
            ("a".to_string(), array![[1.0, f64::MIN_POSITIVE], [-0.0, 1e300]]),
            ("b/c".to_string(), Array2::zeros((0, 3))),
        ];
        let bytes = encode_tensors(&t);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        for (x, y) in back[0].1.iter().zip(t[0].1.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1.dim(), (0, 3));
    }

    #[test]
    fn corrupt_archives_rejected() {
        let bytes = encode_tensors(&[("a".to_string(), array![[1.0]])]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensors(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_tensors(&extra).is_err());
    }
}
