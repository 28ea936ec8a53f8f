//! Binary checkpoint format.
//!
//! ```text
//! "FEWSEGCK"  u32 version
//! u32 len, config text (UTF-8)
//! u32 blob count, then per blob:
//!   u32 len, name | u8 frozen | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
//! sha256 of every preceding byte
//! ```
//! All integers and floats are little-endian. Model parameters come first,
//! in registration order; training-progress blobs follow with reserved prefixes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::files::{read, write_atomic};
use crate::refinement::ConfidenceMap;
use crate::state::ModelState;
use crate::tensor::Tensor;
use crate::training::{LossRecord, Optimizer, PredictionCache, TrainProgress};

pub const MAGIC: &[u8; 8] = b"FEWSEGCK";
pub const VERSION: u32 = 1;

const PROGRESS_PREFIX: &str = "progress.";
const CACHE_PREFIX: &str = "cache.";
const VELOCITY_PREFIX: &str = "velocity.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Canonical run configuration the parameters were produced under.
    pub config: String,
    pub state: ModelState,
    /// Non-parameter blobs (training progress), in file order.
    pub extras: Vec<(String, Tensor)>,
}

fn is_extra(name: &str) -> bool {
    [PROGRESS_PREFIX, CACHE_PREFIX, VELOCITY_PREFIX]
        .iter()
        .any(|p| name.starts_with(p))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, frozen: bool, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(frozen as u8);
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(config: String, state: ModelState) -> Self {
        Checkpoint {
            config,
            state,
            extras: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config.len() as u32);
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, (self.state.len() + self.extras.len()) as u32);
        for p in self.state.params() {
            put_blob(&mut out, &p.name, p.frozen, &p.tensor);
        }
        for (name, t) in &self.extras {
            put_blob(&mut out, name, false, t);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let config = r.string()?;
        let count = r.u32()?;
        let mut state = ModelState::new();
        let mut extras = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(Error::Checkpoint(format!("bad frozen flag {f} on {name}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} on {name}")))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if is_extra(&name) {
                extras.push((name, t));
            } else {
                if !extras.is_empty() {
                    return Err(Error::Checkpoint(format!("parameter {name} after progress blobs")));
                }
                state
                    .register(&name, t, frozen)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config, state, extras })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }

    pub fn with_progress(mut self, progress: &TrainProgress) -> Self {
        self.extras = progress_blobs(progress);
        self
    }

    /// Training progress, if the file carries it.
    pub fn progress(&self, lr: f64, momentum: f64) -> Result<Option<TrainProgress>> {
        let get = |n: &str| self.extras.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let Some(epochs) = get("progress.epochs_done") else {
            return Ok(None);
        };
        let warmup = get("progress.warmup_done")
            .ok_or_else(|| Error::Checkpoint("missing progress.warmup_done".into()))?;
        let curve = get("progress.loss_curve")
            .ok_or_else(|| Error::Checkpoint("missing progress.loss_curve".into()))?;
        let n = curve.data()[0] as usize;
        if curve.len() != 1 + 3 * n {
            return Err(Error::Checkpoint("malformed progress.loss_curve".into()));
        }
        let loss_curve = curve.data()[1..]
            .chunks_exact(3)
            .map(|c| LossRecord {
                epoch: c[0] as usize,
                step: c[1] as usize,
                loss: c[2],
            })
            .collect();
        let mut cache = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        for (name, t) in &self.extras {
            if let Some(id) = name.strip_prefix(CACHE_PREFIX) {
                let id: u64 = id
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad cache key {name}")))?;
                let map = ConfidenceMap::new(t.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                cache.insert(id, map);
            } else if let Some(p) = name.strip_prefix(VELOCITY_PREFIX) {
                velocity.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(Some(TrainProgress {
            warmup_done: warmup.data()[0] != 0.0,
            epochs_done: epochs.data()[0] as usize,
            cache: PredictionCache::from_previous(cache),
            optimizer: Optimizer {
                lr,
                momentum,
                velocity,
            },
            loss_curve,
        }))
    }
}

fn progress_blobs(p: &TrainProgress) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("progress.warmup_done".to_string(), Tensor::scalar(p.warmup_done as u8 as f64)),
        ("progress.epochs_done".to_string(), Tensor::scalar(p.epochs_done as f64)),
    ];
    // leading record count, then (epoch, step, loss) triples
    let mut flat = vec![p.loss_curve.len() as f64];
    flat.extend(p.loss_curve.iter().flat_map(|r| [r.epoch as f64, r.step as f64, r.loss]));
    out.push((
        "progress.loss_curve".to_string(),
        Tensor::new(&[flat.len()], flat).expect("flat"),
    ));
    for (id, map) in p.cache.previous_entries() {
        out.push((format!("{CACHE_PREFIX}{id}"), map.probs().clone()));
    }
    for (name, v) in &p.optimizer.velocity {
        out.push((format!("{VELOCITY_PREFIX}{name}"), Tensor::new(&[v.len()], v.clone()).expect("flat")));
    }
    out
}
