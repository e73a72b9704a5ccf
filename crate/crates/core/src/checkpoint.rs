//! Binary training-state snapshots.
//!
//! Layout (little-endian): magic `DARN`, version u16, epoch u64, best mIoU
//! f64, epochs since best u64, seed u64, global step u64, schedule
//! (base_lr f64, min_lr f64, warmup u64, total u64), optimizer (β1, β2, eps,
//! weight decay as f64, decay-biases u8, step u64), tensor count u32, then
//! per tensor: name length u32, UTF-8 name, rank u32, extents u32 each,
//! trainable u8, values f64, first moment f64, second moment f64.
//!
//! Values are stored at full f64 precision so that resuming reproduces an
//! uninterrupted run bit for bit.

use std::path::Path;

use ndtensor::Tensor;

use crate::error::{DarnError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::schedule::Schedule;

const MAGIC: &[u8; 4] = b"DARN";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub best_miou: f64,
    pub epochs_since_best: u64,
    pub seed: u64,
    pub global_step: u64,
    pub schedule: Schedule,
    pub optimizer: AdamW,
    pub params: ParamSet,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| DarnError::Format(format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DarnError::Format("truncated checkpoint".into()))?;
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
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DarnError::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u64(self.epoch);
        w.f64(self.best_miou);
        w.u64(self.epochs_since_best);
        w.u64(self.seed);
        w.u64(self.global_step);
        let s = &self.schedule;
        w.f64(s.base_lr);
        w.f64(s.min_lr);
        w.u64(s.warmup_steps);
        w.u64(s.total_steps);
        let o = &self.optimizer;
        w.f64(o.config.beta1);
        w.f64(o.config.beta2);
        w.f64(o.config.eps);
        w.f64(o.config.weight_decay);
        w.u8(o.config.decay_biases as u8);
        w.u64(o.step);
        if o.m.len() != self.params.len() || o.v.len() != self.params.len() {
            return Err(DarnError::Format("optimizer state does not mirror parameters".into()));
        }
        w.u32(self.params.len())?;
        for (i, e) in self.params.iter().enumerate() {
            w.u32(e.name.len())?;
            w.0.extend_from_slice(e.name.as_bytes());
            w.u32(e.value.rank())?;
            for &d in e.value.shape() {
                w.u32(d)?;
            }
            w.u8(e.trainable as u8);
            w.f64s(e.value.data());
            w.f64s(o.m[i].data());
            w.f64s(o.v[i].data());
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DarnError::Format("not a DARN checkpoint".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(DarnError::Format(format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()?;
        let best_miou = r.f64()?;
        let epochs_since_best = r.u64()?;
        let seed = r.u64()?;
        let global_step = r.u64()?;
        let schedule = Schedule {
            base_lr: r.f64()?,
            min_lr: r.f64()?,
            warmup_steps: r.u64()?,
            total_steps: r.u64()?,
        };
        let config = AdamWConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
            decay_biases: r.u8()? != 0,
        };
        let step = r.u64()?;
        let n = r.u32()?;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| DarnError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let trainable = r.u8()? != 0;
            let numel: usize = shape.iter().product();
            params.push(name, Tensor::from_vec(shape.clone(), r.f64s(numel)?), trainable);
            m.push(Tensor::from_vec(shape.clone(), r.f64s(numel)?));
            v.push(Tensor::from_vec(shape, r.f64s(numel)?));
        }
        if r.pos != bytes.len() {
            return Err(DarnError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            epoch,
            best_miou,
            epochs_since_best,
            seed,
            global_step,
            schedule,
            optimizer: AdamW { config, m, v, step },
            params,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
