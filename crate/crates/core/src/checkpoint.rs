//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "AUATTNCK"
//! version    u32      1
//! config     u64 length + UTF-8 JSON of the run config
//! epoch      u64      epochs completed
//! count      u64      number of tensors
//! table      per tensor: u32 name length, name, u8 role, u32 rank, u64 dims
//! data       every tensor's values as f64, in table order
//! ```
//!
//! Roles: 0 parameter, 1 running mean, 2 running variance, 3 momentum buffer.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Sgd;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"AUATTNCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Parameter = 0,
    RunningMean = 1,
    RunningVar = 2,
    Momentum = 3,
}

impl Role {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Role::Parameter,
            1 => Role::RunningMean,
            2 => Role::RunningVar,
            3 => Role::Momentum,
            _ => return Err(Error::Checkpoint(format!("unknown tensor role {b}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub tensors: Vec<StoredTensor>,
}

fn f64s<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl Checkpoint {
    /// Captures parameters, batch-norm statistics and optimizer state.
    pub fn capture<S: Scalar>(config: &RunConfig, epoch: u64, model: &mut Model<S>, opt: &Sgd<S>) -> Self {
        let mut tensors: Vec<StoredTensor> = model
            .params
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                role: Role::Parameter,
                shape: p.tensor.shape().to_vec(),
                data: f64s(p.tensor.data()),
            })
            .collect();
        for (i, st) in model.norm_states_mut().into_iter().enumerate() {
            let c = st.channels();
            tensors.push(StoredTensor {
                name: format!("norm{i}.running_mean"),
                role: Role::RunningMean,
                shape: vec![c],
                data: f64s(&st.running_mean),
            });
            tensors.push(StoredTensor {
                name: format!("norm{i}.running_var"),
                role: Role::RunningVar,
                shape: vec![c],
                data: f64s(&st.running_var),
            });
        }
        for (p, v) in model.params.iter().zip(&opt.velocity) {
            tensors.push(StoredTensor {
                name: format!("{}.velocity", p.name),
                role: Role::Momentum,
                shape: p.tensor.shape().to_vec(),
                data: f64s(v),
            });
        }
        Checkpoint {
            config: config.clone(),
            epoch,
            tensors,
        }
    }

    /// Copies the stored state into a model and optimizer of matching layout.
    pub fn restore<S: Scalar>(&self, model: &mut Model<S>, opt: &mut Sgd<S>) -> Result<()> {
        let mismatch = |what: &str| Error::Checkpoint(format!("checkpoint does not match the model: {what}"));
        let params: Vec<&StoredTensor> = self.tensors.iter().filter(|t| t.role == Role::Parameter).collect();
        let means: Vec<&StoredTensor> = self.tensors.iter().filter(|t| t.role == Role::RunningMean).collect();
        let vars: Vec<&StoredTensor> = self.tensors.iter().filter(|t| t.role == Role::RunningVar).collect();
        let moms: Vec<&StoredTensor> = self.tensors.iter().filter(|t| t.role == Role::Momentum).collect();
        if params.len() != model.params.len() || moms.len() != model.params.len() {
            return Err(mismatch("parameter count"));
        }
        for ((p, st), (v, mt)) in model
            .params
            .iter_mut()
            .zip(&params)
            .zip(opt.velocity.iter_mut().zip(&moms))
        {
            if p.name != st.name || p.tensor.shape() != st.shape.as_slice() || mt.data.len() != v.len() {
                return Err(mismatch(&format!("parameter {}", p.name)));
            }
            for (d, &x) in p.tensor.data_mut().iter_mut().zip(&st.data) {
                *d = S::lit(x);
            }
            for (d, &x) in v.iter_mut().zip(&mt.data) {
                *d = S::lit(x);
            }
        }
        let states = model.norm_states_mut();
        if states.len() != means.len() || states.len() != vars.len() {
            return Err(mismatch("batch-norm layer count"));
        }
        for ((st, m), v) in states.into_iter().zip(&means).zip(&vars) {
            if m.data.len() != st.channels() || v.data.len() != st.channels() {
                return Err(mismatch("batch-norm width"));
            }
            st.running_mean = m.data.iter().map(|&x| S::lit(x)).collect();
            st.running_var = v.data.iter().map(|&x| S::lit(x)).collect();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_string(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor {} has inconsistent shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.role as u8);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.u64()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = RunConfig::from_json(cfg)?;
        let epoch = r.u64()?;
        let count = r.u64()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let role = Role::from_byte(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, role, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, role, shape) in table {
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(StoredTensor {
                name,
                role,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint { config, epoch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
