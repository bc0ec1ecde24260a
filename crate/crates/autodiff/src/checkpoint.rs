//! Binary parameter checkpoints.
//!
//! Layout: magic `SEGACKPT`, `u32` format version, then until end of file one
//! record per tensor: `u16` name length, UTF-8 name, `u8` rank, `u32` per
//! dimension, `f32` little-endian values. All integers are little-endian.
//!
//! Optimizer moments are stored as ordinary records under the `adamw.m/` and
//! `adamw.v/` prefixes, with the step counter in the rank-0 record
//! `adamw.step`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adamw::{AdamWConfig, AdamWState};
use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEGACKPT";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT1: &str = "adamw.m/";
const MOMENT2: &str = "adamw.v/";
const STEP: &str = "adamw.step";

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {}", r.name)))?;
        let rank = u8::try_from(r.shape.len()).map_err(|_| bad(format!("rank too large: {}", r.name)))?;
        let expected: usize = r.shape.iter().product();
        if expected != r.data.len() {
            return Err(bad(format!("{}: shape {:?} holds {} values", r.name, r.shape, r.data.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &r.shape {
            let d = u32::try_from(d).map_err(|_| bad(format!("dimension too large: {}", r.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

fn to_record<T: Scalar>(name: String, t: &Tensor<T>) -> Record {
    Record {
        name,
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

fn from_record<T: Scalar>(r: &Record) -> Result<Tensor<T>> {
    Tensor::new(r.shape.clone(), r.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
}

/// Parameters plus optional optimizer moments.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamWState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self
            .params
            .iter()
            .map(|(_, name, t)| to_record(name.to_string(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (id, name, _) in self.params.iter() {
                out.push(to_record(format!("{MOMENT1}{name}"), &opt.m[id.index()]));
                out.push(to_record(format!("{MOMENT2}{name}"), &opt.v[id.index()]));
            }
            out.push(Record {
                name: STEP.to_string(),
                shape: Vec::new(),
                data: vec![opt.step as f32],
            });
        }
        out
    }

    /// Rebuilds a checkpoint; `config` is attached to restored optimizer state.
    pub fn from_records(records: &[Record], config: AdamWConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        for r in records.iter().filter(|r| !r.name.starts_with("adamw.")) {
            params.add(r.name.clone(), from_record(r)?)?;
        }
        let step = records.iter().find(|r| r.name == STEP);
        let optimizer = match step {
            None => None,
            Some(step) => {
                let mut state = AdamWState::new(config, &params);
                state.step = step.data.first().copied().unwrap_or(0.0) as u64;
                for r in records {
                    let (slot, name) = if let Some(n) = r.name.strip_prefix(MOMENT1) {
                        (&mut state.m, n)
                    } else if let Some(n) = r.name.strip_prefix(MOMENT2) {
                        (&mut state.v, n)
                    } else {
                        continue;
                    };
                    let id = params
                        .id(name)
                        .ok_or_else(|| bad(format!("moment for unknown parameter {name}")))?;
                    let t: Tensor<T> = from_record(r)?;
                    if t.shape() != params.get(id).shape() {
                        return Err(bad(format!("moment shape mismatch for {name}")));
                    }
                    slot[id.index()] = t;
                }
                Some(state)
            }
        };
        Ok(Self { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode(&self.to_records())?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path, config: AdamWConfig) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_records(&decode(&bytes)?, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_documented_layout() {
        let rec = Record {
            name: "w".into(),
            shape: vec![2],
            data: vec![1.0, -2.5],
        };
        let bytes = encode(&[rec.clone()]).unwrap();
        let mut expected = b"SEGACKPT".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes).unwrap(), vec![rec]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOTACKPT\x01\x00\x00\x00").is_err());
        let rec = Record {
            name: "w".into(),
            shape: vec![3],
            data: vec![1.0, 2.0, 3.0],
        };
        let bytes = encode(&[rec]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn optimizer_state_survives_round_trip() {
        let mut params = ParamStore::<f32>::new();
        params.add("a", Tensor::new(vec![2, 1], vec![0.5, -0.25]).unwrap()).unwrap();
        params.add("b", Tensor::new(vec![], vec![3.0]).unwrap()).unwrap();
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        let grads = vec![
            Some(Tensor::new(vec![2, 1], vec![0.1, 0.2]).unwrap()),
            Some(Tensor::new(vec![], vec![-1.0]).unwrap()),
        ];
        opt.step(&mut params, &grads).unwrap();
        let ckpt = Checkpoint {
            params: params.clone(),
            optimizer: Some(opt.clone()),
        };
        let back = Checkpoint::<f32>::from_records(&decode(&encode(&ckpt.to_records()).unwrap()).unwrap(), opt.config)
            .unwrap();
        assert_eq!(back.params.names(), params.names());
        for (id, _, t) in params.iter() {
            assert_eq!(back.params.get(id), t);
        }
        assert_eq!(back.optimizer.unwrap(), opt);
    }
}
