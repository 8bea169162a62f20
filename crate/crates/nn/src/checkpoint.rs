//! `PRCK` tensor container.
//!
//! Layout (little-endian): magic `PRCK`, `u32` version, then records until
//! end of file. A record is `u32` name length, UTF-8 name, `u8` dtype
//! (0 = f32, 1 = f64), `u32` rank, `rank` x `u32` dims, and the payload.
//!
//! Parameter stores write their values under the parameter name, AdamW moments
//! under `opt.m/<name>` and `opt.v/<name>`, and the step count as the rank-0
//! f64 record `opt.step`.

use std::io::{Read, Write};
use std::path::Path;

use crate::float::{DType, Float};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const MAGIC: &[u8; 4] = b"PRCK";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";
const STEP_KEY: &str = "opt.step";

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }

    fn to_tensor<T: Float>(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let data = match self {
            RecordData::F32(v) => v.iter().map(|x| T::of(*x as f64)).collect(),
            RecordData::F64(v) => v.iter().map(|x| T::of(*x)).collect(),
        };
        Tensor::new(dims.to_vec(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn from_tensor<T: Float>(name: &str, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => RecordData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self { name: name.to_string(), dims: t.shape().to_vec(), data }
    }

    pub fn tensor<T: Float>(&self) -> Result<Tensor<T>> {
        self.data.to_tensor(&self.dims)
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[r.data.dtype().code()])?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for d in &r.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        match &r.data {
            RecordData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            RecordData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let bytes = buf.get(*pos..*pos + 4).ok_or_else(|| NnError::Checkpoint("truncated u32".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(NnError::Checkpoint("missing PRCK magic".into()));
    }
    let mut pos = 4;
    let version = read_u32(&buf, &mut pos)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while pos < buf.len() {
        let n = read_u32(&buf, &mut pos)? as usize;
        let name_bytes = buf.get(pos..pos + n).ok_or_else(|| NnError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))?;
        pos += n;
        let code = *buf.get(pos).ok_or_else(|| NnError::Checkpoint("truncated dtype".into()))?;
        pos += 1;
        let dtype = DType::from_code(code).ok_or_else(|| NnError::Checkpoint(format!("unknown dtype {code}")))?;
        let rank = read_u32(&buf, &mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&buf, &mut pos)? as usize);
        }
        let count: usize = dims.iter().product();
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let payload = buf
            .get(pos..pos + count * width)
            .ok_or_else(|| NnError::Checkpoint(format!("truncated payload for `{name}`")))?;
        pos += count * width;
        let data = match dtype {
            DType::F32 => RecordData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            DType::F64 => RecordData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        debug_assert_eq!(data.len(), count);
        out.push(Record { name, dims, data });
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_records(std::io::BufWriter::new(f), records)
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f))
}

impl<T: Float> ParameterStore<T> {
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (name, value) in self.iter() {
            out.push(Record::from_tensor(name, value));
        }
        for name in self.names() {
            let (m, v) = self.moments(name).expect("name from store");
            out.push(Record::from_tensor(&format!("{M_PREFIX}{name}"), m));
            out.push(Record::from_tensor(&format!("{V_PREFIX}{name}"), v));
        }
        out.push(Record { name: STEP_KEY.into(), dims: vec![], data: RecordData::F64(vec![self.step() as f64]) });
        out
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mut moments = Vec::new();
        for r in records {
            if r.name == STEP_KEY {
                let t: Tensor<f64> = r.tensor()?;
                store.set_step(t.item() as u64);
            } else if r.name.starts_with(M_PREFIX) || r.name.starts_with(V_PREFIX) {
                moments.push(r);
            } else {
                store.insert(&r.name, r.tensor()?)?;
            }
        }
        for r in moments {
            if let Some(name) = r.name.strip_prefix(M_PREFIX) {
                let (_, v) = store.moments(name).ok_or_else(|| NnError::MissingParam(name.into()))?;
                let v = v.clone();
                store.set_moments(name, r.tensor()?, v)?;
            } else if let Some(name) = r.name.strip_prefix(V_PREFIX) {
                let (m, _) = store.moments(name).ok_or_else(|| NnError::MissingParam(name.into()))?;
                let m = m.clone();
                store.set_moments(name, m, r.tensor()?)?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_records(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&load_records(path)?)
    }
}
