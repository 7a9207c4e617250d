//! Binary checkpoints:
//!
//! ```text
//! "AVCK" | version u32 | header_len u32 | header (key = value text of the ModelSpec)
//! | entry_count u32 | entries…
//! entry: name_len u16 | name | kind u8 | dtype u8 | rank u8 | extents u32… | LE values
//! ```
//!
//! `kind` is 0 for a parameter, 1 for a running mean and 2 for a running variance.
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::gradcore::{DType, Scalar, Tensor};
use crate::kv::KvDoc;

use super::{ModelError, ModelSpec, TwoStreamModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_MEAN: u8 = 1;
const KIND_VAR: u8 = 2;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_entry<T: Scalar>(buf: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
    buf.push(T::DTYPE.code());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(buf, d);
    }
    T::to_le_bytes_vec(t.data(), buf);
}

impl<T: Scalar> TwoStreamModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION as usize);
        let header = self.spec.to_kv().render();
        put_u32(&mut buf, header.len());
        buf.extend_from_slice(header.as_bytes());
        let n_entries = self.params.len() + 2 * self.stats.len();
        put_u32(&mut buf, n_entries);
        for p in self.params.iter() {
            put_entry(&mut buf, &p.name, KIND_PARAM, &p.tensor);
        }
        for (name, s) in self.running_stats() {
            put_entry(&mut buf, &format!("{name}.running_mean"), KIND_MEAN, &s.mean);
            put_entry(&mut buf, &format!("{name}.running_var"), KIND_VAR, &s.var);
        }
        buf
    }

    /// Rebuilds a model from [`TwoStreamModel::to_bytes`] output; values stored in the
    /// other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("missing AVCK magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| "header is not UTF-8")?;
        let doc = KvDoc::parse(header).map_err(|e| e.to_string())?;
        let spec = ModelSpec::from_kv(&doc).map_err(|e| e.to_string())?;
        let mut model = TwoStreamModel::<T>::new(spec, 0).map_err(|e| e.to_string())?;

        let count = r.u32()? as usize;
        let expected = model.params.len() + 2 * model.stats.len();
        if count != expected {
            return Err(format!("{count} entries, architecture needs {expected}"));
        }
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| "entry name is not UTF-8")?
                .to_string();
            let kind = r.take(1)?[0];
            let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| format!("{name}: bad dtype"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * dtype.size_of())?;
            let values: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::lit(f32::from_le_chunk(c) as f64))
                    .collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::from_le_chunk(c))).collect(),
            };
            let tensor = Tensor::new(shape, values).map_err(|e| format!("{name}: {e}"))?;
            match kind {
                KIND_PARAM => model.params.assign(&name, tensor).map_err(|e| e.to_string())?,
                KIND_MEAN | KIND_VAR => {
                    let suffix = if kind == KIND_MEAN { ".running_mean" } else { ".running_var" };
                    let layer = name
                        .strip_suffix(suffix)
                        .ok_or_else(|| format!("{name}: kind does not match suffix"))?;
                    let stats = model
                        .running_stats_mut(layer)
                        .ok_or_else(|| format!("unknown batch-norm layer `{layer}`"))?;
                    let slot = if kind == KIND_MEAN { &mut stats.mean } else { &mut stats.var };
                    if slot.shape() != tensor.shape() {
                        return Err(format!("{name}: shape {:?}, expected {:?}", tensor.shape(), slot.shape()));
                    }
                    *slot = tensor;
                }
                other => return Err(format!("{name}: unknown entry kind {other}")),
            }
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after the last entry".into());
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint<T: Scalar>(model: &TwoStreamModel<T>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, model.to_bytes()).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TwoStreamModel<T>, ModelError> {
    let err = |msg: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    TwoStreamModel::from_bytes(&bytes).map_err(err)
}
