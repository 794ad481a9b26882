//! Little-endian tensor container and model checkpoints.
//!
//! Layout: `SRLCKPT1`, u32 tensor count, then per tensor a u16 name length,
//! the name, u8 rank, u64 extents, u8 dtype code and the raw values; a CRC-32
//! of everything before it closes the file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelSpec, Params};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SRLCKPT1";
const META: &str = "__meta__.";

/// A tensor of either supported precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn wrap<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Exact only when `T` matches the stored precision.
    pub fn to<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored as {:?}, requested {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            AnyTensor::F32(t) => t.to_f64_vec(),
            AnyTensor::F64(t) => t.to_f64_vec(),
        }
    }
}

fn put_values<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.put_le(out);
    }
}

pub fn encode(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let count = u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.dtype().code());
        match t {
            AnyTensor::F32(t) => put_values(t, &mut out),
            AnyTensor::F64(t) => put_values(t, &mut out),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor extent overflow".into()))?;
        let size = T::DTYPE.size();
        let raw = self.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Tensor::new(shape, raw.chunks_exact(size).map(T::take_le).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..6] == b"SRLCKP" && bytes[..8] != MAGIC[..] {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    if bytes[..8] != MAGIC[..] {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt)".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let code = r.u8()?;
        let t = match DType::from_code(code) {
            Some(DType::F32) => AnyTensor::F32(r.values(shape)?),
            Some(DType::F64) => AnyTensor::F64(r.values(shape)?),
            None => return Err(Error::Checkpoint(format!("{name}: unknown dtype code {code}"))),
        };
        entries.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(entries)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_container(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    write_atomic(path, &encode(entries)?)
}

pub fn read_container(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// u64 as four 16-bit limbs, each exact in any float.
pub fn u64_to_limbs(v: u64) -> Tensor<f64> {
    Tensor::from_vec((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect())
}

pub fn limbs_to_u64(t: &[f64]) -> Result<u64> {
    if t.len() != 4 || t.iter().any(|&l| !(0.0..65536.0).contains(&l) || l.fract() != 0.0) {
        return Err(Error::Checkpoint("malformed u64 field".into()));
    }
    Ok(t.iter().enumerate().map(|(i, &l)| (l as u64) << (16 * i)).sum())
}

pub fn bytes_to_tensor(b: &[u8]) -> Tensor<f64> {
    Tensor::from_vec(b.iter().map(|&v| v as f64).collect())
}

pub fn tensor_to_bytes(t: &[f64]) -> Result<Vec<u8>> {
    t.iter()
        .map(|&v| {
            if (0.0..256.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Checkpoint("malformed byte field".into()))
            }
        })
        .collect()
}

/// Trained weights plus what is needed to resume or reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub epoch: u64,
    pub params: Params<T>,
    /// Master seed; every stream is derived from it by name.
    pub seed: u64,
    pub config_digest: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_entries(&self) -> Result<Vec<(String, AnyTensor)>> {
        self.params.check(&self.spec)?;
        let spec_json = serde_json::to_vec(&self.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut entries = vec![
            (format!("{META}spec"), AnyTensor::F64(bytes_to_tensor(&spec_json))),
            (format!("{META}spec_hash"), AnyTensor::F64(u64_to_limbs(self.spec.hash()))),
            (format!("{META}epoch"), AnyTensor::F64(u64_to_limbs(self.epoch))),
            (format!("{META}seed"), AnyTensor::F64(u64_to_limbs(self.seed))),
            (format!("{META}config"), AnyTensor::F64(u64_to_limbs(self.config_digest))),
        ];
        entries.extend(self.params.entries().iter().map(|(n, t)| (n.clone(), AnyTensor::wrap(t))));
        Ok(entries)
    }

    pub fn from_entries(entries: Vec<(String, AnyTensor)>) -> Result<Self> {
        let mut meta = std::collections::HashMap::new();
        let mut params = Vec::new();
        for (name, t) in entries {
            match name.strip_prefix(META) {
                Some(key) => {
                    meta.insert(key.to_string(), t.to_f64_vec());
                }
                None => params.push((name.clone(), t.to::<T>()?)),
            }
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing field {k}")));
        let spec: ModelSpec = serde_json::from_slice(&tensor_to_bytes(field("spec")?)?)
            .map_err(|e| Error::Checkpoint(format!("bad spec: {e}")))?;
        if limbs_to_u64(field("spec_hash")?)? != spec.hash() {
            return Err(Error::Checkpoint("spec hash mismatch".into()));
        }
        let params = Params::new(params);
        params.check(&spec)?;
        Ok(Self {
            epoch: limbs_to_u64(field("epoch")?)?,
            seed: limbs_to_u64(field("seed")?)?,
            config_digest: limbs_to_u64(field("config")?)?,
            spec,
            params,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_container(path, &ckpt.to_entries()?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_entries(read_container(path)?)
}

/// Precision of the parameter tensors in a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    read_container(path)?
        .iter()
        .find(|(n, _)| !n.starts_with(META))
        .map(|(_, t)| t.dtype())
        .ok_or_else(|| Error::Checkpoint("no parameter tensors".into()))
}
