//! Named-tensor binary checkpoints.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "FFSD" | version (=1) | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | dtype (0 = f32) | f32 LE values
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FFSD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor<f32>) -> Self {
        NamedTensor {
            name: name.to_string(),
            dims: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let mut d = [1usize; 4];
        if self.dims.len() > 4 {
            return Err(Error::Checkpoint(format!("{}: rank {} exceeds 4", self.name, self.dims.len())));
        }
        d[4 - self.dims.len()..].copy_from_slice(&self.dims);
        Tensor::from_vec(Shape::try_new(d[0], d[1], d[2], d[3])?, self.data.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

/// How a load went: names copied, names left at their initial values, and
/// checkpoint entries the model does not have.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
    pub unused: Vec<String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("{}: dims do not match data length", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&DTYPE_F32.to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut names = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.u32()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype code {dtype}")));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn from_model(model: &Detector<f32>) -> Self {
        Checkpoint {
            tensors: model
                .params()
                .into_iter()
                .map(|p| NamedTensor::from_tensor(&p.name, &p.value))
                .collect(),
        }
    }

    /// Copies every name-matching tensor into `model`. A name present in
    /// both with different shapes is an error and leaves `model` untouched.
    pub fn load_into(&self, model: &mut Detector<f32>) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut staged = Vec::new();
        for (i, p) in model.params().into_iter().enumerate() {
            match self.get(&p.name) {
                Some(t) => {
                    let v = t.to_tensor()?;
                    if v.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                            p.name,
                            t.dims,
                            p.value.shape().dims()
                        )));
                    }
                    staged.push((i, v));
                    report.loaded.push(p.name.clone());
                }
                None => report.fresh.push(p.name.clone()),
            }
        }
        let names: HashSet<&str> = report.loaded.iter().map(String::as_str).collect();
        report.unused = self
            .tensors
            .iter()
            .filter(|t| !names.contains(t.name.as_str()))
            .map(|t| t.name.clone())
            .collect();
        let mut params = model.params_mut();
        for (i, v) in staged {
            params[i].value = v;
        }
        Ok(report)
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
