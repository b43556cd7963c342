//! TENSORBIN: a bit-exact named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TBIN"
//! version u32 (currently 1)
//! count   u32
//! per tensor:
//!   name_len u16, name (UTF-8), dtype u8 (1=f32, 2=f64), ndim u8,
//!   dims ndim x u32, payload (row-major IEEE-754, little-endian)
//! ```
//!
//! Entries keep insertion order, so writing the same container twice yields
//! identical bytes.

use crate::error::{Error, Result};
use crate::linalg::{Mat, Scalar};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"TBIN";
pub const VERSION: u32 = 1;

/// Guard against absurd dimension claims in corrupt files.
const MAX_ELEMS: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor dims {:?} imply {} elements, payload has {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_scalar_vec<T: Scalar>(dims: Vec<usize>, v: &[T]) -> Result<Self> {
        let data = match T::DTYPE {
            1 => TensorData::F32(v.iter().map(|x| x.to_f64_() as f32).collect()),
            _ => TensorData::F64(v.iter().map(|x| x.to_f64_()).collect()),
        };
        Tensor::new(dims, data)
    }

    pub fn from_mat<T: Scalar>(m: &Mat<T>) -> Result<Self> {
        Tensor::from_scalar_vec(vec![m.rows(), m.cols()], m.data())
    }

    /// Extract as `T`, requiring the stored dtype to match exactly.
    pub fn to_scalar_vec<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        match (&self.data, T::DTYPE) {
            (TensorData::F32(v), 1) => Ok(v.iter().map(|&x| T::from_f32(x)).collect()),
            (TensorData::F64(v), 2) => Ok(v.iter().map(|&x| T::from_f64(x)).collect()),
            (d, want) => Err(Error::format(format!(
                "tensor `{}` has dtype code {}, expected {}",
                name,
                d.dtype_code(),
                want
            ))),
        }
    }

    pub fn to_mat<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        if self.dims.len() != 2 {
            return Err(Error::shape(format!(
                "tensor `{}` has {} dims, expected 2",
                name,
                self.dims.len()
            )));
        }
        Mat::from_vec(self.dims[0], self.dims[1], self.to_scalar_vec(name)?)
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Container::get`] but yields the error the weight loader reports.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("container missing tensor `{}`", name)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::format(format!("tensor name too long: {}", name)));
            }
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[t.data.dtype_code()])?;
            if t.dims.len() > u8::MAX as usize {
                return Err(Error::format("tensor rank exceeds 255".to_string()));
            }
            w.write_all(&[t.dims.len() as u8])?;
            for &d in &t.dims {
                if d > u32::MAX as usize {
                    return Err(Error::format("tensor dimension exceeds u32".to_string()));
                }
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::format("not a TENSORBIN file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported TENSORBIN version {} (expected {})",
                version, VERSION
            )));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format("tensor name is not valid UTF-8"))?;
            let mut b = [0u8; 2];
            read_exact(r, &mut b)?;
            let (dtype, ndim) = (b[0], b[1] as usize);
            let mut dims = Vec::with_capacity(ndim);
            let mut elems: u64 = 1;
            for _ in 0..ndim {
                let d = read_u32(r)? as u64;
                elems = elems.saturating_mul(d.max(1));
                dims.push(d as usize);
            }
            let n: u64 = dims.iter().map(|&d| d as u64).product();
            if n > MAX_ELEMS || elems > MAX_ELEMS {
                return Err(Error::format(format!(
                    "tensor `{}` claims {} elements, refusing",
                    name, n
                )));
            }
            let n = n as usize;
            let data = match dtype {
                1 => {
                    let mut raw = vec![0u8; n * 4];
                    read_exact(r, &mut raw)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                2 => {
                    let mut raw = vec![0u8; n * 8];
                    read_exact(r, &mut raw)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| {
                                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                            })
                            .collect(),
                    )
                }
                other => {
                    return Err(Error::format(format!(
                        "tensor `{}` has unknown dtype code {}",
                        name, other
                    )))
                }
            };
            entries.push((name, Tensor { dims, data }));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path)
            .map_err(|e| Error::io(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| Error::io(format!("cannot open {}: {e}", path.display())))?;
        Container::read(&mut BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("truncated TENSORBIN file")
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert(
            "a",
            Tensor::new(vec![2, 2], TensorData::F32(vec![1.0, -2.5, 3.25, 0.0])).unwrap(),
        );
        c.insert(
            "b.bias",
            Tensor::new(vec![3], TensorData::F64(vec![1e-300, 0.1, -7.0])).unwrap(),
        );
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let d = Container::read(&mut buf.as_slice()).unwrap();
        assert_eq!(c, d);

        let mut buf2 = Vec::new();
        d.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        buf[0] = b'X';
        let err = Container::read(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("not a TENSORBIN file"), "{err}");
    }

    #[test]
    fn rejects_bad_version() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        buf[4] = 9;
        let err = Container::read(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Container::read(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn missing_tensor_is_named() {
        let c = sample();
        let err = c.require("head.weight").unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let c = sample();
        let t = c.get("a").unwrap();
        let err = t.to_scalar_vec::<f64>("a").unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }
}
