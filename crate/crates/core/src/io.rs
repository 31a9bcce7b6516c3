//! Binary file formats.
//!
//! Video (`TSTV`):
//!
//! ```text
//! "TSTV" | u32 T | u32 H | u32 W | T·H·W·3 × f32
//! ```
//!
//! Named tensors (`TSTW`), used for weights and encoded features:
//!
//! ```text
//! "TSTW" | u32 count | count × ( u32 name_len | name (utf-8)
//!                                | u32 rank | rank × u32 dim | Π dim × f32 )
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TestaError};
use crate::tensors::Matrix;
use crate::tokenization::RawVideo;

pub const VIDEO_MAGIC: &[u8; 4] = b"TSTV";
pub const TENSOR_MAGIC: &[u8; 4] = b"TSTW";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(TestaError::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&b)
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(TestaError::Format("trailing bytes after payload".into()));
    }
    Ok(())
}

pub fn write_video<W: Write>(w: &mut W, video: &RawVideo) -> Result<()> {
    w.write_all(VIDEO_MAGIC)?;
    for v in [video.frames, video.height, video.width] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    write_f32s(w, &video.pixels)
}

pub fn read_video<R: Read>(r: &mut R) -> Result<RawVideo> {
    expect_magic(r, VIDEO_MAGIC)?;
    let t = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let n = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| TestaError::Format("video dimensions overflow".into()))?;
    let pixels = read_f32s(r, n)?;
    expect_eof(r)?;
    RawVideo::new(t, h, w, pixels)
}

pub fn save_video(path: &Path, video: &RawVideo) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_video(&mut w, video)?;
    w.flush()?;
    Ok(())
}

pub fn load_video(path: &Path) -> Result<RawVideo> {
    read_video(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(TestaError::Format(format!(
                "tensor {} has rank {}, expected 2",
                self.name,
                self.dims.len()
            ))),
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TestaError::Format(format!("missing tensor {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)?.to_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f32>> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(TestaError::Format(format!("tensor {name} is not a vector")));
        }
        Ok(t.data.clone())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32s(w, &t.data)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, TENSOR_MAGIC)?;
        let count = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| TestaError::Format(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| TestaError::Format(format!("tensor {name} too large")))?;
            let data = read_f32s(r, n)?;
            tensors.push(NamedTensor { name, dims, data });
        }
        expect_eof(r)?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
