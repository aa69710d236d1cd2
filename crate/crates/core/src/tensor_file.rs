//! The `OMGT` tensor container.
//!
//! A tensor record is the magic `OMGT`, a `u8` version (1), a little-endian
//! `u32` rank, `rank` little-endian `u32` dimensions and then the row-major
//! `f32` values, little-endian. A sectioned file (model checkpoints) is a
//! sequence of records, each preceded by its name as a little-endian `u32`
//! byte length and UTF-8 bytes.

use std::io::{ErrorKind, Read, Write};

use crate::error::{OmgError, Result};
use crate::raster::Raster;

pub const MAGIC: [u8; 4] = *b"OMGT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(OmgError::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn into_raster(self) -> Result<Raster> {
        match self.dims[..] {
            [c, h, w] => Raster::from_planar(w, h, c, self.data),
            _ => Err(OmgError::Shape(format!(
                "raster tensor must have rank 3, got dims {:?}",
                self.dims
            ))),
        }
    }
}

impl From<&Raster> for Tensor {
    fn from(r: &Raster) -> Self {
        Tensor {
            dims: vec![r.channels(), r.height(), r.width()],
            data: r.data().to_vec(),
        }
    }
}

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION])?;
    out.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
    for &d in &tensor.dims {
        let d = u32::try_from(d)
            .map_err(|_| OmgError::Format(format!("dimension {d} does not fit in u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(tensor.data.len() * 4);
    for v in &tensor.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(OmgError::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    input.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(OmgError::Format(format!(
            "unsupported version {}",
            version[0]
        )));
    }
    let rank = read_u32(input)? as usize;
    let dims = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| OmgError::Format(format!("dims {dims:?} overflow")))?;
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_sections<W: Write>(out: &mut W, sections: &[(String, Tensor)]) -> Result<()> {
    for (name, tensor) in sections {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        write_tensor(out, tensor)?;
    }
    Ok(())
}

/// Reads named records until end of input.
pub fn read_sections<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut sections = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| OmgError::Format(format!("section name is not UTF-8: {e}")))?;
        sections.push((name, read_tensor(input)?));
    }
    Ok(sections)
}
