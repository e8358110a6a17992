//! Binary tensor container.
//!
//! Layout, little-endian throughout:
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 4          | magic `SSMT`                            |
//! | 4          | version `u32` = 1                       |
//! | 1          | dtype: 0 = `f64`, 1 = `f32`             |
//! | 1          | ndim                                    |
//! | 8 × ndim   | dims, `u64` each                        |
//! | payload    | row-major elements                      |
//!
//! The reader checks the header and the exact file length before it
//! allocates the payload.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"SSMT";
pub const VERSION: u32 = 1;
const FIXED_HEADER: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn size(self) -> u64 {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIXED_HEADER as usize + 8 * t.rank() + dtype.size() as usize * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in a byte"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out
}

struct Header {
    dtype: Dtype,
    dims: Vec<usize>,
    payload: u64,
}

fn parse_header<R: Read>(r: &mut R, total: u64) -> Result<Header, FormatError> {
    let truncated = |expected| FormatError::Truncated { expected, found: total };
    let mut fixed = [0u8; FIXED_HEADER as usize];
    r.read_exact(&mut fixed).map_err(|_| truncated(FIXED_HEADER))?;
    let magic = [fixed[0], fixed[1], fixed[2], fixed[3]];
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u32::from_le_bytes([fixed[4], fixed[5], fixed[6], fixed[7]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(fixed[8]).ok_or(FormatError::UnknownDtype(fixed[8]))?;
    let ndim = fixed[9] as u64;
    let header_len = FIXED_HEADER + 8 * ndim;
    if total < header_len {
        return Err(truncated(header_len));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| truncated(header_len))?;
        let d = u64::from_le_bytes(b);
        count = count.checked_mul(d).ok_or(FormatError::DimOverflow)?;
        dims.push(usize::try_from(d).map_err(|_| FormatError::DimOverflow)?);
    }
    let payload = count.checked_mul(dtype.size()).ok_or(FormatError::DimOverflow)?;
    let expected = header_len.checked_add(payload).ok_or(FormatError::DimOverflow)?;
    if total < expected {
        return Err(truncated(expected));
    }
    if total > expected {
        return Err(FormatError::TrailingBytes { expected, found: total });
    }
    Ok(Header { dtype, dims, payload })
}

fn read_payload<R: Read>(r: &mut R, h: &Header, total: u64) -> Result<Vec<f64>, FormatError> {
    let mut bytes = vec![0u8; h.payload as usize];
    r.read_exact(&mut bytes).map_err(|_| FormatError::Truncated {
        expected: h.payload,
        found: total,
    })?;
    Ok(match h.dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    })
}

/// Decodes an in-memory file image.
pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let total = bytes.len() as u64;
    let mut r = bytes;
    let h = parse_header(&mut r, total)?;
    let data = read_payload(&mut r, &h, total)?;
    Ok(Tensor::new(h.dims, data).expect("validated length"))
}

fn format_error(path: &Path, kind: FormatError) -> Error {
    Error::TensorFile {
        path: path.to_path_buf(),
        kind,
    }
}

pub fn write_tensor_as(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let bytes = encode(t, dtype);
    let mut f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let total = f
        .metadata()
        .map_err(|e| Error::io(format!("inspecting {}", path.display()), e))?
        .len();
    let mut r = std::io::BufReader::new(f);
    let h = parse_header(&mut r, total).map_err(|k| format_error(path, k))?;
    let data = read_payload(&mut r, &h, total).map_err(|k| format_error(path, k))?;
    Tensor::new(h.dims, data)
}
