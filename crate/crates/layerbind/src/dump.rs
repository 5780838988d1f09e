//! Binary tensor dump format.
//!
//! ```text
//! offset  size          field
//! 0       4             magic "LBND"
//! 4       2             version, u16 LE (= 1)
//! 6       1             dtype code (1 = f32 little-endian)
//! 7       1             ndim
//! 8       4 * ndim      dims, u32 LE each
//! ...     4 * prod(dim) payload, f32 LE, row-major
//! ```
//!
//! Writes go through a temp file plus rename so partially written dumps
//! never appear under the target name.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LBND";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// Serializes dims + payload into the dump byte layout.
pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "{} values for dims {:?} (need {expected})",
            data.len(),
            dims
        )));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::Shape("too many dimensions".into()));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a dump byte buffer back into dims + payload.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the fixed header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype code {}",
            bytes[6]
        )));
    }
    let ndim = bytes[7] as usize;
    let dims_end = 8 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated dimension list".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        dims.push(
            u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize,
        );
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload holds {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            4 * count
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok((dims, data))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_tensor(dims, data)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

/// f32 export of an f64 token matrix as `[grid_h, grid_w, channels]`.
pub fn latent_to_dump(
    tokens: &Array2<f64>,
    grid_h: usize,
    grid_w: usize,
) -> (Vec<usize>, Vec<f32>) {
    let dims = vec![grid_h, grid_w, tokens.ncols()];
    let data = tokens.iter().map(|v| *v as f32).collect();
    (dims, data)
}

/// f32 export of a 2-D matrix.
pub fn matrix_to_dump(values: &Array2<f64>) -> (Vec<usize>, Vec<f32>) {
    let (h, w) = values.dim();
    (vec![h, w], values.iter().map(|v| *v as f32).collect())
}
