//! HTF, the binary tensor interchange format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4   magic "HTF1"
//! byte  4      dtype tag (0 = f64; the only defined tag)
//! byte  5      ndim (0..=4)
//! next 4*ndim  dims as u32
//! rest         row-major f64 payload
//! ```
//!
//! Rasters, logits, and checkpoint parameters all travel through this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HTF1";
const DTYPE_F64: u8 = 0;
const MAX_NDIM: u8 = 4;

#[derive(Debug, Error)]
pub enum HtfError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not an HTF file)")]
    BadMagic { path: String },
    #[error("{path}: unsupported dtype tag {tag}")]
    BadDtype { path: String, tag: u8 },
    #[error("{path}: invalid ndim {ndim} (max {MAX_NDIM})")]
    BadNdim { path: String, ndim: u8 },
    #[error("{path}: payload length {got} does not match dims {dims:?}")]
    BadPayload { path: String, got: usize, dims: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, HtfError>;

fn io_err(path: &Path, source: std::io::Error) -> HtfError {
    HtfError::Io { path: path.display().to_string(), source }
}

/// Write a shaped f64 buffer.
pub fn write(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    assert_eq!(data.len(), numel, "data/shape disagree");
    assert!(shape.len() <= MAX_NDIM as usize, "rank above {MAX_NDIM}");
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(MAGIC)?;
    emit(&[DTYPE_F64, shape.len() as u8])?;
    for &d in shape {
        emit(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Write a tensor's values.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &t.data(), &t.shape())
}

/// Read a file into a flat buffer plus shape.
pub fn read(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let disp = || path.display().to_string();

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(HtfError::BadMagic { path: disp() });
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(|e| io_err(path, e))?;
    let (dtype, ndim) = (head[0], head[1]);
    if dtype != DTYPE_F64 {
        return Err(HtfError::BadDtype { path: disp(), tag: dtype });
    }
    if ndim > MAX_NDIM {
        return Err(HtfError::BadNdim { path: disp(), ndim });
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| io_err(path, e))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != numel * 8 {
        return Err(HtfError::BadPayload { path: disp(), got: payload.len() / 8, dims });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((data, dims))
}

/// Read a file as a constant tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (data, dims) = read(path)?;
    Ok(Tensor::from_vec(data, &dims).expect("payload validated against dims"))
}
