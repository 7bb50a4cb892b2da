//! Binary matrix container used for frame features and index vectors.
//!
//! Layout: magic, format version, rows, cols as little-endian u32, then
//! rows*cols f32 values row-major. Values are stored in f32 and widened to
//! f64 on load; writers that hold f64 data therefore quantize at write time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: [u8; 4] = *b"SNDM";
const VERSION: u32 = 1;
/// Caps rows*cols; a desk corpus is orders of magnitude below this.
const MAX_ELEMS: u64 = 1 << 31;

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Dim(format!(
            "matrix file wants rank 2, got {:?}",
            t.shape()
        )));
    }
    let (rows, cols) = (t.rows(), t.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput(format!(
            "refusing to write empty matrix to {}",
            path.display()
        )));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(rows as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&(cols as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (i, &v) in t.data().iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::NonFinite(format!(
                "value at element {i} while writing {}",
                path.display()
            )));
        }
        w.write_all(&narrowed.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);

    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if head[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as u64;
    let cols = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as u64;
    if rows == 0 || cols == 0 || rows * cols > MAX_ELEMS {
        return Err(Error::format(path, format!("bad dimensions {rows}x{cols}")));
    }

    let numel = (rows * cols) as usize;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, "truncated data"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after matrix data"));
    }

    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format(path, format!("non-finite value at element {i}")));
        }
        data.push(v as f64);
    }
    Tensor::matrix(rows as usize, cols as usize, data)
}
