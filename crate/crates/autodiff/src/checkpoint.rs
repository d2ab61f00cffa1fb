//! Named-tensor container.
//!
//! Layout (little-endian): magic `MMCK`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u32`, UTF-8 name, rows `u64`, cols `u64`,
//! `rows * cols` row-major `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> AutodiffError {
    AutodiffError::Checkpoint(e.to_string())
}

pub fn write_named_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(t.rows() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(t.cols() as u64).to_le_bytes()).map_err(io_err)?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| AutodiffError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_named_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(io_err)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| AutodiffError::Checkpoint("dimension overflow".into()))?;
        let bytes = cur.take(n.checked_mul(8).ok_or_else(|| {
            AutodiffError::Checkpoint("dimension overflow".into())
        })?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(rows, cols, data)?));
    }
    if cur.pos != buf.len() {
        return Err(AutodiffError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

impl ParamStore {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        let named: Vec<_> = self.named_values().collect();
        write_named_tensors(&mut bytes, named.into_iter())?;
        std::fs::write(path, bytes).map_err(io_err)
    }

    /// Overwrites values from a checkpoint; every stored parameter must be
    /// present with a matching shape.
    pub fn load_values(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::open(path).map_err(io_err)?;
        let entries = read_named_tensors(std::io::BufReader::new(file))?;
        if entries.len() != self.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, t) in entries {
            let id = self.id(&name)?;
            if self.value(id).shape() != t.shape() {
                return Err(AutodiffError::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            *self.value_mut(id) = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_input_is_rejected() {
        let mut bytes = Vec::new();
        let t = Tensor::row(vec![1.0, 2.0]);
        write_named_tensors(&mut bytes, vec![("a", &t)].into_iter()).unwrap();
        bytes.pop();
        assert!(read_named_tensors(bytes.as_slice()).is_err());
    }

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::new(2, 2, vec![f64::MIN_POSITIVE / 4.0, -0.0, 1e300, 1.0 / 3.0]).unwrap();
        let mut bytes = Vec::new();
        write_named_tensors(&mut bytes, vec![("x.y", &t)].into_iter()).unwrap();
        let back = read_named_tensors(bytes.as_slice()).unwrap();
        assert_eq!(back[0].0, "x.y");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&t));
    }
}
