//! Flat binary tensor format: `"CSSF"`, version `u16`, rank `u16`, dims as
//! `u64`, then the values as `f64`. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CSSF";
pub const VERSION: u16 = 1;

pub fn write_tensor<S: Scalar, W: Write>(t: &Tensor<S>, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor_file<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(t, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a, R> {
    inner: R,
    offset: u64,
    name: &'a Path,
}

impl<R: Read> Cursor<'_, R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        file: self.name.to_path_buf(),
                        offset: self.offset + filled as u64,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(self.name, e)),
            }
        }
        self.offset += N as u64;
        Ok(buf)
    }
}

/// Reads one tensor; `name` labels errors (truncation reports the byte offset).
pub fn read_tensor<S: Scalar, R: Read>(r: R, name: &Path) -> Result<Tensor<S>> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
        name,
    };
    let magic = c.take::<4>()?;
    if &magic != MAGIC {
        return Err(Error::data(name, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(c.take()?);
    if version != VERSION {
        return Err(Error::data(name, format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes(c.take()?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(c.take()?);
        if d == 0 || d > (1 << 40) {
            return Err(Error::data(name, format!("implausible dimension {d}")));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(S::of(f64::from_le_bytes(c.take()?)));
    }
    Tensor::new(shape, data).map_err(|e| Error::data(name, e.to_string()))
}

pub fn read_tensor_file<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f64>::from_f64(vec![2], &[1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CSSF");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[1, 0]);
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.truncate(30);
        let err = read_tensor::<f64, _>(&buf[..], Path::new("x.cssf")).unwrap_err();
        match err {
            Error::Truncated { offset, .. } => assert_eq!(offset, 30),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_tensor::<f64, _>(&b"NOPE\x01\x00\x00\x00"[..], Path::new("y")).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
    }
}
