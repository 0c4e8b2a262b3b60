//! Little-endian binary framing shared by dataset and checkpoint files.

use std::io::Write;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).unwrap();
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).unwrap();
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).unwrap();
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn matrix(&mut self, m: &Array2<f64>) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for &v in m.iter() {
            self.f64(v);
        }
    }

    pub fn finish(self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic bytes and version, positioning after the header.
    pub fn open(data: &'a [u8], magic: &[u8; 8], version: u32) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let m = r.take(8)?;
        if m != magic {
            return Err(Error::Format { offset: 0, message: "bad magic bytes".into() });
        }
        let found = r.u32()?;
        if found != version {
            return Err(Error::UnsupportedVersion { found, expected: version });
        }
        Ok(r)
    }

    pub fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of file: needed {n} bytes, {} remain",
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format { offset: at as u64, message: "invalid utf-8 string".into() })
    }

    pub fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.data.len() - self.pos)
            .ok_or_else(|| self.err(format!("matrix of {rows}x{cols} exceeds remaining payload")))?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl Writer {
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}
