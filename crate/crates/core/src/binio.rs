//! Little-endian primitives shared by the binary file formats.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_array<R: Read, const N: usize>(source: &mut R, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(source, &mut buf, what)?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(source: &mut R, what: &'static str) -> Result<u32> {
    read_array(source, what).map(u32::from_le_bytes)
}

pub(crate) fn read_f32<R: Read>(source: &mut R, what: &'static str) -> Result<f32> {
    read_array(source, what).map(f32::from_le_bytes)
}

pub(crate) fn expect_magic<R: Read>(source: &mut R, magic: &[u8; 4]) -> Result<()> {
    let found: [u8; 4] = read_array(source, "magic")?;
    if &found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn expect_end<R: Read>(source: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    loop {
        match source.read(&mut probe) {
            Ok(0) => return Ok(()),
            Ok(_) => return Err(Error::TrailingBytes),
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

pub(crate) fn u32_field(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} {n} does not fit in u32")))
}

/// Counts the bytes pushed through it.
pub(crate) struct CountingWriter<'a, W: Write> {
    inner: &'a mut W,
    pub written: u64,
}

impl<'a, W: Write> CountingWriter<'a, W> {
    pub fn new(inner: &'a mut W) -> Self {
        Self { inner, written: 0 }
    }

    pub fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    pub fn put_u32(&mut self, x: u32) -> Result<()> {
        self.put(&x.to_le_bytes())
    }

    pub fn put_f32s(&mut self, xs: impl IntoIterator<Item = f64>) -> Result<()> {
        for x in xs {
            self.put(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }
}
