//! PADP adapter checkpoints: `"PADP" | version u32 | dim u32 | W_text | W_image`,
//! each matrix `dim * dim` row-major `f32` little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::AdapterState;
use crate::binio::{expect_end, expect_magic, read_f32, read_u32, u32_field, CountingWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PADP";
pub const VERSION: u32 = 1;

pub fn write_adapters<W: Write>(state: &AdapterState, sink: &mut W) -> Result<u64> {
    let mut out = CountingWriter::new(sink);
    out.put(MAGIC)?;
    out.put_u32(VERSION)?;
    out.put_u32(u32_field(state.dim(), "dim")?)?;
    out.put_f32s(state.w_text.iter().copied())?;
    out.put_f32s(state.w_image.iter().copied())?;
    Ok(out.written)
}

pub fn read_adapters<R: Read>(source: &mut R) -> Result<AdapterState> {
    expect_magic(source, MAGIC)?;
    let version = read_u32(source, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = read_u32(source, "dim")? as usize;
    if dim == 0 {
        return Err(Error::Invalid("adapter dimension must be positive".into()));
    }
    let mut matrix = || -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(dim.saturating_mul(dim).min(1 << 20));
        for _ in 0..dim * dim {
            let x = read_f32(source, "adapter matrix")?;
            if !x.is_finite() {
                return Err(Error::NonFiniteValue("adapter matrix".into()));
            }
            data.push(f64::from(x));
        }
        Ok(Array2::from_shape_vec((dim, dim), data).expect("square shape"))
    };
    let w_text = matrix()?;
    let w_image = matrix()?;
    expect_end(source)?;
    Ok(AdapterState { w_text, w_image })
}

pub fn save_adapters(state: &AdapterState, path: impl AsRef<Path>) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_adapters(state, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<AdapterState> {
    read_adapters(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let state = AdapterState::perturbed_identity(3, 0.1, 4);
        let mut buf = Vec::new();
        let n = write_adapters(&state, &mut buf).unwrap();
        assert_eq!(n as usize, 12 + 2 * 9 * 4);
        let back = read_adapters(&mut buf.as_slice()).unwrap();
        for (a, b) in state.w_text.iter().zip(back.w_text.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let mut again = Vec::new();
        write_adapters(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut buf = Vec::new();
        write_adapters(&AdapterState::identity(2), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Q';
        assert!(matches!(read_adapters(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(read_adapters(&mut &cut[..]), Err(Error::Truncated(_))));
    }
}
