//! PVIG checkpoints: `"PVIG" | version u32 | dim u32 | hidden u32 | layers u32
//! | classes u32 | parameters`, parameters as `f32` little-endian in the
//! order of [`ViGModel::param_slices`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ViGModel;
use crate::binio::{expect_end, expect_magic, read_f32, read_u32, u32_field, CountingWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVIG";
pub const VERSION: u32 = 1;

const MAX_WIDTH: usize = 1 << 14;

pub fn write_vig<W: Write>(model: &ViGModel, sink: &mut W) -> Result<u64> {
    let mut out = CountingWriter::new(sink);
    out.put(MAGIC)?;
    out.put_u32(VERSION)?;
    out.put_u32(u32_field(model.dim(), "dim")?)?;
    out.put_u32(u32_field(model.hidden(), "hidden")?)?;
    out.put_u32(u32_field(model.num_layers(), "layers")?)?;
    out.put_u32(u32_field(model.num_classes(), "classes")?)?;
    for s in model.param_slices() {
        out.put_f32s(s.iter().copied())?;
    }
    Ok(out.written)
}

pub fn read_vig<R: Read>(source: &mut R) -> Result<ViGModel> {
    expect_magic(source, MAGIC)?;
    let version = read_u32(source, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = read_u32(source, "dim")? as usize;
    let hidden = read_u32(source, "hidden")? as usize;
    let layers = read_u32(source, "layers")? as usize;
    let classes = read_u32(source, "classes")? as usize;
    if dim == 0 || layers == 0 || classes == 0 || hidden == 0 {
        return Err(Error::Invalid("ViG checkpoint has an empty shape".into()));
    }
    if [dim, hidden, layers, classes].iter().any(|&x| x > MAX_WIDTH) {
        return Err(Error::Invalid("ViG checkpoint shape is implausibly large".into()));
    }
    let mut model = ViGModel::zeros(dim, hidden, layers, classes);
    for s in model.param_slices_mut() {
        for x in s.iter_mut() {
            let v = read_f32(source, "parameters")?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue("ViG parameters".into()));
            }
            *x = f64::from(v);
        }
    }
    expect_end(source)?;
    Ok(model)
}

pub fn save_vig(model: &ViGModel, path: impl AsRef<Path>) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_vig(model, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_vig(path: impl AsRef<Path>) -> Result<ViGModel> {
    read_vig(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let model = ViGModel::init(3, 5, 2, 4, 9).unwrap();
        let mut buf = Vec::new();
        let n = write_vig(&model, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        assert_eq!(buf.len(), 24 + 4 * model.flat_params().len());
        let back = read_vig(&mut buf.as_slice()).unwrap();
        assert_eq!(back.dim(), 3);
        assert_eq!(back.hidden(), 5);
        for (a, b) in model.flat_params().iter().zip(back.flat_params()) {
            assert_eq!(*a as f32, b as f32);
        }
        let mut again = Vec::new();
        write_vig(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let mut buf = Vec::new();
        write_vig(&ViGModel::zeros(2, 2, 1, 2), &mut buf).unwrap();
        assert!(matches!(read_vig(&mut &buf[..buf.len() - 3]), Err(Error::Truncated(_))));
        buf.push(1);
        assert!(matches!(read_vig(&mut buf.as_slice()), Err(Error::TrailingBytes)));
    }
}
