//! PEMB v1 binary layout.
//!
//! ```text
//! "PEMB" | version u32 | dim u32 | record_count u32
//! per record: name_len u32 | name utf-8 | label i32 | modality u8
//!             | vec_count u32 | vec_count * dim * f32
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingRecord, EmbeddingTable, Modality};
use crate::binio::{expect_end, expect_magic, read_array, read_f32, read_u32, u32_field, CountingWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PEMB";
pub const VERSION: u32 = 1;

// Upper bound on speculative allocation driven by untrusted length fields.
const PREALLOC_LIMIT: usize = 1 << 16;

pub fn write_table<W: Write>(table: &EmbeddingTable, sink: &mut W) -> Result<u64> {
    let mut out = CountingWriter::new(sink);
    out.put(MAGIC)?;
    out.put_u32(VERSION)?;
    out.put_u32(u32_field(table.dim(), "dim")?)?;
    out.put_u32(u32_field(table.len(), "record_count")?)?;
    for r in table.records() {
        out.put_u32(u32_field(r.name.len(), "name_len")?)?;
        out.put(r.name.as_bytes())?;
        out.put(&r.label.to_le_bytes())?;
        out.put(&[r.modality as u8])?;
        out.put_u32(u32_field(r.vectors.len(), "vec_count")?)?;
        for v in &r.vectors {
            for x in v {
                out.put(&x.to_le_bytes())?;
            }
        }
    }
    Ok(out.written)
}

pub fn read_table<R: Read>(source: &mut R) -> Result<EmbeddingTable> {
    expect_magic(source, MAGIC)?;
    let version = read_u32(source, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = read_u32(source, "dim")? as usize;
    let count = read_u32(source, "record_count")? as usize;
    let mut table = EmbeddingTable::new(dim)?;

    for _ in 0..count {
        let name_len = read_u32(source, "name_len")? as usize;
        let mut name = Vec::with_capacity(name_len.min(PREALLOC_LIMIT));
        source
            .by_ref()
            .take(name_len as u64)
            .read_to_end(&mut name)?;
        if name.len() != name_len {
            return Err(Error::Truncated("record name"));
        }
        let name = String::from_utf8(name).map_err(|_| Error::InvalidRecord {
            name: "<non-utf8>".into(),
            reason: "record name is not valid UTF-8".into(),
        })?;
        let label = i32::from_le_bytes(read_array(source, "label")?);
        let [modality] = read_array::<_, 1>(source, "modality")?;
        let modality = Modality::from_byte(modality).ok_or_else(|| Error::InvalidRecord {
            name: name.clone(),
            reason: format!("unknown modality byte {modality}"),
        })?;
        let vec_count = read_u32(source, "vec_count")? as usize;
        let mut vectors = Vec::with_capacity(vec_count.min(PREALLOC_LIMIT));
        for _ in 0..vec_count {
            let mut v = Vec::with_capacity(dim.min(PREALLOC_LIMIT));
            for _ in 0..dim {
                let x = read_f32(source, "vector")?;
                if !x.is_finite() {
                    return Err(Error::NonFiniteValue(name));
                }
                v.push(x);
            }
            vectors.push(v);
        }
        table.push(EmbeddingRecord::new(name, label, modality, vectors))?;
    }
    expect_end(source)?;
    Ok(table)
}

pub fn save_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<u64> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_table(table, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let mut r = BufReader::new(File::open(path)?);
    read_table(&mut r)
}
