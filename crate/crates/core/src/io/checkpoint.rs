//! `SEDC` checkpoints: a flat list of named f32 arrays.
//!
//! Layout: magic, version u32, count u32, then per record a u16 name length,
//! the UTF-8 name, a u8 rank, `rank` u32 extents and the f32 values.

use std::io::{Read, Write};
use std::path::Path;

use super::pnm::with_path;
use super::{create, expect_eof, expect_magic, open, read_f32s, read_u16, read_u32, read_u8, to_u32, write_f32s, write_u32};
use crate::error::{Error, Result};
use crate::params::Record;

pub const MAGIC: &[u8; 4] = b"SEDC";
pub const VERSION: u32 = 1;

pub fn encode(w: &mut impl Write, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, to_u32("record count", records.len())?)?;
    for rec in records {
        let name = rec.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{}` is too long", rec.name)))?;
        let rank = u8::try_from(rec.shape.len()).map_err(|_| Error::Format(format!("rank of `{}` is too large", rec.name)))?;
        if rec.values.len() != rec.shape.iter().product::<usize>() {
            return Err(Error::mismatch(format!("values of `{}`", rec.name), rec.shape.iter().product::<usize>(), rec.values.len()));
        }
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &e in &rec.shape {
            write_u32(w, to_u32("extent", e)?)?;
        }
        write_f32s(w, rec.values.iter().copied())?;
    }
    Ok(())
}

pub fn decode(r: &mut impl Read) -> Result<Vec<Record>> {
    expect_magic(r, MAGIC)?;
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::mismatch("checkpoint version", VERSION, version));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u16(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u8(r)? as usize;
        let shape = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let values = read_f32s(r, shape.iter().product())?;
        records.push(Record { name, shape, values });
    }
    expect_eof(r)?;
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = create(path)?;
    encode(&mut w, records).map_err(|e| with_path(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    decode(&mut open(path)?).map_err(|e| with_path(path, e))
}
