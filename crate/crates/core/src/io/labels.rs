//! Label maps on disk: PGM for up to 255 categories, `SEDL` beyond that.
//!
//! In PGM files the byte 255 stands for the ignore label, so category
//! indices must stay below 255.

use std::io::{Read, Write};
use std::path::Path;

use super::pnm::{decode_pgm, encode_pgm, with_path, GrayImage};
use super::{create, expect_eof, open, read_u16, read_u32, to_u32, write_u32};
use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

pub const SEDL_MAGIC: &[u8; 4] = b"SEDL";
const PGM_IGNORE: u8 = 255;

/// Row-major `H × W` category indices; [`IGNORE_LABEL`] marks unlabelled
/// pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<u16>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::mismatch("label map length", height * width, values.len()));
        }
        Ok(Self { height, width, values })
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut values = Vec::with_capacity(h * w);
        for y in top..top + h {
            let row = y * self.width + left;
            values.extend_from_slice(&self.values[row..row + w]);
        }
        Self { height: h, width: w, values }
    }

    /// Largest non-ignore value, if any.
    pub fn max_label(&self) -> Option<u16> {
        self.values.iter().copied().filter(|&v| v != IGNORE_LABEL).max()
    }

    pub fn to_pgm(&self) -> Result<GrayImage> {
        let data = self
            .values
            .iter()
            .map(|&v| match v {
                IGNORE_LABEL => Ok(PGM_IGNORE),
                v if v < PGM_IGNORE as u16 => Ok(v as u8),
                v => Err(Error::Format(format!("label {v} does not fit in a PGM label map"))),
            })
            .collect::<Result<_>>()?;
        Ok(GrayImage { width: self.width, height: self.height, data })
    }

    pub fn from_pgm(img: &GrayImage) -> Self {
        let values = img.data.iter().map(|&v| if v == PGM_IGNORE { IGNORE_LABEL } else { v as u16 }).collect();
        Self { height: img.height, width: img.width, values }
    }
}

pub fn encode_sedl(w: &mut impl Write, map: &LabelMap) -> Result<()> {
    w.write_all(SEDL_MAGIC)?;
    write_u32(w, to_u32("height", map.height)?)?;
    write_u32(w, to_u32("width", map.width)?)?;
    for v in &map.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Decodes `SEDL` after the magic has been consumed.
fn decode_sedl_body(r: &mut impl Read) -> Result<LabelMap> {
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let values = (0..height * width).map(|_| read_u16(r)).collect::<Result<_>>()?;
    expect_eof(r)?;
    LabelMap::new(height, width, values)
}

/// Reads either format, chosen by the leading bytes.
pub fn decode_labels(r: &mut impl Read) -> Result<LabelMap> {
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    match &head {
        b"P5" => {
            let mut chained = (&head[..]).chain(r);
            Ok(LabelMap::from_pgm(&decode_pgm(&mut chained)?))
        }
        b"SE" => {
            let mut rest = [0u8; 2];
            r.read_exact(&mut rest)?;
            if &rest != b"DL" {
                return Err(Error::Format("unknown label file magic".into()));
            }
            decode_sedl_body(r)
        }
        _ => Err(Error::Format("label file is neither P5 nor SEDL".into())),
    }
}

/// PGM when every label fits in a byte and `num_categories ≤ 255`, else `SEDL`.
pub fn encode_labels(w: &mut impl Write, map: &LabelMap, num_categories: usize) -> Result<()> {
    if num_categories <= PGM_IGNORE as usize {
        encode_pgm(w, &map.to_pgm()?)
    } else {
        encode_sedl(w, map)
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&mut open(path)?).map_err(|e| with_path(path, e))
}

pub fn write_labels(path: &Path, map: &LabelMap, num_categories: usize) -> Result<()> {
    let mut w = create(path)?;
    encode_labels(&mut w, map, num_categories)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_maps_ignore_both_ways() {
        let map = LabelMap::new(1, 3, vec![0, IGNORE_LABEL, 254]).unwrap();
        let mut buf = Vec::new();
        encode_labels(&mut buf, &map, 255).unwrap();
        assert!(buf.starts_with(b"P5"));
        assert_eq!(decode_labels(&mut &buf[..]).unwrap(), map);
    }

    #[test]
    fn large_vocabularies_use_sedl() {
        let map = LabelMap::new(2, 2, vec![0, 846, IGNORE_LABEL, 300]).unwrap();
        let mut buf = Vec::new();
        encode_labels(&mut buf, &map, 847).unwrap();
        assert!(buf.starts_with(SEDL_MAGIC));
        assert_eq!(buf.len(), 4 + 8 + 8);
        assert_eq!(decode_labels(&mut &buf[..]).unwrap(), map);
    }

    #[test]
    fn pgm_rejects_wide_labels() {
        let map = LabelMap::new(1, 1, vec![300]).unwrap();
        assert!(encode_labels(&mut Vec::new(), &map, 10).is_err());
    }
}
