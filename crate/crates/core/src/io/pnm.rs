//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use super::{create, open};
use crate::error::{Error, Result};

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::mismatch("RGB buffer length", width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copy of the `h × w` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Self { width: w, height: h, data }
    }
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
}

fn header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)?;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        *f = token(r)?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {}", fields[2])));
    }
    Ok(Header { magic, width: fields[0], height: fields[1] })
}

/// Next decimal header token; consumes exactly one trailing whitespace byte.
fn token(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 1];
    loop {
        r.read_exact(&mut b)?;
        match b[0] {
            b'#' => {
                while b[0] != b'\n' {
                    r.read_exact(&mut b)?;
                }
            }
            c if c.is_ascii_whitespace() => {}
            c if c.is_ascii_digit() => break,
            c => return Err(Error::Format(format!("unexpected byte {c:#04x} in PNM header"))),
        }
    }
    let mut v = 0usize;
    while b[0].is_ascii_digit() {
        v = v.checked_mul(10).and_then(|v| v.checked_add((b[0] - b'0') as usize)).ok_or_else(|| Error::Format("PNM header value overflows".into()))?;
        r.read_exact(&mut b)?;
    }
    if !b[0].is_ascii_whitespace() {
        return Err(Error::Format("PNM header token not followed by whitespace".into()));
    }
    Ok(v)
}

fn read_body(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    Ok(data)
}

pub fn decode_ppm(r: &mut impl Read) -> Result<RgbImage> {
    let h = header(r)?;
    if &h.magic != b"P6" {
        return Err(Error::Format(format!("expected P6, found {:?}", String::from_utf8_lossy(&h.magic))));
    }
    let data = read_body(r, h.width * h.height * 3)?;
    RgbImage::new(h.width, h.height, data)
}

pub fn decode_pgm(r: &mut impl Read) -> Result<GrayImage> {
    let h = header(r)?;
    if &h.magic != b"P5" {
        return Err(Error::Format(format!("expected P5, found {:?}", String::from_utf8_lossy(&h.magic))));
    }
    let data = read_body(r, h.width * h.height)?;
    Ok(GrayImage { width: h.width, height: h.height, data })
}

pub fn encode_ppm(w: &mut impl Write, img: &RgbImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn encode_pgm(w: &mut impl Write, img: &GrayImage) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&mut open(path)?).map_err(|e| with_path(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut w = create(path)?;
    encode_ppm(&mut w, img)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&mut open(path)?).map_err(|e| with_path(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut w = create(path)?;
    encode_pgm(&mut w, img)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Stream(source) => Error::io(path, source),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        e => e,
    }
}
