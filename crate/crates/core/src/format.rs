//! Little-endian float32 containers sharing one 16-byte header layout:
//! 4-byte magic, `u32` version, two `u32` dimensions, then the payload.
//!
//! | magic  | dims           | payload                                 |
//! |--------|----------------|-----------------------------------------|
//! | `FMAP` | L, T           | L·L·T values, (row, col, channel) order |
//! | `FBLB` | rows, cols     | rows·cols values, row-major             |
//! | `HMAP` | width, height  | width·height values, row-major          |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const BLOB_MAGIC: [u8; 4] = *b"FBLB";
pub const HEAT_MAGIC: [u8; 4] = *b"HMAP";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 4],
    pub version: u32,
    pub dim0: u32,
    pub dim1: u32,
}

impl Header {
    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.magic);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.dim0.to_le_bytes());
        out[12..16].copy_from_slice(&self.dim1.to_le_bytes());
        out
    }

    fn parse(bytes: &[u8; HEADER_LEN]) -> Self {
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Header {
            magic: bytes[0..4].try_into().unwrap(),
            version: word(4),
            dim0: word(8),
            dim1: word(12),
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

fn write_container<W: Write>(
    mut out: W,
    magic: [u8; 4],
    dim0: usize,
    dim1: usize,
    values: &[f64],
) -> Result<()> {
    let header = Header {
        magic,
        version: FORMAT_VERSION,
        dim0: to_u32(dim0, "dimension")?,
        dim1: to_u32(dim1, "dimension")?,
    };
    out.write_all(&header.to_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn read_container<R: Read>(
    mut input: R,
    magic: [u8; 4],
    kind: &'static str,
    count: impl Fn(usize, usize) -> Option<usize>,
) -> Result<(Header, Vec<f64>)> {
    let mut head = [0u8; HEADER_LEN];
    input
        .read_exact(&mut head)
        .map_err(|e| Error::format(kind, format!("short header: {e}")))?;
    let header = Header::parse(&head);
    if header.magic != magic {
        return Err(Error::format(
            kind,
            format!("bad magic {:?}", String::from_utf8_lossy(&header.magic)),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            kind,
            format!("unsupported version {}", header.version),
        ));
    }
    let n = count(header.dim0 as usize, header.dim1 as usize)
        .ok_or_else(|| Error::format(kind, "dimensions overflow"))?;
    let mut payload = vec![0u8; n * 4];
    input
        .read_exact(&mut payload)
        .map_err(|e| Error::format(kind, format!("truncated payload: {e}")))?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::format(kind, "trailing bytes after payload"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((header, values))
}

/// Serializes a feature map as FMAP1. Values are narrowed to `f32`.
pub fn write_fmap<W: Write>(out: W, map: &FeatureMap) -> Result<()> {
    write_container(out, FMAP_MAGIC, map.grid_size(), map.channels(), map.values())
}

pub fn read_fmap<R: Read>(input: R) -> Result<FeatureMap> {
    let (header, values) = read_container(input, FMAP_MAGIC, "FMAP1", |l, t| {
        l.checked_mul(l)?.checked_mul(t)
    })?;
    FeatureMap::new(header.dim0 as usize, header.dim1 as usize, values)
}

pub fn fmap_to_bytes(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.values().len() * 4);
    write_fmap(&mut out, map).expect("writing to a Vec cannot fail");
    out
}

pub fn fmap_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    read_fmap(bytes)
}

pub fn save_fmap(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    write_fmap(BufWriter::new(File::create(path)?), map)
}

pub fn load_fmap(path: impl AsRef<Path>) -> Result<FeatureMap> {
    read_fmap(BufReader::new(File::open(path)?))
}

/// Row-major float32 matrix blob.
pub fn write_blob<W: Write>(out: W, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{rows}x{cols}"),
            actual: format!("{} values", values.len()),
        });
    }
    write_container(out, BLOB_MAGIC, rows, cols, values)
}

pub fn read_blob<R: Read>(input: R) -> Result<(usize, usize, Vec<f64>)> {
    let (header, values) =
        read_container(input, BLOB_MAGIC, "FBLB", |r, c| r.checked_mul(c))?;
    Ok((header.dim0 as usize, header.dim1 as usize, values))
}

pub fn write_heat<W: Write>(out: W, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_container(out, HEAT_MAGIC, width, height, values)
}

pub fn read_heat<R: Read>(input: R) -> Result<(usize, usize, Vec<f64>)> {
    let (header, values) =
        read_container(input, HEAT_MAGIC, "HMAP1", |w, h| w.checked_mul(h))?;
    Ok((header.dim0 as usize, header.dim1 as usize, values))
}
