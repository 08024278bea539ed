//! TCK streamline container: a `key: value` text header terminated by `END`,
//! then little-endian `f32` triplets with a NaN triplet after every
//! streamline and an infinite triplet at the end.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, Point3, Streamline, Tractogram};

const MAGIC: &str = "mrtrix tracks";

#[derive(Debug, Error)]
pub enum TckError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a TCK file: first line must be `{MAGIC}`")]
    BadMagic,
    #[error("header has no END line (scanned to byte {offset})")]
    MissingEnd { offset: usize },
    #[error("malformed header line at byte {offset}: {line:?}")]
    BadHeaderLine { offset: usize, line: String },
    #[error("unsupported datatype `{value}` at byte {offset}, only Float32LE is supported")]
    UnsupportedDatatype { value: String, offset: usize },
    #[error("header field `{0}` is missing")]
    MissingField(&'static str),
    #[error("bad data offset `{value}` at byte {offset}")]
    BadOffset { value: String, offset: usize },
    #[error("float stream truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("float stream ends at byte {offset} without an Inf terminator")]
    MissingTerminator { offset: usize },
    #[error("invalid streamline ending at byte {offset}: {source}")]
    Streamline {
        offset: usize,
        source: GeometryError,
    },
    #[error("coordinate does not fit in f32: {0}")]
    NotRepresentable(f64),
}

struct Header {
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, TckError> {
    let mut pos = 0;
    let mut first = true;
    let mut datatype = None;
    let mut data_offset = None;
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(TckError::MissingEnd {
                offset: bytes.len(),
            });
        };
        let raw = String::from_utf8_lossy(&bytes[pos..pos + nl]);
        let line = raw.trim_end_matches('\r');
        let line_start = pos;
        pos += nl + 1;
        if first {
            if line.trim() != MAGIC {
                return Err(TckError::BadMagic);
            }
            first = false;
            continue;
        }
        if line.trim() == "END" {
            break;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(TckError::BadHeaderLine {
                offset: line_start,
                line: line.to_string(),
            });
        };
        let value = value.trim();
        match key.trim() {
            "datatype" => {
                if value != "Float32LE" {
                    return Err(TckError::UnsupportedDatatype {
                        value: value.to_string(),
                        offset: line_start,
                    });
                }
                datatype = Some(());
            }
            "file" => {
                let parsed = value
                    .strip_prefix('.')
                    .map(str::trim)
                    .and_then(|v| v.parse::<usize>().ok());
                match parsed {
                    Some(o) => data_offset = Some(o),
                    None => {
                        return Err(TckError::BadOffset {
                            value: value.to_string(),
                            offset: line_start,
                        })
                    }
                }
            }
            _ => {}
        }
    }
    datatype.ok_or(TckError::MissingField("datatype"))?;
    let data_offset = data_offset.ok_or(TckError::MissingField("file"))?;
    if data_offset < pos || data_offset > bytes.len() {
        return Err(TckError::BadOffset {
            value: data_offset.to_string(),
            offset: pos,
        });
    }
    Ok(Header { data_offset })
}

/// Parses a complete TCK file image.
pub fn parse_tck(bytes: &[u8]) -> Result<Tractogram, TckError> {
    let header = parse_header(bytes)?;
    let mut pos = header.data_offset;
    let mut streamlines = Vec::new();
    let mut current = Vec::new();
    loop {
        if pos == bytes.len() {
            return Err(TckError::MissingTerminator { offset: pos });
        }
        if pos + 12 > bytes.len() {
            return Err(TckError::Truncated { offset: pos });
        }
        let f =
            |k: usize| f32::from_le_bytes(bytes[pos + 4 * k..pos + 4 * k + 4].try_into().unwrap());
        let (x, y, z) = (f(0), f(1), f(2));
        pos += 12;
        if x.is_infinite() && y.is_infinite() && z.is_infinite() {
            if !current.is_empty() {
                streamlines.push(finish(&mut current, pos)?);
            }
            break;
        }
        if x.is_nan() && y.is_nan() && z.is_nan() {
            streamlines.push(finish(&mut current, pos)?);
            continue;
        }
        current.push(Point3::new(x as f64, y as f64, z as f64));
    }
    Ok(Tractogram::new(streamlines))
}

fn finish(points: &mut Vec<Point3>, offset: usize) -> Result<Streamline, TckError> {
    Streamline::new(std::mem::take(points))
        .map_err(|source| TckError::Streamline { offset, source })
}

pub fn read_tck(path: impl AsRef<Path>) -> Result<Tractogram, TckError> {
    parse_tck(&std::fs::read(path)?)
}

/// Serializes `t` as a TCK image. Coordinates are stored as `f32`.
pub fn encode_tck(t: &Tractogram) -> Result<Vec<u8>, TckError> {
    let head = format!("{MAGIC}\ndatatype: Float32LE\ncount: {}\n", t.len());
    // The offset is part of the header, so iterate until its width settles.
    let mut offset = head.len();
    let header = loop {
        let candidate = format!("{head}file: . {offset}\nEND\n");
        if candidate.len() == offset {
            break candidate;
        }
        offset = candidate.len();
    };
    let total_points: usize = t.streamlines().iter().map(Streamline::len).sum();
    let mut out = Vec::with_capacity(header.len() + 12 * (total_points + t.len() + 1));
    out.extend_from_slice(header.as_bytes());
    let mut push = |v: [f32; 3]| {
        for c in v {
            out.extend_from_slice(&c.to_le_bytes());
        }
    };
    for s in t.streamlines() {
        for p in s.points() {
            let mut v = [0f32; 3];
            for (dst, src) in v.iter_mut().zip(p.to_array()) {
                let c = src as f32;
                if !c.is_finite() {
                    return Err(TckError::NotRepresentable(src));
                }
                *dst = c;
            }
            push(v);
        }
        push([f32::NAN; 3]);
    }
    push([f32::INFINITY; 3]);
    Ok(out)
}

pub fn write_tck(t: &Tractogram, path: impl AsRef<Path>) -> Result<(), TckError> {
    let bytes = encode_tck(t)?;
    super::write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}
