//! Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::DataError;

pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Row-major, interleaved channels.
    pub data: Vec<u8>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;

    let mut next_token = |bytes: &[u8]| -> Result<String, DataError> {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(path, format!("unsupported magic {other:?}"))),
    };
    let parse = |tok: String| -> Result<usize, DataError> {
        tok.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad header field {tok:?}")))
    };
    let width = parse(next_token(&bytes)?)?;
    let height = parse(next_token(&bytes)?)?;
    let maxval = parse(next_token(&bytes)?)?;
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster separator"));
    }
    pos += 1;
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(format_err(
            path,
            format!("raster truncated: need {expected} bytes, have {}", bytes.len() - pos),
        ));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data: bytes[pos..pos + expected].to_vec(),
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), DataError> {
    assert_eq!(data.len(), width * height);
    write_raster(path, "P5", width, height, data)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), DataError> {
    assert_eq!(data.len(), width * height * 3);
    write_raster(path, "P6", width, height, data)
}

fn write_raster(
    path: &Path,
    magic: &str,
    width: usize,
    height: usize,
    data: &[u8],
) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(data.len() + 32);
    write!(out, "{magic}\n{width} {height}\n255\n").expect("in-memory write");
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| io_err(path, e))
}
