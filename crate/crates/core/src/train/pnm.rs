//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 3 for PPM, 1 for PGM.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

fn encode(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Data(format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
    }
    Ok(encode("P6", width, height, rgb))
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::Data(format!("{} bytes for a {width}x{height} gray image", gray.len())));
    }
    Ok(encode("P5", width, height, gray))
}

/// Reads header tokens, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data("truncated image header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos)?.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Data(format!("unsupported image magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        next_token(bytes, &mut pos)?
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("bad {what} in image header")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Data(format!("only 8-bit images are supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width * height * channels;
    let data = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Data("image raster is truncated".into()))?
        .to_vec();
    Ok(PnmImage {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)?)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)?)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    decode_pnm(&fs::read(path)?)
}
