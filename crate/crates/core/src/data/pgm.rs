use std::fs;
use std::path::Path;

use super::{Provenance, RenderedImage, PIXELS, SIDE};
use crate::error::{Error, Result};

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

fn header(width: usize, height: usize) -> Vec<u8> {
    format!("P5\n{width} {height}\n255\n").into_bytes()
}

/// Binary PGM (P5, maxval 255); `[-1, 1]` maps linearly onto `[0, 255]`.
pub fn to_pgm_bytes(image: &RenderedImage) -> Vec<u8> {
    let mut out = header(SIDE, SIDE);
    out.extend(image.pixels().iter().map(|&v| to_byte(v)));
    out
}

/// Images tiled left to right, `cols` per row, separated by a one-pixel
/// black gutter.
pub fn grid_to_pgm_bytes(images: &[RenderedImage], cols: usize) -> Result<Vec<u8>> {
    if images.is_empty() || cols == 0 {
        return Err(Error::invalid("image grid needs at least one image and one column"));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * (SIDE + 1) - 1, rows * (SIDE + 1) - 1);
    let mut body = vec![0u8; w * h];
    for (k, img) in images.iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for r in 0..SIDE {
            for c in 0..SIDE {
                body[(gr * (SIDE + 1) + r) * w + gc * (SIDE + 1) + c] = to_byte(img.at(r, c));
            }
        }
    }
    let mut out = header(w, h);
    out.extend(body);
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &RenderedImage) -> Result<()> {
    fs::write(path, to_pgm_bytes(image)).map_err(|e| Error::io(path, e))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PGM header field {:?}", String::from_utf8_lossy(tok))))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<RenderedImage> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let w = header_number(bytes, &mut pos)?;
    let h = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if w != SIDE || h != SIDE || maxval != 255 {
        return Err(Error::Format(format!(
            "expected {SIDE}x{SIDE} maxval 255, found {w}x{h} maxval {maxval}"
        )));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + PIXELS)
        .ok_or_else(|| Error::Format("truncated PGM body".into()))?;
    RenderedImage::new(body.iter().map(|&b| from_byte(b)).collect(), Provenance::Reference)
}

pub fn read_pgm(path: &Path) -> Result<RenderedImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}
