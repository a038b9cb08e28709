//! Binary greyscale PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses a `P5` file into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P5".as_slice()) {
        return Err("magic: expected P5".into());
    }
    pos += 2;
    let mut field = |name: &str| -> std::result::Result<usize, String> {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("{name}: expected a positive integer at byte {start}"))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval: only 255 is supported, got {maxval}"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("maxval: must be followed by a single whitespace byte".into()),
    }
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format!(
            "payload: truncated, expected {need} bytes, found {}",
            payload.len()
        ));
    }
    Ok((width, height, payload[..need].to_vec()))
}

/// Reads a PGM into a `(1, H, W)` tensor with values `byte / 255`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode_pgm(&bytes).map_err(|m| Error::parse(path, m))?;
    Tensor::new(&[1, h, w], px.into_iter().map(|b| b as f64 / 255.0).collect())
}

/// Encodes a `(1, H, W)` or `(H, W)` tensor with values in `[0, 1]`.
/// Bytes are `round(255 * v)` with halves rounded up.
pub fn encode_pgm(pixels: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match pixels.dims() {
        &[1, h, w] | &[h, w] => (h, w),
        other => {
            return Err(Error::Shape(format!(
                "PGM needs (1, H, W) or (H, W) pixels, got {other:?}"
            )))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for (i, &v) in pixels.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!(
                "pixel {i} has value {v}, outside [0, 1]"
            )));
        }
        out.push((255.0 * v + 0.5).floor() as u8);
    }
    Ok(out)
}

pub fn write_pgm(pixels: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
