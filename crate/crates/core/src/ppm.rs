//! Binary PPM (P6, 8-bit) images as `[3, H, W]` tensors in `[0, 1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantises to the 8-bit grid; values are clamped to `[0, 1]` first.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm<W: Write>(img: &Tensor, mut w: W) -> Result<()> {
    let (c, h, wd) = img.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let d = img.data();
    let plane = h * wd;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push(to_byte(d[ch * plane + i]));
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut header = [0usize; 3];
    let magic = next_token(&bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    for slot in header.iter_mut() {
        let tok = next_token(&bytes, &mut pos)?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PPM header field".into()))?;
    }
    let [w, h, maxval] = header;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let plane = w * h;
    let raster = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated PPM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

pub fn save_ppm(img: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(img, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    read_ppm(fs::File::open(path)?)
}
