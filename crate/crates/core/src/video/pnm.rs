//! Binary PPM (P6) and PGM (P5) images, 8-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &Path, magic: &str, c: usize, h: usize, w: usize, data: &[f32]) -> Result<()> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            out.push(quantize(data[ch * plane + i]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a `(3, H, W)` tensor in `[0, 1]` as P6.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::invalid(
            "write_ppm",
            format!("expected (3, H, W), got {:?}", image.shape()),
        ));
    };
    write_pnm(path.as_ref(), "P6", 3, h, w, image.data())
}

/// Writes an `(H, W)` tensor in `[0, 1]` as P5.
pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let [h, w] = image.dims2("write_pgm")?;
    write_pnm(path.as_ref(), "P5", 1, h, w, image.data())
}

/// Reads a P5 or P6 file as a `(C, H, W)` tensor in `[0, 1]`.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|reason| Error::format(path, reason))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic {m:?}, expected P5 or P6")),
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported, expected 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let plane = w * h;
    let need = start + channels * plane;
    if bytes.len() < need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len()
        ));
    }
    let raster = &bytes[start..need];
    let mut data = vec![0.0; channels * plane];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = raster[i * channels + c] as f32 / maxval as f32;
        }
    }
    Tensor::new(vec![channels, h, w], data).map_err(|e| e.to_string())
}
