//! Binary portable pixmaps (P6, 8-bit).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a `3 x H x W` image with values in `[0, 1]`.
pub fn write_ppm(w: &mut impl Write, image: &Tensor) -> std::io::Result<()> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "write_ppm expects 3 x H x W, got {s:?}");
    let (h, wd) = (s[1], s[2]);
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let plane = h * wd;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&bytes)
}

pub fn read_ppm(r: &mut impl Read) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::invalid(format!("ppm read: {e}")))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("ppm: truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::invalid("ppm: only 8-bit P6 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("ppm: bad size {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let plane = w * h;
    let body = buf.get(pos..pos + 3 * plane).ok_or_else(|| Error::invalid("ppm: truncated pixels"))?;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = body[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}
