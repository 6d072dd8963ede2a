//! File formats: binary PPM (P6, 8-bit) for images and the raw FTNS
//! container for lossless float tensors.
//!
//! FTNS layout, all integers little-endian:
//!   magic `FTNS` | u32 version=1 | u32 ndim | u64 dims[ndim]
//!   | u8 dtype (0 = f64, 1 = f32) | payload

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FTNS_MAGIC: &[u8; 4] = b"FTNS";
pub const FTNS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

fn fmt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), detail: detail.into() }
}

// ── FTNS ─────────────────────────────────────────────────────────────

pub fn write_ftns(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ftns_to(&mut w, t, dtype)
}

pub fn write_ftns_to<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(FTNS_MAGIC)?;
    w.write_all(&FTNS_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_ftns(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_ftns_from(&mut r).map_err(|e| match e {
        Error::Format { detail, .. } => fmt_err(path, detail),
        other => other,
    })
}

pub fn read_ftns_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let anon = Path::new("<stream>");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FTNS_MAGIC {
        return Err(fmt_err(anon, "bad FTNS magic"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != FTNS_VERSION {
        return Err(fmt_err(anon, format!("unsupported FTNS version {version}")));
    }
    r.read_exact(&mut u32b)?;
    let ndim = u32::from_le_bytes(u32b) as usize;
    if ndim > 8 {
        return Err(fmt_err(anon, format!("implausible ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut u64b = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64b)?;
        dims.push(u64::from_le_bytes(u64b) as usize);
    }
    let mut dt = [0u8; 1];
    r.read_exact(&mut dt)?;
    let numel: usize = dims.iter().product();
    let data = match dt[0] {
        0 => {
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
        1 => {
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        other => return Err(fmt_err(anon, format!("unknown dtype {other}"))),
    };
    Tensor::from_vec(dims, data)
}

// ── PPM (P6, 8-bit) ──────────────────────────────────────────────────

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = crate::image::image_dims(img)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = img.data();
    let hw = h * w;
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                let v = (d[c * hw + y * w + x] * 255.0).round().clamp(0.0, 255.0) as u8;
                row.push(v);
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0usize;

    let mut token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comment lines.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(&raw)? != "P6" {
        return Err(fmt_err(path, "not a P6 PPM"));
    }
    let w: usize = token(&raw)?.parse().map_err(|_| fmt_err(path, "bad width"))?;
    let h: usize = token(&raw)?.parse().map_err(|_| fmt_err(path, "bad height"))?;
    let maxval: usize = token(&raw)?.parse().map_err(|_| fmt_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if raw.len() < pos + need {
        return Err(fmt_err(path, "truncated pixel data"));
    }
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = raw[pos + (y * w + x) * 3 + c];
                data[c * hw + y * w + x] = v as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn ftns_roundtrip_f64_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ftns");
        let t = Tensor::randn(&[2, 3, 4], 1.0, &RngStream::new(2, "ftns"));
        write_ftns(&p, &t, Dtype::F64).unwrap();
        let back = read_ftns(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn ftns_f32_loses_only_low_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t32.ftns");
        let t = Tensor::randn(&[10], 1.0, &RngStream::new(3, "ftns32"));
        write_ftns(&p, &t, Dtype::F32).unwrap();
        let back = read_ftns(&p).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let mut img = Tensor::randn(&[3, 6, 5], 0.25, &RngStream::new(4, "ppm"));
        for v in img.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_is_bit_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        let img = Tensor::full(&[3, 4, 4], 0.5);
        write_ppm(&p1, &img).unwrap();
        write_ppm(&p2, &img).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
