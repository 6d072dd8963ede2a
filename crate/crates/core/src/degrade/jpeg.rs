//! JPEG-style compression simulator: BT.601 full-range YCbCr, per-channel
//! 8×8 block DCT-II, quantization with the standard luma/chroma tables
//! scaled by the IJG quality rule, 4:4:4 (no chroma subsampling).
//!
//! This is an in-engine quantizer, not a codec: no entropy coding, no
//! byte stream, and pixels stay floating-point throughout.

use crate::error::Result;
use crate::image::image_dims;
use crate::tensor::Tensor;

/// ITU-T T.81 Annex K table K.1 (luminance), row-major.
pub const QUANT_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// ITU-T T.81 Annex K table K.2 (chrominance), row-major.
pub const QUANT_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality rule: percent-scale a base table, floor at 1.
pub fn scaled_table(base: &[u16; 64], q: u32) -> [f64; 64] {
    let q = q.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        *o = (((b as u32 * scale + 50) / 100).max(1)) as f64;
    }
    out
}

/// Orthonormal 8-point DCT-II basis: BASIS[u][i] = α(u)·cos((2i+1)uπ/16).
fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2.0 * i as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

/// 2-d forward DCT of one 8×8 block: B = C·X·Cᵀ.
pub fn dct2_block(x: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for i in 0..8 {
                s += c[u][i] * x[i * 8 + j];
            }
            tmp[u * 8 + j] = s;
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for j in 0..8 {
                s += tmp[u * 8 + j] * c[v][j];
            }
            out[u * 8 + v] = s;
        }
    }
    out
}

/// Inverse of [`dct2_block`]: X = Cᵀ·B·C.
pub fn idct2_block(b: &[f64; 64]) -> [f64; 64] {
    let c = dct_basis();
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                s += c[u][i] * b[u * 8 + v];
            }
            tmp[i * 8 + v] = s;
        }
    }
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for v in 0..8 {
                s += tmp[i * 8 + v] * c[v][j];
            }
            out[i * 8 + j] = s;
        }
    }
    out
}

const CB_SCALE: f64 = 0.5 / (1.0 - 0.114);
const CR_SCALE: f64 = 0.5 / (1.0 - 0.299);

/// Quantize one plane (values on the 0–255 scale, level-shifted by −128
/// internally) through the block-DCT path with an edge-replicate pad to a
/// multiple of 8. When `table` is `None` the coefficients pass through
/// unquantized, which exposes the pure transform round trip.
fn process_plane(plane: &[f64], h: usize, w: usize, table: Option<&[f64; 64]>) -> Vec<f64> {
    let hp = h.div_ceil(8) * 8;
    let wp = w.div_ceil(8) * 8;
    let mut padded = vec![0.0; hp * wp];
    for y in 0..hp {
        let sy = y.min(h - 1);
        for x in 0..wp {
            let sx = x.min(w - 1);
            padded[y * wp + x] = plane[sy * w + sx] - 128.0;
        }
    }
    let mut out = vec![0.0; hp * wp];
    let mut block = [0.0; 64];
    for by in (0..hp).step_by(8) {
        for bx in (0..wp).step_by(8) {
            for i in 0..8 {
                block[i * 8..i * 8 + 8].copy_from_slice(&padded[(by + i) * wp + bx..(by + i) * wp + bx + 8]);
            }
            let mut coef = dct2_block(&block);
            if let Some(t) = table {
                for (cv, &tv) in coef.iter_mut().zip(t.iter()) {
                    *cv = (*cv / tv).round() * tv;
                }
            }
            let rec = idct2_block(&coef);
            for i in 0..8 {
                out[(by + i) * wp + bx..(by + i) * wp + bx + 8].copy_from_slice(&rec[i * 8..i * 8 + 8]);
            }
        }
    }
    let mut cropped = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            cropped[y * w + x] = out[y * wp + x] + 128.0;
        }
    }
    cropped
}

/// Shared driver for `jpeg_sim` and the unquantized transform round trip.
fn run(img: &Tensor, tables: Option<(&[f64; 64], &[f64; 64])>) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    let hw = h * w;
    let d = img.data();
    // RGB [0,1] -> YCbCr on the 0–255 scale, full range.
    let mut y = vec![0.0; hw];
    let mut cb = vec![0.0; hw];
    let mut cr = vec![0.0; hw];
    for i in 0..hw {
        let (r, g, b) = (d[i] * 255.0, d[hw + i] * 255.0, d[2 * hw + i] * 255.0);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        y[i] = luma;
        cb[i] = CB_SCALE * (b - luma) + 128.0;
        cr[i] = CR_SCALE * (r - luma) + 128.0;
    }
    let (ty, tc) = match tables {
        Some((l, c)) => (Some(l), Some(c)),
        None => (None, None),
    };
    let y = process_plane(&y, h, w, ty);
    let cb = process_plane(&cb, h, w, tc);
    let cr = process_plane(&cr, h, w, tc);
    let mut out = vec![0.0; 3 * hw];
    for i in 0..hw {
        let (yy, cbv, crv) = (y[i], cb[i] - 128.0, cr[i] - 128.0);
        let r = yy + crv / CR_SCALE;
        let b = yy + cbv / CB_SCALE;
        let g = (yy - 0.299 * r - 0.114 * b) / 0.587;
        out[i] = (r / 255.0).clamp(0.0, 1.0);
        out[hw + i] = (g / 255.0).clamp(0.0, 1.0);
        out[2 * hw + i] = (b / 255.0).clamp(0.0, 1.0);
    }
    Tensor::from_vec(vec![3, h, w], out)
}

/// Block-DCT quantization at quality `q` (1–100).
pub fn jpeg_sim(img: &Tensor, q: u32) -> Result<Tensor> {
    let luma = scaled_table(&QUANT_LUMA, q);
    let chroma = scaled_table(&QUANT_CHROMA, q);
    run(img, Some((&luma, &chroma)))
}

/// The same color/DCT path with quantization disabled; ideally the
/// identity up to float rounding.
pub fn transform_roundtrip(img: &Tensor) -> Result<Tensor> {
    run(img, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn q100_tables_are_all_ones() {
        let t = scaled_table(&QUANT_LUMA, 100);
        assert!(t.iter().all(|&v| v == 1.0));
        let t = scaled_table(&QUANT_CHROMA, 100);
        assert!(t.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ijg_rule_examples() {
        // q=50 keeps the base table; q=60 scales by 80 percent.
        let t50 = scaled_table(&QUANT_LUMA, 50);
        assert_eq!(t50[0], 16.0);
        let t60 = scaled_table(&QUANT_LUMA, 60);
        assert_eq!(t60[0], ((16 * 80 + 50) / 100) as f64);
        // Quality 1 -> scale 5000, entries floor at least 1.
        let t1 = scaled_table(&QUANT_LUMA, 1);
        assert!(t1.iter().all(|&v| v >= 1.0));
    }

    #[test]
    fn dct_block_roundtrip_tight() {
        let s = RngStream::new(20, "dct");
        let mut x = [0.0; 64];
        for (i, v) in x.iter_mut().enumerate() {
            *v = s.range_at(i as u64, -100.0, 100.0);
        }
        let back = idct2_block(&dct2_block(&x));
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dc_of_constant_block_is_8x() {
        let x = [31.0; 64];
        let c = dct2_block(&x);
        assert!((c[0] - 8.0 * 31.0).abs() < 1e-10);
        for &v in &c[1..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn constant_gray_image_survives_quantization() {
        // Single DC coefficient per block; error bounded by Q00/16 levels.
        for q in [60, 80, 100] {
            let img = Tensor::full(&[3, 16, 16], 0.4);
            let out = jpeg_sim(&img, q).unwrap();
            for (a, b) in img.data().iter().zip(out.data()) {
                assert!((a - b).abs() <= 1.0 / 255.0, "q={q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_color_image_at_q100() {
        let mut img = Tensor::zeros(&[3, 8, 8]);
        let hw = 64;
        for i in 0..hw {
            img.data_mut()[i] = 0.8;
            img.data_mut()[hw + i] = 0.3;
            img.data_mut()[2 * hw + i] = 0.55;
        }
        let out = jpeg_sim(&img, 100).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn odd_sizes_pad_and_crop() {
        let s = RngStream::new(21, "jpeg.odd");
        let mut img = Tensor::randn(&[3, 11, 13], 0.2, &s);
        for v in img.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        let out = jpeg_sim(&img, 90).unwrap();
        assert_eq!(out.shape(), &[3, 11, 13]);
        assert!(out.all_finite());
    }
}
