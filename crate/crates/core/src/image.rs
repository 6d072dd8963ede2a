//! Image helpers. Images are [3, H, W] tensors with values in [0, 1];
//! 8-bit quantization happens only at file I/O.

use crate::error::{Error, Result};
use crate::kernels::bilinear_at;
use crate::tensor::Tensor;

/// BT.601 luma weights, shared by the metrics and the saturation jitter.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("image", format!("expected [3, H, W], got {:?}", s)));
    }
    Ok((s[1], s[2]))
}

/// Half-pixel source coordinate of output index `i` at scale `s`
/// (output extent / input extent).
#[inline]
pub fn project_coord(i: usize, s: f64) -> f64 {
    (i as f64 + 0.5) / s - 0.5
}

/// Bilinear resize of a [C, H, W] tensor under the half-pixel mapping,
/// clamp-to-edge at the borders.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::dim("resize", format!("expected [C, H, W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let sy = out_h as f64 / h as f64;
    let sx = out_w as f64 / w as f64;
    let xs: Vec<f64> = (0..out_w).map(|x| project_coord(x, sx)).collect();
    let ys: Vec<f64> = (0..out_h).map(|y| project_coord(y, sy)).collect();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &cy) in ys.iter().enumerate() {
            for (ox, &cx) in xs.iter().enumerate() {
                out[(ch * out_h + oy) * out_w + ox] = bilinear_at(plane, h, w, cx, cy);
            }
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], out)
}

pub fn clamp01(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// BT.601 grayscale plane of an RGB image, as [H·W].
pub fn to_gray(img: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = image_dims(img)?;
    let hw = h * w;
    let d = img.data();
    Ok((0..hw)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn resize_identity_when_same_size() {
        let img = Tensor::randn(&[3, 5, 7], 1.0, &RngStream::new(1, "img.id"));
        let out = resize_bilinear(&img, 5, 7).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Tensor::full(&[3, 4, 4], 0.37);
        let out = resize_bilinear(&img, 9, 6).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_of_white_is_one() {
        let img = Tensor::full(&[3, 2, 2], 1.0);
        for v in to_gray(&img).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
