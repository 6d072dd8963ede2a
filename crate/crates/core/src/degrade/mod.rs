//! Synthetic low-quality image generation: Gaussian blur, fractional
//! downsampling, additive white Gaussian noise, JPEG-style compression,
//! and color jitter, composed in that order.
//!
//! Every stage maps [0,1] images into [0,1] and is a pure function of
//! `(image, parameters, seed)`, so corpus generation is reproducible and
//! embarrassingly parallel.

pub mod jpeg;

use crate::error::{Error, Result};
use crate::image::{clamp01, image_dims, resize_bilinear, to_gray};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use jpeg::{jpeg_sim, transform_roundtrip};

/// Below this the discretized kernel is indistinguishable from a delta.
const BLUR_IDENTITY_EPS: f64 = 0.05;

/// One draw of the degradation model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    /// Gaussian blur std in pixels.
    pub sigma: f64,
    /// Downsampling factor, ≥ 1.
    pub r: f64,
    /// Noise std on the 0–255 scale.
    pub delta: f64,
    /// JPEG quality, 1–100.
    pub q: u32,
    /// (brightness, contrast, saturation) jitter amplitudes.
    pub jitter: (f64, f64, f64),
    pub seed: u64,
}

/// Sampling ranges; defaults follow the training regime the engine is
/// calibrated against.
#[derive(Clone, Debug)]
pub struct SpecRanges {
    pub sigma: (f64, f64),
    pub r: (f64, f64),
    pub delta: (f64, f64),
    pub q: (u32, u32),
    pub jitter: (f64, f64, f64),
}

impl Default for SpecRanges {
    fn default() -> Self {
        SpecRanges { sigma: (0.2, 10.0), r: (1.0, 8.0), delta: (0.0, 15.0), q: (60, 100), jitter: (0.0, 0.0, 0.0) }
    }
}

impl SpecRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma.0 <= self.sigma.1
            && self.sigma.0 >= 0.0
            && self.r.0 >= 1.0
            && self.r.0 <= self.r.1
            && self.delta.0 >= 0.0
            && self.delta.0 <= self.delta.1
            && self.q.0 >= 1
            && self.q.0 <= self.q.1
            && self.q.1 <= 100;
        if !ok {
            return Err(Error::Range(format!("invalid degradation ranges {:?}", self)));
        }
        Ok(())
    }

    /// Draw the spec for one image. Streams are addressed by image index,
    /// never by call order.
    pub fn sample(&self, seed: u64, image_index: u64) -> DegradationSpec {
        let s = RngStream::new(seed, "degrade.spec").substream(image_index);
        DegradationSpec {
            sigma: s.range_at(0, self.sigma.0, self.sigma.1),
            r: s.range_at(1, self.r.0, self.r.1),
            delta: s.range_at(2, self.delta.0, self.delta.1),
            q: s.int_range_at(3, self.q.0 as i64, self.q.1 as i64) as u32,
            jitter: self.jitter,
            seed: s.u64_at(4),
        }
    }
}

/// The jitter factors actually drawn while degrading one image; recorded
/// in the corpus manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JitterDraws {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur, kernel radius ⌈3σ⌉ normalized to sum 1,
/// reflect padding. σ below 0.05 is the identity.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::Range(format!("blur sigma {sigma} < 0")));
    }
    let (h, w) = image_dims(img)?;
    if sigma < BLUR_IDENTITY_EPS {
        return Ok(img.clone());
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let hw = h * w;
    let mut tmp = vec![0.0; 3 * hw];
    let d = img.data();
    // Horizontal pass.
    for c in 0..3 {
        for y in 0..h {
            let row = &d[c * hw + y * w..c * hw + (y + 1) * w];
            for x in 0..w {
                let mut s = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius as isize, w);
                    s += kv * row[sx];
                }
                tmp[c * hw + y * w + x] = s;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; 3 * hw];
    for c in 0..3 {
        for x in 0..w {
            for y in 0..h {
                let mut s = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius as isize, h);
                    s += kv * tmp[c * hw + sy * w + x];
                }
                out[c * hw + y * w + x] = s;
            }
        }
    }
    let mut t = Tensor::from_vec(vec![3, h, w], out)?;
    clamp01(&mut t);
    Ok(t)
}

/// Bilinear downsample by factor `r ≥ 1` under the half-pixel mapping.
pub fn downsample(img: &Tensor, r: f64) -> Result<Tensor> {
    if r < 1.0 {
        return Err(Error::Range(format!("downsample factor {r} < 1")));
    }
    let (h, w) = image_dims(img)?;
    if r == 1.0 {
        return Ok(img.clone());
    }
    let oh = (h as f64 / r).round_ties_even() as usize;
    let ow = (w as f64 / r).round_ties_even() as usize;
    if oh < 8 || ow < 8 {
        return Err(Error::Range(format!("downsampled size {oh}x{ow} below 8x8")));
    }
    resize_bilinear(img, oh, ow)
}

/// Additive white Gaussian noise with std `delta/255` in the [0,1]
/// domain, clamped; one normal draw per element, addressed by flat index.
pub fn awgn(img: &Tensor, delta: f64, seed: u64) -> Result<Tensor> {
    if delta < 0.0 {
        return Err(Error::Range(format!("noise delta {delta} < 0")));
    }
    if delta == 0.0 {
        return Ok(img.clone());
    }
    let stream = RngStream::new(seed, "degrade.awgn");
    let std = delta / 255.0;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v + std * stream.normal_at(i as u64)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Random brightness/contrast/saturation jitter; factors are reported so
/// the corpus manifest can record them.
pub fn color_jitter(
    img: &Tensor,
    amplitudes: (f64, f64, f64),
    seed: u64,
) -> Result<(Tensor, JitterDraws)> {
    let (ab, ac, asat) = amplitudes;
    for (name, a) in [("brightness", ab), ("contrast", ac), ("saturation", asat)] {
        if !(0.0..=0.5).contains(&a) {
            return Err(Error::Range(format!("{name} amplitude {a} outside [0, 0.5]")));
        }
    }
    let stream = RngStream::new(seed, "degrade.jitter");
    let draws = JitterDraws {
        brightness: if ab > 0.0 { stream.range_at(0, -ab, ab) } else { 0.0 },
        contrast: if ac > 0.0 { stream.range_at(1, -ac, ac) } else { 0.0 },
        saturation: if asat > 0.0 { stream.range_at(2, -asat, asat) } else { 0.0 },
    };
    if draws == JitterDraws::default() {
        return Ok((img.clone(), draws));
    }
    let (h, w) = image_dims(img)?;
    let hw = h * w;
    let mut out = img.clone();
    if draws.brightness != 0.0 {
        for v in out.data_mut() {
            *v = (*v + draws.brightness).clamp(0.0, 1.0);
        }
    }
    if draws.contrast != 0.0 {
        let gray = to_gray(&out)?;
        let mean = gray.iter().sum::<f64>() / hw as f64;
        let f = 1.0 + draws.contrast;
        for v in out.data_mut() {
            *v = (mean + (*v - mean) * f).clamp(0.0, 1.0);
        }
    }
    if draws.saturation != 0.0 {
        let gray = to_gray(&out)?;
        let f = 1.0 + draws.saturation;
        for c in 0..3 {
            for i in 0..hw {
                let g = gray[i];
                let v = &mut out.data_mut()[c * hw + i];
                *v = (g + (*v - g) * f).clamp(0.0, 1.0);
            }
        }
    }
    Ok((out, draws))
}

/// Full chain in model order: blur → downsample → noise → JPEG → jitter.
/// Returns the low-quality image and the jitter factors drawn.
pub fn degrade(img: &Tensor, spec: &DegradationSpec) -> Result<(Tensor, JitterDraws)> {
    let x = gaussian_blur(img, spec.sigma)?;
    let x = downsample(&x, spec.r)?;
    let x = awgn(&x, spec.delta, spec.seed)?;
    let x = jpeg_sim(&x, spec.q)?;
    color_jitter(&x, spec.jitter, spec.seed)
}
