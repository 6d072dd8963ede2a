//! Training losses and full-reference quality metrics (PSNR, SSIM).

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, to_gray, LUMA};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// PSNR reported for a zero-error comparison.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Loss weights; the restoration sub-weights follow the reference
/// training recipe, the two top-level weights are (λ₁, λ₂).
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_comp: f64,
    pub lambda_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.01,
            lambda2: 0.1,
            lambda_rec: 0.1,
            lambda_adv: 0.1,
            lambda_comp: 0.1,
            lambda_id: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda_rec,
            self.lambda_adv,
            self.lambda_comp,
            self.lambda_id,
        ];
        if all.iter().any(|w| *w < 0.0) {
            return Err(Error::Range(format!("negative loss weight in {:?}", self)));
        }
        Ok(())
    }
}

/// Scalar values of every term plus the composed total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub l_up: f64,
    pub l_rec: f64,
    pub l_adv: f64,
    pub l_comp: f64,
    pub l_id: f64,
    pub l_rest: f64,
    pub l_total: f64,
}

/// Losses that require pretrained networks plug in through this trait;
/// absent plugins contribute exactly zero.
pub trait LossPlugin {
    fn eval(&self, tape: &mut Tape, y_hat: TensorId, y: TensorId) -> Result<TensorId>;
}

#[derive(Default)]
pub struct LossPlugins<'a> {
    pub adversarial: Option<&'a dyn LossPlugin>,
    pub component: Option<&'a dyn LossPlugin>,
    pub identity: Option<&'a dyn LossPlugin>,
}

/// Mean absolute difference on the tape.
pub fn l1(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("l1", format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d)?;
    tape.mean_all(ad)
}

/// Resize every image of an [N, 3, H, W] batch with the engine's own
/// bilinear resizer.
pub fn batch_resize(batch: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::dim("batch_resize", format!("{:?}", s)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for img in 0..n {
        let one = Tensor::from_vec(
            vec![c, h, w],
            batch.data()[img * c * h * w..(img + 1) * c * h * w].to_vec(),
        )?;
        out.extend_from_slice(resize_bilinear(&one, out_h, out_w)?.data());
    }
    Tensor::from_vec(vec![n, c, out_h, out_w], out)
}

/// Compose the full objective.
///
/// `y_up` is the up-sampling branch output, `y_hat` the restored batch,
/// both on the tape; `y` is the ground-truth batch. The up-sampling
/// target is `y` resized to `y_up`'s resolution. Returns the report and
/// the scalar total for `backward`.
pub fn total_loss(
    tape: &mut Tape,
    y_up: TensorId,
    y_hat: TensorId,
    y: &Tensor,
    weights: &LossWeights,
    plugins: &LossPlugins<'_>,
) -> Result<(LossReport, TensorId)> {
    weights.validate()?;
    let up_shape = tape.shape(y_up).to_vec();
    let up_target = batch_resize(y, up_shape[2], up_shape[3])?;
    let up_target = tape.constant(up_target);
    let l_up = l1(tape, y_up, up_target)?;

    let y_const = tape.constant(y.clone());
    let l_rec = l1(tape, y_hat, y_const)?;

    // l_rest = λ_rec·l_rec + λ_adv·adv + λ_comp·comp + λ_id·id
    let mut l_rest = tape.scale(l_rec, weights.lambda_rec)?;
    let mut report = LossReport {
        l_up: tape.value(l_up).item(),
        l_rec: tape.value(l_rec).item(),
        ..Default::default()
    };
    for (plugin, weight, slot) in [
        (&plugins.adversarial, weights.lambda_adv, 0usize),
        (&plugins.component, weights.lambda_comp, 1),
        (&plugins.identity, weights.lambda_id, 2),
    ] {
        if let Some(p) = plugin {
            let term = p.eval(tape, y_hat, y_const)?;
            if tape.value(term).numel() != 1 {
                return Err(Error::Usage("loss plugin must return a scalar".into()));
            }
            let value = tape.value(term).item();
            match slot {
                0 => report.l_adv = value,
                1 => report.l_comp = value,
                _ => report.l_id = value,
            }
            let scaled = tape.scale(term, weight)?;
            l_rest = tape.add(l_rest, scaled)?;
        }
    }
    report.l_rest = tape.value(l_rest).item();

    // l_total = λ₁·l_up + λ₂·l_rest
    let a = tape.scale(l_up, weights.lambda1)?;
    let b = tape.scale(l_rest, weights.lambda2)?;
    let total = tape.add(a, b)?;
    report.l_total = tape.value(total).item();
    Ok((report, total))
}

/// Peak signal-to-noise ratio in dB; identical inputs report the cap.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over valid 11×11 windows, Gaussian
/// weighted, peak 1. RGB inputs are converted to BT.601 luma first.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, xa, xb) = match a.shape() {
        [3, h, w] => (*h, *w, to_gray(a)?, to_gray(b)?),
        [h, w] => (*h, *w, a.data().to_vec(), b.data().to_vec()),
        other => return Err(Error::dim("ssim", format!("{:?}", other))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Range(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = ssim_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my) = (0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let wv = win[wy * SSIM_WINDOW + wx];
                    mx += wv * xa[(oy + wy) * w + ox + wx];
                    my += wv * xb[(oy + wy) * w + ox + wx];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let wv = win[wy * SSIM_WINDOW + wx];
                    let da = xa[(oy + wy) * w + ox + wx] - mx;
                    let db = xb[(oy + wy) * w + ox + wx] - my;
                    vx += wv * da * da;
                    vy += wv * db * db;
                    cov += wv * da * db;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Verify luma weights stay in sync with the image module.
#[allow(dead_code)]
const _: [f64; 3] = LUMA;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::awgn;
    use crate::fixtures::procedural_image;
    use crate::rng::RngStream;

    #[test]
    fn l1_identical_is_zero_and_offset_is_half() {
        let a = Tensor::randn(&[2, 3, 4, 4], 1.0, &RngStream::new(1, "l1"));
        let mut b = a.clone();
        let mut tape = Tape::new();
        let ia = tape.leaf(a.clone(), false);
        let ib = tape.leaf(a.clone(), false);
        let z = l1(&mut tape, ia, ib).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);

        for v in b.data_mut() {
            *v += 0.5;
        }
        let ibo = tape.leaf(b, false);
        let z = l1(&mut tape, ia, ibo).unwrap();
        assert!((tape.value(z).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_gradient_matches_fd_away_from_kinks() {
        let a = Tensor::randn(&[3, 3], 1.0, &RngStream::new(2, "l1.fd.a"));
        let b = Tensor::randn(&[3, 3], 1.0, &RngStream::new(3, "l1.fd.b"));
        let params = vec![("a".to_string(), a), ("b".to_string(), b)];
        let rep = crate::gradcheck::check(&params, 1e-6, 1e-5, |t, ids| l1(t, ids[0], ids[1])).unwrap();
        assert!(rep.ok(), "l1 fd: max err {}", rep.max_err);
    }

    #[test]
    fn total_loss_weight_arithmetic() {
        // Perfect restoration and no plugins: every term zero. With a
        // constant plugin the composition follows the declared weights.
        let y = Tensor::full(&[1, 3, 16, 16], 0.5);
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let y_up = tape.constant(y.clone());
        let y_hat = tape.constant(y.clone());
        let (rep, _) = total_loss(&mut tape, y_up, y_hat, &y, &weights, &LossPlugins::default()).unwrap();
        assert_eq!(rep.l_up, 0.0);
        assert_eq!(rep.l_rec, 0.0);
        assert_eq!(rep.l_rest, 0.0);
        assert_eq!(rep.l_total, 0.0);

        struct Const(f64);
        impl LossPlugin for Const {
            fn eval(&self, tape: &mut Tape, _: TensorId, _: TensorId) -> Result<TensorId> {
                Ok(tape.constant(Tensor::scalar(self.0)))
            }
        }
        let run = |c: f64| -> LossReport {
            let mut tape = Tape::new();
            let y_up = tape.constant(y.clone());
            let y_hat = tape.constant(y.clone());
            let adv = Const(c);
            let plugins = LossPlugins { adversarial: Some(&adv), ..Default::default() };
            total_loss(&mut tape, y_up, y_hat, &y, &weights, &plugins).unwrap().0
        };
        let r1 = run(1.0);
        assert!((r1.l_rest - 0.1).abs() < 1e-15); // λ_adv · 1
        assert!((r1.l_total - 0.01).abs() < 1e-15); // λ₂ · 0.1

        // Linearity: doubling the plugin output doubles its contribution.
        let r2 = run(2.0);
        assert!((r2.l_total - 2.0 * r1.l_total).abs() < 1e-15);
    }

    #[test]
    fn total_loss_default_composition() {
        // l_rest = 0.1·l_rec and l_total = 0.01·l_up + 0.1·l_rest.
        let y = procedural_image(16, 16, 4);
        let y = Tensor::from_vec(vec![1, 3, 16, 16], y.into_data()).unwrap();
        let mut other = y.clone();
        for v in other.data_mut() {
            *v = (*v + 0.2).min(1.0);
        }
        let mut tape = Tape::new();
        let y_up = tape.constant(other.clone());
        let y_hat = tape.constant(other);
        let (rep, total) =
            total_loss(&mut tape, y_up, y_hat, &y, &LossWeights::default(), &LossPlugins::default()).unwrap();
        assert!((rep.l_rest - 0.1 * rep.l_rec).abs() < 1e-15);
        assert!((rep.l_total - (0.01 * rep.l_up + 0.1 * rep.l_rest)).abs() < 1e-15);
        assert_eq!(tape.value(total).item(), rep.l_total);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);

        // Uniform error of 1/255 at peak 1: 20·log10(255).
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += 1.0 / 255.0;
        }
        let want = 20.0 * 255.0f64.log10();
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 48.13).abs() < 0.01);

        // Symmetry.
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let img = procedural_image(32, 32, 5);
        let mut prev = f64::INFINITY;
        for delta in [1.0, 5.0, 15.0] {
            let noisy = awgn(&img, delta, 7).unwrap();
            let p = psnr(&noisy, &img, 1.0).unwrap();
            assert!(p < prev, "delta {delta}: psnr {p} not below {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let img = procedural_image(32, 32, 6);
        let s = ssim(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-9);

        let noisy = awgn(&img, 10.0, 8).unwrap();
        let ab = ssim(&img, &noisy).unwrap();
        let ba = ssim(&noisy, &img).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        assert!(ab < 1.0 - 1e-9);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        // Constant images: variances and covariance vanish, so
        // SSIM = (2μxμy + C1)/(μx² + μy² + C1).
        let a = Tensor::full(&[3, 16, 16], 0.4);
        let b = Tensor::full(&[3, 16, 16], 0.5);
        let (mx, my) = (0.4, 0.5);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        assert!(ssim(&a, &a).is_err());
    }
}
