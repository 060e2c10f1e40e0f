//! Image metrics (MSE, L1, PSNR, SSIM) and the training losses built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for (near) identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(img: &Image, reference: &Image) -> Result<f64> {
    img.ensure_same_shape(reference)?;
    let n = img.data.len().max(1) as f64;
    Ok(img.data.iter().zip(&reference.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn l1(img: &Image, reference: &Image) -> Result<f64> {
    img.ensure_same_shape(reference)?;
    let n = img.data.len().max(1) as f64;
    Ok(img.data.iter().zip(&reference.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// `10·log10(1/mse)` for images in `[0,1]`, capped at 100 dB.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    let m = mse(img, reference)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { -10.0 * m.log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable correlation of a single-channel `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-region map back to `w × h`.
fn scatter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..SSIM_WINDOW {
                rows[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn check_ssim_input(img: &Image, reference: &Image) -> Result<()> {
    img.ensure_same_shape(reference)?;
    if img.width < SSIM_WINDOW || img.height < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "{}x{} is below the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            img.width, img.height
        )));
    }
    Ok(())
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean local SSIM over valid window positions, averaged over channels.
pub fn ssim(img: &Image, reference: &Image) -> Result<f64> {
    ssim_impl(img, reference, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `img`.
pub fn ssim_with_grad(img: &Image, reference: &Image) -> Result<(f64, Vec<f64>)> {
    ssim_impl(img, reference, true)
}

fn ssim_impl(img: &Image, reference: &Image, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check_ssim_input(img, reference)?;
    let k = gaussian_window();
    let (w, h, ch) = (img.width, img.height, img.channels);
    let positions = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (positions * ch) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; img.data.len()] } else { Vec::new() };
    for c in 0..ch {
        let x = plane(img, c);
        let y = plane(reference, c);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let exx = filter_valid(&sq(&x, &x), w, h, &k);
        let eyy = filter_valid(&sq(&y, &y), w, h, &k);
        let exy = filter_valid(&sq(&x, &y), w, h, &k);
        let mut da = vec![0.0; positions];
        let mut db = vec![0.0; positions];
        let mut dc = vec![0.0; positions];
        for i in 0..positions {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[i] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                da[i] = norm * (2.0 * uy * (a2 - a1) / bb + s * (2.0 * ux / b2 - 2.0 * ux / b1));
                db[i] = norm * (-s / b2);
                dc[i] = norm * (2.0 * a1 / bb);
            }
        }
        if want_grad {
            let ga = scatter_valid(&da, w, h, &k);
            let gb = scatter_valid(&db, w, h, &k);
            let gc = scatter_valid(&dc, w, h, &k);
            for p in 0..w * h {
                grad[p * ch + c] = ga[p] + 2.0 * x[p] * gb[p] + y[p] * gc[p];
            }
        }
    }
    Ok((total * norm, grad))
}

/// `(1 − ssim) / 2`.
pub fn d_ssim(img: &Image, reference: &Image) -> Result<f64> {
    Ok((1.0 - ssim(img, reference)?) / 2.0)
}

/// Loss weights for the generalizable stages and fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// SSIM term weight within a stage.
    pub ssim: f64,
    /// Perceptual term weight within a stage.
    pub perceptual: f64,
    /// Coarse stage weight.
    pub stage1: f64,
    /// Fine stage weight.
    pub stage2: f64,
    /// D-SSIM weight of the fine-tuning loss.
    pub ft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.1,
            perceptual: 0.05,
            stage1: 0.5,
            stage2: 1.0,
            ft: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ssim, self.perceptual, self.stage1, self.stage2, self.ft];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Perceptual loss placeholder: no pretrained network is available, so the
/// term contributes nothing while its weight stays configurable.
pub fn perceptual(_img: &Image, _reference: &Image) -> f64 {
    0.0
}

/// `mse + λ_s·(1 − ssim) + λ_p·perceptual` for one stage.
pub fn stage_loss(img: &Image, reference: &Image, w: &LossWeights) -> Result<f64> {
    Ok(mse(img, reference)? + w.ssim * (1.0 - ssim(img, reference)?) + w.perceptual * perceptual(img, reference))
}

/// Weighted sum of the coarse and fine stage losses.
pub fn two_stage_loss(coarse: (&Image, &Image), fine: (&Image, &Image), w: &LossWeights) -> Result<f64> {
    Ok(w.stage1 * stage_loss(coarse.0, coarse.1, w)? + w.stage2 * stage_loss(fine.0, fine.1, w)?)
}

/// `(1 − λ)·L1 + λ·D-SSIM`.
pub fn ft_loss(img: &Image, reference: &Image, lambda: f64) -> Result<f64> {
    Ok((1.0 - lambda) * l1(img, reference)? + lambda * d_ssim(img, reference)?)
}

/// [`ft_loss`] and its gradient with respect to `img`.
pub fn ft_loss_with_grad(img: &Image, reference: &Image, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let l = l1(img, reference)?;
    let (s, ds) = ssim_with_grad(img, reference)?;
    let n = img.data.len() as f64;
    let grad = img
        .data
        .iter()
        .zip(&reference.data)
        .zip(&ds)
        .map(|((a, b), g)| {
            let sign = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            };
            (1.0 - lambda) * sign / n - 0.5 * lambda * g
        })
        .collect();
    Ok(((1.0 - lambda) * l + lambda * (1.0 - s) / 2.0, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(w: usize, h: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 3, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn identical_images() {
        let a = random(16, 14, 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(d_ssim(&a, &a).unwrap().abs() < 1e-12);
        assert!(ft_loss(&a, &a, 0.2).unwrap().abs() < 1e-12);
        assert!(stage_loss(&a, &a, &LossWeights::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn black_vs_white() {
        let b = Image::filled(12, 12, 3, 0.0);
        let w = Image::filled(12, 12, 3, 1.0);
        assert_eq!(mse(&b, &w).unwrap(), 1.0);
        assert_eq!(psnr(&b, &w).unwrap(), 0.0);
    }

    #[test]
    fn random_pair_matches_elementwise() {
        let a = random(9, 7, 2);
        let b = random(9, 7, 3);
        let n = a.data.len() as f64;
        let m: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let l: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        assert!((mse(&a, &b).unwrap() - m).abs() < 1e-9);
        assert!((l1(&a, &b).unwrap() - l).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() + 10.0 * m.log10()).abs() < 1e-9);
    }

    #[test]
    fn constant_images_follow_closed_form() {
        let (a, b) = (0.3, 0.7);
        let s = ssim(&Image::filled(13, 11, 3, a), &Image::filled(13, 11, 3, b)).unwrap();
        let expected = (2.0 * a * b + SSIM_C1) * SSIM_C2 / ((a * a + b * b + SSIM_C1) * SSIM_C2);
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn negative_pattern_has_negative_ssim() {
        let img = Image::from_fn(16, 16, 1, |x, y, _| if (x + y) % 2 == 0 { 0.9 } else { 0.1 });
        let neg = img.map(|v| 1.0 - v);
        assert!(ssim(&img, &neg).unwrap() < 0.0);
    }

    #[test]
    fn too_small_for_window() {
        let a = Image::filled(10, 20, 3, 0.5);
        assert!(matches!(ssim(&a, &a), Err(Error::TooSmall(_))));
    }

    #[test]
    fn stage_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((0.01 + w.ssim * (1.0 - 0.9) - 0.02).abs() < 1e-15);
        let a = random(12, 12, 4);
        let b = random(12, 12, 5);
        let c = random(12, 12, 6);
        let total = two_stage_loss((&a, &b), (&a, &c), &w).unwrap();
        let l1_ = stage_loss(&a, &b, &w).unwrap();
        let l2_ = stage_loss(&a, &c, &w).unwrap();
        assert!((total - (0.5 * l1_ + l2_)).abs() < 1e-15);
    }

    #[test]
    fn ft_loss_pure_l1_at_zero_lambda() {
        let a = random(12, 12, 7);
        let b = random(12, 12, 8);
        assert_eq!(ft_loss(&a, &b, 0.0).unwrap(), l1(&a, &b).unwrap());
    }

    #[test]
    fn ft_gradient_matches_finite_differences() {
        let a = random(13, 12, 9);
        let b = random(13, 12, 10);
        let (_, g) = ft_loss_with_grad(&a, &b, 0.2).unwrap();
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(17) {
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (ft_loss(&p, &b, 0.2).unwrap() - ft_loss(&m, &b, 0.2).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "pixel {i}: fd {fd} analytic {}", g[i]);
        }
    }
}
