//! Single-sample volume rendering at the estimated depth and the hybrid
//! average with the splatted image.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::FeatureMap;
use crate::error::{Error, Result};
use crate::gaussian::{head_input, sigmoid, softplus, AffineHead};
use crate::geometry::{sample_bilinear, Camera, Pixel};
use crate::image::Image;

/// Radiance `r ∈ [0,1]³` and density `σ ≥ 0` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceSampleMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `[pixel][rgb]`.
    pub radiance: Vec<f64>,
    pub density: Vec<f64>,
}

impl RadianceSampleMap {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.radiance.len() != 3 * n || self.density.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "sample map {}x{} has {} radiance and {} density values",
                self.width,
                self.height,
                self.radiance.len(),
                self.density.len()
            )));
        }
        if !self.density.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::InvalidImage("density must be finite and non-negative".into()));
        }
        if !self.radiance.iter().all(|r| (0.0..=1.0).contains(r)) {
            return Err(Error::InvalidImage("radiance outside [0,1]".into()));
        }
        Ok(())
    }
}

/// `c = (1 − exp(−σ)) · r` per pixel.
pub fn single_sample_render(samples: &RadianceSampleMap) -> Image {
    let mut out = Image::new(samples.width, samples.height, 3);
    out.data
        .par_chunks_mut(3)
        .zip(samples.radiance.par_chunks(3))
        .zip(samples.density.par_iter())
        .for_each(|((px, r), &sigma)| {
            let w = -(-sigma).exp_m1();
            for c in 0..3 {
                px[c] = w * r[c];
            }
        });
    out
}

/// Per-pixel arithmetic mean of the splatted and volume-rendered images.
pub fn hybrid_average(splat: &Image, vol: &Image) -> Result<Image> {
    splat.ensure_same_shape(vol)?;
    let data = splat.data.iter().zip(&vol.data).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(Image {
        data,
        ..splat.clone()
    })
}

/// Radiance and density heads of the volume branch, over the same augmented
/// input as the Gaussian heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeads {
    pub color_channels: usize,
    pub radiance: AffineHead,
    pub density: AffineHead,
}

/// Density pre-activation for perfectly uniform windows.
pub const DENSITY_BIAS: f64 = 4.0;
/// Density pre-activation drop per unit of mean window std.
pub const DENSITY_STD_WEIGHT: f64 = -40.0;

impl VolumeHeads {
    /// Radiance reproduces the pixel color; density is high for low local
    /// variance and falls off as the window std grows.
    pub fn photometric(color_channels: usize) -> Self {
        let c = color_channels;
        let inputs = 4 * c;
        let mut radiance = AffineHead::constant(inputs, vec![0.0; 3]);
        for out in 0..3 {
            radiance.weights[out * inputs + 3 * c + out.min(c - 1)] = 1.0;
        }
        let mut density = AffineHead::constant(inputs, vec![DENSITY_BIAS]);
        for ch in 0..c {
            density.weights[2 * c + ch] = DENSITY_STD_WEIGHT / c as f64;
        }
        Self {
            color_channels: c,
            radiance,
            density,
        }
    }
}

/// Decodes per-pixel radiance `sigmoid(h_r(f))` and density `softplus(h_σ(f))`.
pub fn decode_samples(feats: &FeatureMap, heads: &VolumeHeads) -> Result<RadianceSampleMap> {
    let inputs = feats.channels + heads.color_channels;
    if heads.radiance.inputs != inputs
        || heads.density.inputs != inputs
        || heads.radiance.outputs() != 3
        || heads.density.outputs() != 1
    {
        return Err(Error::ShapeMismatch(format!(
            "volume heads do not fit {} feature channels",
            feats.channels
        )));
    }
    let n = feats.width * feats.height;
    let mut radiance = vec![0.0; 3 * n];
    let mut density = vec![0.0; n];
    radiance
        .par_chunks_mut(3)
        .zip(density.par_iter_mut())
        .zip(feats.data.par_chunks(feats.channels))
        .for_each_init(Vec::new, |input, ((r, s), f)| {
            head_input(f, heads.color_channels, input);
            let mut pre = [0.0; 3];
            heads.radiance.apply(input, &mut pre);
            for c in 0..3 {
                r[c] = sigmoid(pre[c]);
            }
            let mut sigma = [0.0];
            heads.density.apply(input, &mut sigma);
            *s = softplus(sigma[0]);
        });
    Ok(RadianceSampleMap {
        width: feats.width,
        height: feats.height,
        radiance,
        density,
    })
}

/// Mean source-view color at each target pixel's 3D point, unprojected at
/// `depth`. Pixels with invalid depth or no covering source are black and
/// flagged false.
pub fn pool_sources(
    depth: &[f64],
    valid: &[bool],
    tgt: &Camera,
    sources: &[(&Camera, &Image)],
) -> (Image, Vec<bool>) {
    let (w, h) = (tgt.width, tgt.height);
    let mut out = Image::new(w, h, 3);
    let mut covered = vec![false; w * h];
    out.data
        .par_chunks_mut(3)
        .zip(covered.par_iter_mut())
        .enumerate()
        .for_each(|(i, (px, cov))| {
            if !valid[i] || !(depth[i] > 0.0) {
                return;
            }
            let p = Pixel::new((i % w) as f64, (i / w) as f64);
            let world = tgt.unproject_unchecked(&p, depth[i]);
            let mut sum = [0.0; 3];
            let mut count = 0usize;
            let mut sample = [0.0; 3];
            for (cam, img) in sources {
                let Ok((q, _)) = cam.project(&world) else { continue };
                if sample_bilinear(img, q.x, q.y, &mut sample[..img.channels.min(3)]) {
                    for c in 0..3 {
                        sum[c] += sample[c.min(img.channels - 1)];
                    }
                    count += 1;
                }
            }
            if count > 0 {
                for c in 0..3 {
                    px[c] = sum[c] / count as f64;
                }
                *cov = true;
            }
        });
    (out, covered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::feature_encode;

    fn map(r: [f64; 3], sigma: f64) -> RadianceSampleMap {
        RadianceSampleMap {
            width: 1,
            height: 1,
            radiance: r.to_vec(),
            density: vec![sigma],
        }
    }

    #[test]
    fn zero_density_renders_black() {
        assert_eq!(single_sample_render(&map([0.3, 0.8, 1.0], 0.0)).data, vec![0.0; 3]);
    }

    #[test]
    fn ln2_density_halves_radiance() {
        let out = single_sample_render(&map([1.0; 3], 2f64.ln()));
        for v in out.data {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_density_returns_radiance() {
        let out = single_sample_render(&map([0.2, 0.5, 0.9], 50.0));
        for (v, r) in out.data.iter().zip([0.2, 0.5, 0.9]) {
            assert!((v - r).abs() < 1e-9);
        }
    }

    #[test]
    fn hybrid_average_cases() {
        let a = Image::from_fn(4, 3, 3, |x, y, c| (x + 2 * y + c) as f64 / 12.0);
        assert_eq!(hybrid_average(&a, &a).unwrap(), a);
        let black = Image::filled(4, 3, 3, 0.0);
        let white = Image::filled(4, 3, 3, 1.0);
        assert!(hybrid_average(&black, &white).unwrap().data.iter().all(|v| *v == 0.5));
        let small = Image::filled(2, 2, 3, 0.0);
        assert!(matches!(hybrid_average(&a, &small), Err(Error::ResolutionMismatch(_))));
    }

    #[test]
    fn uniform_features_give_dense_samples() {
        let feats = feature_encode(&Image::filled(5, 5, 3, 0.4));
        let samples = decode_samples(&feats, &VolumeHeads::photometric(3)).unwrap();
        assert!(samples.density.iter().all(|s| *s > 3.0));
        samples.validate().unwrap();
    }

    #[test]
    fn radiance_head_round_trips_color() {
        let img = Image::from_fn(6, 5, 3, |x, y, c| ((x * 7 + y * 3 + c * 5) % 11) as f64 / 10.0);
        let samples = decode_samples(&feature_encode(&img), &VolumeHeads::photometric(3)).unwrap();
        for (r, v) in samples.radiance.iter().zip(&img.data) {
            assert!((r - v).abs() <= 1e-4 + 1e-12);
        }
    }

    #[test]
    fn negative_preactivation_keeps_density_positive() {
        let mut heads = VolumeHeads::photometric(3);
        heads.density.bias[0] = -30.0;
        let samples = decode_samples(&feature_encode(&Image::filled(3, 3, 3, 0.5)), &heads).unwrap();
        assert!(samples.density.iter().all(|s| *s > 0.0));
    }
}
