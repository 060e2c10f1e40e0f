//! Plane-sweep multi-view depth estimation: variance cost volumes over warped
//! source features, box regularization, soft-argmax regression and a two-stage
//! coarse-to-fine cascade.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_bilinear_raw, Camera, Pixel, PlaneSweep};
use crate::image::Image;

/// How depth planes are distributed between `near` and `far`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    Inverse,
}

/// Ordered depth planes shared by every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypotheses {
    pub values: Vec<f64>,
    pub spacing: Spacing,
}

impl DepthHypotheses {
    pub fn build(near: f64, far: f64, count: usize, spacing: Spacing) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidRange(format!("need at least 2 planes, got {count}")));
        }
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidRange(format!("near={near} far={far}")));
        }
        let last = (count - 1) as f64;
        let mut values: Vec<f64> = (0..count)
            .map(|i| {
                let f = i as f64 / last;
                match spacing {
                    Spacing::Linear => near + (far - near) * f,
                    Spacing::Inverse => 1.0 / (1.0 / near + (1.0 / far - 1.0 / near) * f),
                }
            })
            .collect();
        values[0] = near;
        values[count - 1] = far;
        Ok(Self { values, spacing })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gap between the planes bracketing `depth`.
    pub fn local_spacing(&self, depth: f64) -> f64 {
        let v = &self.values;
        let i = v.partition_point(|&z| z < depth).clamp(1, v.len() - 1);
        v[i] - v[i - 1]
    }
}

/// Dense per-pixel feature vectors, row-major `[pixel][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        sample_bilinear_raw(&self.data, self.width, self.height, self.channels, x, y, out)
    }
}

/// Source of matching features; the photometric encoder is the default, a
/// learned encoder can implement the same trait.
pub trait FeatureProvider: Sync {
    fn encode(&self, img: &Image) -> FeatureMap;
}

/// Raw color plus 3×3 window mean and standard deviation per channel.
#[derive(Clone, Copy, Debug, Default)]
pub struct PhotometricFeatures;

impl FeatureProvider for PhotometricFeatures {
    fn encode(&self, img: &Image) -> FeatureMap {
        feature_encode(img)
    }
}

/// Channel layout `[color.., window mean.., window std..]`; the window is the
/// in-bounds part of the 3×3 neighborhood.
pub fn feature_encode(img: &Image) -> FeatureMap {
    let (w, h, c) = (img.width, img.height, img.channels);
    let channels = 3 * c;
    let mut data = vec![0.0; w * h * channels];
    data.par_chunks_mut(w * channels)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let out = &mut row[x * channels..(x + 1) * channels];
                let ys = y.saturating_sub(1)..(y + 2).min(h);
                let xs = x.saturating_sub(1)..(x + 2).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for ch in 0..c {
                    out[ch] = img.get(x, y, ch);
                    let mut sum = 0.0;
                    for yy in ys.clone() {
                        for xx in xs.clone() {
                            sum += img.get(xx, yy, ch);
                        }
                    }
                    let mean = sum / n;
                    let mut sq = 0.0;
                    for yy in ys.clone() {
                        for xx in xs.clone() {
                            let d = img.get(xx, yy, ch) - mean;
                            sq += d * d;
                        }
                    }
                    out[c + ch] = mean;
                    out[2 * c + ch] = (sq / n).sqrt();
                }
            }
        });
    FeatureMap {
        width: w,
        height: h,
        channels,
        data,
    }
}

/// `D × H × W` variance costs with the number of contributing views per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub depth_count: usize,
    pub width: usize,
    pub height: usize,
    pub cost: Vec<f64>,
    pub valid_views: Vec<u16>,
}

impl CostVolume {
    #[inline]
    pub fn index(&self, d: usize, x: usize, y: usize) -> usize {
        (d * self.height + y) * self.width + x
    }

    pub fn cost_at(&self, d: usize, x: usize, y: usize) -> f64 {
        self.cost[self.index(d, x, y)]
    }

    /// A cell is usable when at least two views contributed to it.
    pub fn is_valid(&self, d: usize, x: usize, y: usize) -> bool {
        self.valid_views[self.index(d, x, y)] >= 2
    }
}

/// Per-pixel hypotheses, `values[(d * H + y) * W + x]`, increasing in `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelHypotheses {
    pub depth_count: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PixelHypotheses {
    #[inline]
    pub fn at(&self, d: usize, x: usize, y: usize) -> f64 {
        self.values[(d * self.height + y) * self.width + x]
    }
}

/// Per-pixel depth with confidence and validity.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Fully valid map with unit confidence.
    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), width * height);
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self {
            width,
            height,
            confidence: vec![1.0; depth.len()],
            depth,
            valid,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn check_views(sources: &[FeatureMap], src_cams: &[Camera], tgt: &Camera) -> Result<()> {
    if sources.len() < 2 || src_cams.len() < 2 {
        return Err(Error::TooFewViews(sources.len().min(src_cams.len())));
    }
    if sources.len() != src_cams.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps for {} cameras",
            sources.len(),
            src_cams.len()
        )));
    }
    let channels = sources[0].channels;
    for (f, cam) in sources.iter().zip(src_cams) {
        if f.width != cam.width || f.height != cam.height {
            return Err(Error::ResolutionMismatch(format!(
                "feature map {}x{} for a {}x{} camera",
                f.width, f.height, cam.width, cam.height
            )));
        }
        if f.channels != channels {
            return Err(Error::ShapeMismatch("feature channel counts differ".into()));
        }
    }
    if tgt.width == 0 || tgt.height == 0 {
        return Err(Error::InvalidCamera("empty target".into()));
    }
    Ok(())
}

/// Shared cost-volume builder; `depth_of(d, x, y)` supplies the plane depth.
fn build_volume(
    sources: &[FeatureMap],
    src_cams: &[Camera],
    tgt: &Camera,
    depth_count: usize,
    depth_of: impl Fn(usize, usize, usize) -> f64 + Sync,
) -> Result<CostVolume> {
    check_views(sources, src_cams, tgt)?;
    let (w, h) = (tgt.width, tgt.height);
    let channels = sources[0].channels;
    let sweeps: Vec<PlaneSweep> = src_cams.iter().map(|c| PlaneSweep::new(c, tgt)).collect();
    let mut cost = vec![0.0; depth_count * h * w];
    let mut valid_views = vec![0u16; depth_count * h * w];
    cost.par_chunks_mut(w)
        .zip(valid_views.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (cost_row, count_row))| {
            let (d, y) = (row / h, row % h);
            let views = sources.len();
            let mut samples = vec![0.0; views * channels];
            let mut ok = vec![false; views];
            for x in 0..w {
                let z = depth_of(d, x, y);
                let p = Pixel::new(x as f64, y as f64);
                let mut n = 0usize;
                for (v, (sweep, feats)) in sweeps.iter().zip(sources).enumerate() {
                    let slot = &mut samples[v * channels..(v + 1) * channels];
                    ok[v] = z > 0.0
                        && sweep
                            .map(&p, z)
                            .is_some_and(|q| feats.sample(q.x, q.y, slot));
                    n += ok[v] as usize;
                }
                count_row[x] = n as u16;
                if n < 2 {
                    continue;
                }
                let mut total = 0.0;
                for c in 0..channels {
                    let mut mean = 0.0;
                    for v in (0..views).filter(|&v| ok[v]) {
                        mean += samples[v * channels + c];
                    }
                    mean /= n as f64;
                    let mut var = 0.0;
                    for v in (0..views).filter(|&v| ok[v]) {
                        let e = samples[v * channels + c] - mean;
                        var += e * e;
                    }
                    total += var / n as f64;
                }
                cost_row[x] = total;
            }
        });
    Ok(CostVolume {
        depth_count,
        width: w,
        height: h,
        cost,
        valid_views,
    })
}

/// Variance cost volume over fronto-parallel planes of the target camera.
pub fn build_cost_volume(
    sources: &[FeatureMap],
    src_cams: &[Camera],
    tgt: &Camera,
    hyps: &DepthHypotheses,
) -> Result<CostVolume> {
    build_volume(sources, src_cams, tgt, hyps.len(), |d, _, _| hyps.values[d])
}

/// Variance cost volume over per-pixel depth hypotheses.
pub fn build_cost_volume_per_pixel(
    sources: &[FeatureMap],
    src_cams: &[Camera],
    tgt: &Camera,
    hyps: &PixelHypotheses,
) -> Result<CostVolume> {
    if hyps.width != tgt.width || hyps.height != tgt.height {
        return Err(Error::ResolutionMismatch("hypotheses vs target camera".into()));
    }
    build_volume(sources, src_cams, tgt, hyps.depth_count, |d, x, y| hyps.at(d, x, y))
}

/// One separable box-sum pass over `values` and `weights` along `axis`
/// (0 = W, 1 = H, 2 = D) with clamped indices.
fn box_pass(
    values: &[f64],
    weights: &[f64],
    dims: (usize, usize, usize),
    axis: usize,
    radius: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (dd, h, w) = dims;
    let (len, stride) = match axis {
        0 => (w, 1),
        1 => (h, w),
        _ => (dd, w * h),
    };
    let mut out_v = vec![0.0; values.len()];
    let mut out_w = vec![0.0; values.len()];
    out_v
        .par_chunks_mut(w)
        .zip(out_w.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (ov, ow))| {
            let base = row * w;
            for x in 0..w {
                let i = base + x;
                let pos = (i / stride) % len;
                let start = i - pos * stride;
                let (mut sv, mut sw) = (0.0, 0.0);
                for k in -(radius as isize)..=(radius as isize) {
                    let j = (pos as isize + k).clamp(0, len as isize - 1) as usize;
                    let idx = start + j * stride;
                    sv += values[idx];
                    sw += weights[idx];
                }
                ov[x] = sv;
                ow[x] = sw;
            }
        });
    (out_v, out_w)
}

/// Separable box smoothing along W, H and D with edge clamping. Cells with
/// fewer than two contributing views are excluded from the average and keep
/// their original value. `radius == 0` is the identity.
pub fn regularize(vol: &CostVolume, radius: usize) -> CostVolume {
    if radius == 0 {
        return vol.clone();
    }
    let dims = (vol.depth_count, vol.height, vol.width);
    let weights: Vec<f64> = vol.valid_views.iter().map(|&n| (n >= 2) as u8 as f64).collect();
    let masked: Vec<f64> = vol.cost.iter().zip(&weights).map(|(c, w)| c * w).collect();
    let (mut v, mut wt) = (masked, weights);
    for axis in 0..3 {
        (v, wt) = box_pass(&v, &wt, dims, axis, radius);
    }
    let cost = vol
        .cost
        .iter()
        .zip(&vol.valid_views)
        .zip(v.iter().zip(&wt))
        .map(|((&orig, &n), (&sv, &sw))| if n >= 2 && sw > 0.0 { (sv / sw).max(0.0) } else { orig })
        .collect();
    CostVolume {
        cost,
        ..vol.clone()
    }
}

/// Soft-argmax regression with `p_d = softmax(−cost_d / τ)` over usable cells.
pub fn depth_regress_with(
    vol: &CostVolume,
    depth_of: impl Fn(usize, usize, usize) -> f64 + Sync,
    temperature: f64,
) -> Result<DepthMap> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidRange(format!("temperature must be positive, got {temperature}")));
    }
    let (w, h, dc) = (vol.width, vol.height, vol.depth_count);
    let per_pixel: Vec<(f64, f64, bool)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let mut best = f64::INFINITY;
            for d in 0..dc {
                if vol.is_valid(d, x, y) {
                    best = best.min(vol.cost_at(d, x, y));
                }
            }
            if !best.is_finite() {
                return (0.0, 0.0, false);
            }
            let (mut norm, mut acc, mut peak) = (0.0, 0.0, 0.0f64);
            for d in 0..dc {
                if vol.is_valid(d, x, y) {
                    let e = (-(vol.cost_at(d, x, y) - best) / temperature).exp();
                    norm += e;
                    acc += e * depth_of(d, x, y);
                    peak = peak.max(e);
                }
            }
            (acc / norm, peak / norm, true)
        })
        .collect();
    Ok(DepthMap {
        width: w,
        height: h,
        depth: per_pixel.iter().map(|p| p.0).collect(),
        confidence: per_pixel.iter().map(|p| p.1).collect(),
        valid: per_pixel.iter().map(|p| p.2).collect(),
    })
}

pub fn depth_regress(vol: &CostVolume, hyps: &DepthHypotheses, temperature: f64) -> Result<DepthMap> {
    if hyps.len() != vol.depth_count {
        return Err(Error::ShapeMismatch("hypothesis count vs volume depth".into()));
    }
    depth_regress_with(vol, |d, _, _| hyps.values[d], temperature)
}

/// Tunables of the two-stage estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub coarse_planes: usize,
    pub fine_planes: usize,
    pub spacing: Spacing,
    /// Soft-argmax temperature of the coarse stage.
    pub temperature: f64,
    /// Soft-argmax temperature of the fine stage.
    pub fine_temperature: f64,
    pub radius: usize,
    /// Half-width of the fine search window in coarse plane spacings.
    pub fine_window: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            coarse_planes: 64,
            fine_planes: 8,
            spacing: Spacing::Linear,
            temperature: 8e-4,
            fine_temperature: 3e-5,
            radius: 2,
            fine_window: 2.0,
        }
    }
}

/// Fine-stage hypotheses: `fine` linear samples over `coarse ± window·spacing`
/// clamped to the camera range.
pub fn refine_hypotheses(
    coarse: &DepthMap,
    coarse_hyps: &DepthHypotheses,
    tgt: &Camera,
    fine: usize,
    window: f64,
) -> Result<PixelHypotheses> {
    if fine < 2 {
        return Err(Error::InvalidRange(format!("need at least 2 fine planes, got {fine}")));
    }
    let (w, h) = (coarse.width, coarse.height);
    let mut values = vec![0.0; fine * w * h];
    for i in 0..w * h {
        let center = if coarse.valid[i] {
            coarse.depth[i]
        } else {
            0.5 * (tgt.near + tgt.far)
        };
        let half = window * coarse_hyps.local_spacing(center);
        let lo = (center - half).clamp(tgt.near, tgt.far);
        let hi = (center + half).clamp(tgt.near, tgt.far);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (tgt.near, tgt.far) };
        for d in 0..fine {
            values[d * w * h + i] = lo + (hi - lo) * d as f64 / (fine - 1) as f64;
        }
    }
    Ok(PixelHypotheses {
        depth_count: fine,
        width: w,
        height: h,
        values,
    })
}

/// Coarse-to-fine plane sweep; returns `(coarse, fine)` depth maps.
pub fn cascade(
    sources: &[FeatureMap],
    src_cams: &[Camera],
    tgt: &Camera,
    cfg: &DepthConfig,
) -> Result<(DepthMap, DepthMap)> {
    let hyps = DepthHypotheses::build(tgt.near, tgt.far, cfg.coarse_planes, cfg.spacing)?;
    let vol = regularize(&build_cost_volume(sources, src_cams, tgt, &hyps)?, cfg.radius);
    let coarse = depth_regress(&vol, &hyps, cfg.temperature)?;

    let fine_hyps = refine_hypotheses(&coarse, &hyps, tgt, cfg.fine_planes, cfg.fine_window)?;
    let vol = regularize(
        &build_cost_volume_per_pixel(sources, src_cams, tgt, &fine_hyps)?,
        cfg.radius,
    );
    let mut fine = depth_regress_with(&vol, |d, x, y| fine_hyps.at(d, x, y), cfg.fine_temperature)?;
    for (v, &c) in fine.valid.iter_mut().zip(&coarse.valid) {
        *v &= c;
    }
    Ok((coarse, fine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hypotheses_linear_and_inverse() {
        let h = DepthHypotheses::build(1.0, 3.0, 3, Spacing::Linear).unwrap();
        assert_eq!(h.values, vec![1.0, 2.0, 3.0]);
        let h = DepthHypotheses::build(1.0, 4.0, 3, Spacing::Inverse).unwrap();
        assert_relative_eq!(h.values[0], 1.0);
        assert_relative_eq!(h.values[1], 1.6, epsilon = 1e-12);
        assert_relative_eq!(h.values[2], 4.0);
        let h = DepthHypotheses::build(0.5, 7.0, 64, Spacing::Linear).unwrap();
        assert_eq!(h.values[0], 0.5);
        assert_eq!(h.values[63], 7.0);
        let gap = 6.5 / 63.0;
        for w in h.values.windows(2) {
            assert_relative_eq!(w[1] - w[0], gap, epsilon = 1e-12);
        }
        assert!(DepthHypotheses::build(1.0, 3.0, 1, Spacing::Linear).is_err());
        assert!(DepthHypotheses::build(3.0, 1.0, 4, Spacing::Linear).is_err());
    }

    #[test]
    fn constant_image_features() {
        let img = Image::filled(5, 4, 3, 0.4);
        let f = feature_encode(&img);
        assert_eq!(f.channels, 9);
        for y in 0..4 {
            for x in 0..5 {
                let p = f.pixel(x, y);
                for c in 0..3 {
                    assert_eq!(p[c], 0.4);
                    assert_relative_eq!(p[3 + c], 0.4, epsilon = 1e-15);
                    assert!(p[6 + c].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bright_pixel_std_is_local() {
        let mut img = Image::new(7, 7, 1);
        img.set(3, 3, 0, 1.0);
        let f = feature_encode(&img);
        for y in 0..7usize {
            for x in 0..7usize {
                let near = x.abs_diff(3) <= 1 && y.abs_diff(3) <= 1;
                assert_eq!(f.pixel(x, y)[2] > 0.0, near, "({x},{y})");
            }
        }
    }

    #[test]
    fn features_match_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::from_fn(9, 6, 3, |_, _, _| rng.random());
        let f = feature_encode(&img);
        for y in 0..6i64 {
            for x in 0..9i64 {
                for c in 0..3 {
                    let mut vals = vec![];
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (xx, yy) = (x + dx, y + dy);
                            if (0..9).contains(&xx) && (0..6).contains(&yy) {
                                vals.push(img.get(xx as usize, yy as usize, c));
                            }
                        }
                    }
                    let n = vals.len() as f64;
                    let m = vals.iter().sum::<f64>() / n;
                    let s = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                    let p = f.pixel(x as usize, y as usize);
                    assert_relative_eq!(p[3 + c], m, epsilon = 1e-12);
                    assert_relative_eq!(p[6 + c], s, epsilon = 1e-12);
                }
            }
        }
    }

    fn flat_camera(w: usize, h: usize, tx: f64) -> Camera {
        Camera::new(
            Camera::intrinsics(20.0, 20.0, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0),
            Matrix3::identity(),
            Vector3::new(tx, 0.0, 0.0),
            w,
            h,
            1.0,
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn identical_views_have_zero_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::from_fn(8, 6, 3, |_, _, _| rng.random());
        let f = feature_encode(&img);
        let cam = flat_camera(8, 6, 0.0);
        let hyps = DepthHypotheses::build(1.0, 5.0, 5, Spacing::Linear).unwrap();
        let vol = build_cost_volume(&[f.clone(), f.clone(), f], &[cam.clone(), cam.clone(), cam.clone()], &cam, &hyps)
            .unwrap();
        assert!(vol.cost.iter().all(|&c| c.abs() < 1e-15));
        assert!(vol.valid_views.iter().all(|&n| n == 3));
    }

    #[test]
    fn two_view_variance_formula() {
        let cam = flat_camera(3, 3, 0.0);
        let a = FeatureMap { width: 3, height: 3, channels: 1, data: vec![0.2; 9] };
        let b = FeatureMap { width: 3, height: 3, channels: 1, data: vec![0.7; 9] };
        let hyps = DepthHypotheses::build(1.0, 2.0, 2, Spacing::Linear).unwrap();
        let vol = build_cost_volume(&[a, b], &[cam.clone(), cam.clone()], &cam, &hyps).unwrap();
        let m = 0.45;
        let expected = ((0.2 - m) * (0.2f64 - m) + (0.7 - m) * (0.7f64 - m)) / 2.0;
        for &c in &vol.cost {
            assert_relative_eq!(c, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn too_few_views() {
        let cam = flat_camera(3, 3, 0.0);
        let f = FeatureMap { width: 3, height: 3, channels: 1, data: vec![0.0; 9] };
        let hyps = DepthHypotheses::build(1.0, 2.0, 2, Spacing::Linear).unwrap();
        assert!(matches!(
            build_cost_volume(&[f], &[cam.clone()], &cam, &hyps),
            Err(Error::TooFewViews(1))
        ));
    }

    fn random_volume(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> CostVolume {
        CostVolume {
            depth_count: d,
            width: w,
            height: h,
            cost: (0..d * h * w).map(|_| rng.random::<f64>()).collect(),
            valid_views: vec![3; d * h * w],
        }
    }

    #[test]
    fn regularize_radius_zero_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vol = random_volume(&mut rng, 4, 5, 6);
        assert_eq!(regularize(&vol, 0), vol);
        let constant = CostVolume { cost: vec![0.3; vol.cost.len()], ..vol };
        let smoothed = regularize(&constant, 2);
        for &c in &smoothed.cost {
            assert_relative_eq!(c, 0.3, epsilon = 1e-14);
        }
    }

    #[test]
    fn regularize_matches_triple_loop() {
        let (dd, h, w) = (5, 6, 7);
        let mut vol = CostVolume {
            depth_count: dd,
            width: w,
            height: h,
            cost: vec![0.0; dd * h * w],
            valid_views: vec![2; dd * h * w],
        };
        let i = vol.index(2, 1, 4);
        vol.cost[i] = 1.0;
        let j = vol.index(0, 6, 0);
        vol.cost[j] = 0.5;
        for radius in 1..=2usize {
            let out = regularize(&vol, radius);
            let r = radius as i64;
            let n = ((2 * r + 1) as f64).powi(3);
            for d in 0..dd {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for kd in -r..=r {
                            for ky in -r..=r {
                                for kx in -r..=r {
                                    let dz = (d as i64 + kd).clamp(0, dd as i64 - 1) as usize;
                                    let yy = (y as i64 + ky).clamp(0, h as i64 - 1) as usize;
                                    let xx = (x as i64 + kx).clamp(0, w as i64 - 1) as usize;
                                    s += vol.cost_at(dz, xx, yy);
                                }
                            }
                        }
                        assert_relative_eq!(out.cost_at(d, x, y), s / n, epsilon = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn regress_one_hot_and_uniform() {
        let hyps = DepthHypotheses::build(1.0, 3.0, 3, Spacing::Linear).unwrap();
        let vol = CostVolume {
            depth_count: 3,
            width: 1,
            height: 1,
            cost: vec![1e3, 0.0, 1e3],
            valid_views: vec![2; 3],
        };
        let dm = depth_regress(&vol, &hyps, 0.01).unwrap();
        assert_eq!(dm.depth[0], 2.0);
        assert_relative_eq!(dm.confidence[0], 1.0, epsilon = 1e-12);
        let vol = CostVolume { cost: vec![0.2; 3], ..vol };
        let dm = depth_regress(&vol, &hyps, 0.01).unwrap();
        assert_relative_eq!(dm.depth[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(dm.confidence[0], 1.0 / 3.0, epsilon = 1e-12);
        assert!(depth_regress(&vol, &hyps, 0.0).is_err());
    }

    #[test]
    fn regress_marks_unobserved_pixels_invalid() {
        let hyps = DepthHypotheses::build(1.0, 3.0, 3, Spacing::Linear).unwrap();
        let vol = CostVolume {
            depth_count: 3,
            width: 2,
            height: 1,
            cost: vec![0.0; 6],
            valid_views: vec![1, 2, 0, 2, 1, 0],
        };
        let dm = depth_regress(&vol, &hyps, 0.01).unwrap();
        assert_eq!(dm.valid, vec![false, true]);
        assert_relative_eq!(dm.depth[1], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn fine_hypotheses_are_clamped() {
        let cam = flat_camera(2, 1, 0.0);
        let hyps = DepthHypotheses::build(1.0, 5.0, 5, Spacing::Linear).unwrap();
        let coarse = DepthMap::from_depths(2, 1, vec![1.0, 4.9]);
        let fine = refine_hypotheses(&coarse, &hyps, &cam, 8, 2.0).unwrap();
        for d in 0..8 {
            for x in 0..2 {
                let z = fine.at(d, x, 0);
                assert!((1.0..=5.0).contains(&z));
            }
        }
        assert_eq!(fine.at(0, 0, 0), 1.0);
        assert_relative_eq!(fine.at(7, 0, 0), 3.0, epsilon = 1e-12);
        assert_eq!(fine.at(7, 1, 0), 5.0);
    }
}
