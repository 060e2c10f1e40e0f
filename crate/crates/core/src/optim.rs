//! Adam, adaptive density control and the per-scene optimization loop.

use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logit, sigmoid, unit_quat_to_rot, GaussianCloud, Quat};
use crate::geometry::Camera;
use crate::image::Image;
use crate::loss::{ft_loss_with_grad, psnr};
use crate::raster::{render, render_backward, OutputGrads};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// One bias-corrected Adam update of `values` in place, `step` counting from 1.
pub fn adam_update(values: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, step: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let step_size = lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for i in 0..values.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grads[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        values[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + ADAM_EPS);
    }
}

/// Attribute groups in their unconstrained optimization form.
pub const GROUPS: usize = 5;
const MEANS: usize = 0;
const LOG_SCALES: usize = 1;
const ROTATIONS: usize = 2;
const OPACITY_LOGITS: usize = 3;
const COLORS: usize = 4;
const WIDTHS: [usize; GROUPS] = [3, 3, 4, 1, 3];

/// Flat parameter arrays: means, log scales, quaternions, opacity logits, colors.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub groups: [Vec<f64>; GROUPS],
}

impl SceneParams {
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        let clamp_op = |a: f64| a.clamp(1e-6, 1.0 - 1e-6);
        Self {
            groups: [
                cloud.means.iter().flat_map(|m| m.iter().copied()).collect(),
                cloud.scales.iter().flat_map(|s| s.iter().map(|v| v.ln())).collect(),
                cloud.rotations.iter().flat_map(|q| q.iter().copied()).collect(),
                cloud.opacities.iter().map(|&a| logit(clamp_op(a))).collect(),
                cloud.colors.iter().flat_map(|c| c.iter().copied()).collect(),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.groups[OPACITY_LOGITS].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_cloud(&self) -> GaussianCloud {
        let g = &self.groups;
        let mut cloud = GaussianCloud::with_capacity(self.len());
        for i in 0..self.len() {
            let v3 = |k: usize| Vector3::new(g[k][3 * i], g[k][3 * i + 1], g[k][3 * i + 2]);
            cloud.means.push(v3(MEANS));
            cloud.scales.push(v3(LOG_SCALES).map(f64::exp));
            cloud.rotations.push(Quat::from_column_slice(&g[ROTATIONS][4 * i..4 * i + 4]));
            cloud.opacities.push(sigmoid(g[OPACITY_LOGITS][i]));
            cloud.colors.push(v3(COLORS));
        }
        cloud
    }

    /// Chains activated-attribute gradients into this parameterization.
    pub fn chain(&self, cloud: &GaussianCloud, grads: &crate::raster::GaussianGrads) -> Self {
        let n = self.len();
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..3 {
                out.groups[MEANS][3 * i + k] = grads.means[i][k];
                out.groups[LOG_SCALES][3 * i + k] = grads.scales[i][k] * cloud.scales[i][k];
                out.groups[COLORS][3 * i + k] = grads.colors[i][k];
            }
            for k in 0..4 {
                out.groups[ROTATIONS][4 * i + k] = grads.rotations[i][k];
            }
            let a = cloud.opacities[i];
            out.groups[OPACITY_LOGITS][i] = grads.opacities[i] * a * (1.0 - a);
        }
        out
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            groups: WIDTHS.map(|w| vec![0.0; w * n]),
        }
    }

    /// Restores hard constraints: unit quaternions and colors in `[0,1]`.
    fn project(&mut self) {
        for q in self.groups[ROTATIONS].chunks_exact_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
        for c in &mut self.groups[COLORS] {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// Per-attribute learning rates. The position rate is relative to the scene
/// extent and decays exponentially from `position` to `position_final`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    /// Rates for each group at progress `t ∈ [0,1]` through the schedule.
    pub fn at(&self, t: f64, extent: f64) -> [f64; GROUPS] {
        let t = t.clamp(0.0, 1.0);
        let pos = (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp() * extent;
        [pos, self.scale, self.rotation, self.opacity, self.color]
    }
}

/// Adam moments for every parameter group plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: [Vec<f64>; GROUPS],
    pub v: [Vec<f64>; GROUPS],
    pub lr: [f64; GROUPS],
}

impl AdamState {
    pub fn new(params: &SceneParams, lr: [f64; GROUPS]) -> Self {
        let zeros = params.groups.clone().map(|g| vec![0.0; g.len()]);
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr,
        }
    }

    /// Rebuilds moments after density control: `origin[j] = Some(i)` carries
    /// Gaussian `i`'s moments to slot `j`; new Gaussians start at zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        for g in 0..GROUPS {
            let w = WIDTHS[g];
            let remap = |src: &Vec<f64>| {
                let mut out = vec![0.0; origin.len() * w];
                for (j, o) in origin.iter().enumerate() {
                    if let Some(i) = o {
                        out[j * w..(j + 1) * w].copy_from_slice(&src[i * w..(i + 1) * w]);
                    }
                }
                out
            };
            self.m[g] = remap(&self.m[g]);
            self.v[g] = remap(&self.v[g]);
        }
    }
}

/// Advances the step count and updates every group, then renormalizes
/// quaternions and clamps colors.
pub fn adam_step(state: &mut AdamState, params: &mut SceneParams, grads: &SceneParams) -> Result<()> {
    for g in 0..GROUPS {
        let (p, d) = (params.groups[g].len(), grads.groups[g].len());
        if p != d || state.m[g].len() != p || state.v[g].len() != p {
            return Err(Error::ShapeMismatch(format!(
                "group {g}: {p} params, {d} grads, {} moments",
                state.m[g].len()
            )));
        }
    }
    state.step += 1;
    for g in 0..GROUPS {
        adam_update(
            &mut params.groups[g],
            &grads.groups[g],
            &mut state.m[g],
            &mut state.v[g],
            state.lr[g],
            state.step,
        );
    }
    params.project();
    Ok(())
}

/// Split/clone/prune thresholds. Scale thresholds are fractions of the scene
/// extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityControlConfig {
    /// Mean screen-space positional gradient (NDC units) that triggers densification.
    pub grad_threshold: f64,
    /// Max scale above which a densified Gaussian is split rather than cloned.
    pub split_scale: f64,
    pub prune_opacity: f64,
    /// Max scale above which a Gaussian is pruned.
    pub prune_scale: f64,
    /// First iteration at which `prune_scale` applies.
    pub prune_scale_after: usize,
    pub interval: usize,
    pub split_factor: f64,
    /// Iterations before the first density control.
    pub warmup: usize,
    /// No density control after this iteration.
    pub until: usize,
}

impl Default for DensityControlConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            split_scale: 0.01,
            prune_opacity: 0.005,
            prune_scale: 0.1,
            prune_scale_after: 3000,
            interval: 100,
            split_factor: 1.6,
            warmup: 500,
            until: 1500,
        }
    }
}

impl DensityControlConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.grad_threshold,
            self.split_scale,
            self.prune_opacity,
            self.prune_scale,
            self.split_factor,
        ];
        if pos.iter().all(|v| *v > 0.0 && v.is_finite()) && self.interval >= 1 {
            Ok(())
        } else {
            Err(Error::Config("density control thresholds must be positive, interval ≥ 1".into()))
        }
    }
}

/// Running mean of screen-space positional gradient norms per Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Records one view; pixel gradients are rescaled to NDC units.
    pub fn record(&mut self, grads: &crate::raster::GaussianGrads, width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..self.sum.len() {
            if grads.visible[i] {
                let g = grads.means2d[i];
                self.sum[i] += (g.x * sx).hypot(g.y * sy);
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Result of density control: the new cloud and, per output Gaussian, the
/// input Gaussian whose optimizer state it inherits (`None` for new ones).
#[derive(Clone, Debug, PartialEq)]
pub struct Densified {
    pub cloud: GaussianCloud,
    pub origin: Vec<Option<usize>>,
}

/// Clones small high-gradient Gaussians, splits large ones into two children
/// sampled from the parent, then prunes transparent or oversized Gaussians.
pub fn density_control(
    cloud: &GaussianCloud,
    stats: &GradStats,
    cfg: &DensityControlConfig,
    extent: f64,
    seed: u64,
) -> Densified {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cloud.len();
    let max_scale = |s: &Vector3<f64>| s.max();
    let mut keep = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        if stats.mean(i) >= cfg.grad_threshold {
            if max_scale(&cloud.scales[i]) > cfg.split_scale * extent {
                splits.push(i);
                continue;
            }
            clones.push(i);
        }
        keep.push(i);
    }
    let mut out = cloud.select(&keep);
    let mut origin: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
    out.extend_from(&cloud.select(&clones));
    origin.extend(clones.iter().map(|_| None));
    for &i in &splits {
        let g = cloud.get(i);
        let rot = unit_quat_to_rot(&(g.rotation / g.rotation.norm()));
        for _ in 0..2 {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let mut child = g;
            child.mean = g.mean + rot * g.scale.component_mul(&z);
            child.scale = g.scale / cfg.split_factor;
            out.push(child);
            origin.push(None);
        }
    }
    let survivors: Vec<usize> = (0..out.len())
        .filter(|&j| out.opacities[j] >= cfg.prune_opacity && max_scale(&out.scales[j]) <= cfg.prune_scale * extent)
        .collect();
    Densified {
        cloud: out.select(&survivors),
        origin: survivors.iter().map(|&j| origin[j]).collect(),
    }
}

/// Radius of the sphere around the mean camera center enclosing all centers,
/// enlarged by 10%.
pub fn scene_extent(cams: &[Camera]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cams.iter().map(Camera::center).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Settings of the per-scene optimization loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub iters: usize,
    pub lambda_ft: f64,
    pub lr: LearningRates,
    pub density: DensityControlConfig,
    pub tile: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lambda_ft: 0.2,
            lr: LearningRates::default(),
            density: DensityControlConfig::default(),
            // smaller tiles shorten per-pixel splat lists at desk resolutions
            tile: 8,
        }
    }
}

/// One row of the optimization log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub psnr_train: f64,
    pub n_gaussians: usize,
    pub wall_ms: f64,
}

/// Round-robin fine-tuning with the L1 + D-SSIM loss and periodic density
/// control. `seed` drives split sampling.
pub fn optimize_scene(
    init: &GaussianCloud,
    views: &[(Camera, Image)],
    iters: usize,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(GaussianCloud, Vec<LogEntry>)> {
    if init.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    cfg.density.validate()?;
    init.validate()?;
    for (cam, img) in views {
        if img.width != cam.width || img.height != cam.height || img.channels != 3 {
            return Err(Error::ResolutionMismatch(format!(
                "{}x{}x{} image for a {}x{} camera",
                img.width, img.height, img.channels, cam.width, cam.height
            )));
        }
    }
    let extent = scene_extent(&views.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>());
    let start = Instant::now();
    let mut params = SceneParams::from_cloud(init);
    let mut adam = AdamState::new(&params, cfg.lr.at(0.0, extent));
    let mut stats = GradStats::new(params.len());
    let mut log = Vec::with_capacity(iters);
    let mut cloud = init.clone();
    for it in 1..=iters {
        let (cam, target) = &views[(it - 1) % views.len()];
        adam.lr = cfg.lr.at(it as f64 / iters as f64, extent);
        let out = render(&cloud, cam, cfg.tile);
        let (loss, dimg) = ft_loss_with_grad(&out.color, target, cfg.lambda_ft)?;
        let train_psnr = psnr(&out.color, target)?;
        let grads = render_backward(&cloud, cam, &OutputGrads::color_only(dimg), cfg.tile);
        stats.record(&grads, cam.width, cam.height);
        let g = params.chain(&cloud, &grads);
        adam_step(&mut adam, &mut params, &g)?;
        cloud = params.to_cloud();
        let mut d = cfg.density;
        if it < d.prune_scale_after {
            d.prune_scale = f64::INFINITY;
        }
        if it >= d.warmup && it <= d.until && it % d.interval == 0 {
            let res = density_control(&cloud, &stats, &d, extent, seed ^ it as u64);
            cloud = res.cloud;
            params = SceneParams::from_cloud(&cloud);
            adam.remap(&res.origin);
            stats = GradStats::new(cloud.len());
        }
        log.push(LogEntry {
            iter: it,
            loss,
            psnr_train: train_psnr,
            n_gaussians: cloud.len(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((cloud, log))
}
