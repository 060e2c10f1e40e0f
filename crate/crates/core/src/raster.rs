//! Differentiable tile-based Gaussian splatting.
//!
//! Gaussians are projected with the local affine (EWA) approximation
//! `Σ' = J W Σ Wᵀ Jᵀ`, binned into square tiles, sorted front to back by
//! `(depth, index)` and alpha-blended. The backward pass replays each tile's
//! forward state and reduces per-tile gradient buffers in fixed tile order, so
//! results do not depend on the number of threads.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::gaussian::{unit_quat_to_rot, GaussianCloud, Quat};
use crate::geometry::{Camera, Pixel};
use crate::image::Image;

/// Isotropic dilation added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
/// Upper clamp on per-pixel alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Projected covariances with a smaller determinant are skipped.
pub const MIN_DET: f64 = 1e-12;
/// Gaussians closer than this fraction of `near` are culled.
pub const NEAR_CULL: f64 = 0.2;
pub const DEFAULT_TILE: usize = 16;

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: Pixel,
    pub cov: Matrix2<f64>,
    /// Inverse of `cov`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub index: usize,
    /// Pixel radius beyond which alpha is provably below [`ALPHA_MIN`].
    pub radius: f64,
}

/// Jacobian of pixel coordinates with respect to the camera-space point.
#[inline]
fn projection_jacobian(k: &Matrix3<f64>, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, skew, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        fx * iz,
        skew * iz,
        -(fx * p.x + skew * p.y) * iz2,
        0.0,
        fy * iz,
        -fy * p.y * iz2,
    )
}

/// Projects Gaussian `index` of `cloud`; `None` when culled or degenerate.
pub fn project_splat(cloud: &GaussianCloud, index: usize, cam: &Camera) -> Option<Splat2D> {
    let p = cam.world_to_camera(&cloud.means[index]);
    if p.z <= cam.near * NEAR_CULL {
        return None;
    }
    let k = cam.k();
    let mean = Pixel::new(
        (k[(0, 0)] * p.x + k[(0, 1)] * p.y) / p.z + k[(0, 2)],
        k[(1, 1)] * p.y / p.z + k[(1, 2)],
    );
    let q = cloud.rotations[index];
    let rot = unit_quat_to_rot(&(q / q.norm()));
    let m = rot * Matrix3::from_diagonal(&cloud.scales[index]);
    let sigma = m * m.transpose();
    let t = projection_jacobian(k, &p) * cam.r();
    let cov = t * sigma * t.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov.determinant();
    if !(det >= MIN_DET) {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let half_trace = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
    let sigma_max = lambda_max.sqrt();
    let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    let reach = 3.0 * sigma_max;
    if mean.x < -reach || mean.y < -reach || mean.x > w + reach || mean.y > h + reach {
        return None;
    }
    let opacity = cloud.opacities[index];
    let level = (255.0 * opacity).ln();
    if !(level > 0.0) {
        return None;
    }
    Some(Splat2D {
        mean,
        cov,
        conic,
        depth: p.z,
        color: cloud.colors[index],
        opacity,
        index,
        radius: (2.0 * level * lambda_max).sqrt(),
    })
}

/// Projects every Gaussian in parallel, preserving cloud order.
pub fn project_all(cloud: &GaussianCloud, cam: &Camera) -> Vec<Splat2D> {
    (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| project_splat(cloud, i, cam))
        .collect()
}

/// The part of a splat the per-pixel alpha test reads, packed contiguously
/// per tile.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    x: f64,
    y: f64,
    q00: f64,
    q01: f64,
    q11: f64,
    opacity: f64,
    /// Squared cutoff radius with a little slack.
    r2: f64,
}

impl Footprint {
    fn of(s: &Splat2D) -> Self {
        Self {
            x: s.mean.x,
            y: s.mean.y,
            q00: s.conic[(0, 0)],
            q01: s.conic[(0, 1)],
            q11: s.conic[(1, 1)],
            opacity: s.opacity,
            r2: s.radius * s.radius * (1.0 + 1e-9) + 1e-9,
        }
    }

    fn gather(splats: &[Splat2D], order: &[u32]) -> Vec<Self> {
        order.iter().map(|&k| Self::of(&splats[k as usize])).collect()
    }

    /// Alpha at `px` with the Gaussian weight and offsets.
    #[inline]
    fn alpha(&self, px: &Pixel) -> Option<(f64, f64, f64, f64)> {
        let dx = px.x - self.x;
        let dy = px.y - self.y;
        // beyond the radius alpha is below ALPHA_MIN; skip the exp
        if dx * dx + dy * dy > self.r2 {
            return None;
        }
        let power = -0.5 * (self.q00 * dx * dx + self.q11 * dy * dy) - self.q01 * dx * dy;
        if power > 0.0 {
            return None;
        }
        let g = power.exp();
        let alpha = (self.opacity * g).min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            return None;
        }
        Some((alpha, g, dx, dy))
    }
}

/// Rendered color, expected depth and accumulated alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl RenderOutput {
    fn blank(w: usize, h: usize) -> Self {
        Self {
            color: Image::new(w, h, 3),
            depth: vec![0.0; w * h],
            alpha: vec![0.0; w * h],
        }
    }

    /// Pixels whose accumulated alpha reaches 0.5 carry a usable depth.
    pub fn depth_valid(&self) -> Vec<bool> {
        self.alpha.iter().map(|&a| a >= 0.5).collect()
    }
}

/// Front-to-back blend of `order` (indices into `splats`, with `fps` their
/// packed footprints) at one pixel.
#[inline]
fn blend_pixel(splats: &[Splat2D], order: &[u32], fps: &[Footprint], px: &Pixel) -> ([f64; 3], f64, f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut d = 0.0;
    for (&k, fp) in order.iter().zip(fps) {
        let Some((alpha, ..)) = fp.alpha(px) else {
            continue;
        };
        let s = &splats[k as usize];
        let w = alpha * t;
        for ch in 0..3 {
            c[ch] += s.color[ch] * w;
        }
        d += s.depth * w;
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    (c, d, 1.0 - t)
}

fn depth_order(splats: &[Splat2D], a: u32, b: u32) -> std::cmp::Ordering {
    let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
    sa.depth
        .total_cmp(&sb.depth)
        .then(sa.index.cmp(&sb.index))
}

/// Tile layout and per-tile depth-sorted splat lists.
struct Tiling {
    size: usize,
    cols: usize,
    rows: usize,
    lists: Vec<Vec<u32>>,
}

impl Tiling {
    fn build(splats: &[Splat2D], w: usize, h: usize, size: usize) -> Self {
        let size = size.max(1);
        let cols = w.div_ceil(size);
        let rows = h.div_ceil(size);
        let mut lists = vec![Vec::new(); cols * rows];
        for (k, s) in splats.iter().enumerate() {
            let r = s.radius + 1.0;
            let x0 = (s.mean.x - r).floor().max(0.0);
            let y0 = (s.mean.y - r).floor().max(0.0);
            let x1 = (s.mean.x + r).ceil().min((w - 1) as f64);
            let y1 = (s.mean.y + r).ceil().min((h - 1) as f64);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / size, x1 as usize / size);
            let (ty0, ty1) = (y0 as usize / size, y1 as usize / size);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * cols + tx].push(k as u32);
                }
            }
        }
        lists
            .par_iter_mut()
            .for_each(|l| l.sort_unstable_by(|&a, &b| depth_order(splats, a, b)));
        Self {
            size,
            cols,
            rows,
            lists,
        }
    }

    fn pixels(&self, tile: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.cols, tile / self.cols);
        let (x0, y0) = (tx * self.size, ty * self.size);
        let (x1, y1) = ((x0 + self.size).min(w), (y0 + self.size).min(h));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Tiled forward render on a black background.
pub fn render(cloud: &GaussianCloud, cam: &Camera, tile: usize) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let splats = project_all(cloud, cam);
    let tiling = Tiling::build(&splats, w, h, tile);
    let per_tile: Vec<Vec<(usize, [f64; 3], f64, f64)>> = (0..tiling.cols * tiling.rows)
        .into_par_iter()
        .map(|t| {
            let list = &tiling.lists[t];
            let fps = Footprint::gather(&splats, list);
            tiling
                .pixels(t, w, h)
                .map(|(x, y)| {
                    let (c, d, a) = blend_pixel(&splats, list, &fps, &Pixel::new(x as f64, y as f64));
                    (y * w + x, c, d, a)
                })
                .collect()
        })
        .collect();
    let mut out = RenderOutput::blank(w, h);
    for (i, c, d, a) in per_tile.into_iter().flatten() {
        out.color.data[3 * i..3 * i + 3].copy_from_slice(&c);
        out.depth[i] = d;
        out.alpha[i] = a;
    }
    out
}

/// Single-threaded reference: one global depth sort, every splat tested at every pixel.
pub fn render_reference(cloud: &GaussianCloud, cam: &Camera) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let splats: Vec<Splat2D> = (0..cloud.len())
        .filter_map(|i| project_splat(cloud, i, cam))
        .collect();
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| depth_order(&splats, a, b));
    let fps = Footprint::gather(&splats, &order);
    let mut out = RenderOutput::blank(w, h);
    for y in 0..h {
        for x in 0..w {
            let (c, d, a) = blend_pixel(&splats, &order, &fps, &Pixel::new(x as f64, y as f64));
            let i = y * w + x;
            out.color.data[3 * i..3 * i + 3].copy_from_slice(&c);
            out.depth[i] = d;
            out.alpha[i] = a;
        }
    }
    out
}

/// Upstream gradients of a scalar loss with respect to the render outputs.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    /// `H·W·3`, interleaved like [`Image`].
    pub color: Vec<f64>,
    pub depth: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
}

impl OutputGrads {
    pub fn color_only(color: Vec<f64>) -> Self {
        Self {
            color,
            depth: None,
            alpha: None,
        }
    }
}

/// Gradients with respect to every Gaussian attribute (activated form).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub means: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    /// With respect to the raw (unnormalized) stored quaternion.
    pub rotations: Vec<Quat>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
    /// With respect to the projected pixel mean; drives density control.
    pub means2d: Vec<Vector2<f64>>,
    /// Whether the Gaussian touched any pixel.
    pub visible: Vec<bool>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            scales: vec![Vector3::zeros(); n],
            rotations: vec![Quat::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
            means2d: vec![Vector2::zeros(); n],
            visible: vec![false; n],
        }
    }
}

/// Screen-space gradient accumulator for one splat.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    mean: [f64; 2],
    /// `(∂/∂Q00, ∂/∂Q01 counting both off-diagonals, ∂/∂Q11)`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    touched: bool,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
        self.touched |= o.touched;
    }
}

/// Backward pass of one tile; returns gradients aligned with the tile list.
fn backward_tile(
    splats: &[Splat2D],
    list: &[u32],
    pixels: impl Iterator<Item = (usize, usize)>,
    w: usize,
    grads: &OutputGrads,
) -> Vec<SplatGrad> {
    let mut acc = vec![SplatGrad::default(); list.len()];
    let fps = Footprint::gather(splats, list);
    // (position in list, alpha, gaussian weight, dx, dy, transmittance before)
    let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
    for (x, y) in pixels {
        let i = y * w + x;
        let dc = [grads.color[3 * i], grads.color[3 * i + 1], grads.color[3 * i + 2]];
        let dd = grads.depth.as_ref().map_or(0.0, |g| g[i]);
        let da = grads.alpha.as_ref().map_or(0.0, |g| g[i]);
        if dc == [0.0; 3] && dd == 0.0 && da == 0.0 {
            continue;
        }
        let px = Pixel::new(x as f64, y as f64);
        hits.clear();
        let mut t = 1.0;
        for (pos, fp) in fps.iter().enumerate() {
            let Some((alpha, g, dx, dy)) = fp.alpha(&px) else {
                continue;
            };
            hits.push((pos, alpha, g, dx, dy, t));
            t *= 1.0 - alpha;
            if t < TRANSMITTANCE_MIN {
                break;
            }
        }
        let mut suffix = 0.0;
        for &(pos, alpha, g, dx, dy, t_before) in hits.iter().rev() {
            let s = &splats[list[pos] as usize];
            let weight = alpha * t_before;
            let value = dc[0] * s.color[0] + dc[1] * s.color[1] + dc[2] * s.color[2]
                + dd * s.depth
                + da;
            let d_alpha = t_before * value - suffix / (1.0 - alpha);
            suffix += weight * value;

            let a = &mut acc[pos];
            a.touched = true;
            for ch in 0..3 {
                a.color[ch] += dc[ch] * weight;
            }
            a.depth += dd * weight;
            if s.opacity * g >= ALPHA_MAX {
                continue;
            }
            a.opacity += d_alpha * g;
            let d_power = d_alpha * s.opacity * g;
            let (q00, q01, q11) = (s.conic[(0, 0)], s.conic[(0, 1)], s.conic[(1, 1)]);
            a.conic[0] += -0.5 * dx * dx * d_power;
            a.conic[1] += -dx * dy * d_power;
            a.conic[2] += -0.5 * dy * dy * d_power;
            // power depends on the mean through dx = px - mean
            a.mean[0] += (q00 * dx + q01 * dy) * d_power;
            a.mean[1] += (q01 * dx + q11 * dy) * d_power;
        }
    }
    acc
}

/// Partial derivatives of the rotation matrix with respect to `(w, x, y, z)`.
fn rotation_partials(q: &Quat) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = 2.0;
    [
        Matrix3::new(0.0, -two * z, two * y, two * z, 0.0, -two * x, -two * y, two * x, 0.0),
        Matrix3::new(0.0, two * y, two * z, two * y, -4.0 * x, -two * w, two * z, two * w, -4.0 * x),
        Matrix3::new(-4.0 * y, two * x, two * w, two * x, 0.0, two * z, -two * w, two * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -two * w, two * x, two * w, -4.0 * z, two * y, two * x, two * y, 0.0),
    ]
}

/// Attribute gradients of one Gaussian.
struct ParamGrad {
    mean: Vector3<f64>,
    scale: Vector3<f64>,
    rotation: Quat,
}

/// Chains screen-space gradients of one splat back to its 3D attributes.
fn backward_splat(cloud: &GaussianCloud, s: &Splat2D, g: &SplatGrad, cam: &Camera) -> ParamGrad {
    let i = s.index;

    let k = cam.k();
    let view = cam.r();
    let p = cam.world_to_camera(&cloud.means[i]);
    let q_raw = cloud.rotations[i];
    let q_norm = q_raw.norm();
    let q = q_raw / q_norm;
    let rot = unit_quat_to_rot(&q);
    let scale = cloud.scales[i];
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let jac = projection_jacobian(k, &p);
    let t = jac * view;

    // conic -> projected covariance
    let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov2 = -(s.conic * g_conic * s.conic);
    // projected covariance -> 3D covariance and the linearized projection
    let g_sigma = t.transpose() * g_cov2 * t;
    let g_t = 2.0 * g_cov2 * t * sigma;
    let g_j = g_t * view.transpose();

    // camera-space point: through J, the pixel mean and the depth
    let (fx, skew, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_p = Vector3::zeros();
    g_p.z += -(fx * g_j[(0, 0)] + skew * g_j[(0, 1)] + fy * g_j[(1, 1)]) * iz2;
    g_p.x += -fx * iz2 * g_j[(0, 2)];
    g_p.y += -skew * iz2 * g_j[(0, 2)];
    g_p.z += 2.0 * (fx * p.x + skew * p.y) * iz3 * g_j[(0, 2)];
    g_p.y += -fy * iz2 * g_j[(1, 2)];
    g_p.z += 2.0 * fy * p.y * iz3 * g_j[(1, 2)];
    g_p += jac.transpose() * Vector2::from(g.mean);
    g_p.z += g.depth;
    let g_mean = view.transpose() * g_p;

    // Σ = M Mᵀ with M = R S
    let g_m = 2.0 * g_sigma * m;
    let mut g_scale = Vector3::zeros();
    let mut g_rot = Matrix3::zeros();
    for c in 0..3 {
        for r in 0..3 {
            g_scale[c] += g_m[(r, c)] * rot[(r, c)];
            g_rot[(r, c)] = g_m[(r, c)] * scale[c];
        }
    }
    let partials = rotation_partials(&q);
    let g_unit = Quat::from_fn(|j, _| g_rot.component_mul(&partials[j]).sum());
    ParamGrad {
        mean: g_mean,
        scale: g_scale,
        rotation: (g_unit - q * q.dot(&g_unit)) / q_norm,
    }
}

/// Exact gradients of the tiled forward render with respect to every
/// Gaussian attribute. Culled or skipped Gaussians receive zero gradient.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    grads: &OutputGrads,
    tile: usize,
) -> GaussianGrads {
    let (w, h) = (cam.width, cam.height);
    assert_eq!(grads.color.len(), w * h * 3, "color gradient size");
    let splats = project_all(cloud, cam);
    let tiling = Tiling::build(&splats, w, h, tile);
    let per_tile: Vec<Vec<SplatGrad>> = (0..tiling.cols * tiling.rows)
        .into_par_iter()
        .map(|t| backward_tile(&splats, &tiling.lists[t], tiling.pixels(t, w, h), w, grads))
        .collect();
    let mut screen = vec![SplatGrad::default(); splats.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (&k, g) in tiling.lists[t].iter().zip(acc) {
            screen[k as usize].add(g);
        }
    }
    let per_splat: Vec<ParamGrad> = splats
        .par_iter()
        .zip(&screen)
        .map(|(s, g)| backward_splat(cloud, s, g, cam))
        .collect();
    let mut out = GaussianGrads::zeros(cloud.len());
    for ((s, g), p) in splats.iter().zip(&screen).zip(per_splat) {
        let i = s.index;
        out.means[i] = p.mean;
        out.scales[i] = p.scale;
        out.rotations[i] = p.rotation;
        out.opacities[i] = g.opacity;
        out.colors[i] = Vector3::from(g.color);
        out.means2d[i] = Vector2::from(g.mean);
        out.visible[i] = g.touched;
    }
    out
}
