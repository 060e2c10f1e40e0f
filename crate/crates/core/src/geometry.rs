//! Pinhole camera algebra: projection, unprojection, plane-induced homographies
//! and bilinear warping.
//!
//! Conventions: `x_cam = R * x_world + t`; pixel centers sit at integer
//! coordinates; depth is measured along the camera's principal axis (camera z).

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::Image;

pub type Point3 = Vector3<f64>;
pub type Pixel = Vector2<f64>;

const ORTHO_TOL: f64 = 1e-9;
const MIN_Z: f64 = 1e-9;

/// Pinhole camera with world-to-camera extrinsics and a depth range.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCamera("K must be upper triangular".into()));
        }
        if k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera("K[2][2] must be 1".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let k_inv = k.try_inverse().ok_or(Error::SingularIntrinsics)?;
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if !(ortho < ORTHO_TOL) || !((r.determinant() - 1.0).abs() < ORTHO_TOL) {
            return Err(Error::InvalidCamera(format!(
                "R is not a rotation (|RtR - I| = {ortho:e}, det = {})",
                r.determinant()
            )));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("t must be finite".into()));
        }
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got near={near} far={far}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be non-zero".into()));
        }
        Ok(Self {
            k,
            k_inv,
            r,
            t,
            width,
            height,
            near,
            far,
        })
    }

    /// Intrinsics with focal `(fx, fy)` and principal point `(cx, cy)`.
    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    /// Camera at `eye` looking towards `target`; image y points along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Point3,
        target: Point3,
        up: Vector3<f64>,
        k: Matrix3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = (-up)
            .cross(&forward)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        Self::new(k, r, t, width, height, near, far)
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn k_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn t(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        -(self.r.transpose() * self.t)
    }

    /// Unit principal axis in world coordinates (third row of `R`).
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.r.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= (self.width - 1) as f64
            && px.y <= (self.height - 1) as f64
    }

    /// Projects a world point; returns the pixel and its depth along the principal axis.
    pub fn project(&self, p: &Point3) -> Result<(Pixel, f64)> {
        let pc = self.world_to_camera(p);
        if pc.z <= MIN_Z {
            return Err(Error::BehindCamera(pc.z));
        }
        let h = self.k * pc;
        Ok((Pixel::new(h.x / h.z, h.y / h.z), pc.z))
    }

    /// Lifts pixel `x` at depth `d` to world space: `Rᵀ(d·K⁻¹[x;1] − t)`.
    pub fn unproject(&self, x: &Pixel, d: f64) -> Result<Point3> {
        if !(d > 0.0) {
            return Err(Error::NonPositiveDepth(d));
        }
        Ok(self.unproject_unchecked(x, d))
    }

    #[inline]
    pub(crate) fn unproject_unchecked(&self, x: &Pixel, d: f64) -> Point3 {
        let ray = self.k_inv * Vector3::new(x.x, x.y, 1.0);
        self.r.transpose() * (ray * d - self.t)
    }
}

/// Homography mapping target pixels to source pixels for scene points on the
/// fronto-parallel plane at depth `z` in the target frame.
///
/// `H(z) = K_s R_s (I + (R_sᵀ t_s − R_tᵀ t_t) aᵀ / z) R_tᵀ K_t⁻¹` with `a` the
/// target principal axis in world coordinates.
pub fn homography(src: &Camera, tgt: &Camera, z: f64) -> Result<Matrix3<f64>> {
    if !(z > 0.0) {
        return Err(Error::NonPositiveDepth(z));
    }
    Ok(PlaneSweep::new(src, tgt).at(z))
}

/// The two depth-independent parts of [`homography`], `H(z) = A + B / z`.
#[derive(Clone, Debug)]
pub struct PlaneSweep {
    pub(crate) rotational: Matrix3<f64>,
    pub(crate) translational: Matrix3<f64>,
}

impl PlaneSweep {
    pub fn new(src: &Camera, tgt: &Camera) -> Self {
        let offset = src.r.transpose() * src.t - tgt.r.transpose() * tgt.t;
        let a = tgt.principal_axis();
        let back = tgt.r.transpose() * tgt.k_inv;
        let front = src.k * src.r;
        Self {
            rotational: front * back,
            translational: front * (offset * a.transpose()) * back,
        }
    }

    #[inline]
    pub fn at(&self, z: f64) -> Matrix3<f64> {
        self.rotational + self.translational / z
    }

    /// Maps target pixel `p` through `H(z)`; `None` when the homogeneous w is not positive.
    #[inline]
    pub fn map(&self, p: &Pixel, z: f64) -> Option<Pixel> {
        apply_homography(&self.at(z), p)
    }
}

#[inline]
pub fn apply_homography(h: &Matrix3<f64>, p: &Pixel) -> Option<Pixel> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z <= MIN_Z || !q.z.is_finite() {
        return None;
    }
    Some(Pixel::new(q.x / q.z, q.y / q.z))
}

/// Bilinear sample of all channels of `img` at continuous `(x, y)`; returns
/// false outside `[0, W−1] × [0, H−1]`.
pub fn sample_bilinear(img: &Image, x: f64, y: f64, out: &mut [f64]) -> bool {
    sample_bilinear_raw(&img.data, img.width, img.height, img.channels, x, y, out)
}

/// [`sample_bilinear`] over a bare interleaved buffer.
pub fn sample_bilinear_raw(
    data: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    x: f64,
    y: f64,
    out: &mut [f64],
) -> bool {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return false;
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |xx: usize, yy: usize, c: usize| data[(yy * width + xx) * channels + c];
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
        let bottom = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    true
}

/// Resamples `img` so that `output(p) = img(H·p)`; the mask is false where the
/// sample falls outside the source or the homogeneous coordinate is not positive.
pub fn warp_bilinear(img: &Image, h: &Matrix3<f64>) -> (Image, Vec<bool>) {
    let mut out = Image::new(img.width, img.height, img.channels);
    let mut mask = vec![false; img.pixel_count()];
    let mut buf = vec![0.0; img.channels];
    for y in 0..img.height {
        for x in 0..img.width {
            let Some(q) = apply_homography(h, &Pixel::new(x as f64, y as f64)) else {
                continue;
            };
            if sample_bilinear(img, q.x, q.y, &mut buf) {
                let i = y * img.width + x;
                mask[i] = true;
                out.data[i * img.channels..(i + 1) * img.channels].copy_from_slice(&buf);
            }
        }
    }
    (out, mask)
}
