//! Anisotropic 3D Gaussians, their covariance factorization and pixel-aligned
//! initialization from a depth map.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pixel, Point3};

/// Quaternion in `(w, x, y, z)` order.
pub type Quat = Vector4<f64>;

pub const IDENTITY_QUAT: Quat = Vector4::new(1.0, 0.0, 0.0, 0.0);

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// A single Gaussian with activated attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Point3,
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::ShapeMismatch(format!("invalid gaussian {what}")));
        if !self.mean.iter().all(|v| v.is_finite()) {
            return bad("mean");
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return bad("scale");
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return bad("rotation norm");
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad("opacity");
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return bad("color");
        }
        Ok(())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance3d(&self.scale, &self.rotation).expect("validated quaternion")
    }
}

/// Structure-of-arrays Gaussian collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<Point3>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Quat>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            means: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.means.push(g.mean);
        self.scales.push(g.scale);
        self.rotations.push(g.rotation);
        self.opacities.push(g.opacity);
        self.colors.push(g.color);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.means[i],
            scale: self.scales[i],
            rotation: self.rotations[i],
            opacity: self.opacities[i],
            color: self.colors[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn extend_from(&mut self, other: &GaussianCloud) {
        self.means.extend_from_slice(&other.means);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacities.extend_from_slice(&other.opacities);
        self.colors.extend_from_slice(&other.colors);
    }

    /// Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> GaussianCloud {
        let mut out = GaussianCloud::with_capacity(indices.len());
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.scales.len() != n
            || self.rotations.len() != n
            || self.opacities.len() != n
            || self.colors.len() != n
        {
            return Err(Error::ShapeMismatch("attribute arrays differ in length".into()));
        }
        for (i, g) in self.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::ShapeMismatch(format!("gaussian {i}: {e}")))?;
        }
        Ok(())
    }
}

impl FromIterator<Gaussian> for GaussianCloud {
    fn from_iter<T: IntoIterator<Item = Gaussian>>(iter: T) -> Self {
        let mut c = GaussianCloud::new();
        for g in iter {
            c.push(g);
        }
        c
    }
}

/// Rotation matrix of a quaternion, renormalized first.
pub fn quat_to_rot(q: &Quat) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !(n >= 1e-9) {
        return Err(Error::ZeroQuaternion);
    }
    Ok(unit_quat_to_rot(&(q / n)))
}

#[inline]
pub(crate) fn unit_quat_to_rot(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance3d(scale: &Vector3<f64>, rotation: &Quat) -> Result<Matrix3<f64>> {
    let m = quat_to_rot(rotation)? * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Affine map `out = W · input + b` with `W` stored row-major (`out × in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineHead {
    pub inputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineHead {
    pub fn constant(inputs: usize, bias: Vec<f64>) -> Self {
        Self {
            inputs,
            weights: vec![0.0; inputs * bias.len()],
            bias,
        }
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.inputs);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn set(&mut self, out: usize, input: usize, w: f64) {
        self.weights[out * self.inputs + input] = w;
    }

    fn check(&self, name: &str, inputs: usize, outputs: usize) -> Result<()> {
        if self.inputs != inputs
            || self.outputs() != outputs
            || self.weights.len() != inputs * outputs
        {
            return Err(Error::ShapeMismatch(format!(
                "{name} head expects {outputs}x{inputs} weights"
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("{name} head has non-finite parameters")));
        }
        Ok(())
    }
}

/// Colors are clamped to this margin before taking their logit.
pub const COLOR_CLAMP: f64 = 1e-4;

/// Head input for a feature vector laid out as `[color.., mean.., std..]`:
/// the features followed by the logit of the clamped color channels.
pub fn head_input(features: &[f64], color_channels: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(features);
    out.extend(
        features[..color_channels]
            .iter()
            .map(|&c| logit(c.clamp(COLOR_CLAMP, 1.0 - COLOR_CLAMP))),
    );
}

/// Scale, rotation, opacity and color heads of the Gaussian branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeHeads {
    pub color_channels: usize,
    pub scale: AffineHead,
    pub rotation: AffineHead,
    pub opacity: AffineHead,
    pub color: AffineHead,
}

impl DecodeHeads {
    /// Hand-set weights for photometric features with `color_channels` colors:
    /// unit pixel-footprint scale, identity rotation, opacity `logit(0.9)`
    /// lowered by the mean window std, and color reproducing the pixel.
    pub fn photometric(color_channels: usize) -> Self {
        let c = color_channels;
        let inputs = 3 * c + c;
        let mut opacity = AffineHead::constant(inputs, vec![logit(0.9)]);
        for ch in 0..c {
            opacity.set(0, 2 * c + ch, -5.0 / c as f64);
        }
        let mut color = AffineHead::constant(inputs, vec![0.0; 3]);
        for out in 0..3 {
            color.set(out, 3 * c + out.min(c - 1), 1.0);
        }
        Self {
            color_channels: c,
            scale: AffineHead::constant(inputs, vec![softplus_inv(1.0); 3]),
            rotation: AffineHead::constant(inputs, vec![1.0, 0.0, 0.0, 0.0]),
            opacity,
            color,
        }
    }

    pub fn input_len(&self) -> usize {
        self.scale.inputs
    }

    pub fn validate(&self, feature_channels: usize) -> Result<()> {
        let inputs = feature_channels + self.color_channels;
        self.scale.check("scale", inputs, 3)?;
        self.rotation.check("rotation", inputs, 4)?;
        self.opacity.check("opacity", inputs, 1)?;
        self.color.check("color", inputs, 3)
    }
}

/// One Gaussian per valid depth pixel, in row-major pixel order.
pub fn init_pixel_aligned(
    depth: &DepthMap,
    tgt: &Camera,
    feats: &FeatureMap,
    heads: &DecodeHeads,
) -> Result<GaussianCloud> {
    if depth.width != feats.width || depth.height != feats.height {
        return Err(Error::ResolutionMismatch(format!(
            "depth {}x{} vs features {}x{}",
            depth.width, depth.height, feats.width, feats.height
        )));
    }
    if depth.width != tgt.width || depth.height != tgt.height {
        return Err(Error::ResolutionMismatch(format!(
            "depth {}x{} vs camera {}x{}",
            depth.width, depth.height, tgt.width, tgt.height
        )));
    }
    heads.validate(feats.channels)?;
    let mut cloud = GaussianCloud::with_capacity(depth.valid_count());
    let mut input = Vec::with_capacity(heads.input_len());
    let (mut s, mut r, mut a, mut c) = ([0.0; 3], [0.0; 4], [0.0; 1], [0.0; 3]);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let Some(d) = depth.get(x, y) else { continue };
            let mean = tgt.unproject(&Pixel::new(x as f64, y as f64), d)?;
            head_input(feats.pixel(x, y), heads.color_channels, &mut input);
            heads.scale.apply(&input, &mut s);
            heads.rotation.apply(&input, &mut r);
            heads.opacity.apply(&input, &mut a);
            heads.color.apply(&input, &mut c);
            let footprint = d / tgt.fx();
            let q = Quat::from(r);
            let qn = q.norm();
            if !(qn >= 1e-9) {
                return Err(Error::ZeroQuaternion);
            }
            cloud.push(Gaussian {
                mean,
                scale: Vector3::from(s.map(|v| softplus(v) * footprint)),
                rotation: q / qn,
                opacity: sigmoid(a[0]),
                color: Vector3::from(c.map(sigmoid)),
            });
        }
    }
    Ok(cloud)
}
