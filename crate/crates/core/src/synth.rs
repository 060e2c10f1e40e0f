//! Ray-traced analytic scenes with exact depth, used as ground truth by the
//! tests, the benchmarks and the `synth` command.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud, Quat};
use crate::geometry::{Camera, Pixel, Point3};
use crate::image::Image;

/// Surface albedo as a function of the world-space hit point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid([f64; 3]),
    Checker { size: f64, a: [f64; 3], b: [f64; 3] },
    /// Two-octave value noise modulating `base` by `±amplitude`.
    Noise { scale: f64, base: [f64; 3], amplitude: f64, seed: u64 },
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = if dx == 1 { s.x } else { 1.0 - s.x }
            * if dy == 1 { s.y } else { 1.0 - s.y }
            * if dz == 1 { s.z } else { 1.0 - s.z };
        acc += w * hash3(bx + dx, by + dy, bz + dz, seed);
    }
    acc
}

impl Texture {
    pub fn albedo(&self, p: &Point3) -> Vector3<f64> {
        match self {
            Texture::Solid(c) => Vector3::from(*c),
            Texture::Checker { size, a, b } => {
                let parity = (p / *size).map(f64::floor).sum() as i64;
                Vector3::from(if parity.rem_euclid(2) == 0 { *a } else { *b })
            }
            Texture::Noise {
                scale,
                base,
                amplitude,
                seed,
            } => {
                let q = p * *scale;
                let n = 0.65 * value_noise(q, *seed) + 0.35 * value_noise(q * 2.03, seed + 1);
                let m = 1.0 + amplitude * (2.0 * n - 1.0);
                Vector3::from(*base).map(|c| (c * m).clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Plane { point: [f64; 3], normal: [f64; 3], texture: Texture },
    Sphere { center: [f64; 3], radius: f64, texture: Texture },
}

impl Primitive {
    /// Ray parameter of the nearest hit with `t > 0` and the surface normal there.
    fn intersect(&self, o: &Point3, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal).normalize();
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(Vector3::from(*point) - o)) / denom;
                (t > 1e-9).then_some((t, n))
            }
            Primitive::Sphere { center, radius, .. } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                let a = d.dot(d);
                let b = oc.dot(d);
                let k = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * k;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a]
                    .into_iter()
                    .find(|&t| t > 1e-9)?;
                Some((t, (o + d * t - c) / *radius))
            }
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Plane { texture, .. } | Primitive::Sphere { texture, .. } => texture,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Primitive::Plane { normal, .. } if Vector3::from(*normal).norm() < 1e-12 => {
                Err(Error::InvalidSpec("plane normal is zero".into()))
            }
            Primitive::Sphere { radius, .. } if !(*radius > 0.0) => {
                Err(Error::InvalidSpec("sphere radius must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Cameras on a horizontal arc around `target`, alternating slightly above
/// and below it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub distance: f64,
    pub arc_degrees: f64,
    pub height: f64,
    pub target: [f64; 3],
    pub fov_degrees: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CameraSetup {
    Ring(CameraRing),
    Explicit(Vec<Camera>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub primitives: Vec<Primitive>,
    pub cameras: CameraSetup,
    /// Samples per pixel side used for the color image (depth uses the center ray).
    pub supersample: usize,
    pub light: [f64; 3],
    pub ambient: f64,
}

/// One rendered view with its analytic depth.
#[derive(Clone, Debug)]
pub struct SyntheticView {
    pub camera: Camera,
    pub image: Image,
    pub depth: DepthMap,
}

impl CameraRing {
    pub fn cameras(&self, width: usize, height: usize) -> Result<Vec<Camera>> {
        if self.count == 0 {
            return Err(Error::InvalidSpec("camera count must be positive".into()));
        }
        let f = 0.5 * width as f64 / (0.5 * self.fov_degrees.to_radians()).tan();
        let k = Camera::intrinsics(f, f, (width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
        let target = Vector3::from(self.target);
        (0..self.count)
            .map(|i| {
                let u = if self.count == 1 {
                    0.5
                } else {
                    i as f64 / (self.count - 1) as f64
                };
                let theta = (u - 0.5) * self.arc_degrees.to_radians();
                let lift = if i % 2 == 0 { -self.height } else { self.height };
                let eye = target
                    + Vector3::new(theta.sin(), 0.0, -theta.cos()) * self.distance
                    + Vector3::new(0.0, lift, 0.0);
                Camera::look_at(
                    eye,
                    target,
                    Vector3::new(0.0, -1.0, 0.0),
                    k,
                    width,
                    height,
                    self.near,
                    self.far,
                )
            })
            .collect()
    }
}

impl SceneSpec {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        match &self.cameras {
            CameraSetup::Ring(ring) => ring.cameras(self.width, self.height),
            CameraSetup::Explicit(c) => Ok(c.clone()),
        }
    }

    fn trace(&self, cam: &Camera, px: &Pixel) -> Option<(f64, Vector3<f64>)> {
        let origin = cam.center();
        let dir = cam.r().transpose() * (cam.k_inv() * Vector3::new(px.x, px.y, 1.0));
        let (t, n, prim) = self
            .primitives
            .iter()
            .filter_map(|p| p.intersect(&origin, &dir).map(|(t, n)| (t, n, p)))
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        let hit = origin + dir * t;
        let light = Vector3::from(self.light).normalize();
        let shade = self.ambient + (1.0 - self.ambient) * n.dot(&light).abs();
        // dir has unit camera-z, so the ray parameter is the depth
        Some((t, prim.texture().albedo(&hit) * shade))
    }
}

/// Renders every camera of `spec`; fails if any pixel center misses the geometry.
pub fn gen_scene(spec: &SceneSpec) -> Result<Vec<SyntheticView>> {
    if spec.width < 2 || spec.height < 2 {
        return Err(Error::InvalidSpec("resolution must be at least 2x2".into()));
    }
    if spec.primitives.is_empty() {
        return Err(Error::InvalidSpec("scene has no geometry".into()));
    }
    for p in &spec.primitives {
        p.validate()?;
    }
    let ss = spec.supersample.max(1);
    spec.cameras()?
        .into_iter()
        .map(|camera| {
            if camera.width != spec.width || camera.height != spec.height {
                return Err(Error::InvalidSpec("camera resolution differs from scene".into()));
            }
            let (w, h) = (spec.width, spec.height);
            let rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    let mut depth = Vec::with_capacity(w);
                    let mut color = Vec::with_capacity(3 * w);
                    for x in 0..w {
                        let (d, _) = spec.trace(&camera, &Pixel::new(x as f64, y as f64))?;
                        let mut acc = Vector3::zeros();
                        for sy in 0..ss {
                            for sx in 0..ss {
                                let ox = (sx as f64 + 0.5) / ss as f64 - 0.5;
                                let oy = (sy as f64 + 0.5) / ss as f64 - 0.5;
                                let px = Pixel::new(x as f64 + ox, y as f64 + oy);
                                acc += spec.trace(&camera, &px)?.1;
                            }
                        }
                        depth.push(d);
                        color.extend((acc / (ss * ss) as f64).iter().map(|c| c.clamp(0.0, 1.0)));
                    }
                    Some((depth, color))
                })
                .collect();
            let mut depth = Vec::with_capacity(w * h);
            let mut color = Vec::with_capacity(3 * w * h);
            for row in rows {
                let (d, c) = row.ok_or_else(|| {
                    Error::InvalidSpec("a camera ray misses every primitive".into())
                })?;
                depth.extend(d);
                color.extend(c);
            }
            Ok(SyntheticView {
                image: Image::from_data(w, h, 3, color)?,
                depth: DepthMap::from_depths(w, h, depth),
                camera,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Plane,
    Sphere,
    Cluttered,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Preset::Plane),
            "sphere" => Ok(Preset::Sphere),
            "cluttered" => Ok(Preset::Cluttered),
            other => Err(Error::InvalidSpec(format!("unknown preset {other:?}"))),
        }
    }
}

fn noise(scale: f64, base: [f64; 3], seed: u64) -> Texture {
    Texture::Noise {
        scale,
        base,
        amplitude: 0.6,
        seed,
    }
}

/// Built-in scenes; `seed` varies the textures.
pub fn preset(kind: Preset, views: usize, width: usize, height: usize, seed: u64) -> SceneSpec {
    let backdrop = |z: f64, s: u64| Primitive::Plane {
        point: [0.0, 0.0, z],
        normal: [0.0, 0.0, -1.0],
        texture: noise(2.5, [0.75, 0.65, 0.5], s),
    };
    let (primitives, near, far) = match kind {
        Preset::Plane => (vec![backdrop(0.0, seed)], 2.5, 6.0),
        Preset::Sphere => (
            vec![
                Primitive::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.0,
                    texture: noise(3.0, [0.35, 0.6, 0.85], seed + 10),
                },
                backdrop(2.0, seed),
            ],
            2.0,
            9.0,
        ),
        Preset::Cluttered => (
            vec![
                Primitive::Sphere {
                    center: [-0.75, -0.3, 0.0],
                    radius: 0.6,
                    texture: noise(3.5, [0.85, 0.4, 0.35], seed + 10),
                },
                Primitive::Sphere {
                    center: [0.7, 0.35, -0.2],
                    radius: 0.5,
                    texture: noise(3.5, [0.35, 0.75, 0.4], seed + 20),
                },
                Primitive::Sphere {
                    center: [0.15, -0.55, 0.7],
                    radius: 0.45,
                    texture: noise(3.5, [0.4, 0.45, 0.85], seed + 30),
                },
                backdrop(1.6, seed),
            ],
            2.0,
            8.5,
        ),
    };
    SceneSpec {
        width,
        height,
        primitives,
        cameras: CameraSetup::Ring(CameraRing {
            count: views,
            distance: 4.0,
            arc_degrees: 40.0,
            height: 0.25,
            target: [0.0, 0.0, 0.0],
            fov_degrees: 50.0,
            near,
            far,
        }),
        supersample: 3,
        light: [0.3, -0.5, -1.0],
        ambient: 0.4,
    }
}

/// Replaces `fraction` of the valid depths with values scaled by a factor in
/// `[0.55, 0.8] ∪ [1.25, 1.8]`; returns the outlier labels.
pub fn inject_outliers(depth: &mut DepthMap, fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut outlier = vec![false; depth.depth.len()];
    for (i, o) in outlier.iter_mut().enumerate() {
        if depth.valid[i] && rng.random::<f64>() < fraction {
            let factor = if rng.random::<bool>() {
                rng.random_range(0.55..0.8)
            } else {
                rng.random_range(1.25..1.8)
            };
            depth.depth[i] *= factor;
            *o = true;
        }
    }
    outlier
}

/// Random Gaussians in front of `cam` with depths in `[z_min, z_max]`, their
/// centers projecting inside the image.
pub fn random_cloud(n: usize, cam: &Camera, z_min: f64, z_max: f64, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let px = Pixel::new(
                rng.random_range(0.0..(cam.width - 1) as f64),
                rng.random_range(0.0..(cam.height - 1) as f64),
            );
            let z = rng.random_range(z_min..z_max);
            let footprint = z / cam.fx();
            let q = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            Gaussian {
                mean: cam.unproject_unchecked(&px, z),
                scale: Vector3::from_fn(|_, _| footprint * rng.random_range(0.8..6.0)),
                rotation: q / q.norm(),
                opacity: rng.random_range(0.1..0.9),
                color: Vector3::from_fn(|_, _| rng.random::<f64>()),
            }
        })
        .collect()
}

/// A canonical camera looking down `+z` from `eye`.
pub fn canonical_camera(eye: Point3, k: Matrix3<f64>, width: usize, height: usize) -> Result<Camera> {
    Camera::new(k, Matrix3::identity(), -eye, width, height, 0.1, 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let cam = canonical_camera(Vector3::zeros(), Camera::intrinsics(10.0, 10.0, 4.5, 3.5), 10, 8)
            .unwrap();
        let spec = SceneSpec {
            width: 10,
            height: 8,
            primitives: vec![Primitive::Plane {
                point: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, 1.0],
                texture: Texture::Checker {
                    size: 0.1,
                    a: [0.0; 3],
                    b: [1.0; 3],
                },
            }],
            cameras: CameraSetup::Explicit(vec![cam]),
            supersample: 1,
            light: [0.0, 0.0, 1.0],
            ambient: 1.0,
        };
        let views = gen_scene(&spec).unwrap();
        assert!(views[0].depth.depth.iter().all(|&d| (d - 2.0).abs() < 1e-12));
        assert!(views[0].depth.valid.iter().all(|&v| v));
    }

    #[test]
    fn sphere_center_depth() {
        let cam = canonical_camera(
            Vector3::new(0.0, 0.0, -4.0),
            Camera::intrinsics(20.0, 20.0, 10.0, 10.0),
            21,
            21,
        )
        .unwrap();
        let spec = SceneSpec {
            width: 21,
            height: 21,
            primitives: vec![
                Primitive::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                    texture: Texture::Solid([0.5; 3]),
                },
                Primitive::Plane {
                    point: [0.0, 0.0, 5.0],
                    normal: [0.0, 0.0, -1.0],
                    texture: Texture::Solid([0.2; 3]),
                },
            ],
            cameras: CameraSetup::Explicit(vec![cam]),
            supersample: 1,
            light: [0.0, 0.0, -1.0],
            ambient: 0.3,
        };
        let views = gen_scene(&spec).unwrap();
        assert_relative_eq!(views[0].depth.depth[10 * 21 + 10], 3.0, epsilon = 1e-12);
        assert_relative_eq!(views[0].depth.depth[0], 9.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_geometry_is_rejected() {
        let mut spec = preset(Preset::Sphere, 2, 8, 8, 0);
        spec.primitives.truncate(1);
        assert!(matches!(gen_scene(&spec), Err(Error::InvalidSpec(_))));
        spec.primitives.clear();
        assert!(gen_scene(&spec).is_err());
    }

    #[test]
    fn presets_are_deterministic() {
        let a = gen_scene(&preset(Preset::Cluttered, 3, 16, 12, 5)).unwrap();
        let b = gen_scene(&preset(Preset::Cluttered, 3, 16, 12, 5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.depth, y.depth);
        }
    }

    #[test]
    fn ring_depths_reproject() {
        for kind in [Preset::Plane, Preset::Sphere, Preset::Cluttered] {
            let views = gen_scene(&preset(kind, 3, 24, 20, 1)).unwrap();
            for v in &views {
                for y in 0..20 {
                    for x in 0..24 {
                        let d = v.depth.get(x, y).unwrap();
                        assert!(d > v.camera.near && d < v.camera.far, "{kind:?} depth {d}");
                        let px = Pixel::new(x as f64, y as f64);
                        let p = v.camera.unproject(&px, d).unwrap();
                        let (q, dd) = v.camera.project(&p).unwrap();
                        assert!((q - px).norm() < 1e-9);
                        assert_relative_eq!(dd, d, epsilon = 1e-9);
                    }
                }
            }
        }
    }
}
