//! File formats: Gaussian PLY, PFM depth, 8-bit PNG/PPM images, camera and
//! scene JSON, and colormapped depth previews.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use ::image::{DynamicImage, ImageFormat};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Quat};
use crate::geometry::Camera;
use crate::image::Image;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PLY

/// Vertex properties written for every Gaussian, in file order. Scales and
/// opacity are stored activated (not log / logit).
pub const PLY_PROPERTIES: [&str; REQUIRED] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0",
    "f_dc_1", "f_dc_2",
];
const REQUIRED: usize = 14;

fn ply_values(cloud: &GaussianCloud, i: usize) -> [f32; REQUIRED] {
    let (m, s, q, c) = (cloud.means[i], cloud.scales[i], cloud.rotations[i], cloud.colors[i]);
    [m.x, m.y, m.z, cloud.opacities[i], s.x, s.y, s.z, q[0], q[1], q[2], q[3], c.x, c.y, c.z].map(|v| v as f32)
}

/// Binary little-endian PLY with one vertex per Gaussian.
pub fn ply_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for name in &PLY_PROPERTIES {
        out.push_str(&format!("property float {name}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    bytes.reserve(cloud.len() * REQUIRED * 4);
    for i in 0..cloud.len() {
        for v in ply_values(cloud, i) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn write_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_bytes(path, &ply_bytes(cloud))
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    parse_ply(&read_bytes(path)?)
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 => 1,
            Scalar::F32 | Scalar::I32 | Scalar::U32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Scalar::U8 => b[0] as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        }
    }
}

/// Parses a binary little-endian Gaussian PLY. Extra scalar vertex properties
/// are skipped; vertex must be the only element.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let bad = |m: &str| Error::MalformedHeader(m.to_string());
    let end = b"end_header\n";
    let header_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad("missing end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_len]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing 'ply' magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", f, ..] => return Err(Error::UnsupportedFormat(format!("PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(bad("duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| bad(&format!("bad vertex count '{n}'")))?);
            }
            ["element", name, ..] => return Err(bad(&format!("unsupported element '{name}'"))),
            ["property", "list", ..] => return Err(bad("list properties are not supported")),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(bad("property before element"));
                }
                let ty = Scalar::parse(ty).ok_or_else(|| bad(&format!("unsupported property type '{ty}'")))?;
                props.push((name.to_string(), ty));
            }
            _ => return Err(bad(&format!("unexpected header line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(bad("missing binary_little_endian format line"));
    }
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let mut offsets = [(0usize, Scalar::F32); REQUIRED];
    let mut offset = 0;
    let mut found = [false; REQUIRED];
    for (name, ty) in &props {
        if let Some(k) = PLY_PROPERTIES.iter().position(|p| p == name) {
            if found[k] {
                return Err(bad(&format!("duplicate property '{name}'")));
            }
            found[k] = true;
            offsets[k] = (offset, *ty);
        }
        offset += ty.size();
    }
    if let Some(k) = found.iter().position(|f| !f) {
        return Err(bad(&format!("missing property '{}'", PLY_PROPERTIES[k])));
    }
    let stride = offset;
    let body = &bytes[header_len..];
    let needed = count.checked_mul(stride).ok_or_else(|| bad("vertex count overflows"))?;
    if body.len() < needed {
        return Err(Error::TruncatedBody(format!(
            "{count} vertices need {needed} bytes, found {}",
            body.len()
        )));
    }
    let mut cloud = GaussianCloud::with_capacity(count);
    for rec in body[..needed].chunks_exact(stride.max(1)).take(count) {
        let v: Vec<f64> = offsets.iter().map(|(o, ty)| ty.read(&rec[*o..])).collect();
        let q = Quat::new(v[7], v[8], v[9], v[10]);
        let n = q.norm();
        cloud.means.push(Vector3::new(v[0], v[1], v[2]));
        cloud.opacities.push(v[3]);
        cloud.scales.push(Vector3::new(v[4], v[5], v[6]));
        cloud.rotations.push(if n > 0.0 { q / n } else { q });
        cloud.colors.push(Vector3::new(v[11], v[12], v[13]));
    }
    cloud.validate().map_err(|e| Error::Malformed {
        path: PathBuf::from("<ply body>"),
        reason: e.to_string(),
    })?;
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// PFM

/// Little-endian PFM (negative scale), rows stored bottom to top.
pub fn pfm_bytes(width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &data[y * width * channels..(y + 1) * width * channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parsed PFM payload in top-to-bottom row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn parse_pfm(bytes: &[u8]) -> Result<Pfm> {
    let bad = |m: &str| Error::UnsupportedFormat(format!("PFM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1; // single whitespace byte before the raster
    let channels = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(bad(&format!("unknown magic '{m}'"))),
    };
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be non-zero"));
    }
    let little = scale < 0.0;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() < n * 4 {
        return Err(bad(&format!("expected {} raster bytes, found {}", n * 4, body.len())));
    }
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (k, b) in body[..n * 4].chunks_exact(4).enumerate() {
        let arr = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(arr) } else { f32::from_be_bytes(arr) };
        let (fy, x) = (k / row.max(1), k % row.max(1));
        data[(height - 1 - fy) * row + x] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

/// Depth map as single-channel PFM; invalid pixels are written as 0.
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let data: Vec<f32> = depth
        .depth
        .iter()
        .zip(&depth.valid)
        .map(|(d, v)| if *v { *d as f32 } else { 0.0 })
        .collect();
    write_bytes(path, &pfm_bytes(depth.width, depth.height, 1, &data))
}

/// Reads a single-channel PFM; non-positive or non-finite values are invalid.
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let pfm = parse_pfm(&read_bytes(path)?)?;
    if pfm.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{}: depth PFM must have one channel", path.display())));
    }
    let depth: Vec<f64> = pfm.data.iter().map(|&v| v as f64).collect();
    let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    Ok(DepthMap {
        width: pfm.width,
        height: pfm.height,
        confidence: vec![1.0; depth.len()],
        depth,
        valid,
    })
}

// ---------------------------------------------------------------------------
// 8-bit images

fn image_format(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm" | "pgm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat(format!("{}: expected .png, .ppm or .pgm", path.display()))),
    }
}

/// Decodes 8-bit gray, RGB or RGBA (alpha dropped) into `[0,1]` values.
pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    let img = ::image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (3, DynamicImage::ImageRgba8(b).to_rgb8().into_raw()),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "only 8-bit gray/RGB images are supported, got {:?}",
                other.color()
            )))
        }
    };
    Image::from_data(w, h, channels, raw.iter().map(|&v| v as f64 / 255.0).collect())
}

/// Quantizes to 8 bits (round to nearest, clamped to `[0,1]`).
pub fn encode_image(img: &Image, format: ImageFormat) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match img.channels {
        1 => DynamicImage::ImageLuma8(::image::GrayImage::from_raw(w, h, raw).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(::image::RgbImage::from_raw(w, h, raw).expect("buffer size")),
        c => return Err(Error::UnsupportedFormat(format!("cannot encode {c}-channel image"))),
    };
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, format)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let format = image_format(path)?;
    decode_image(&read_bytes(path)?, format).map_err(|e| match e {
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_image(img, image_format(path)?)?)
}

// ---------------------------------------------------------------------------
// Cameras and scenes

/// On-disk camera: row-major `K` and `R`, translation `t`, image size, depth range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraFile {
    fn from(c: &Camera) -> Self {
        let row = |m: &Matrix3<f64>| std::array::from_fn(|i| m[(i / 3, i % 3)]);
        Self {
            k: row(c.k()),
            r: row(c.r()),
            t: [c.t().x, c.t().y, c.t().z],
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraFile {
    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            Matrix3::from_row_slice(&self.k),
            Matrix3::from_row_slice(&self.r),
            Vector3::from(self.t),
            self.width,
            self.height,
            self.near,
            self.far,
        )
    }
}

/// One scene view: the camera fields plus an image path relative to the
/// scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneView {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub image: String,
    /// Whether the view is held out from training.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub held_out: bool,
}

impl SceneView {
    pub fn new(cam: &Camera, image: impl Into<String>, held_out: bool) -> Self {
        let c = CameraFile::from(cam);
        Self {
            k: c.k,
            r: c.r,
            t: c.t,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
            image: image.into(),
            held_out,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        CameraFile {
            k: self.k,
            r: self.r,
            t: self.t,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
        .to_camera()
    }
}

fn malformed(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    let bytes = read_bytes(path)?;
    let file: CameraFile = serde_json::from_slice(&bytes).map_err(|e| malformed(path, e))?;
    file.to_camera().map_err(|e| malformed(path, e))
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    let text = serde_json::to_string_pretty(&CameraFile::from(cam)).expect("camera serializes");
    write_bytes(path, text.as_bytes())
}

/// Loaded scene view.
#[derive(Clone, Debug)]
pub struct LoadedView {
    pub camera: Camera,
    pub image: Image,
    pub image_path: PathBuf,
    pub held_out: bool,
}

/// Reads the scene's view list without loading images.
pub fn read_scene_file(path: &Path) -> Result<Vec<SceneView>> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| malformed(path, e))
}

/// Reads a scene JSON array and every referenced image.
pub fn read_scene(path: &Path) -> Result<Vec<LoadedView>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    read_scene_file(path)?
        .into_iter()
        .map(|v| {
            let camera = v.to_camera().map_err(|e| malformed(path, e))?;
            let image_path = dir.join(&v.image);
            let image = read_image(&image_path)?.to_rgb();
            if image.width != camera.width || image.height != camera.height {
                return Err(Error::ResolutionMismatch(format!(
                    "{} is {}x{} but its camera is {}x{}",
                    image_path.display(),
                    image.width,
                    image.height,
                    camera.width,
                    camera.height
                )));
            }
            Ok(LoadedView {
                camera,
                image,
                image_path,
                held_out: v.held_out,
            })
        })
        .collect()
}

pub fn write_scene_file(path: &Path, views: &[SceneView]) -> Result<()> {
    let text = serde_json::to_string_pretty(views).expect("scene serializes");
    write_bytes(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// Depth previews

/// Polynomial fit of the turbo colormap on `t ∈ [0,1]`.
pub fn turbo(t: f64) -> [f64; 3] {
    let x = t.clamp(0.0, 1.0);
    let poly = |c: [f64; 6]| c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * (c[4] + x * c[5]))));
    [
        poly([0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943]),
        poly([0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604]),
        poly([0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973]),
    ]
    .map(|v| v.clamp(0.0, 1.0))
}

/// Value range recorded next to a colormapped depth preview.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizRange {
    pub min: f64,
    pub max: f64,
    pub colormap: String,
}

/// Turbo-colored depth with invalid pixels black, and the mapped range.
pub fn depth_visualization(depth: &DepthMap) -> (Image, VizRange) {
    let valid = || depth.depth.iter().zip(&depth.valid).filter(|(_, v)| **v).map(|(d, _)| *d);
    let min = valid().fold(f64::INFINITY, f64::min);
    let max = valid().fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let span = if max > min { max - min } else { 1.0 };
    let img = Image::from_fn(depth.width, depth.height, 3, |x, y, c| {
        let i = y * depth.width + x;
        if depth.valid[i] {
            turbo((depth.depth[i] - min) / span)[c]
        } else {
            0.0
        }
    });
    (
        img,
        VizRange {
            min,
            max,
            colormap: "turbo".into(),
        },
    )
}

/// Writes `<path>` as a PNG preview and `<path>.json` with its range.
pub fn write_depth_visualization(path: &Path, depth: &DepthMap) -> Result<()> {
    let (img, range) = depth_visualization(depth);
    write_image(path, &img)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let text = serde_json::to_string_pretty(&range).expect("range serializes");
    write_bytes(Path::new(&sidecar), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let q = Quat::from_fn(|_, _| rng.random_range(-1.0..1.0));
                Gaussian {
                    mean: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                    scale: Vector3::from_fn(|_, _| rng.random_range(0.001..0.5)),
                    rotation: q / q.norm(),
                    opacity: rng.random(),
                    color: Vector3::from_fn(|_, _| rng.random()),
                }
            })
            .collect()
    }

    #[test]
    fn ply_round_trip_is_float32_exact() {
        let cloud = random_cloud(50, 1);
        let back = parse_ply(&ply_bytes(&cloud)).unwrap();
        assert_eq!(back.len(), 50);
        for i in 0..50 {
            let q = |v: f64| v as f32 as f64;
            assert_eq!(back.means[i], cloud.means[i].map(q));
            assert_eq!(back.scales[i], cloud.scales[i].map(q));
            assert_eq!(back.opacities[i], q(cloud.opacities[i]));
            assert_eq!(back.colors[i], cloud.colors[i].map(q));
            assert!((back.rotations[i] - cloud.rotations[i]).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_ply_is_valid() {
        let bytes = ply_bytes(&GaussianCloud::new());
        assert!(std::str::from_utf8(&bytes).unwrap().contains("element vertex 0"));
        assert!(parse_ply(&bytes).unwrap().is_empty());
    }

    #[test]
    fn missing_property_is_named() {
        let text = String::from_utf8(ply_bytes(&GaussianCloud::new())).unwrap();
        let foreign = text.replace("property float rot_3\n", "");
        match parse_ply(foreign.as_bytes()) {
            Err(Error::MalformedHeader(m)) => assert!(m.contains("rot_3"), "{m}"),
            other => panic!("expected MalformedHeader, got {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_reported() {
        let bytes = ply_bytes(&random_cloud(3, 2));
        assert!(matches!(parse_ply(&bytes[..bytes.len() - 5]), Err(Error::TruncatedBody(_))));
    }

    #[test]
    fn extra_properties_are_skipped() {
        let cloud = random_cloud(4, 3);
        let mut text = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty uchar tag\n");
        for name in &PLY_PROPERTIES {
            text.push_str(&format!("property double {name}\n"));
        }
        text.push_str("end_header\n");
        let mut bytes = text.into_bytes();
        for i in 0..4 {
            bytes.push(7);
            for v in ply_values(&cloud, i) {
                bytes.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        let back = parse_ply(&bytes).unwrap();
        assert_eq!(back.means[2], cloud.means[2].map(|v| v as f32 as f64));
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..7 * 5).map(|_| rng.random_range(0.5..20.0)).collect();
        let back = parse_pfm(&pfm_bytes(7, 5, 1, &data)).unwrap();
        assert_eq!((back.width, back.height, back.channels), (7, 5, 1));
        assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let bytes = pfm_bytes(1, 2, 1, &[1.0, 2.0]);
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let img = Image::from_fn(9, 6, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f64 / 255.0);
        for format in [ImageFormat::Png, ImageFormat::Pnm] {
            let back = decode_image(&encode_image(&img, format).unwrap(), format).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let buf = ::image::ImageBuffer::<::image::Rgb<u16>, _>::from_raw(2, 2, vec![1000u16; 12]).unwrap();
        let mut bytes = Cursor::new(Vec::new());
        DynamicImage::ImageRgb16(buf).write_to(&mut bytes, ImageFormat::Png).unwrap();
        assert!(matches!(
            decode_image(&bytes.into_inner(), ImageFormat::Png),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = Camera::look_at(
            Vector3::new(1.0, -0.5, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            Camera::intrinsics(60.0, 61.0, 31.5, 23.5),
            64,
            48,
            1.0,
            9.0,
        )
        .unwrap();
        let text = serde_json::to_string(&CameraFile::from(&cam)).unwrap();
        let back: CameraFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_camera().unwrap(), cam);
        assert!(serde_json::from_str::<CameraFile>(&text.replace("\"near\"", "\"nearr\"")).is_err());

        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(64, 48, 3, |x, y, c| ((x + y + c) % 5) as f64 * 51.0 / 255.0);
        write_image(&dir.path().join("a.png"), &img).unwrap();
        let views = vec![SceneView::new(&cam, "a.png", false), SceneView::new(&cam, "a.png", true)];
        let path = dir.path().join("scene.json");
        write_scene_file(&path, &views).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("held_out").count(), 1);
        let loaded = read_scene(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].camera, cam);
        assert_eq!(loaded[1].image, img);
        assert!(!loaded[0].held_out && loaded[1].held_out);
        std::fs::write(&path, text.replacen("\"image\"", "\"img\"", 1)).unwrap();
        assert!(matches!(read_scene(&path), Err(Error::Malformed { .. })));
    }

    #[test]
    fn turbo_endpoints() {
        assert!(turbo(-1.0) == turbo(0.0) && turbo(2.0) == turbo(1.0));
        let lo = turbo(0.1);
        let hi = turbo(0.9);
        assert!(lo[2] > lo[0] && hi[0] > hi[2]);
    }
}
