//! End-to-end orchestration: depth on every working view, pixel-aligned
//! initialization, fusion, optimization and held-out evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{cascade, feature_encode, DepthConfig, DepthMap};
use crate::error::{Error, Result};
use crate::fusion::{aggregate_concat, aggregate_consistent, aggregate_voxel, check_views, DepthSampling};
use crate::gaussian::{init_pixel_aligned, DecodeHeads, GaussianCloud};
use crate::geometry::Camera;
use crate::image::Image;
use crate::io::{read_image, read_scene, write_camera, write_depth_pfm, write_image, write_scene_file, SceneView};
use crate::loss::{psnr, ssim};
use crate::optim::{optimize_scene, scene_extent, LogEntry, OptimConfig};
use crate::raster::{render, RenderOutput};
use crate::synth::SyntheticView;
use crate::volume::{decode_samples, hybrid_average, pool_sources, single_sample_render, VolumeHeads};

/// Point-cloud aggregation strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Concat,
    Voxel,
    #[default]
    Check,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Concat, Strategy::Voxel, Strategy::Check];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Concat => "concat",
            Strategy::Voxel => "voxel",
            Strategy::Check => "check",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}' (expected concat, voxel or check)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Voxel side in world units; when absent, `voxel_fraction · extent`.
    pub voxel: Option<f64>,
    pub voxel_fraction: f64,
    /// Neighbor views consulted by the consistency check.
    pub neighbors: usize,
    pub sampling: DepthSampling,
    /// Uniform random cap on the fused points that seed optimization.
    pub max_points: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Check,
            voxel: None,
            voxel_fraction: 0.04,
            neighbors: 4,
            sampling: DepthSampling::Bilinear,
            max_points: None,
        }
    }
}

/// Every tunable of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub depth: DepthConfig,
    /// Source views per plane sweep, besides the target itself.
    pub depth_sources: usize,
    pub fusion: FusionConfig,
    pub optim: OptimConfig,
    pub loss: crate::loss::LossWeights,
    /// Render held-out views with the splat/volume hybrid.
    pub hybrid: bool,
    /// Minimum held-out PSNR for a passing run; reported, not enforced.
    pub psnr_floor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            depth: DepthConfig::default(),
            depth_sources: 4,
            fusion: FusionConfig::default(),
            optim: OptimConfig::default(),
            loss: crate::loss::LossWeights::default(),
            hybrid: false,
            psnr_floor: 20.0,
        }
    }
}

impl PipelineConfig {
    /// Parses JSON, or TOML when `toml` is set.
    pub fn parse(text: &str, toml: bool) -> Result<Self> {
        let cfg: Self = if toml {
            ::toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self, toml: bool) -> String {
        if toml {
            ::toml::to_string_pretty(self).expect("config serializes to TOML")
        } else {
            serde_json::to_string_pretty(self).expect("config serializes to JSON")
        }
    }

    /// Loads a `.toml` or `.json` config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let toml = path.extension().is_some_and(|e| e == "toml");
        Self::parse(&text, toml).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.density.validate()?;
        if self.depth.coarse_planes < 2 || self.depth.fine_planes < 2 || !(self.depth.temperature > 0.0) {
            return Err(Error::Config("depth needs ≥2 planes per stage and a positive temperature".into()));
        }
        if self.depth_sources < 1 || self.fusion.neighbors < 1 {
            return Err(Error::Config("depth_sources and fusion.neighbors must be ≥ 1".into()));
        }
        if let Some(v) = self.fusion.voxel {
            if !(v > 0.0) {
                return Err(Error::Config("fusion.voxel must be positive".into()));
            }
        }
        if !(self.fusion.voxel_fraction > 0.0) {
            return Err(Error::Config("fusion.voxel_fraction must be positive".into()));
        }
        Ok(())
    }
}

/// A calibrated view; held-out views are only used for evaluation.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub held_out: bool,
}

/// Depth maps and pixel-aligned clouds of the working views.
#[derive(Clone, Debug)]
pub struct Initialization {
    pub cameras: Vec<Camera>,
    pub depths: Vec<DepthMap>,
    pub coarse: Vec<DepthMap>,
    pub clouds: Vec<GaussianCloud>,
}

/// Estimates depth for `views[target]` from itself plus its nearest views.
pub fn estimate_depth(
    views: &[(Camera, Image)],
    target: usize,
    sources: usize,
    cfg: &DepthConfig,
) -> Result<(DepthMap, DepthMap)> {
    let cams: Vec<Camera> = views.iter().map(|(c, _)| c.clone()).collect();
    let mut idx = vec![target];
    idx.extend(crate::fusion::nearest_views(&cams, target, sources));
    let feats: Vec<_> = idx.iter().map(|&i| feature_encode(&views[i].1)).collect();
    let src_cams: Vec<Camera> = idx.iter().map(|&i| cams[i].clone()).collect();
    cascade(&feats, &src_cams, &cams[target], cfg)
}

/// Depth and pixel-aligned Gaussians for every working view.
pub fn initialize(views: &[(Camera, Image)], cfg: &PipelineConfig) -> Result<Initialization> {
    let heads = DecodeHeads::photometric(3);
    let mut out = Initialization {
        cameras: views.iter().map(|(c, _)| c.clone()).collect(),
        depths: Vec::new(),
        coarse: Vec::new(),
        clouds: Vec::new(),
    };
    for (i, (cam, img)) in views.iter().enumerate() {
        let (coarse, fine) = estimate_depth(views, i, cfg.depth_sources, &cfg.depth)?;
        out.clouds.push(init_pixel_aligned(&fine, cam, &feature_encode(img), &heads)?);
        out.depths.push(fine);
        out.coarse.push(coarse);
    }
    Ok(out)
}

/// Aggregates the per-view clouds with `strategy`.
pub fn fuse(init: &Initialization, strategy: Strategy, cfg: &FusionConfig) -> Result<(GaussianCloud, Vec<f64>)> {
    let kept_fraction = |masks: Option<&[crate::fusion::ConsistencyMask]>| -> Vec<f64> {
        match masks {
            None => vec![1.0; init.clouds.len()],
            Some(m) => m
                .iter()
                .zip(&init.clouds)
                .map(|(m, c)| if c.is_empty() { 0.0 } else { m.reliable_count() as f64 / c.len() as f64 })
                .collect(),
        }
    };
    match strategy {
        Strategy::Concat => Ok((aggregate_concat(&init.clouds), kept_fraction(None))),
        Strategy::Voxel => {
            let voxel = cfg.voxel.unwrap_or(cfg.voxel_fraction * scene_extent(&init.cameras));
            let cloud = aggregate_voxel(&aggregate_concat(&init.clouds), voxel)?;
            let total: usize = init.clouds.iter().map(GaussianCloud::len).sum();
            let frac = if total == 0 { 0.0 } else { cloud.len() as f64 / total as f64 };
            Ok((cloud, vec![frac; init.clouds.len()]))
        }
        Strategy::Check => {
            let masks = check_views(&init.depths, &init.cameras, cfg.neighbors, cfg.sampling)?;
            Ok((aggregate_consistent(&init.clouds, &masks)?, kept_fraction(Some(&masks))))
        }
    }
}

/// `cap` points drawn without replacement, kept in their original order.
pub fn subsample(cloud: &GaussianCloud, cap: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f05e);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), cap.min(cloud.len())).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Splat render, optionally averaged with the single-sample volume render.
pub fn render_view(
    cloud: &GaussianCloud,
    cam: &Camera,
    sources: &[(Camera, Image)],
    hybrid: bool,
    tile: usize,
) -> Result<(Image, Option<(Image, Image)>)> {
    let out: RenderOutput = render(cloud, cam, tile);
    if !hybrid {
        return Ok((out.color, None));
    }
    let vol = volume_render(&out, cam, sources)?;
    Ok((hybrid_average(&out.color, &vol)?, Some((out.color, vol))))
}

/// Volume branch: pools source colors at the splatted depth, decodes radiance
/// and density, and renders one sample per pixel.
pub fn volume_render(splat: &RenderOutput, cam: &Camera, sources: &[(Camera, Image)]) -> Result<Image> {
    let refs: Vec<(&Camera, &Image)> = sources.iter().map(|(c, i)| (c, i)).collect();
    let (pooled, covered) = pool_sources(&splat.depth, &splat.depth_valid(), cam, &refs);
    let mut samples = decode_samples(&feature_encode(&pooled), &VolumeHeads::photometric(3))?;
    for (s, c) in samples.density.iter_mut().zip(&covered) {
        if !c {
            *s = 0.0;
        }
    }
    Ok(single_sample_render(&samples))
}

/// Image quality of one held-out view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Outcome of one strategy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    /// Mean held-out PSNR (train PSNR when nothing is held out).
    pub psnr: f64,
    pub ssim: f64,
    pub train_psnr: f64,
    pub n_points_initial: usize,
    pub n_points_fused: usize,
    /// Points that seeded optimization, after the optional cap.
    pub n_points_start: usize,
    pub n_points_final: usize,
    pub per_view_kept_fraction: Vec<f64>,
    pub held_out: Vec<ViewMetrics>,
    pub meets_floor: bool,
    /// Stage wall-clock times in milliseconds.
    pub timings: BTreeMap<String, f64>,
}

/// Final report: one entry per strategy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub views: usize,
    pub held_out: usize,
    pub runs: Vec<StrategyReport>,
    pub timings: BTreeMap<String, f64>,
}

impl PipelineReport {
    /// JSON with every timing field removed, for reproducibility checks.
    pub fn without_timings(&self) -> serde_json::Value {
        fn strip(v: &mut serde_json::Value) {
            match v {
                serde_json::Value::Object(m) => {
                    m.remove("timings");
                    m.values_mut().for_each(strip);
                }
                serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
                _ => {}
            }
        }
        let mut v = serde_json::to_value(self).expect("report serializes");
        strip(&mut v);
        v
    }
}

/// Artifacts of one strategy run.
#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub report: StrategyReport,
    pub fused: GaussianCloud,
    pub optimized: GaussianCloud,
    pub log: Vec<LogEntry>,
    /// Rendered held-out images, in held-out order.
    pub renders: Vec<Image>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Fuses, optimizes and evaluates one strategy on an existing initialization.
pub fn run_strategy(
    views: &[View],
    init: &Initialization,
    strategy: Strategy,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StrategyRun> {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let (fused, kept) = fuse(init, strategy, &cfg.fusion)?;
    timings.insert("fuse_ms".into(), ms(t));
    let train: Vec<(Camera, Image)> = views
        .iter()
        .filter(|v| !v.held_out)
        .map(|v| (v.camera.clone(), v.image.clone()))
        .collect();
    let t = Instant::now();
    let start = match cfg.fusion.max_points {
        Some(cap) if cap < fused.len() => subsample(&fused, cap, seed),
        _ => fused.clone(),
    };
    let (optimized, log) = if start.is_empty() {
        (start.clone(), Vec::new())
    } else {
        optimize_scene(&start, &train, cfg.optim.iters, &cfg.optim, seed)?
    };
    timings.insert("optimize_ms".into(), ms(t));
    let t = Instant::now();
    let mut train_psnr = 0.0;
    for (cam, img) in &train {
        train_psnr += psnr(&render(&optimized, cam, cfg.optim.tile).color, img)?;
    }
    train_psnr /= train.len().max(1) as f64;
    let mut held = Vec::new();
    let mut renders = Vec::new();
    for (i, v) in views.iter().enumerate().filter(|(_, v)| v.held_out) {
        let (img, _) = render_view(&optimized, &v.camera, &train, cfg.hybrid, cfg.optim.tile)?;
        held.push(ViewMetrics {
            view: i,
            psnr: psnr(&img, &v.image)?,
            ssim: ssim(&img, &v.image)?,
        });
        renders.push(img);
    }
    timings.insert("render_ms".into(), ms(t));
    let (psnr_mean, ssim_mean) = if held.is_empty() {
        let mut s = 0.0;
        for (cam, img) in &train {
            s += ssim(&render(&optimized, cam, cfg.optim.tile).color, img)?;
        }
        (train_psnr, s / train.len().max(1) as f64)
    } else {
        let n = held.len() as f64;
        (held.iter().map(|m| m.psnr).sum::<f64>() / n, held.iter().map(|m| m.ssim).sum::<f64>() / n)
    };
    let report = StrategyReport {
        strategy,
        psnr: psnr_mean,
        ssim: ssim_mean,
        train_psnr,
        n_points_initial: init.clouds.iter().map(GaussianCloud::len).sum(),
        n_points_fused: fused.len(),
        n_points_start: start.len(),
        n_points_final: optimized.len(),
        per_view_kept_fraction: kept,
        held_out: held,
        meets_floor: psnr_mean >= cfg.psnr_floor,
        timings,
    };
    Ok(StrategyRun {
        report,
        fused,
        optimized,
        log,
        renders,
    })
}

/// Runs the full pipeline for each requested strategy.
pub fn run_pipeline(
    views: &[View],
    strategies: &[Strategy],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(PipelineReport, Initialization, Vec<StrategyRun>)> {
    cfg.validate()?;
    let working: Vec<(Camera, Image)> = views
        .iter()
        .filter(|v| !v.held_out)
        .map(|v| (v.camera.clone(), v.image.clone()))
        .collect();
    if working.len() < 2 {
        return Err(Error::TooFewViews(working.len()));
    }
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let init = initialize(&working, cfg)?;
    timings.insert("depth_init_ms".into(), ms(t));
    let runs = strategies
        .iter()
        .map(|&s| run_strategy(views, &init, s, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let report = PipelineReport {
        seed,
        views: views.len(),
        held_out: views.iter().filter(|v| v.held_out).count(),
        runs: runs.iter().map(|r| r.report.clone()).collect(),
        timings,
    };
    Ok((report, init, runs))
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

fn image_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if [".png", ".ppm", ".pgm"].iter().any(|ext| lower.ends_with(ext)) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// PSNR and SSIM for every same-named image pair, sorted by name.
pub fn eval_dirs(img_dir: &Path, ref_dir: &Path) -> Result<Vec<EvalRow>> {
    let a = image_names(img_dir)?;
    let b = image_names(ref_dir)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Mismatch("no images to compare".into()));
    }
    if a != b {
        return Err(Error::Mismatch(format!(
            "{} has [{}] but {} has [{}]",
            img_dir.display(),
            a.join(", "),
            ref_dir.display(),
            b.join(", ")
        )));
    }
    a.into_iter()
        .map(|name| {
            let img = read_image(&img_dir.join(&name))?;
            let reference = read_image(&ref_dir.join(&name))?;
            Ok(EvalRow {
                psnr: psnr(&img, &reference)?,
                ssim: ssim(&img, &reference)?,
                name,
            })
        })
        .collect()
}

/// `view_007`-style stem shared by images, depth maps and renders.
pub fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

/// Two interior views held out of `n`, or none when `n < 5`.
pub fn default_held_out(n: usize) -> Vec<usize> {
    if n < 5 {
        Vec::new()
    } else {
        vec![n / 3, 2 * n / 3]
    }
}

/// Resolves a scene argument: a `scene.json` path or a directory holding one.
pub fn scene_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join("scene.json")
    } else {
        arg.to_path_buf()
    }
}

/// Loads every view of a scene file or directory.
pub fn load_views(arg: &Path) -> Result<Vec<View>> {
    let views = read_scene(&scene_path(arg))?;
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    Ok(views
        .into_iter()
        .map(|v| View {
            camera: v.camera,
            image: v.image,
            held_out: v.held_out,
        })
        .collect())
}

/// Writes a synthetic scene: `images/*.png`, ground-truth `depth/*.pfm` and
/// `scene.json` flagging `held_out`. Returns the scene file path.
pub fn write_synthetic_scene(dir: &Path, views: &[SyntheticView], held_out: &[usize]) -> Result<PathBuf> {
    for sub in ["images", "depth", "cameras"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let image = format!("images/{}.png", view_stem(i));
        write_image(&dir.join(&image), &v.image)?;
        write_depth_pfm(&dir.join(format!("depth/{}.pfm", view_stem(i))), &v.depth)?;
        write_camera(&dir.join(format!("cameras/{}.json", view_stem(i))), &v.camera)?;
        entries.push(SceneView::new(&v.camera, image, held_out.contains(&i)));
    }
    let path = dir.join("scene.json");
    write_scene_file(&path, &entries)?;
    Ok(path)
}
