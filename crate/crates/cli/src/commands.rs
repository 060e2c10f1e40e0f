use std::path::{Path, PathBuf};

use log::info;
use mvsgs::depth::feature_encode;
use mvsgs::gaussian::DecodeHeads;
use mvsgs::io::{
    read_camera, read_depth_pfm, read_ply, write_depth_pfm, write_depth_visualization, write_image, write_ply,
};
use mvsgs::pipeline::{
    default_held_out, estimate_depth, eval_dirs, fuse, initialize, load_views, render_view, run_pipeline,
    view_stem, write_synthetic_scene, Initialization, PipelineConfig, View,
};
use mvsgs::raster::{render, render_reference, RenderOutput};
use mvsgs::synth::{gen_scene, preset};
use mvsgs::{init_pixel_aligned, optimize_scene, Camera, DepthMap, Error, GaussianCloud, Image, Result};
use serde::Serialize;

use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let seed = cli.global.seed;
    match &cli.command {
        Command::Synth {
            preset: kind,
            views,
            res,
            held_out,
            out,
        } => {
            let rendered = gen_scene(&preset(*kind, *views, res.0, res.1, seed))?;
            let held = held_out.clone().unwrap_or_else(|| default_held_out(*views));
            if let Some(bad) = held.iter().find(|&&i| i >= *views) {
                return Err(Error::Config(format!("held-out index {bad} is out of range for {views} views")));
            }
            let path = write_synthetic_scene(out, &rendered, &held)?;
            info!("wrote {} views to {}", rendered.len(), path.display());
        }
        Command::Depth {
            scene,
            target,
            coarse,
            fine,
            out,
        } => {
            if let Some(c) = coarse {
                cfg.depth.coarse_planes = *c;
            }
            if let Some(f) = fine {
                cfg.depth.fine_planes = *f;
            }
            cfg.validate()?;
            let views = pairs(&load_views(scene)?, |_| true);
            if *target >= views.len() {
                return Err(Error::Config(format!("target {target} is out of range for {} views", views.len())));
            }
            if views.len() < 2 {
                return Err(Error::TooFewViews(views.len()));
            }
            let (_, depth) = estimate_depth(&views, *target, cfg.depth_sources, &cfg.depth)?;
            write_depth(out, &depth)?;
        }
        Command::Init { scene, depths, out } => {
            let views = load_views(scene)?;
            let working = working_indices(&views);
            let init = initialize(&pairs(&views, |i| working.contains(&i)), &cfg)?;
            create_dir(depths)?;
            for (&i, d) in working.iter().zip(&init.depths) {
                write_depth(&depths.join(format!("{}.pfm", view_stem(i))), d)?;
            }
            let cloud = mvsgs::fusion::aggregate_concat(&init.clouds);
            write_ply(out, &cloud)?;
            info!("{} pixel-aligned Gaussians from {} views", cloud.len(), working.len());
        }
        Command::Fuse {
            scene,
            depths,
            strategy,
            voxel,
            out,
            report,
        } => {
            if let Some(v) = voxel {
                cfg.fusion.voxel = Some(*v);
            }
            cfg.validate()?;
            let strategy = strategy.unwrap_or(cfg.fusion.strategy);
            let views = load_views(scene)?;
            let init = load_initialization(&views, depths)?;
            let (cloud, kept) = fuse(&init, strategy, &cfg.fusion)?;
            write_ply(out, &cloud)?;
            #[derive(Serialize)]
            struct FuseReport {
                strategy: mvsgs::pipeline::Strategy,
                input_points: usize,
                output_points: usize,
                per_view_kept_fraction: Vec<f64>,
            }
            let rep = FuseReport {
                strategy,
                input_points: init.clouds.iter().map(GaussianCloud::len).sum(),
                output_points: cloud.len(),
                per_view_kept_fraction: kept,
            };
            write_json(&report.clone().unwrap_or_else(|| out.with_extension("json")), &rep)?;
        }
        Command::Optimize {
            ply,
            scene,
            iters,
            out,
            log,
        } => {
            let cloud = read_ply(ply)?;
            let views = load_views(scene)?;
            let train = pairs(&views, |i| !views[i].held_out);
            let iters = iters.unwrap_or(cfg.optim.iters);
            let (final_cloud, entries) = optimize_scene(&cloud, &train, iters, &cfg.optim, seed)?;
            write_ply(out, &final_cloud)?;
            if let Some(path) = log {
                write_csv(path, &entries)?;
            }
            if let Some(last) = entries.last() {
                info!("iter {}: loss {:.5}, train PSNR {:.2} dB", last.iter, last.loss, last.psnr_train);
            }
        }
        Command::Render {
            ply,
            camera,
            out,
            depth,
            reference,
            hybrid,
            scene,
        } => {
            let cloud = read_ply(ply)?;
            let cam = read_camera(camera)?;
            let splat: RenderOutput = if *reference {
                render_reference(&cloud, &cam)
            } else {
                render(&cloud, &cam, cfg.optim.tile)
            };
            if *hybrid {
                let views = load_views(scene.as_ref().expect("clap requires --scene with --hybrid"))?;
                let sources = pairs(&views, |i| !views[i].held_out);
                let (img, branches) = render_view(&cloud, &cam, &sources, true, cfg.optim.tile)?;
                write_image(out, &img)?;
                let (s, v) = branches.expect("hybrid render returns both branches");
                write_image(&sibling(out, "splat"), &s)?;
                write_image(&sibling(out, "volume"), &v)?;
            } else {
                write_image(out, &splat.color)?;
            }
            if let Some(path) = depth {
                let valid = splat.depth_valid();
                // expected depth normalized by accumulated alpha
                let values = splat
                    .depth
                    .iter()
                    .zip(&splat.alpha)
                    .zip(&valid)
                    .map(|((d, a), v)| if *v { d / a } else { 0.0 })
                    .collect();
                let map = DepthMap {
                    width: cam.width,
                    height: cam.height,
                    depth: values,
                    confidence: splat.alpha.clone(),
                    valid,
                };
                write_depth_pfm(path, &map)?;
            }
        }
        Command::Eval {
            images,
            reference,
            out,
        } => {
            let rows = eval_dirs(images, reference)?;
            let n = rows.len() as f64;
            let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
            let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
            println!("{:<32} {:>9} {:>8}", "image", "PSNR", "SSIM");
            for r in &rows {
                println!("{:<32} {:>9.4} {:>8.5}", r.name, r.psnr, r.ssim);
            }
            println!("{:<32} {:>9.4} {:>8.5}", "mean", mean_psnr, mean_ssim);
            let mut all = rows;
            all.push(mvsgs::pipeline::EvalRow {
                name: "mean".into(),
                psnr: mean_psnr,
                ssim: mean_ssim,
            });
            write_csv(&out.clone().unwrap_or_else(|| images.join("metrics.csv")), &all)?;
        }
        Command::Pipeline {
            scene,
            out,
            strategy,
            iters,
            hybrid,
        } => {
            if let Some(n) = iters {
                cfg.optim.iters = *n;
            }
            cfg.hybrid |= *hybrid;
            let strategies = strategy.clone().map_or_else(|| vec![cfg.fusion.strategy], |s| s.0);
            let views = load_views(scene)?;
            let (report, init, runs) = run_pipeline(&views, &strategies, &cfg, seed)?;
            create_dir(&out.join("depth"))?;
            let working = working_indices(&views);
            for (&i, d) in working.iter().zip(&init.depths) {
                write_depth(&out.join("depth").join(format!("{}.pfm", view_stem(i))), d)?;
            }
            for run in &runs {
                let name = run.report.strategy.name();
                let dir = out.join(name);
                create_dir(&dir.join("renders"))?;
                write_ply(&dir.join("fused.ply"), &run.fused)?;
                write_ply(&dir.join("final.ply"), &run.optimized)?;
                write_csv(&dir.join("log.csv"), &run.log)?;
                for (m, img) in run.report.held_out.iter().zip(&run.renders) {
                    write_image(&dir.join("renders").join(format!("{}.png", view_stem(m.view))), img)?;
                }
                info!(
                    "{name}: {} -> {} points, held-out PSNR {:.2} dB",
                    run.report.n_points_fused, run.report.n_points_final, run.report.psnr
                );
            }
            write_json(&out.join("report.json"), &report)?;
            write_json(&out.join("config.json"), &cfg)?;
        }
    }
    Ok(())
}

/// `(camera, image)` pairs of the views selected by index.
fn pairs(views: &[View], keep: impl Fn(usize) -> bool) -> Vec<(Camera, Image)> {
    views
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, v)| (v.camera.clone(), v.image.clone()))
        .collect()
}

fn working_indices(views: &[View]) -> Vec<usize> {
    (0..views.len()).filter(|&i| !views[i].held_out).collect()
}

/// Pixel-aligned clouds of the working views whose depth maps exist in `dir`.
fn load_initialization(views: &[View], dir: &Path) -> Result<Initialization> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "depth directory not found")));
    }
    let heads = DecodeHeads::photometric(3);
    let mut init = Initialization {
        cameras: Vec::new(),
        depths: Vec::new(),
        coarse: Vec::new(),
        clouds: Vec::new(),
    };
    for i in working_indices(views) {
        let path = dir.join(format!("{}.pfm", view_stem(i)));
        if !path.exists() {
            continue;
        }
        let depth = read_depth_pfm(&path)?;
        let v = &views[i];
        init.clouds.push(init_pixel_aligned(&depth, &v.camera, &feature_encode(&v.image), &heads)?);
        init.cameras.push(v.camera.clone());
        init.depths.push(depth);
    }
    if init.depths.len() < 2 {
        return Err(Error::TooFewViews(init.depths.len()));
    }
    Ok(init)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// `out.png` -> `out_<tag>.png`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    path.with_file_name(format!("{stem}_{tag}.{ext}"))
}

fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    ensure_parent(path)?;
    write_depth_pfm(path, depth)?;
    write_depth_visualization(&path.with_extension("png"), depth)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
