//! `mvsgs`: the pipeline stages as subcommands, plus an end-to-end `pipeline`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvsgs::pipeline::Strategy;
use mvsgs::synth::Preset;

#[derive(Parser, Debug)]
#[command(name = "mvsgs", version, about = "Multi-view stereo initialized Gaussian splatting")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Pipeline config (.json or .toml); unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 selects the single-threaded reference path. Default: all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene with ground-truth depth.
    Synth {
        #[arg(long, default_value = "cluttered")]
        preset: Preset,
        #[arg(long, default_value_t = 10)]
        views: usize,
        /// Resolution as WxH.
        #[arg(long, default_value = "64x64", value_parser = parse_res)]
        res: (usize, usize),
        /// Comma-separated held-out view indices; default two interior views.
        #[arg(long, value_delimiter = ',')]
        held_out: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage plane-sweep depth for one view.
    Depth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        coarse: Option<usize>,
        #[arg(long)]
        fine: Option<usize>,
        /// Output PFM; a PNG preview and its range sidecar are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth for every working view and the concatenated pixel-aligned cloud.
    Init {
        #[arg(long)]
        scene: PathBuf,
        /// Directory receiving one depth PFM (and preview) per working view.
        #[arg(long)]
        depths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate per-view pixel-aligned clouds from stored depth maps.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        /// Directory of `view_NNN.pfm` depth maps, as written by `init`.
        #[arg(long)]
        depths: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Voxel side in world units.
        #[arg(long)]
        voxel: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// JSON report path; default: the output path with a .json extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fine-tune a cloud against the scene's training views.
    Optimize {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// CSV with columns iter, loss, psnr_train, n_gaussians, wall_ms.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render a cloud from a camera.
    Render {
        #[arg(long)]
        ply: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the expected depth as PFM.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Use the brute-force reference rasterizer.
        #[arg(long, conflicts_with = "hybrid")]
        reference: bool,
        /// Average with the volume branch; writes both branch images too.
        #[arg(long, requires = "scene")]
        hybrid: bool,
        /// Source views for the volume branch.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// PSNR and SSIM of same-named images (LPIPS is not computed: it needs a pretrained network).
    Eval {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// CSV output; default: metrics.csv inside the images directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Depth, fusion, optimization and held-out evaluation; writes report.json.
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// concat, voxel, check or all.
        #[arg(long, value_parser = parse_strategies)]
        strategy: Option<Strategies>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        hybrid: bool,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w < 2 || h < 2 {
        return Err("resolution must be at least 2x2".into());
    }
    Ok((w, h))
}

/// One strategy, or all of them.
#[derive(Clone, Debug)]
pub struct Strategies(pub Vec<Strategy>);

fn parse_strategies(s: &str) -> Result<Strategies, String> {
    if s == "all" {
        Ok(Strategies(Strategy::ALL.to_vec()))
    } else {
        s.parse().map(|k| Strategies(vec![k])).map_err(|e: mvsgs::Error| e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
