//! Multi-view stereo driven Gaussian splatting on the CPU.
//!
//! The crate covers plane-sweep depth estimation, pixel-aligned Gaussian
//! initialization, a differentiable tile rasterizer, single-sample volume
//! rendering, multi-view consistency fusion and per-scene optimization.

pub mod depth;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod io;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod volume;

pub use depth::{
    cascade, feature_encode, CostVolume, DepthConfig, DepthHypotheses, DepthMap, FeatureMap,
    FeatureProvider, PhotometricFeatures, Spacing,
};
pub use error::{Error, Result};
pub use gaussian::{covariance3d, init_pixel_aligned, quat_to_rot, DecodeHeads, Gaussian, GaussianCloud};
pub use geometry::{homography, warp_bilinear, Camera, Pixel, Point3};
pub use image::Image;
pub use fusion::{ConsistencyMask, DepthSampling, ThresholdSchedule};
pub use loss::{psnr, ssim, LossWeights};
pub use optim::{optimize_scene, OptimConfig};
pub use pipeline::{PipelineConfig, PipelineReport, Strategy, View};
pub use raster::{render, RenderOutput};
