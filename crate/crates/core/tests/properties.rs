//! Property tests over randomized inputs.

use mvsgs::depth::{depth_regress, CostVolume, DepthHypotheses, Spacing};
use mvsgs::fusion::{aggregate_concat, aggregate_consistent, dynamic_check, ReprojectionErrors};
use mvsgs::gaussian::{covariance3d, quat_to_rot, GaussianCloud, Quat};
use mvsgs::io::{decode_image, parse_pfm, parse_ply, ply_bytes, SceneView};
use mvsgs::loss::{psnr, ssim};
use mvsgs::optim::{density_control, DensityControlConfig, GradStats};
use mvsgs::synth::random_cloud;
use mvsgs::volume::{single_sample_render, RadianceSampleMap};
use mvsgs::{Camera, ConsistencyMask, Image, Pixel, PipelineConfig, ThresholdSchedule};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;

fn camera_strategy() -> impl Strategy<Value = Camera> {
    (
        (200.0..900.0f64, 200.0..900.0f64),
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64),
        prop::array::uniform3(-2.0..2.0f64),
    )
        .prop_map(|((fx, fy), (r, p, y), t)| {
            Camera::new(
                Camera::intrinsics(fx, fy, 40.0, 30.0),
                *UnitQuaternion::from_euler_angles(r, p, y).to_rotation_matrix().matrix(),
                Vector3::from(t),
                80,
                60,
                0.1,
                100.0,
            )
            .unwrap()
        })
}

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..1.0f64, w * h * 3).prop_map(move |d| Image::from_data(w, h, 3, d).unwrap())
}

fn quat_strategy() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(Quat::from)
}

/// Random single-pixel volume over `n` planes, all cells observed.
fn volume(costs: &[f64]) -> CostVolume {
    CostVolume {
        depth_count: costs.len(),
        width: 1,
        height: 1,
        cost: costs.to_vec(),
        valid_views: vec![3; costs.len()],
    }
}

fn errors(xi: &[(f64, f64, bool)]) -> ReprojectionErrors {
    ReprojectionErrors {
        width: xi.len(),
        height: 1,
        xi_p: xi.iter().map(|e| e.0).collect(),
        xi_d: xi.iter().map(|e| e.1).collect(),
        valid: xi.iter().map(|e| e.2).collect(),
        reference: vec![true; xi.len()],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn project_unproject_round_trip(cam in camera_strategy(), x in 0.0..79.0f64, y in 0.0..59.0f64, d in 0.2..50.0f64) {
        let world = cam.unproject(&Pixel::new(x, y), d).unwrap();
        let (p, z) = cam.project(&world).unwrap();
        prop_assert!((p - Pixel::new(x, y)).norm() < 1e-9);
        prop_assert!((z - d).abs() <= 1e-12 * d);
    }

    #[test]
    fn soft_argmax_stays_in_range_and_is_shift_and_scale_invariant(
        costs in prop::collection::vec(0.0..1.0f64, 2..24),
        shift in -5.0..5.0f64,
        k in 0.1..10.0f64,
        tau in 0.01..1.0f64,
    ) {
        let hyps = DepthHypotheses::build(1.0, 5.0, costs.len(), Spacing::Linear).unwrap();
        let base = depth_regress(&volume(&costs), &hyps, tau).unwrap();
        prop_assert!(base.valid[0]);
        prop_assert!(base.depth[0] >= 1.0 - 1e-12 && base.depth[0] <= 5.0 + 1e-12);
        prop_assert!(base.confidence[0] > 0.0 && base.confidence[0] <= 1.0 + 1e-12);

        let shifted: Vec<f64> = costs.iter().map(|c| c + shift).collect();
        let s = depth_regress(&volume(&shifted), &hyps, tau).unwrap();
        prop_assert!((s.depth[0] - base.depth[0]).abs() < 1e-9);

        let scaled: Vec<f64> = costs.iter().map(|c| c * k).collect();
        let s = depth_regress(&volume(&scaled), &hyps, tau * k).unwrap();
        prop_assert!((s.depth[0] - base.depth[0]).abs() < 1e-9);
    }

    #[test]
    fn rotations_are_orthonormal(q in quat_strategy()) {
        let r = quat_to_rot(&q).unwrap();
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_is_psd_with_squared_scale_spectrum(q in quat_strategy(), s in prop::array::uniform3(1e-3..3.0f64)) {
        let s = Vector3::from(s);
        let cov = covariance3d(&s, &q).unwrap();
        prop_assert!(cov.cholesky().is_some());
        let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn dynamic_check_is_monotone_in_thresholds(
        maps in prop::collection::vec(prop::collection::vec((0.0..1.0f64, 0.0..0.8f64, any::<bool>()), 40), 1..6),
        grow in 1.0..3.0f64,
    ) {
        let errs: Vec<ReprojectionErrors> = maps.iter().map(|m| errors(m)).collect();
        let sched = ThresholdSchedule::for_neighbors(errs.len());
        let looser = ThresholdSchedule {
            pixel: sched.pixel.iter().map(|t| t * grow).collect(),
            depth: sched.depth.iter().map(|t| t * grow).collect(),
        };
        let tight = dynamic_check(&errs, &sched).unwrap();
        let loose = dynamic_check(&errs, &looser).unwrap();
        for (a, b) in tight.reliable.iter().zip(&loose.reliable) {
            prop_assert!(!*a || *b);
        }
    }

    #[test]
    fn consistent_aggregation_never_exceeds_concatenation(
        masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 16), 1..4),
        seed in 0u64..1000,
    ) {
        let cam = Camera::new(Camera::intrinsics(20.0, 20.0, 1.5, 1.5), Matrix3::identity(), Vector3::zeros(), 4, 4, 0.1, 10.0).unwrap();
        let clouds: Vec<GaussianCloud> = (0..masks.len()).map(|i| random_cloud(16, &cam, 1.0, 3.0, seed + i as u64)).collect();
        let masks: Vec<ConsistencyMask> = masks
            .into_iter()
            .map(|reliable| ConsistencyMask { width: 4, height: 4, reliable, reference: vec![true; 16] })
            .collect();
        let all_true = masks.iter().all(|m| m.reliable.iter().all(|&r| r));
        let kept = aggregate_consistent(&clouds, &masks).unwrap().len();
        let concat = aggregate_concat(&clouds).len();
        prop_assert!(kept <= concat);
        prop_assert_eq!(kept == concat, all_true);
    }

    #[test]
    fn ssim_and_psnr_are_symmetric_and_bounded(a in image_strategy(16, 14), b in image_strategy(16, 14)) {
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn volume_render_is_monotone_in_density(
        r in prop::array::uniform3(0.0..1.0f64),
        sigma in 0.0..20.0f64,
        extra in 0.0..5.0f64,
    ) {
        let map = |s: f64| RadianceSampleMap { width: 1, height: 1, radiance: r.to_vec(), density: vec![s] };
        let lo = single_sample_render(&map(sigma));
        let hi = single_sample_render(&map(sigma + extra));
        for c in 0..3 {
            prop_assert!(hi.data[c] >= lo.data[c] - 1e-15);
            prop_assert!(hi.data[c] <= r[c] + 1e-15);
        }
    }

    #[test]
    fn density_control_keeps_the_cloud_valid(
        seed in 0u64..10_000,
        grads in prop::collection::vec(0.0..1e-3f64, 60),
        grow in prop::collection::vec(0.2..40.0f64, 60),
    ) {
        let cam = Camera::new(Camera::intrinsics(50.0, 50.0, 20.0, 20.0), Matrix3::identity(), Vector3::zeros(), 41, 41, 0.1, 10.0).unwrap();
        let mut cloud = random_cloud(60, &cam, 1.0, 4.0, seed);
        for (s, g) in cloud.scales.iter_mut().zip(&grow) {
            *s *= *g;
        }
        for (i, o) in cloud.opacities.iter_mut().enumerate() {
            if i % 9 == 0 {
                *o = 1e-3;
            }
        }
        let stats = GradStats { sum: grads.clone(), count: vec![1; grads.len()] };
        let cfg = DensityControlConfig::default();
        let out = density_control(&cloud, &stats, &cfg, 4.0, seed);
        prop_assert!(out.cloud.validate().is_ok());
        prop_assert_eq!(out.cloud.len(), out.origin.len());
        for o in out.origin.iter().flatten() {
            prop_assert!(*o < cloud.len());
        }
        prop_assert!(out.cloud.opacities.iter().all(|&a| a >= cfg.prune_opacity));
    }

    #[test]
    fn config_round_trips(
        planes in 2usize..200,
        tau in 1e-6..1.0f64,
        iters in 0usize..10_000,
        lambda in 0.0..1.0f64,
        toml in any::<bool>(),
    ) {
        let mut cfg = PipelineConfig::default();
        cfg.depth.coarse_planes = planes;
        cfg.depth.temperature = tau;
        cfg.optim.iters = iters;
        cfg.optim.lambda_ft = lambda;
        let back = PipelineConfig::parse(&cfg.to_text(toml), toml).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn readers_never_panic_on_random_bytes(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = parse_ply(&bytes);
        let _ = parse_pfm(&bytes);
        let _ = decode_image(&bytes, image::ImageFormat::Png);
        let _ = decode_image(&bytes, image::ImageFormat::Pnm);
        let text = String::from_utf8_lossy(&bytes);
        let _ = PipelineConfig::parse(&text, false);
        let _ = PipelineConfig::parse(&text, true);
        let _ = serde_json::from_str::<Vec<SceneView>>(&text);
    }

    #[test]
    fn readers_never_panic_on_corrupted_files(
        seed in 0u64..1000,
        cut in 0usize..4096,
        flips in prop::collection::vec((0usize..4096, any::<u8>()), 0..8),
    ) {
        let cam = Camera::new(Camera::intrinsics(20.0, 20.0, 4.0, 4.0), Matrix3::identity(), Vector3::zeros(), 9, 9, 0.1, 10.0).unwrap();
        let mut ply = ply_bytes(&random_cloud(12, &cam, 1.0, 3.0, seed));
        let mut pfm = mvsgs::io::pfm_bytes(4, 3, 1, &[1.0; 12]);
        for buf in [&mut ply, &mut pfm] {
            for &(at, v) in &flips {
                let n = buf.len();
                buf[at % n] ^= v;
            }
        }
        let _ = parse_ply(&ply[..cut.min(ply.len())]);
        let _ = parse_ply(&ply);
        let _ = parse_pfm(&pfm[..cut.min(pfm.len())]);
        let _ = parse_pfm(&pfm);
    }
}
