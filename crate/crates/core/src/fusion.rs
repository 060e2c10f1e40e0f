//! Multi-view geometric consistency checking and point-cloud aggregation.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Quat};
use crate::geometry::{Camera, Pixel};

/// How the neighbor depth is read at the continuous projection `q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Positional (pixels) and relative depth reprojection errors of a reference
/// view against one neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionErrors {
    pub width: usize,
    pub height: usize,
    pub xi_p: Vec<f64>,
    pub xi_d: Vec<f64>,
    pub valid: Vec<bool>,
    /// Validity of the reference depth map.
    pub reference: Vec<bool>,
}

/// Per-pixel reliability of a reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMask {
    pub width: usize,
    pub height: usize,
    pub reliable: Vec<bool>,
    /// Validity of the reference depth map, i.e. the pixel layout of the
    /// pixel-aligned cloud built from it.
    pub reference: Vec<bool>,
}

impl ConsistencyMask {
    /// Mask accepting every valid reference pixel.
    pub fn accept_all(depth: &DepthMap) -> Self {
        Self {
            width: depth.width,
            height: depth.height,
            reliable: depth.valid.clone(),
            reference: depth.valid.clone(),
        }
    }

    pub fn reliable_count(&self) -> usize {
        self.reliable.iter().filter(|&&r| r).count()
    }
}

/// Thresholds `θ_p(n)`, `θ_d(n)` for `n = 1..=len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub pixel: Vec<f64>,
    pub depth: Vec<f64>,
}

impl ThresholdSchedule {
    /// `θ_p(n) = n/8` pixels and `θ_d(n) = n/10` relative depth.
    pub fn standard(len: usize) -> Self {
        Self {
            pixel: (1..=len).map(|n| n as f64 / 8.0).collect(),
            depth: (1..=len).map(|n| n as f64 / 10.0).collect(),
        }
    }

    /// Standard schedule with `min(4, neighbors)` entries.
    pub fn for_neighbors(neighbors: usize) -> Self {
        Self::standard(neighbors.min(4))
    }

    pub fn len(&self) -> usize {
        self.pixel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| v.iter().all(|t| *t > 0.0) && v.windows(2).all(|w| w[0] <= w[1]);
        if self.pixel.len() != self.depth.len() || !ok(&self.pixel) || !ok(&self.depth) {
            return Err(Error::Config(
                "threshold schedule must be positive, non-decreasing and of equal lengths".into(),
            ));
        }
        Ok(())
    }
}

/// Projections this close outside the image are treated as on its border.
const BORDER_SLACK: f64 = 1e-6;

fn sample_depth(d: &DepthMap, q: &Pixel, mode: DepthSampling) -> Option<f64> {
    let (w, h) = (d.width, d.height);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let inside = |v: f64, max: f64| v >= -BORDER_SLACK && v <= max + BORDER_SLACK;
    if !(inside(q.x, xmax) && inside(q.y, ymax)) {
        return None;
    }
    let q = Pixel::new(q.x.clamp(0.0, xmax), q.y.clamp(0.0, ymax));
    match mode {
        DepthSampling::Nearest => d.get(q.x.round() as usize, q.y.round() as usize),
        DepthSampling::Bilinear => {
            let x0 = (q.x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (q.y.floor() as usize).min(h.saturating_sub(2));
            let (fx, fy) = (q.x - x0 as f64, q.y - y0 as f64);
            let mut acc = 0.0;
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let wt = wx * wy;
                    if wt == 0.0 {
                        continue;
                    }
                    // Any contributing tap must be valid.
                    acc += wt * d.get((x0 + dx).min(w - 1), (y0 + dy).min(h - 1))?;
                }
            }
            Some(acc)
        }
    }
}

/// Projects each valid reference pixel into the neighbor, reads the neighbor
/// depth there, back-projects and measures the round-trip discrepancy.
pub fn pairwise_errors(
    d0: &DepthMap,
    cam0: &Camera,
    d1: &DepthMap,
    cam1: &Camera,
    sampling: DepthSampling,
) -> ReprojectionErrors {
    let n = d0.width * d0.height;
    let mut xi_p = vec![0.0; n];
    let mut xi_d = vec![0.0; n];
    let mut valid = vec![false; n];
    xi_p.par_iter_mut()
        .zip(xi_d.par_iter_mut())
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((ep, ed), v))| {
            if !d0.valid[i] {
                return;
            }
            let p = Pixel::new((i % d0.width) as f64, (i / d0.width) as f64);
            let z0 = d0.depth[i];
            let world = cam0.unproject_unchecked(&p, z0);
            let Ok((q, _)) = cam1.project(&world) else { return };
            let Some(z1) = sample_depth(d1, &q, sampling) else { return };
            let back = cam1.unproject_unchecked(&q, z1);
            let Ok((p2, z2)) = cam0.project(&back) else { return };
            *ep = (p - p2).norm();
            *ed = (z0 - z2).abs() / z0;
            *v = true;
        });
    ReprojectionErrors {
        width: d0.width,
        height: d0.height,
        xi_p,
        xi_d,
        valid,
        reference: d0.valid.clone(),
    }
}

/// A pixel is reliable when, for some `n`, more than `n` neighbors agree
/// within `θ_p(n)` and `θ_d(n)`.
pub fn dynamic_check(errors: &[ReprojectionErrors], sched: &ThresholdSchedule) -> Result<ConsistencyMask> {
    let first = errors.first().ok_or(Error::EmptyNeighborSet)?;
    sched.validate()?;
    if sched.len() > errors.len() {
        return Err(Error::Config(format!(
            "threshold schedule has {} entries for {} neighbors",
            sched.len(),
            errors.len()
        )));
    }
    let n = first.width * first.height;
    if errors.iter().any(|e| e.width != first.width || e.height != first.height) {
        return Err(Error::ResolutionMismatch("neighbor error maps differ in size".into()));
    }
    let reliable = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..sched.len()).any(|k| {
                let count = errors
                    .iter()
                    .filter(|e| e.valid[i] && e.xi_p[i] < sched.pixel[k] && e.xi_d[i] < sched.depth[k])
                    .count();
                count > k + 1
            })
        })
        .collect();
    Ok(ConsistencyMask {
        width: first.width,
        height: first.height,
        reliable,
        reference: first.reference.clone(),
    })
}

/// The `k` other views whose camera centers are closest to view `i`'s, ties
/// broken by index.
pub fn nearest_views(cams: &[Camera], i: usize, k: usize) -> Vec<usize> {
    let c = cams[i].center();
    let mut others: Vec<(f64, usize)> = cams
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, cam)| ((cam.center() - c).norm(), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Consistency masks for every view against up to `neighbors` nearest views.
pub fn check_views(
    depths: &[DepthMap],
    cams: &[Camera],
    neighbors: usize,
    sampling: DepthSampling,
) -> Result<Vec<ConsistencyMask>> {
    if depths.len() != cams.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} depth maps for {} cameras",
            depths.len(),
            cams.len()
        )));
    }
    (0..depths.len())
        .map(|i| {
            let nbrs = nearest_views(cams, i, neighbors);
            let errors: Vec<_> = nbrs
                .iter()
                .map(|&j| pairwise_errors(&depths[i], &cams[i], &depths[j], &cams[j], sampling))
                .collect();
            dynamic_check(&errors, &ThresholdSchedule::for_neighbors(nbrs.len()))
        })
        .collect()
}

/// Concatenates clouds in order.
pub fn aggregate_concat(clouds: &[GaussianCloud]) -> GaussianCloud {
    let mut out = GaussianCloud::with_capacity(clouds.iter().map(GaussianCloud::len).sum());
    for c in clouds {
        out.extend_from(c);
    }
    out
}

/// One Gaussian per occupied voxel of side `voxel`, with attribute-wise means.
/// Quaternions are sign-aligned to the first member before averaging. Output
/// order follows the first occurrence of each voxel.
pub fn aggregate_voxel(cloud: &GaussianCloud, voxel: f64) -> Result<GaussianCloud> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {voxel}")));
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, m) in cloud.means.iter().enumerate() {
        let key = [0, 1, 2].map(|k| (m[k] / voxel).floor() as i64);
        let g = *slot.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut out = GaussianCloud::with_capacity(groups.len());
    for members in groups {
        let inv = 1.0 / members.len() as f64;
        let mut g = cloud.get(members[0]);
        g.mean = members.iter().map(|&i| cloud.means[i]).sum::<nalgebra::Vector3<f64>>() * inv;
        g.scale = members.iter().map(|&i| cloud.scales[i]).sum::<nalgebra::Vector3<f64>>() * inv;
        g.color = members.iter().map(|&i| cloud.colors[i]).sum::<nalgebra::Vector3<f64>>() * inv;
        g.opacity = members.iter().map(|&i| cloud.opacities[i]).sum::<f64>() * inv;
        let lead = cloud.rotations[members[0]];
        let q: Quat = members
            .iter()
            .map(|&i| {
                let q = cloud.rotations[i];
                if q.dot(&lead) < 0.0 {
                    -q
                } else {
                    q
                }
            })
            .sum();
        if q.norm() > 1e-9 {
            g.rotation = q.normalize();
        }
        out.push(g);
    }
    Ok(out)
}

/// Keeps the Gaussians whose source pixel is reliable. Cloud `i` must hold one
/// Gaussian per valid reference pixel of mask `i`, in row-major order.
pub fn aggregate_consistent(clouds: &[GaussianCloud], masks: &[ConsistencyMask]) -> Result<GaussianCloud> {
    if clouds.len() != masks.len() {
        return Err(Error::AlignmentMismatch(format!(
            "{} clouds for {} masks",
            clouds.len(),
            masks.len()
        )));
    }
    let mut out = GaussianCloud::new();
    for (v, (cloud, mask)) in clouds.iter().zip(masks).enumerate() {
        let keep: Vec<bool> = mask
            .reference
            .iter()
            .zip(&mask.reliable)
            .filter(|(r, _)| **r)
            .map(|(_, k)| *k)
            .collect();
        if keep.len() != cloud.len() {
            return Err(Error::AlignmentMismatch(format!(
                "view {v}: cloud has {} Gaussians but the mask has {} valid pixels",
                cloud.len(),
                keep.len()
            )));
        }
        let idx: Vec<usize> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect();
        out.extend_from(&cloud.select(&idx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{Gaussian, IDENTITY_QUAT};
    use nalgebra::{Matrix3, Vector3};

    fn err_map(pairs: &[(f64, f64)]) -> ReprojectionErrors {
        ReprojectionErrors {
            width: pairs.len(),
            height: 1,
            xi_p: pairs.iter().map(|p| p.0).collect(),
            xi_d: pairs.iter().map(|p| p.1).collect(),
            valid: vec![true; pairs.len()],
            reference: vec![true; pairs.len()],
        }
    }

    #[test]
    fn schedule_values() {
        let s = ThresholdSchedule::standard(3);
        assert_eq!(s.pixel, vec![0.125, 0.25, 0.375]);
        assert_eq!(s.depth, vec![1.0 / 10.0, 2.0 / 10.0, 3.0 / 10.0]);
        assert_eq!(ThresholdSchedule::for_neighbors(9).len(), 4);
        assert_eq!(ThresholdSchedule::for_neighbors(2).len(), 2);
    }

    #[test]
    fn two_agreeing_neighbors_are_reliable() {
        let e = [err_map(&[(0.1, 0.05)]), err_map(&[(0.1, 0.05)])];
        let m = dynamic_check(&e, &ThresholdSchedule::standard(2)).unwrap();
        assert_eq!(m.reliable, vec![true]);
    }

    #[test]
    fn one_agreeing_neighbor_is_not_enough() {
        // count 1 is not > 1 at n = 1; n = 2 needs three.
        let e = [err_map(&[(0.1, 0.05)]), err_map(&[(10.0, 0.05)])];
        let m = dynamic_check(&e, &ThresholdSchedule::standard(2)).unwrap();
        assert_eq!(m.reliable, vec![false]);
    }

    #[test]
    fn huge_errors_reject_everything() {
        let e = vec![err_map(&[(10.0, 0.0); 4]); 3];
        let m = dynamic_check(&e, &ThresholdSchedule::standard(3)).unwrap();
        assert!(m.reliable.iter().all(|r| !r));
    }

    #[test]
    fn empty_neighbor_set_errors() {
        assert!(matches!(
            dynamic_check(&[], &ThresholdSchedule::standard(1)),
            Err(Error::EmptyNeighborSet)
        ));
    }

    fn plane_views() -> (Camera, Camera, DepthMap, DepthMap) {
        let k = Camera::intrinsics(40.0, 40.0, 15.5, 11.5);
        let c0 = Camera::new(k, Matrix3::identity(), Vector3::zeros(), 32, 24, 0.5, 10.0).unwrap();
        let c1 = Camera::new(k, Matrix3::identity(), Vector3::new(-0.2, 0.0, 0.0), 32, 24, 0.5, 10.0).unwrap();
        let d = DepthMap::from_depths(32, 24, vec![3.0; 32 * 24]);
        (c0, c1, d.clone(), d)
    }

    #[test]
    fn consistent_plane_has_zero_error() {
        let (c0, c1, d0, d1) = plane_views();
        for mode in [DepthSampling::Bilinear, DepthSampling::Nearest] {
            let e = pairwise_errors(&d0, &c0, &d1, &c1, mode);
            assert!(e.valid.iter().any(|v| *v));
            for i in 0..e.valid.len() {
                if e.valid[i] {
                    assert!(e.xi_p[i] < 1e-6 && e.xi_d[i] < 1e-6);
                }
            }
        }
    }

    #[test]
    fn out_of_view_pixels_are_masked() {
        let (c0, c1, d0, d1) = plane_views();
        let e = pairwise_errors(&d0, &c0, &d1, &c1, DepthSampling::Bilinear);
        // Baseline 0.2 at depth 3 shifts by 40·0.2/3 ≈ 2.7 px to the left.
        for y in 0..24 {
            assert!(!e.valid[y * 32]);
            assert!(!e.valid[y * 32 + 1]);
            assert!(!e.valid[y * 32 + 2]);
            assert!(e.valid[y * 32 + 3]);
        }
    }

    #[test]
    fn self_errors_are_zero() {
        let (c0, _, _, _) = plane_views();
        let d = DepthMap::from_depths(32, 24, (0..32 * 24).map(|i| 2.0 + (i % 13) as f64 * 0.1).collect());
        let e = pairwise_errors(&d, &c0, &d, &c0, DepthSampling::Bilinear);
        assert!(e.valid.iter().all(|v| *v));
        assert!(e.xi_p.iter().chain(&e.xi_d).all(|v| *v < 1e-9));
    }

    fn gaussian(x: f64, opacity: f64) -> Gaussian {
        Gaussian {
            mean: Vector3::new(x, 0.0, 0.0),
            scale: Vector3::new(0.1, 0.1, 0.1),
            rotation: IDENTITY_QUAT,
            opacity,
            color: Vector3::new(0.5, 0.5, 0.5),
        }
    }

    #[test]
    fn concat_preserves_order() {
        let a: GaussianCloud = (0..3).map(|i| gaussian(i as f64, 0.5)).collect();
        let b: GaussianCloud = (0..5).map(|i| gaussian(10.0 + i as f64, 0.5)).collect();
        let c = aggregate_concat(&[a.clone(), b.clone()]);
        assert_eq!(c.len(), 8);
        assert_eq!(c.means[..3], a.means[..]);
        assert_eq!(c.means[3..], b.means[..]);
        assert!(aggregate_concat(&[]).is_empty());
    }

    #[test]
    fn voxel_merges_a_single_cell() {
        let cloud: GaussianCloud = [0.1, 0.2, 0.6].iter().map(|&x| gaussian(x, 0.3)).collect();
        let v = aggregate_voxel(&cloud, 1.0).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v.means[0].x - 0.3).abs() < 1e-12);
        let spaced: GaussianCloud = (0..4).map(|i| gaussian(i as f64 * 2.5, 0.3)).collect();
        assert_eq!(aggregate_voxel(&spaced, 1.0).unwrap().len(), 4);
        assert!(aggregate_voxel(&spaced, 0.0).is_err());
    }

    #[test]
    fn voxel_aligns_quaternion_signs() {
        let mut a = gaussian(0.1, 0.5);
        let mut b = gaussian(0.2, 0.5);
        a.rotation = Quat::new(0.8, 0.6, 0.0, 0.0);
        b.rotation = -a.rotation;
        let v = aggregate_voxel(&[a, b].into_iter().collect(), 1.0).unwrap();
        assert!((v.rotations[0] - a.rotation).norm() < 1e-12);
    }

    #[test]
    fn consistent_aggregation_extremes() {
        let depth = DepthMap {
            width: 2,
            height: 2,
            depth: vec![1.0; 4],
            confidence: vec![1.0; 4],
            valid: vec![true, false, true, true],
        };
        let cloud: GaussianCloud = (0..3).map(|i| gaussian(i as f64, 0.5)).collect();
        let all = ConsistencyMask::accept_all(&depth);
        assert_eq!(
            aggregate_consistent(&[cloud.clone()], &[all.clone()]).unwrap(),
            aggregate_concat(&[cloud.clone()])
        );
        let none = ConsistencyMask {
            reliable: vec![false; 4],
            ..all.clone()
        };
        assert!(aggregate_consistent(&[cloud.clone()], &[none]).unwrap().is_empty());
        let some = ConsistencyMask {
            reliable: vec![false, false, true, false],
            ..all.clone()
        };
        let kept = aggregate_consistent(&[cloud.clone()], &[some]).unwrap();
        assert_eq!(kept.means, vec![cloud.means[1]]);
        let short: GaussianCloud = (0..2).map(|i| gaussian(i as f64, 0.5)).collect();
        assert!(matches!(
            aggregate_consistent(&[short], &[all]),
            Err(Error::AlignmentMismatch(_))
        ));
    }
}
