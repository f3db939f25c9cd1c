//! Flow-field arithmetic and the synthetic flow oracle.
//!
//! Image-to-depth flows (`c2d`, `n2d`) live on the depth-map grid: the value
//! at a depth pixel is the displacement from the LiDAR projection to the
//! point's location in the camera image. The image-to-image flow (`c2n`)
//! lives on the current-image grid, like the output of a dense optical-flow
//! network.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{h_project, project_point, CameraIntrinsics, PoseSE3};
use crate::map::PointCloud;
use crate::render::{depth_flow_from_map, remove_occlusions, render_depth, DepthMap, FlowField, OcclusionParams};
use crate::rng;

/// Samples `field` at a sub-pixel location. Corners with zero weight are
/// ignored; every other corner must be inside the image and valid.
pub fn sample_bilinear(field: &FlowField, u: f64, v: f64) -> Option<[f64; 2]> {
    if !u.is_finite() || !v.is_finite() || u < 0.0 || v < 0.0 {
        return None;
    }
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (u0, v0) = (u0 as usize, v0 as usize);
    if u0 >= field.width || v0 >= field.height {
        return None;
    }
    let mut acc = [0.0; 2];
    for (du, dv, wgt) in [
        (0, 0, (1.0 - fu) * (1.0 - fv)),
        (1, 0, fu * (1.0 - fv)),
        (0, 1, (1.0 - fu) * fv),
        (1, 1, fu * fv),
    ] {
        if wgt == 0.0 {
            continue;
        }
        let (cu, cv) = (u0 + du, v0 + dv);
        if cu >= field.width || cv >= field.height {
            return None;
        }
        let f = field.at(cu, cv)?;
        acc[0] += wgt * f[0];
        acc[1] += wgt * f[1];
    }
    Some(acc)
}

/// Backward warp: output at `p` is `field` sampled at `p + base(p)`.
pub fn warp(field: &FlowField, base: &FlowField) -> Result<FlowField> {
    field.check_dims(base)?;
    let w = base.width;
    let mut out = FlowField::invalid(base.width, base.height);
    for i in 0..base.len() {
        let Some(b) = base.get(i) else { continue };
        let (u, v) = ((i % w) as f64 + b[0], (i / w) as f64 + b[1]);
        if let Some(s) = sample_bilinear(field, u, v) {
            out.set(i, s);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTriplet {
    pub c2d: FlowField,
    pub n2d: FlowField,
    pub c2n: FlowField,
}

impl FlowTriplet {
    pub fn check_dims(&self) -> Result<()> {
        self.c2d.check_dims(&self.n2d)?;
        self.c2d.check_dims(&self.c2n)
    }
}

/// Cross-modal consistency residual on the depth-map grid.
///
/// The difference of the two image-to-depth flows is the image-to-image
/// displacement of each LiDAR point. It is compared against the predicted
/// optical flow sampled where the point lands in the current image, which
/// is the depth pixel displaced by `c2d`. Valid where both depth flows and
/// the sample are valid.
pub fn consistency_residual(t: &FlowTriplet) -> Result<FlowField> {
    t.check_dims()?;
    let sampled = warp(&t.c2n, &t.c2d)?;
    let mut out = FlowField::invalid(t.c2d.width, t.c2d.height);
    for i in 0..out.len() {
        let (Some(c), Some(n), Some(s)) = (t.c2d.get(i), t.n2d.get(i), sampled.get(i)) else {
            continue;
        };
        out.set(i, [(n[0] - c[0]) - s[0], (n[1] - c[1]) - s[1]]);
    }
    Ok(out)
}

/// Mean L2 norm over the valid mask.
pub fn mean_norm(f: &FlowField) -> Result<f64> {
    let (sum, n) = (0..f.len())
        .filter_map(|i| f.get(i))
        .fold((0.0, 0usize), |(s, n), v| (s + v[0].hypot(v[1]), n + 1));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Max-norm (largest per-pixel L-infinity component) over the valid mask.
pub fn max_abs(f: &FlowField) -> Option<f64> {
    (0..f.len())
        .filter_map(|i| f.get(i))
        .map(|v| v[0].abs().max(v[1].abs()))
        .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
}

/// Masked average endpoint error. The mask is every pixel that carries a
/// ground-truth sample (including genuinely zero flow) and a prediction.
pub fn epe(f_pre: &FlowField, f_gt: &FlowField) -> Result<f64> {
    f_pre.check_dims(f_gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..f_gt.len() {
        let (Some(g), Some(p)) = (f_gt.get(i), f_pre.get(i)) else { continue };
        sum += (p[0] - g[0]).hypot(p[1] - g[1]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Sum of both EPE terms and the mean consistency residual.
pub fn total_loss(
    c2d_pre: &FlowField,
    c2d_gt: &FlowField,
    n2d_pre: &FlowField,
    n2d_gt: &FlowField,
    t: &FlowTriplet,
) -> Result<f64> {
    Ok(epe(c2d_pre, c2d_gt)? + epe(n2d_pre, n2d_gt)? + mean_norm(&consistency_residual(t)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowNoiseModel {
    /// Per-component Gaussian sigma, pixels.
    pub gaussian_sigma: f64,
    pub outlier_fraction: f64,
    /// Length of the random vectors that replace outlier flows, pixels.
    pub outlier_magnitude: f64,
    pub dropout_fraction: f64,
    pub seed: u64,
}

impl Default for FlowNoiseModel {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_magnitude: 50.0,
            dropout_fraction: 0.0,
            seed: 0,
        }
    }
}

impl FlowNoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            gaussian_sigma: sigma,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) {
            return Err(Error::config(format!("{field}.gaussian_sigma"), "must be >= 0"));
        }
        if !(self.outlier_magnitude >= 0.0) {
            return Err(Error::config(format!("{field}.outlier_magnitude"), "must be >= 0"));
        }
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("dropout_fraction", self.dropout_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{field}.{name}"), "must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.gaussian_sigma == 0.0 && self.outlier_fraction == 0.0 && self.dropout_fraction == 0.0
    }

    /// Corrupts `field` using the random stream `(seed, stream)`.
    pub fn apply(&self, field: &FlowField, stream: u64) -> FlowField {
        if self.is_noiseless() {
            return field.clone();
        }
        let mut rng = rng::seeded(self.seed, stream);
        let normal = Normal::new(0.0, self.gaussian_sigma.max(0.0)).expect("finite sigma");
        let mut out = field.clone();
        for i in 0..out.len() {
            let Some(f) = out.get(i) else { continue };
            if self.dropout_fraction > 0.0 && rng.random::<f64>() < self.dropout_fraction {
                out.invalidate(i);
                continue;
            }
            if self.outlier_fraction > 0.0 && rng.random::<f64>() < self.outlier_fraction {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                out.set(i, [self.outlier_magnitude * a.cos(), self.outlier_magnitude * a.sin()]);
                continue;
            }
            if self.gaussian_sigma > 0.0 {
                out.set(i, [f[0] + normal.sample(&mut rng), f[1] + normal.sample(&mut rng)]);
            }
        }
        out
    }
}

/// Independent noise models for the three predicted flows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoise {
    pub c2d: FlowNoiseModel,
    pub n2d: FlowNoiseModel,
    pub c2n: FlowNoiseModel,
}

impl OracleNoise {
    pub fn uniform(model: FlowNoiseModel) -> Self {
        Self {
            c2d: model,
            n2d: model,
            c2n: model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.c2d.validate("noise.c2d")?;
        self.n2d.validate("noise.n2d")?;
        self.c2n.validate("noise.c2n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageFlowParams {
    /// Half side of the square footprint each point claims, pixels.
    pub splat_radius: usize,
    /// Relative depth band treated as one surface when resolving footprints.
    pub layer_tolerance: f64,
    /// Footprint pixels whose flow differs from a sampled point's own flow by
    /// more than this are masked as motion boundaries, pixels.
    pub motion_tolerance: f64,
}

impl Default for ImageFlowParams {
    fn default() -> Self {
        Self {
            splat_radius: 2,
            layer_tolerance: 0.05,
            motion_tolerance: 0.25,
        }
    }
}

struct Owner {
    depth: f64,
    dist2: f64,
    id: u64,
}

fn takes_over(cand: &Owner, cur: &Owner, tol: f64) -> bool {
    if cand.depth < cur.depth * (1.0 - tol) {
        return true;
    }
    if cand.depth > cur.depth * (1.0 + tol) {
        return false;
    }
    if cand.dist2 != cur.dist2 {
        return cand.dist2 < cur.dist2;
    }
    cand.id < cur.id
}

/// Per-point image motion between two camera poses; `None` when the point
/// is behind either camera.
pub fn point_image_flow(k: &CameraIntrinsics, t_cur: &PoseSE3, t_next: &PoseSE3, p: &crate::Vec3) -> Option<[f64; 2]> {
    let a = h_project(k, t_cur, p).ok()?;
    let b = h_project(k, t_next, p).ok()?;
    Some([b.u - a.u, b.v - a.v])
}

/// Dense-ish optical flow on the current-image grid induced by moving the
/// camera from `t_cur` to `t_next` over the points of `cloud`.
///
/// Each point co-visible in front of both cameras claims a square footprint
/// around its projection; within one depth layer the nearest projection
/// wins, across layers the nearer surface wins. `checks` lists
/// `(point index, sample location)` pairs whose bilinear corners must agree
/// with that point's motion; disagreeing corners are masked.
pub fn induced_image_flow(
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    t_cur: &PoseSE3,
    t_next: &PoseSE3,
    params: &ImageFlowParams,
    checks: &[(usize, [f64; 2])],
) -> FlowField {
    let (w, h) = (k.width, k.height);
    let r = params.splat_radius as isize;
    // (projection under t_cur, depth, flow) per point
    type Projected = ([f64; 2], f64, [f64; 2]);
    let proj: Vec<Option<Projected>> = crate::exec::map_slice(&cloud.points, |p| {
        let pc = t_cur.transform_point(p);
        let a = project_point(k, &pc).ok()?;
        let b = project_point(k, &t_next.transform_point(p)).ok()?;
        Some(([a.u, a.v], pc.z, [b.u - a.u, b.v - a.v]))
    });
    let flows: Vec<Option<[f64; 2]>> = proj.iter().map(|o| o.map(|x| x.2)).collect();
    const NONE: u32 = u32::MAX;
    let mut owners = vec![NONE; w * h];
    let owner_at = |i: u32, u: isize, v: isize| {
        let (a, z, _) = proj[i as usize].expect("owners are projected");
        Owner {
            depth: z,
            dist2: (u as f64 - a[0]).powi(2) + (v as f64 - a[1]).powi(2),
            id: cloud.id(i as usize),
        }
    };
    for (i, pr) in proj.iter().enumerate() {
        let Some((a, _, _)) = pr else { continue };
        let (cu, cv) = (a[0].round(), a[1].round());
        if cu < -(r as f64) || cv < -(r as f64) || cu > (w as isize + r) as f64 || cv > (h as isize + r) as f64 {
            continue;
        }
        let (cu, cv) = (cu as isize, cv as isize);
        for v in (cv - r).max(0)..=(cv + r).min(h as isize - 1) {
            for u in (cu - r).max(0)..=(cu + r).min(w as isize - 1) {
                let slot = &mut owners[v as usize * w + u as usize];
                let take = *slot == NONE || {
                    let cand = owner_at(i as u32, u, v);
                    takes_over(&cand, &owner_at(*slot, u, v), params.layer_tolerance)
                };
                if take {
                    *slot = i as u32;
                }
            }
        }
    }
    let mut field = FlowField::invalid(w, h);
    for (i, &o) in owners.iter().enumerate() {
        if o != NONE {
            if let Some(f) = flows[o as usize] {
                field.set(i, f);
            }
        }
    }
    let mut masked = Vec::new();
    for &(pi, s) in checks {
        let Some(fp) = flows[pi] else { continue };
        let (u0, v0) = (s[0].floor(), s[1].floor());
        if !(u0.is_finite() && v0.is_finite()) {
            continue;
        }
        for (du, dv) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let (u, v) = (u0 + du, v0 + dv);
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            let j = v as usize * w + u as usize;
            if let Some(f) = field.get(j) {
                if (f[0] - fp[0]).hypot(f[1] - fp[1]) > params.motion_tolerance {
                    masked.push(j);
                }
            }
        }
    }
    for j in masked {
        field.invalidate(j);
    }
    field
}

/// Locations at which the optical flow of each depth-map point will be
/// read: where the consistency warp samples it and at the point's exact
/// projection under `t_cur`.
pub fn consistency_checks(depth: &DepthMap, cloud: &PointCloud, t_init: &PoseSE3, t_cur: &PoseSE3) -> Vec<(usize, [f64; 2])> {
    let k = &depth.intrinsics;
    let w = k.width;
    let mut out = Vec::new();
    for (i, src, _) in depth.valid_pixels() {
        let p = &cloud.points[src];
        let (Ok(a), Ok(c)) = (h_project(k, t_init, p), h_project(k, t_cur, p)) else {
            continue;
        };
        let (pu, pv) = ((i % w) as f64, (i / w) as f64);
        out.push((src, [pu + c.u - a.u, pv + c.v - a.v]));
        out.push((src, [c.u, c.v]));
    }
    out
}

/// Noise streams; combined with a frame index so every frame draws fresh noise.
pub const STREAM_C2D: u64 = 1;
pub const STREAM_N2D: u64 = 2;
pub const STREAM_C2N: u64 = 3;

pub fn stream(field: u64, frame: usize) -> u64 {
    field.wrapping_mul(0x1_0000_0000).wrapping_add(frame as u64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub occlusion: OcclusionParams,
    pub image_flow: ImageFlowParams,
}

/// Ground-truth-derived flows for one frame pair, corrupted by `noise`.
pub fn oracle_flows(
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    t_init: &PoseSE3,
    t_gt_cur: &PoseSE3,
    t_gt_next: &PoseSE3,
    noise: &OracleNoise,
) -> FlowTriplet {
    let params = OracleParams::default();
    let depth = remove_occlusions(&render_depth(cloud, k, t_init), &params.occlusion);
    oracle_flows_for(&depth, cloud, t_init, t_gt_cur, t_gt_next, noise, &params.image_flow, 0)
}

/// [`oracle_flows`] over an existing depth map; `frame` selects the noise
/// stream.
#[allow(clippy::too_many_arguments)]
pub fn oracle_flows_for(
    depth: &DepthMap,
    cloud: &PointCloud,
    t_init: &PoseSE3,
    t_gt_cur: &PoseSE3,
    t_gt_next: &PoseSE3,
    noise: &OracleNoise,
    image_flow: &ImageFlowParams,
    frame: usize,
) -> FlowTriplet {
    let c2d = depth_flow_from_map(depth, cloud, t_init, t_gt_cur);
    let n2d = depth_flow_from_map(depth, cloud, t_init, t_gt_next);
    let checks = consistency_checks(depth, cloud, t_init, t_gt_cur);
    let c2n = induced_image_flow(cloud, &depth.intrinsics, t_gt_cur, t_gt_next, image_flow, &checks);
    FlowTriplet {
        c2d: noise.c2d.apply(&c2d, stream(STREAM_C2D, frame)),
        n2d: noise.n2d.apply(&n2d, stream(STREAM_N2D, frame)),
        c2n: noise.c2n.apply(&c2n, stream(STREAM_C2N, frame)),
    }
}
