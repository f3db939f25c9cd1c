//! 2D-3D correspondences from flow, robust single-pose refinement and
//! RANSAC.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector6};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{projection_jacobian, project_point, CameraIntrinsics, PixelCoord, PoseSE3, Twist, Vec3};
use crate::map::PointCloud;
use crate::render::{DepthMap, FlowField};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub p_world: Vec3,
    pub x_img: PixelCoord,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(p_world: Vec3, x_img: PixelCoord) -> Self {
        Self {
            p_world,
            x_img,
            weight: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.p_world.iter().all(|x| x.is_finite())
            && self.x_img.u.is_finite()
            && self.x_img.v.is_finite()
            && self.weight >= 0.0
    }
}

/// One correspondence per pixel valid in both the depth map and the flow:
/// the source point and the pixel displaced by the flow.
pub fn correspondences_from_flow(d: &DepthMap, f: &FlowField, cloud: &PointCloud) -> Result<Vec<Correspondence>> {
    if d.dims() != f.dims() {
        return Err(Error::DimensionMismatch {
            left: d.dims(),
            right: f.dims(),
        });
    }
    let w = d.width();
    Ok(d.valid_pixels()
        .filter_map(|(i, src, _)| {
            let fl = f.get(i)?;
            let x = PixelCoord::new((i % w) as f64 + fl[0], (i / w) as f64 + fl[1]);
            Some(Correspondence::new(cloud.points[src], x))
        })
        .collect())
}

/// Huber penalty on a residual norm: `s^2` inside `delta`, linear outside.
pub fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta {
        s * s
    } else {
        2.0 * delta * s - delta * delta
    }
}

/// IRLS weight matching [`huber`].
pub fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta {
        1.0
    } else {
        delta / s
    }
}

pub fn reprojection_residual(k: &CameraIntrinsics, t: &PoseSE3, c: &Correspondence) -> Option<[f64; 2]> {
    let px = project_point(k, &t.transform_point(&c.p_world)).ok()?;
    Some([px.u - c.x_img.u, px.v - c.x_img.v])
}

/// Weighted robust reprojection cost; `None` if any point is behind the camera.
pub fn reprojection_cost(corrs: &[Correspondence], k: &CameraIntrinsics, t: &PoseSE3, delta: f64) -> Option<f64> {
    let mut cost = 0.0;
    for c in corrs {
        let r = reprojection_residual(k, t, c)?;
        cost += c.weight * huber(r[0].hypot(r[1]), delta);
    }
    Some(cost)
}

/// Root mean square reprojection error over the masked correspondences.
pub fn reprojection_rmse(corrs: &[Correspondence], k: &CameraIntrinsics, t: &PoseSE3, mask: &[bool]) -> Option<f64> {
    let (sum, n) = corrs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .filter_map(|(c, _)| reprojection_residual(k, t, c))
        .fold((0.0, 0usize), |(s, n), r| (s + r[0] * r[0] + r[1] * r[1], n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Fails when the 3D points are identical or collinear.
pub fn check_degenerate(corrs: &[Correspondence]) -> Result<()> {
    let n = corrs.len() as f64;
    let mean = corrs.iter().fold(Vec3::zeros(), |a, c| a + c.p_world) / n;
    let mut cov = Matrix3::zeros();
    for c in corrs {
        let d = c.p_world - mean;
        cov += d * d.transpose();
    }
    let ev = SymmetricEigen::new(cov / n).eigenvalues;
    let mut ev: Vec<f64> = ev.iter().map(|x| x.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 1e-12 || ev[1] <= 1e-9 * ev[0] {
        return Err(Error::Degenerate("3D points are identical or collinear".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub huber_delta: f64,
    pub lambda0: f64,
    pub rel_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            huber_delta: 2.0,
            lambda0: 1e-4,
            rel_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    pub pose: PoseSE3,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn normal_equations(corrs: &[Correspondence], k: &CameraIntrinsics, t: &PoseSE3, delta: f64) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        let pc = t.transform_point(&c.p_world);
        let Ok(px) = project_point(k, &pc) else { continue };
        let r = nalgebra::Vector2::new(px.u - c.x_img.u, px.v - c.x_img.v);
        let w = c.weight * huber_weight(r.norm(), delta);
        let j = projection_jacobian(k, &pc);
        h += w * j.transpose() * j;
        g += w * j.transpose() * r;
    }
    (h, g)
}

pub(crate) fn solve_damped<const N: usize>(
    h: &nalgebra::SMatrix<f64, N, N>,
    g: &nalgebra::SVector<f64, N>,
    lambda: f64,
) -> Option<nalgebra::SVector<f64, N>> {
    let mut a = *h;
    for i in 0..N {
        a[(i, i)] += lambda * h[(i, i)].max(1e-12);
    }
    let rhs = -g;
    a.cholesky().map(|ch| ch.solve(&rhs))
}

/// Damped Gauss-Newton (Levenberg-Marquardt) on the left-multiplicative
/// pose update with Huber IRLS weights. Only steps that lower the cost are
/// accepted, and a step may not push any point that starts in front of the
/// camera behind it.
pub fn refine_pose(corrs: &[Correspondence], k: &CameraIntrinsics, t0: &PoseSE3) -> Result<RefineResult> {
    refine_pose_with(corrs, k, t0, &RefineConfig::default())
}

pub fn refine_pose_with(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    t0: &PoseSE3,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    if corrs.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: corrs.len(),
        });
    }
    let active: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| t0.transform_point(&c.p_world).z > 0.0)
        .copied()
        .collect();
    if active.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: active.len(),
        });
    }
    check_degenerate(&active)?;
    Ok(refine_active(&active, k, t0, cfg))
}

fn refine_active(active: &[Correspondence], k: &CameraIntrinsics, t0: &PoseSE3, cfg: &RefineConfig) -> RefineResult {
    let delta = cfg.huber_delta;
    let mut t = *t0;
    let initial_cost = reprojection_cost(active, k, &t, delta).unwrap_or(f64::INFINITY);
    let mut cost = initial_cost;
    let mut lambda = cfg.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    let (mut h, mut g) = normal_equations(active, k, &t, delta);
    while iterations < cfg.max_iters {
        iterations += 1;
        if cost == 0.0 || g.amax() == 0.0 {
            converged = true;
            break;
        }
        let Some(dx) = solve_damped(&h, &g, lambda) else {
            lambda *= 10.0;
            continue;
        };
        let cand = t.retract(&Twist::from_column_slice(dx.as_slice()));
        match reprojection_cost(active, k, &cand, delta) {
            Some(c) if c < cost => {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                t = cand;
                cost = c;
                lambda = (lambda * 0.5).max(1e-12);
                (h, g) = normal_equations(active, k, &t, delta);
                if rel < cfg.rel_tol {
                    converged = true;
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e12 {
                    converged = true;
                    break;
                }
            }
        }
    }
    RefineResult {
        pose: t,
        initial_cost,
        cost,
        iterations,
        converged,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
    /// Hypotheses drawn and scored per parallel batch.
    pub batch: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            inlier_threshold: 2.0,
            min_inliers: 20,
            confidence: 0.99,
            seed: 0,
            batch: 64,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::config("ransac.max_iters", "must be >= 1"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::config("ransac.inlier_threshold", "must be > 0"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("ransac.confidence", "must be in (0, 1)"));
        }
        if self.batch < 1 {
            return Err(Error::config("ransac.batch", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: PoseSE3,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// RMS reprojection error over the inliers, pixels.
    pub inlier_rmse: f64,
    pub hypotheses: usize,
    pub success: bool,
}

impl PnpResult {
    pub fn inlier_indices(&self) -> Vec<usize> {
        self.inliers.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

fn inlier_mask(corrs: &[Correspondence], k: &CameraIntrinsics, t: &PoseSE3, thr: f64) -> Vec<bool> {
    corrs
        .iter()
        .map(|c| reprojection_residual(k, t, c).is_some_and(|r| r[0].hypot(r[1]) < thr))
        .collect()
}

fn required_hypotheses(inlier_ratio: f64, confidence: f64) -> f64 {
    let w4 = inlier_ratio.powi(4);
    if w4 >= 1.0 {
        return 1.0;
    }
    if w4 <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - w4).ln()).ceil()
}

const MINIMAL_REFINE: RefineConfig = RefineConfig {
    max_iters: 15,
    huber_delta: f64::INFINITY,
    lambda0: 1e-4,
    rel_tol: 1e-10,
};

/// RANSAC over 4-point hypotheses, each obtained by refining `t_init` on the
/// sample. The best hypothesis (most inliers, earliest on ties) is refined
/// on its inliers. If fewer than `min_inliers` support it, `t_init` is
/// returned with `success = false`.
pub fn solve_pnp_ransac(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    t_init: &PoseSE3,
    cfg: &RansacConfig,
) -> Result<PnpResult> {
    if corrs.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: corrs.len(),
        });
    }
    check_degenerate(corrs)?;
    let n = corrs.len();
    let thr = cfg.inlier_threshold;
    let mut sampler = rng::seeded(cfg.seed, 0x72616e73);
    let mut best: Option<(usize, PoseSE3)> = None;
    let mut drawn = 0usize;
    let mut needed = cfg.max_iters as f64;
    while (drawn as f64) < needed.min(cfg.max_iters as f64) {
        let batch = cfg.batch.min(cfg.max_iters - drawn);
        let samples: Vec<Vec<usize>> = (0..batch).map(|_| index::sample(&mut sampler, n, 4).into_vec()).collect();
        drawn += batch;
        let scored = exec::map_slice(&samples, |idx| {
            let sample: Vec<Correspondence> = idx.iter().map(|&i| corrs[i]).collect();
            if sample.iter().any(|c| t_init.transform_point(&c.p_world).z <= 0.0) || check_degenerate(&sample).is_err() {
                return None;
            }
            let pose = refine_active(&sample, k, t_init, &MINIMAL_REFINE).pose;
            let count = inlier_mask(corrs, k, &pose, thr).iter().filter(|&&b| b).count();
            Some((count, pose))
        });
        for (count, pose) in scored.into_iter().flatten() {
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, pose));
            }
        }
        if let Some((c, _)) = best {
            needed = required_hypotheses(c as f64 / n as f64, cfg.confidence);
        }
    }
    let fail = |hypotheses| PnpResult {
        pose: *t_init,
        inliers: vec![false; n],
        inlier_count: 0,
        inlier_rmse: f64::NAN,
        hypotheses,
        success: false,
    };
    let Some((count, pose)) = best else {
        return Ok(fail(drawn));
    };
    if count < cfg.min_inliers.max(4) {
        return Ok(fail(drawn));
    }
    let mut pose = pose;
    let mut mask = inlier_mask(corrs, k, &pose, thr);
    for _ in 0..2 {
        let inl: Vec<Correspondence> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
        if inl.len() < 4 || check_degenerate(&inl).is_err() {
            break;
        }
        let refined = refine_active(&inl, k, &pose, &RefineConfig::default()).pose;
        let new_mask = inlier_mask(corrs, k, &refined, thr);
        let new_count = new_mask.iter().filter(|&&b| b).count();
        if new_count < inl.len() * 9 / 10 {
            break;
        }
        pose = refined;
        let stable = new_mask == mask;
        mask = new_mask;
        if stable {
            break;
        }
    }
    let inlier_count = mask.iter().filter(|&&b| b).count();
    if inlier_count < cfg.min_inliers.max(4) {
        return Ok(fail(drawn));
    }
    let inlier_rmse = reprojection_rmse(corrs, k, &pose, &mask).unwrap_or(f64::NAN);
    Ok(PnpResult {
        pose,
        inliers: mask,
        inlier_count,
        inlier_rmse,
        hypotheses: drawn,
        success: true,
    })
}
