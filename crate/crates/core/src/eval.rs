//! Trajectory metrics: ATE, RPE, per-frame pose errors and failure rate.
//!
//! Poses are world-to-camera. Trajectory errors are measured on camera
//! centers and on camera-to-world relative motions.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_error, rotation_angle, PoseError, PoseSE3, Vec3};

/// Failure threshold on translation error, meters.
pub const FAIL_THRESHOLD_M: f64 = 4.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<PoseSE3>,
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(poses: Vec<PoseSE3>) -> Self {
        Self { poses, timestamps: None }
    }

    pub fn with_timestamps(poses: Vec<PoseSE3>, timestamps: Vec<f64>) -> Result<Self> {
        if poses.len() != timestamps.len() {
            return Err(Error::LengthMismatch {
                left: poses.len(),
                right: timestamps.len(),
            });
        }
        if timestamps.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::config("timestamps", "must be non-decreasing"));
        }
        Ok(Self {
            poses,
            timestamps: Some(timestamps),
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn push(&mut self, t: PoseSE3) {
        self.poses.push(t);
        if let Some(ts) = &mut self.timestamps {
            ts.push(ts.last().copied().unwrap_or(0.0));
        }
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.poses.iter().map(|t| t.center()).collect()
    }

    pub fn prefix(&self, n: usize) -> Trajectory {
        Trajectory {
            poses: self.poses[..n.min(self.len())].to_vec(),
            timestamps: self.timestamps.as_ref().map(|t| t[..n.min(t.len())].to_vec()),
        }
    }
}

fn check_lengths(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    Ok(())
}

/// Rigid transform `(R, t)` minimizing `sum |R src_i + t - dst_i|^2`.
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let n = src.len().max(1) as f64;
    let ms = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let md = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    (r, md - r * ms)
}

/// Root mean square distance between corresponding camera centers,
/// optionally after a best-fit rigid alignment of `est` onto `gt`.
pub fn ate(est: &Trajectory, gt: &Trajectory, align: bool) -> Result<f64> {
    check_lengths(est, gt)?;
    if est.is_empty() {
        return Err(Error::TooShort { len: 0, needed: 0 });
    }
    let mut ce = est.centers();
    let cg = gt.centers();
    if align {
        let (r, t) = align_rigid(&ce, &cg);
        for c in &mut ce {
            *c = r * *c + t;
        }
    }
    let sq: f64 = ce.iter().zip(&cg).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sq / ce.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        if xs.is_empty() {
            return Stats::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stats { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RpeStats {
    /// Meters.
    pub transl: Stats,
    /// Degrees.
    pub rot: Stats,
}

/// Camera-to-world motion from frame `i` to `j`.
fn relative_motion(t: &Trajectory, i: usize, j: usize) -> PoseSE3 {
    t.poses[i] * t.poses[j].inverse()
}

/// Per-pair relative pose errors `(translation m, rotation deg)`.
pub fn rpe_errors(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<Vec<(f64, f64)>> {
    check_lengths(est, gt)?;
    if delta == 0 || est.len() <= delta {
        return Err(Error::TooShort {
            len: est.len(),
            needed: delta,
        });
    }
    Ok((0..est.len() - delta)
        .map(|i| {
            let e = relative_motion(gt, i, i + delta).inverse() * relative_motion(est, i, i + delta);
            (e.translation.norm(), rotation_angle(&e.rotation).to_degrees())
        })
        .collect())
}

pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<RpeStats> {
    let errs = rpe_errors(est, gt, delta)?;
    let (t, r): (Vec<f64>, Vec<f64>) = errs.into_iter().unzip();
    Ok(RpeStats {
        transl: Stats::of(&t),
        rot: Stats::of(&r),
    })
}

/// Median averaging the two middle values for even counts.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseErrorStats {
    pub mean_rot_deg: f64,
    pub median_rot_deg: f64,
    pub mean_transl_m: f64,
    pub median_transl_m: f64,
    /// Fraction of frames with translation error strictly above the threshold.
    pub failure_rate: f64,
    pub per_frame: Vec<PoseError>,
}

pub fn pose_error_stats(est: &Trajectory, gt: &Trajectory, fail_threshold: f64) -> Result<PoseErrorStats> {
    check_lengths(est, gt)?;
    let per_frame: Vec<PoseError> = est.poses.iter().zip(&gt.poses).map(|(a, b)| pose_error(a, b)).collect();
    if per_frame.is_empty() {
        return Ok(PoseErrorStats::default());
    }
    let rot: Vec<f64> = per_frame.iter().map(|e| e.rot_deg).collect();
    let tr: Vec<f64> = per_frame.iter().map(|e| e.transl_m).collect();
    let n = per_frame.len() as f64;
    Ok(PoseErrorStats {
        mean_rot_deg: rot.iter().sum::<f64>() / n,
        median_rot_deg: median(&rot),
        mean_transl_m: tr.iter().sum::<f64>() / n,
        median_transl_m: median(&tr),
        failure_rate: tr.iter().filter(|&&t| t > fail_threshold).count() as f64 / n,
        per_frame,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub align: bool,
    pub rpe_delta: usize,
    pub fail_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            align: false,
            rpe_delta: 1,
            fail_threshold: FAIL_THRESHOLD_M,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub gt_frames: usize,
    pub ate_rmse: f64,
    pub rpe_transl_mean: f64,
    pub rpe_transl_std: f64,
    pub rpe_rot_mean: f64,
    pub rpe_rot_std: f64,
    pub mean_rot_deg: f64,
    pub median_rot_deg: f64,
    pub mean_transl_m: f64,
    pub median_transl_m: f64,
    pub std_transl_m: f64,
    pub std_rot_deg: f64,
    pub failure_rate: f64,
    pub complete: bool,
}

/// Compares `est` against the matching prefix of `gt`. A shorter estimate
/// is an interrupted run and is reported as not complete.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, opts: &EvalOptions) -> Result<MetricsReport> {
    if est.len() > gt.len() {
        return Err(Error::LengthMismatch {
            left: est.len(),
            right: gt.len(),
        });
    }
    let gt_p = gt.prefix(est.len());
    let stats = pose_error_stats(est, &gt_p, opts.fail_threshold)?;
    let ate_rmse = if est.is_empty() { 0.0 } else { ate(est, &gt_p, opts.align)? };
    let rpe = if est.len() > opts.rpe_delta {
        rpe(est, &gt_p, opts.rpe_delta)?
    } else {
        RpeStats::default()
    };
    let tr: Vec<f64> = stats.per_frame.iter().map(|e| e.transl_m).collect();
    let rot: Vec<f64> = stats.per_frame.iter().map(|e| e.rot_deg).collect();
    Ok(MetricsReport {
        frames: est.len(),
        gt_frames: gt.len(),
        ate_rmse,
        rpe_transl_mean: rpe.transl.mean,
        rpe_transl_std: rpe.transl.std,
        rpe_rot_mean: rpe.rot.mean,
        rpe_rot_std: rpe.rot.std,
        mean_rot_deg: stats.mean_rot_deg,
        median_rot_deg: stats.median_rot_deg,
        mean_transl_m: stats.mean_transl_m,
        median_transl_m: stats.median_transl_m,
        std_transl_m: Stats::of(&tr).std,
        std_rot_deg: Stats::of(&rot).std,
        failure_rate: stats.failure_rate,
        complete: est.len() == gt.len(),
    })
}

pub const REPORT_COLUMNS: &str = "frames,gt_frames,ate_rmse_m,rpe_transl_mean_m,rpe_transl_std_m,rpe_rot_mean_deg,rpe_rot_std_deg,\
mean_transl_cm,std_transl_cm,median_transl_cm,mean_rot_deg,std_rot_deg,median_rot_deg,failure_rate,complete";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.6},{}",
            self.frames,
            self.gt_frames,
            self.ate_rmse,
            self.rpe_transl_mean,
            self.rpe_transl_std,
            self.rpe_rot_mean,
            self.rpe_rot_std,
            self.mean_transl_m * 100.0,
            self.std_transl_m * 100.0,
            self.median_transl_m * 100.0,
            self.mean_rot_deg,
            self.std_rot_deg,
            self.median_rot_deg,
            self.failure_rate,
            self.complete as u8
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{REPORT_COLUMNS}")?;
        writeln!(w, "{}", self.csv_row())
    }

    /// Human-readable table.
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>9}",
            "Mean[cm]", "Std[cm]", "Median[cm]", "Mean[deg]", "Std[deg]", "Med[deg]", "Fail[%]", "Complete"
        );
        let _ = writeln!(
            s,
            "{:>10.2} {:>10.2} {:>10.2} {:>10.3} {:>10.3} {:>10.3} {:>8.2} {:>9}",
            self.mean_transl_m * 100.0,
            self.std_transl_m * 100.0,
            self.median_transl_m * 100.0,
            self.mean_rot_deg,
            self.std_rot_deg,
            self.median_rot_deg,
            self.failure_rate * 100.0,
            if self.complete { "yes" } else { "no" }
        );
        let _ = writeln!(
            s,
            "ATE {:.4} m | RPE {:.4} +/- {:.4} m, {:.4} +/- {:.4} deg | {}/{} frames",
            self.ate_rmse,
            self.rpe_transl_mean,
            self.rpe_transl_std,
            self.rpe_rot_mean,
            self.rpe_rot_std,
            self.frames,
            self.gt_frames
        );
        s
    }
}

/// Per-frame CSV for plotting: estimated camera center and pose errors.
pub fn write_plot_csv<W: Write>(mut w: W, est: &Trajectory, gt: &Trajectory) -> Result<()> {
    writeln!(w, "frame,x,y,z,rot_err_deg,transl_err_m")?;
    for (i, (e, g)) in est.poses.iter().zip(&gt.poses).enumerate() {
        let c = e.center();
        let pe = pose_error(e, g);
        writeln!(w, "{i},{:.6},{:.6},{:.6},{:.6},{:.6}", c.x, c.y, c.z, pe.rot_deg, pe.transl_m)?;
    }
    Ok(())
}
