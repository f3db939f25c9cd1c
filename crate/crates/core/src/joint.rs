//! Two-frame joint refinement under consistency and reprojection energies.
//!
//! The state is the pair `(T_cur, T_next)` updated by a stacked 12-vector
//! of left-multiplicative twists. The energy is
//!
//! ```text
//! E = w_consist * sum rho(|r_c|) + w_reproj * (sum rho(|r_cur|) + sum rho(|r_next|))
//! ```
//!
//! with `rho` the Huber penalty on residual norms.

use std::io::Write;

use nalgebra::{Matrix2x6, SMatrix, SVector, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::flow::sample_bilinear;
use crate::geometry::{h_project, project_point, projection_jacobian, CameraIntrinsics, PoseSE3, Twist, Vec3};
use crate::pnp::{huber, huber_weight, reprojection_residual, solve_damped, Correspondence};
use crate::render::FlowField;

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Vector12 = SVector<f64, 12>;

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub w_consist: f64,
    pub w_reproj: f64,
    pub huber_delta: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub lambda0: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            w_consist: 1.0,
            w_reproj: 1.0,
            huber_delta: 2.0,
            max_iters: 50,
            rel_tol: 1e-6,
            lambda0: 1e-4,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_consist >= 0.0) || !(self.w_reproj >= 0.0) {
            return Err(Error::config("energy.w_consist", "weights must be >= 0"));
        }
        if self.w_consist == 0.0 && self.w_reproj == 0.0 {
            return Err(Error::config("energy.w_reproj", "weights cannot both be zero"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("energy.huber_delta", "must be > 0"));
        }
        if self.max_iters < 1 {
            return Err(Error::config("energy.max_iters", "must be >= 1"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::config("energy.rel_tol", "must be >= 0"));
        }
        if !(self.lambda0 > 0.0) {
            return Err(Error::config("energy.lambda0", "must be > 0"));
        }
        Ok(())
    }
}

/// A map point with the current-to-next optical flow read at its
/// projection in the current frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyPoint {
    pub p_world: Vec3,
    pub flow: [f64; 2],
}

/// Reads `f_c2n` bilinearly at each point's projection under `t_cur`.
/// Points that do not project or hit invalid flow are skipped.
pub fn sample_consistency_points(
    points: &[Vec3],
    k: &CameraIntrinsics,
    t_cur: &PoseSE3,
    f_c2n: &FlowField,
) -> Vec<ConsistencyPoint> {
    points
        .iter()
        .filter_map(|p| {
            let px = h_project(k, t_cur, p).ok()?;
            let flow = sample_bilinear(f_c2n, px.u, px.v)?;
            Some(ConsistencyPoint { p_world: *p, flow })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    pub values: Vec<[f64; 2]>,
    /// Inputs skipped because a point fell behind a camera.
    pub dropped: usize,
}

impl Residuals {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, r| m.max(r[0].abs()).max(r[1].abs()))
    }
}

pub fn consist_residual(k: &CameraIntrinsics, t_cur: &PoseSE3, t_next: &PoseSE3, c: &ConsistencyPoint) -> Option<[f64; 2]> {
    let a = h_project(k, t_cur, &c.p_world).ok()?;
    let b = h_project(k, t_next, &c.p_world).ok()?;
    Some([b.u - a.u - c.flow[0], b.v - a.v - c.flow[1]])
}

/// Consistency residuals: next-frame projection minus current-frame
/// projection minus the sampled optical flow.
pub fn e_consist(t_cur: &PoseSE3, t_next: &PoseSE3, pts: &[ConsistencyPoint], k: &CameraIntrinsics) -> Result<Residuals> {
    let values: Vec<[f64; 2]> = pts.iter().filter_map(|c| consist_residual(k, t_cur, t_next, c)).collect();
    if values.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    Ok(Residuals {
        dropped: pts.len() - values.len(),
        values,
    })
}

pub fn e_reproj(t: &PoseSE3, corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Residuals> {
    let values: Vec<[f64; 2]> = corrs.iter().filter_map(|c| reprojection_residual(k, t, c)).collect();
    if values.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    Ok(Residuals {
        dropped: corrs.len() - values.len(),
        values,
    })
}

/// Jacobian of one consistency residual w.r.t. `[xi_cur, xi_next]`.
pub fn consist_jacobian(k: &CameraIntrinsics, t_cur: &PoseSE3, t_next: &PoseSE3, p: &Vec3) -> SMatrix<f64, 2, 12> {
    let jc = projection_jacobian(k, &t_cur.transform_point(p));
    let jn = projection_jacobian(k, &t_next.transform_point(p));
    let mut j = SMatrix::<f64, 2, 12>::zeros();
    j.fixed_view_mut::<2, 6>(0, 0).copy_from(&(-jc));
    j.fixed_view_mut::<2, 6>(0, 6).copy_from(&jn);
    j
}

/// Jacobian of one reprojection residual w.r.t. its own pose.
pub fn reproj_jacobian(k: &CameraIntrinsics, t: &PoseSE3, p: &Vec3) -> Matrix2x6<f64> {
    projection_jacobian(k, &t.transform_point(p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub energy: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointResult {
    pub t_cur: PoseSE3,
    pub t_next: PoseSE3,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The normal equations were rank deficient at the start; inputs returned.
    pub degenerate: bool,
    /// Largest Jacobi-scaled gradient component at the final state.
    pub gradient_inf: f64,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "iteration,energy,lambda,accepted")?;
    for r in trace {
        writeln!(w, "{},{:.17e},{:.6e},{}", r.iteration, r.energy, r.lambda, r.accepted as u8)?;
    }
    Ok(())
}

struct Problem<'a> {
    k: &'a CameraIntrinsics,
    cur: &'a [Correspondence],
    next: &'a [Correspondence],
    consist: &'a [ConsistencyPoint],
    cfg: &'a EnergyConfig,
}

#[derive(Clone, Copy)]
struct Normal {
    h: Matrix12,
    g: Vector12,
}

impl std::ops::Add for Normal {
    type Output = Normal;
    fn add(self, o: Normal) -> Normal {
        Normal {
            h: self.h + o.h,
            g: self.g + o.g,
        }
    }
}

impl Normal {
    fn zero() -> Self {
        Normal {
            h: Matrix12::zeros(),
            g: Vector12::zeros(),
        }
    }
}

impl Problem<'_> {
    fn energy(&self, t_cur: &PoseSE3, t_next: &PoseSE3) -> Option<f64> {
        let d = self.cfg.huber_delta;
        let mut e = 0.0;
        if self.cfg.w_consist > 0.0 {
            let mut s = 0.0;
            for c in self.consist {
                let r = consist_residual(self.k, t_cur, t_next, c)?;
                s += huber(r[0].hypot(r[1]), d);
            }
            e += self.cfg.w_consist * s;
        }
        if self.cfg.w_reproj > 0.0 {
            let mut s = 0.0;
            for (t, cs) in [(t_cur, self.cur), (t_next, self.next)] {
                for c in cs {
                    let r = reprojection_residual(self.k, t, c)?;
                    s += c.weight * huber(r[0].hypot(r[1]), d);
                }
            }
            e += self.cfg.w_reproj * s;
        }
        Some(e)
    }

    fn normal(&self, t_cur: &PoseSE3, t_next: &PoseSE3) -> Normal {
        let d = self.cfg.huber_delta;
        let mut total = Normal::zero();
        if self.cfg.w_consist > 0.0 {
            let w = self.cfg.w_consist;
            let parts = exec::map_chunks(self.consist, CHUNK, |chunk| {
                let mut n = Normal::zero();
                for c in chunk {
                    let Some(r) = consist_residual(self.k, t_cur, t_next, c) else { continue };
                    let r = Vector2::new(r[0], r[1]);
                    let wt = w * huber_weight(r.norm(), d);
                    let j = consist_jacobian(self.k, t_cur, t_next, &c.p_world);
                    n.h += wt * j.transpose() * j;
                    n.g += wt * j.transpose() * r;
                }
                n
            });
            total = parts.into_iter().fold(total, |a, b| a + b);
        }
        if self.cfg.w_reproj > 0.0 {
            let w = self.cfg.w_reproj;
            for (block, t, cs) in [(0, t_cur, self.cur), (6, t_next, self.next)] {
                let parts = exec::map_chunks(cs, CHUNK, |chunk| {
                    let mut h = SMatrix::<f64, 6, 6>::zeros();
                    let mut g = SVector::<f64, 6>::zeros();
                    for c in chunk {
                        let pc = t.transform_point(&c.p_world);
                        let Ok(px) = project_point(self.k, &pc) else { continue };
                        let r = Vector2::new(px.u - c.x_img.u, px.v - c.x_img.v);
                        let wt = w * c.weight * huber_weight(r.norm(), d);
                        let j = projection_jacobian(self.k, &pc);
                        h += wt * j.transpose() * j;
                        g += wt * j.transpose() * r;
                    }
                    (h, g)
                });
                for (h, g) in parts {
                    let mut hv = total.h.fixed_view_mut::<6, 6>(block, block);
                    hv += h;
                    let mut gv = total.g.fixed_view_mut::<6, 1>(block, 0);
                    gv += g;
                }
            }
        }
        total
    }

    fn all_in_front(&self, t_cur: &PoseSE3, t_next: &PoseSE3) -> bool {
        let front = |t: &PoseSE3, p: &Vec3| t.transform_point(p).z > 0.0;
        self.consist
            .iter()
            .all(|c| front(t_cur, &c.p_world) && front(t_next, &c.p_world))
            && self.cur.iter().all(|c| front(t_cur, &c.p_world))
            && self.next.iter().all(|c| front(t_next, &c.p_world))
    }
}

fn scaled_gradient_inf(n: &Normal) -> f64 {
    (0..12)
        .map(|i| {
            let s = n.h[(i, i)].sqrt();
            if s > 0.0 {
                n.g[i].abs() / s
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the Jacobi-scaled normal matrix.
fn scaled_min_eigenvalue(h: &Matrix12) -> f64 {
    let mut s = *h;
    for i in 0..12 {
        let di = h[(i, i)];
        if !(di > 0.0) {
            return 0.0;
        }
        for j in 0..12 {
            s[(i, j)] /= di.sqrt() * h[(j, j)].sqrt();
        }
    }
    SymmetricEigen::new(s).eigenvalues.min()
}

pub const RANK_TOL: f64 = 1e-10;

/// Levenberg-Marquardt over both poses. Inputs that start behind a camera
/// are excluded, and steps that would push an included point behind a
/// camera are rejected.
#[allow(clippy::too_many_arguments)]
pub fn optimize_pair(
    t_cur0: &PoseSE3,
    t_next0: &PoseSE3,
    corrs_cur: &[Correspondence],
    corrs_next: &[Correspondence],
    consist_pts: &[ConsistencyPoint],
    k: &CameraIntrinsics,
    cfg: &EnergyConfig,
) -> Result<JointResult> {
    cfg.validate()?;
    let cur: Vec<Correspondence> = corrs_cur
        .iter()
        .filter(|c| t_cur0.transform_point(&c.p_world).z > 0.0)
        .copied()
        .collect();
    let next: Vec<Correspondence> = corrs_next
        .iter()
        .filter(|c| t_next0.transform_point(&c.p_world).z > 0.0)
        .copied()
        .collect();
    let consist: Vec<ConsistencyPoint> = consist_pts
        .iter()
        .filter(|c| t_cur0.transform_point(&c.p_world).z > 0.0 && t_next0.transform_point(&c.p_world).z > 0.0)
        .copied()
        .collect();
    let used = (if cfg.w_consist > 0.0 { consist.len() } else { 0 })
        + (if cfg.w_reproj > 0.0 { cur.len() + next.len() } else { 0 });
    if used == 0 {
        return Err(Error::EmptyResiduals);
    }
    let problem = Problem {
        k,
        cur: &cur,
        next: &next,
        consist: &consist,
        cfg,
    };

    let mut t_cur = *t_cur0;
    let mut t_next = *t_next0;
    let initial_energy = problem.energy(&t_cur, &t_next).ok_or(Error::EmptyResiduals)?;
    let mut n = problem.normal(&t_cur, &t_next);
    let mut trace = vec![TraceRow {
        iteration: 0,
        energy: initial_energy,
        lambda: cfg.lambda0,
        accepted: true,
    }];
    if scaled_min_eigenvalue(&n.h) < RANK_TOL {
        return Ok(JointResult {
            t_cur,
            t_next,
            initial_energy,
            final_energy: initial_energy,
            iterations: 0,
            converged: false,
            degenerate: true,
            gradient_inf: scaled_gradient_inf(&n),
            trace,
        });
    }

    let mut energy = initial_energy;
    let mut lambda = cfg.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if energy == 0.0 || n.g.amax() == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let step = solve_damped(&n.h, &n.g, lambda);
        let cand = step.map(|dx| {
            let xc = Twist::from_column_slice(&dx.as_slice()[..6]);
            let xn = Twist::from_column_slice(&dx.as_slice()[6..]);
            (t_cur.retract(&xc), t_next.retract(&xn))
        });
        let e_new = cand
            .as_ref()
            .filter(|(c, nx)| problem.all_in_front(c, nx))
            .and_then(|(c, nx)| problem.energy(c, nx));
        match (cand, e_new) {
            (Some((c, nx)), Some(e)) if e < energy => {
                let rel = (energy - e) / energy;
                t_cur = c;
                t_next = nx;
                energy = e;
                trace.push(TraceRow {
                    iteration: iterations,
                    energy: e,
                    lambda,
                    accepted: true,
                });
                lambda = (lambda * 0.5).max(1e-15);
                n = problem.normal(&t_cur, &t_next);
                if rel < cfg.rel_tol {
                    converged = true;
                    break;
                }
            }
            (_, e) => {
                trace.push(TraceRow {
                    iteration: iterations,
                    energy: e.unwrap_or(f64::INFINITY),
                    lambda,
                    accepted: false,
                });
                lambda *= 10.0;
                if lambda > 1e12 {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(JointResult {
        t_cur,
        t_next,
        initial_energy,
        final_energy: energy,
        iterations,
        converged,
        degenerate: false,
        gradient_inf: scaled_gradient_inf(&n),
        trace,
    })
}

/// True when the accepted energies in `trace` never increase.
pub fn trace_is_monotone(trace: &[TraceRow]) -> bool {
    let acc: Vec<f64> = trace.iter().filter(|r| r.accepted).map(|r| r.energy).collect();
    acc.windows(2).all(|w| w[1] <= w[0])
}

/// Deterministic stride subsample to at most `cap` items.
pub fn stride_cap<T: Copy>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap || cap == 0 {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap]).collect()
}
