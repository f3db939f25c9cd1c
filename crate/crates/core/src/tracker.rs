//! Online tracking loop.
//!
//! Every step crops the map at the carried pose prior, renders one depth
//! map, asks a [`FlowProvider`] for flows and solves for the pose. In
//! `multi_view` mode the pair `(k, k+1)` is refined jointly and the next
//! frame's estimate becomes the prior of the following step, so pairs
//! overlap and advance one frame at a time.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Trajectory, FAIL_THRESHOLD_M};
use crate::flow::{oracle_flows_for, FlowTriplet, ImageFlowParams, OracleNoise};
use crate::geometry::{pose_error, CameraIntrinsics, PoseSE3};
use crate::joint::{optimize_pair, sample_consistency_points, stride_cap, EnergyConfig, TraceRow};
use crate::map::{crop_local, CropExtents, GlobalMap, PointCloud};
use crate::pnp::{correspondences_from_flow, solve_pnp_ransac, Correspondence, PnpResult, RansacConfig};
use crate::render::{remove_occlusions, render_depth, DepthMap, FlowField, OcclusionParams};
use crate::rng;
use crate::synth::Scenario;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FrameByFrame,
    LooseCoupled,
    #[default]
    MultiView,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::FrameByFrame, Mode::LooseCoupled, Mode::MultiView];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::FrameByFrame => "frame_by_frame",
            Mode::LooseCoupled => "loose_coupled",
            Mode::MultiView => "multi_view",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode {s:?}; expected frame_by_frame, loose_coupled or multi_view")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub mode: Mode,
    pub camera: CameraIntrinsics,
    pub crop: CropExtents,
    pub noise: OracleNoise,
    pub ransac: RansacConfig,
    pub energy: EnergyConfig,
    pub occlusion: OcclusionParams,
    pub image_flow: ImageFlowParams,
    /// Inlier RMSE below which the loose-coupled mode keeps the PnP candidate, pixels.
    pub loose_reproj_threshold: f64,
    /// Offline failure threshold on translation error, meters.
    pub failure_threshold: f64,
    /// Maximum number of consistency points per pair.
    pub consist_cap: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::MultiView,
            camera: CameraIntrinsics::default(),
            crop: CropExtents::default(),
            noise: OracleNoise::default(),
            ransac: RansacConfig::default(),
            energy: EnergyConfig::default(),
            occlusion: OcclusionParams::default(),
            image_flow: ImageFlowParams::default(),
            loose_reproj_threshold: 1.5,
            failure_threshold: FAIL_THRESHOLD_M,
            consist_cap: 2000,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.crop.validate()?;
        self.noise.validate()?;
        self.ransac.validate()?;
        self.energy.validate()?;
        self.occlusion.validate()?;
        if !(self.loose_reproj_threshold >= 0.0) {
            return Err(Error::config("tracker.loose_reproj_threshold", "must be >= 0"));
        }
        if !(self.failure_threshold > 0.0) {
            return Err(Error::config("tracker.failure_threshold", "must be > 0"));
        }
        if self.consist_cap < 1 {
            return Err(Error::config("tracker.consist_cap", "must be >= 1"));
        }
        Ok(())
    }
}

/// Which flows an outage removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageTarget {
    /// Image-to-depth flow of the frame while it is the current frame of a step.
    #[default]
    CurrentDepth,
    /// Every flow that involves the frame.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub start: usize,
    pub len: usize,
    #[serde(default)]
    pub target: OutageTarget,
}

impl Outage {
    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.start && frame - self.start < self.len
    }
}

/// Inputs of one flow request. The depth map and cloud are shared by both
/// frames of a pair.
pub struct FlowRequest<'a> {
    pub depth: &'a DepthMap,
    pub cloud: &'a PointCloud,
    pub t_init: &'a PoseSE3,
    pub cur: usize,
    pub next: Option<usize>,
}

/// Stand-in for the flow networks. Missing flows are returned all-invalid.
pub trait FlowProvider: Sync {
    fn flows(&self, req: &FlowRequest<'_>) -> FlowTriplet;
}

/// Ground-truth-driven flows with configurable noise and scripted outages.
pub struct OracleProvider<'a> {
    pub gt: &'a Trajectory,
    pub noise: OracleNoise,
    pub image_flow: ImageFlowParams,
    pub outages: Vec<Outage>,
}

impl<'a> OracleProvider<'a> {
    pub fn new(gt: &'a Trajectory, cfg: &TrackerConfig, outages: &[Outage]) -> Self {
        Self {
            gt,
            noise: cfg.noise,
            image_flow: cfg.image_flow,
            outages: outages.to_vec(),
        }
    }

    fn dropped(&self, frame: usize, as_current: bool) -> bool {
        self.outages.iter().any(|o| {
            o.covers(frame)
                && match o.target {
                    OutageTarget::All => true,
                    OutageTarget::CurrentDepth => as_current,
                }
        })
    }

    fn all_dropped(&self, frame: usize) -> bool {
        self.outages.iter().any(|o| o.covers(frame) && o.target == OutageTarget::All)
    }
}

impl FlowProvider for OracleProvider<'_> {
    fn flows(&self, req: &FlowRequest<'_>) -> FlowTriplet {
        let (w, h) = req.depth.dims();
        let gt_cur = &self.gt.poses[req.cur];
        let next = req.next.unwrap_or(req.cur);
        let gt_next = &self.gt.poses[next];
        let mut t = if req.next.is_some() {
            oracle_flows_for(req.depth, req.cloud, req.t_init, gt_cur, gt_next, &self.noise, &self.image_flow, req.cur)
        } else {
            let c2d = crate::render::depth_flow_from_map(req.depth, req.cloud, req.t_init, gt_cur);
            FlowTriplet {
                c2d: self.noise.c2d.apply(&c2d, crate::flow::stream(crate::flow::STREAM_C2D, req.cur)),
                n2d: FlowField::invalid(w, h),
                c2n: FlowField::invalid(w, h),
            }
        };
        if self.dropped(req.cur, true) {
            t.c2d = FlowField::invalid(w, h);
        }
        if req.next.is_some() && self.dropped(next, false) {
            t.n2d = FlowField::invalid(w, h);
        }
        if self.all_dropped(req.cur) || (req.next.is_some() && self.all_dropped(next)) {
            t.c2n = FlowField::invalid(w, h);
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    /// Pose prior for the next frame to process.
    pub carried: PoseSE3,
    pub frame_index: usize,
    pub history: Trajectory,
    pub failed: bool,
}

pub fn init(t0: PoseSE3) -> TrackerState {
    TrackerState {
        carried: t0,
        frame_index: 0,
        history: Trajectory::default(),
        failed: false,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub crop: f64,
    pub render: f64,
    pub flow: f64,
    pub pnp: f64,
    pub joint: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Candidate {
    #[default]
    Pnp,
    Vo,
}

/// Per-frame diagnostics; pose errors are filled in by [`run`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDiag {
    pub frame: usize,
    pub rot_err_deg: f64,
    pub transl_err_m: f64,
    pub inliers_cur: usize,
    pub inliers_next: usize,
    pub e_initial: f64,
    pub e_final: f64,
    pub candidate: Candidate,
    pub ms: StageTimes,
    pub trace: Vec<TraceRow>,
}

pub const DIAG_COLUMNS: &str =
    "frame,rot_err_deg,transl_err_cm,inliers_cur,inliers_next,e_initial,e_final,candidate,ms_crop,ms_render,ms_flow,ms_pnp,ms_joint";

impl FrameDiag {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{},{},{:.6},{:.6},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.frame,
            self.rot_err_deg,
            self.transl_err_m * 100.0,
            self.inliers_cur,
            self.inliers_next,
            self.e_initial,
            self.e_final,
            match self.candidate {
                Candidate::Pnp => "pnp",
                Candidate::Vo => "vo",
            },
            self.ms.crop,
            self.ms.render,
            self.ms.flow,
            self.ms.pnp,
            self.ms.joint
        )
    }
}

/// Everything a step needs besides the state.
pub struct StepContext<'a> {
    pub cfg: &'a TrackerConfig,
    pub map: &'a GlobalMap,
    pub provider: &'a dyn FlowProvider,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct Frontend {
    cloud: PointCloud,
    depth: DepthMap,
    flows: FlowTriplet,
}

fn frontend(ctx: &StepContext<'_>, t_init: &PoseSE3, cur: usize, next: Option<usize>, times: &mut StageTimes) -> Frontend {
    let k = &ctx.cfg.camera;
    let t = Instant::now();
    let cloud = crop_local(ctx.map, t_init, &ctx.cfg.crop);
    times.crop = ms(t);
    let t = Instant::now();
    let depth = remove_occlusions(&render_depth(&cloud, k, t_init), &ctx.cfg.occlusion);
    times.render = ms(t);
    let t = Instant::now();
    let flows = ctx.provider.flows(&FlowRequest {
        depth: &depth,
        cloud: &cloud,
        t_init,
        cur,
        next,
    });
    times.flow = ms(t);
    Frontend { cloud, depth, flows }
}

/// PnP on one flow; any error becomes an unsuccessful result at `t_init`.
fn pnp(ctx: &StepContext<'_>, fe: &Frontend, flow: &FlowField, t_init: &PoseSE3, stream: u64) -> (Vec<Correspondence>, PnpResult) {
    let corrs = correspondences_from_flow(&fe.depth, flow, &fe.cloud).unwrap_or_default();
    let cfg = RansacConfig {
        seed: rng::mix(ctx.cfg.ransac.seed, stream),
        ..ctx.cfg.ransac
    };
    let res = solve_pnp_ransac(&corrs, &ctx.cfg.camera, t_init, &cfg).unwrap_or_else(|_| PnpResult {
        pose: *t_init,
        inliers: vec![false; corrs.len()],
        inlier_count: 0,
        inlier_rmse: f64::NAN,
        hypotheses: 0,
        success: false,
    });
    (corrs, res)
}

fn inlier_corrs(corrs: &[Correspondence], res: &PnpResult) -> Vec<Correspondence> {
    if !res.success {
        return Vec::new();
    }
    corrs.iter().zip(&res.inliers).filter(|(_, &m)| m).map(|(c, _)| *c).collect()
}

/// Single-frame flow + PnP.
pub fn step_frame_by_frame(state: &mut TrackerState, ctx: &StepContext<'_>) -> FrameDiag {
    let k = state.frame_index;
    let mut diag = FrameDiag {
        frame: k,
        ..Default::default()
    };
    let t_init = state.carried;
    let fe = frontend(ctx, &t_init, k, None, &mut diag.ms);
    let t = Instant::now();
    let (_, res) = pnp(ctx, &fe, &fe.flows.c2d, &t_init, 2 * k as u64);
    diag.ms.pnp = ms(t);
    diag.inliers_cur = res.inlier_count;
    if !res.success {
        state.failed = true;
        return diag;
    }
    state.history.push(res.pose);
    state.carried = res.pose;
    state.frame_index += 1;
    diag
}

/// Chooses the PnP pose when its inlier RMSE is below the threshold, else
/// the previous estimate moved by the odometry increment.
pub fn step_loose_coupled(state: &mut TrackerState, ctx: &StepContext<'_>, vo_relative: Option<&PoseSE3>) -> FrameDiag {
    let k = state.frame_index;
    let mut diag = FrameDiag {
        frame: k,
        ..Default::default()
    };
    let t_init = state.carried;
    let fe = frontend(ctx, &t_init, k, None, &mut diag.ms);
    let t = Instant::now();
    let (_, res) = pnp(ctx, &fe, &fe.flows.c2d, &t_init, 2 * k as u64);
    diag.ms.pnp = ms(t);
    diag.inliers_cur = res.inlier_count;
    let candidate_b = match (state.history.poses.last(), vo_relative) {
        (Some(prev), Some(rel)) => *rel * *prev,
        _ => t_init,
    };
    let pose = if res.success && res.inlier_rmse < ctx.cfg.loose_reproj_threshold {
        res.pose
    } else {
        diag.candidate = Candidate::Vo;
        candidate_b
    };
    state.history.push(pose);
    state.carried = pose;
    state.frame_index += 1;
    diag
}

/// Joint two-frame step over `(k, k+1)`; appends frame `k` and carries the
/// refined frame `k+1` pose forward.
pub fn step_multi_view(state: &mut TrackerState, ctx: &StepContext<'_>) -> FrameDiag {
    let k = state.frame_index;
    let cam = &ctx.cfg.camera;
    let mut diag = FrameDiag {
        frame: k,
        ..Default::default()
    };
    let t_init = state.carried;
    let fe = frontend(ctx, &t_init, k, Some(k + 1), &mut diag.ms);

    let t = Instant::now();
    let (corrs_c, pnp_c) = pnp(ctx, &fe, &fe.flows.c2d, &t_init, 2 * k as u64);
    let (corrs_n, pnp_n) = pnp(ctx, &fe, &fe.flows.n2d, &t_init, 2 * k as u64 + 1);
    diag.ms.pnp = ms(t);
    diag.inliers_cur = pnp_c.inlier_count;
    diag.inliers_next = pnp_n.inlier_count;
    if !pnp_c.success && !pnp_n.success {
        state.failed = true;
        return diag;
    }

    let t = Instant::now();
    let t_cur0 = if pnp_c.success { pnp_c.pose } else { t_init };
    let t_next0 = if pnp_n.success { pnp_n.pose } else { t_cur0 };
    let in_c = inlier_corrs(&corrs_c, &pnp_c);
    let in_n = inlier_corrs(&corrs_n, &pnp_n);
    let anchor = if pnp_c.success { &in_c } else { &in_n };
    let pts: Vec<_> = stride_cap(anchor, ctx.cfg.consist_cap).iter().map(|c| c.p_world).collect();
    let consist = sample_consistency_points(&pts, cam, &t_cur0, &fe.flows.c2n);
    let (t_cur, t_next) = match optimize_pair(&t_cur0, &t_next0, &in_c, &in_n, &consist, cam, &ctx.cfg.energy) {
        Ok(r) if !r.degenerate => {
            diag.e_initial = r.initial_energy;
            diag.e_final = r.final_energy;
            diag.trace = r.trace;
            (r.t_cur, r.t_next)
        }
        _ => (t_cur0, t_next0),
    };
    diag.ms.joint = ms(t);

    state.history.push(t_cur);
    state.carried = t_next;
    state.frame_index += 1;
    diag
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<FrameDiag>,
    /// All frames were tracked without a runtime failure.
    pub complete: bool,
}

/// Folds the configured step over every frame of the scenario. The last
/// frame of a `multi_view` run has no successor and is solved alone.
pub fn run(cfg: &TrackerConfig, scenario: &Scenario, provider: &dyn FlowProvider) -> Result<RunOutput> {
    cfg.validate()?;
    let n = scenario.gt.len();
    let ctx = StepContext {
        cfg,
        map: &scenario.map,
        provider,
    };
    let mut state = init(scenario.t0);
    let mut diagnostics = Vec::with_capacity(n);
    while state.frame_index < n && !state.failed {
        let k = state.frame_index;
        let diag = match cfg.mode {
            Mode::MultiView if k + 1 < n => step_multi_view(&mut state, &ctx),
            Mode::LooseCoupled => {
                let rel = k.checked_sub(1).and_then(|i| scenario.vo.get(i));
                step_loose_coupled(&mut state, &ctx, rel)
            }
            _ => step_frame_by_frame(&mut state, &ctx),
        };
        log::debug!("frame {k}: inliers {}/{}", diag.inliers_cur, diag.inliers_next);
        diagnostics.push(diag);
    }
    for d in &mut diagnostics {
        if let (Some(est), Some(gt)) = (state.history.poses.get(d.frame), scenario.gt.poses.get(d.frame)) {
            let e = pose_error(est, gt);
            d.rot_err_deg = e.rot_deg;
            d.transl_err_m = e.transl_m;
        } else {
            d.rot_err_deg = f64::NAN;
            d.transl_err_m = f64::NAN;
        }
    }
    if state.failed {
        log::info!("tracking interrupted at frame {}", state.frame_index);
    }
    Ok(RunOutput {
        complete: !state.failed && state.history.len() == n,
        trajectory: state.history,
        diagnostics,
    })
}

/// [`run`] with the default oracle provider.
pub fn run_oracle(cfg: &TrackerConfig, scenario: &Scenario, outages: &[Outage]) -> Result<RunOutput> {
    let provider = OracleProvider::new(&scenario.gt, cfg, outages);
    run(cfg, scenario, &provider)
}

pub fn write_diagnostics_csv<W: std::io::Write>(mut w: W, diags: &[FrameDiag]) -> std::io::Result<()> {
    writeln!(w, "{DIAG_COLUMNS}")?;
    for d in diags {
        writeln!(w, "{}", d.csv_row())?;
    }
    Ok(())
}
