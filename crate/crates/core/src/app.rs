//! Command implementations behind the CLI.
//!
//! Every command validates its inputs before creating the output directory,
//! so a failing invocation leaves nothing behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ExperimentConfig, Manifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_plot_csv, EvalOptions, MetricsReport, Stats, Trajectory, REPORT_COLUMNS};
use crate::flow::FlowTriplet;
use crate::geometry::PoseSE3;
use crate::io;
use crate::map::{crop_local, GlobalMap};
use crate::render::{remove_occlusions, render_depth};
use crate::rng::mix;
use crate::synth::{integrate_vo, Scenario};
use crate::tracker::{run_oracle, write_diagnostics_csv, FlowProvider, FlowRequest, Mode, OracleProvider, RunOutput};

pub const MAP_FILE: &str = "map.xmpc";
pub const GT_FILE: &str = "gt_poses.txt";
pub const VO_FILE: &str = "vo_poses.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const PER_FRAME_FILE: &str = "per_frame.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    /// Tracking stopped before the last frame.
    Interrupted,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Complete => 0,
            Outcome::Interrupted => 2,
        }
    }
}

/// Loads and validates a config. Without a path the defaults are used.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Generates a scenario and writes map, ground truth, VO and manifest.
pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let t = Instant::now();
    let sc = Scenario::build(&cfg.scenario(), &cfg.tracker.camera, &cfg.tracker.crop)?;
    let build_ms = ms_since(t);

    let t = Instant::now();
    create_out(out)?;
    let files = [MAP_FILE, GT_FILE, VO_FILE, MANIFEST_FILE].map(|f| out.join(f));
    io::write_xmpc(&files[0], &sc.map.cloud)?;
    io::write_kitti(&files[1], &sc.gt)?;
    let start = sc.gt.poses.first().copied().unwrap_or_else(PoseSE3::identity);
    io::write_kitti(&files[2], &integrate_vo(&start, &sc.vo))?;

    let mut m = Manifest::new("synth", cfg);
    m.set_t0(&sc.t0);
    m.artifacts = files.iter().map(|p| display(p)).collect();
    m.stage_ms = vec![("build".into(), build_ms), ("write".into(), ms_since(t))];
    m.write(&files[3])?;
    log::info!("synth: {} points, {} frames -> {}", sc.map.len(), sc.gt.len(), out.display());
    Ok(Outcome::Complete)
}

fn kitti_row_pose(v: &[f64]) -> Result<PoseSE3> {
    if v.len() != 12 {
        return Err(Error::config("manifest.t0", "expected 12 values"));
    }
    let m = nalgebra::Matrix3x4::from_row_slice(v);
    Ok(PoseSE3::from_matrix3x4(&m).inverse())
}

/// Reads a scenario directory written by [`synth`]. The manifest's config
/// is returned alongside.
pub fn load_scenario(dir: &Path) -> Result<(Scenario, ExperimentConfig)> {
    let paths = [MAP_FILE, GT_FILE, VO_FILE, MANIFEST_FILE].map(|f| dir.join(f));
    for p in &paths {
        require(p)?;
    }
    let manifest = Manifest::read(&paths[3])?;
    let cloud = io::read_cloud(&paths[0])?;
    let gt = io::read_kitti(&paths[1])?;
    let vo_abs = io::read_kitti(&paths[2])?;
    if vo_abs.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: vo_abs.len(),
            right: gt.len(),
        });
    }
    let vo = vo_abs.poses.windows(2).map(|w| w[1] * w[0].inverse()).collect();
    let cfg = manifest.config;
    let t0 = match &manifest.t0 {
        Some(v) => kitti_row_pose(v)?,
        None => Scenario::from_parts(GlobalMap::new(Default::default(), 1.0), gt.clone(), &cfg.scenario())?.t0,
    };
    let map = GlobalMap::for_extents(cloud, &cfg.tracker.crop);
    Ok((Scenario { map, gt, vo, t0 }, cfg))
}

/// Tracks a scenario directory. `cfg` overrides the tracker settings, seeds
/// and outages recorded in the scenario's manifest.
pub fn track(cfg: Option<&ExperimentConfig>, scenario_dir: &Path, out: &Path, mode: Option<Mode>) -> Result<Outcome> {
    let (sc, scenario_cfg) = load_scenario(scenario_dir)?;
    let mut cfg = cfg.cloned().unwrap_or(scenario_cfg);
    if let Some(m) = mode {
        cfg.tracker.mode = m;
    }
    cfg.validate()?;

    let t = Instant::now();
    let res = run_oracle(&cfg.tracker, &sc, &cfg.outages)?;
    let track_ms = ms_since(t);

    create_out(out)?;
    let files = [TRAJECTORY_FILE, DIAGNOSTICS_FILE, TRACES_FILE, MANIFEST_FILE].map(|f| out.join(f));
    write_run(&res, &files[0], &files[1], &files[2])?;

    let mut m = Manifest::new("track", &cfg);
    m.set_t0(&sc.t0);
    m.inputs = vec![display(scenario_dir)];
    m.artifacts = files.iter().map(|p| display(p)).collect();
    m.stage_ms = stage_totals(&res);
    m.stage_ms.push(("total".into(), track_ms));
    m.write(&files[3])?;

    log::info!(
        "track[{}]: {}/{} frames in {:.1} s",
        cfg.tracker.mode,
        res.trajectory.len(),
        sc.gt.len(),
        track_ms / 1e3
    );
    Ok(if res.complete { Outcome::Complete } else { Outcome::Interrupted })
}

fn write_run(res: &RunOutput, traj: &Path, diag: &Path, traces: &Path) -> Result<()> {
    io::write_kitti(traj, &res.trajectory)?;
    write_with(diag, |w| Ok(write_diagnostics_csv(w, &res.diagnostics)?))?;
    write_with(traces, |w| {
        writeln!(w, "frame,iteration,energy,lambda,accepted")?;
        for d in &res.diagnostics {
            for r in &d.trace {
                writeln!(w, "{},{},{:.17e},{:.6e},{}", d.frame, r.iteration, r.energy, r.lambda, r.accepted as u8)?;
            }
        }
        Ok(())
    })
}

fn stage_totals(res: &RunOutput) -> Vec<(String, f64)> {
    let mut s = [0.0; 5];
    for d in &res.diagnostics {
        for (acc, v) in s.iter_mut().zip([d.ms.crop, d.ms.render, d.ms.flow, d.ms.pnp, d.ms.joint]) {
            *acc += v;
        }
    }
    ["crop", "render", "flow", "pnp", "joint"]
        .iter()
        .zip(s)
        .map(|(n, v)| (n.to_string(), v))
        .collect()
}

/// Scores an estimated trajectory against ground truth. With `out`, the
/// report and per-frame errors are written there.
pub fn eval(est_path: &Path, gt_path: &Path, opts: &EvalOptions, out: Option<&Path>) -> Result<(MetricsReport, Outcome)> {
    require(est_path)?;
    require(gt_path)?;
    let est = io::read_kitti(est_path)?;
    let gt = io::read_kitti(gt_path)?;
    let report = evaluate(&est, &gt, opts)?;
    if let Some(out) = out {
        create_out(out)?;
        write_with(&out.join(METRICS_CSV), |w| Ok(report.write_csv(w)?))?;
        fs::write(out.join(METRICS_TXT), report.text())?;
        write_with(&out.join(PER_FRAME_FILE), |w| write_plot_csv(w, &est, &gt))?;
    }
    let outcome = if report.complete { Outcome::Complete } else { Outcome::Interrupted };
    Ok((report, outcome))
}

pub const ABLATION_COLUMNS: &str = "mode,runs,complete_runs,mean_transl_cm,std_transl_cm,median_transl_cm,\
mean_rot_deg,std_rot_deg,median_rot_deg,ate_rmse_m,failure_rate,ms_per_frame";

/// Metrics of one mode averaged over paired runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub reports: Vec<MetricsReport>,
    pub ms_per_frame: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let mean = |f: fn(&MetricsReport) -> f64| Stats::of(&self.reports.iter().map(f).collect::<Vec<_>>()).mean;
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.mode,
            self.reports.len(),
            self.reports.iter().filter(|r| r.complete).count(),
            mean(|r| r.mean_transl_m) * 100.0,
            mean(|r| r.std_transl_m) * 100.0,
            mean(|r| r.median_transl_m) * 100.0,
            mean(|r| r.mean_rot_deg),
            mean(|r| r.std_rot_deg),
            mean(|r| r.median_rot_deg),
            mean(|r| r.ate_rmse),
            mean(|r| r.failure_rate),
            self.ms_per_frame
        )
    }
}

/// Runs every configured mode on the same scenarios. Run `r > 0` uses a
/// seed derived from the scene seed.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<AblationRow>, Outcome)> {
    cfg.validate()?;
    let run_cfgs: Vec<ExperimentConfig> = (0..cfg.ablate.runs)
        .map(|r| if r == 0 { cfg.clone() } else { cfg.clone().with_seed(mix(cfg.scene.seed, r as u64)) })
        .collect();
    let mut rows: Vec<AblationRow> = cfg
        .ablate
        .modes
        .iter()
        .map(|&mode| AblationRow {
            mode,
            reports: Vec::new(),
            ms_per_frame: 0.0,
        })
        .collect();
    let mut per_run = Vec::new();
    let mut frames = 0usize;
    for (r, rc) in run_cfgs.iter().enumerate() {
        let sc = Scenario::build(&rc.scenario(), &rc.tracker.camera, &rc.tracker.crop)?;
        frames += sc.gt.len();
        for row in rows.iter_mut() {
            let mut tc = rc.tracker;
            tc.mode = row.mode;
            let t = Instant::now();
            let res = run_oracle(&tc, &sc, &rc.outages)?;
            row.ms_per_frame += ms_since(t);
            let rep = evaluate(&res.trajectory, &sc.gt, &rc.eval)?;
            log::info!("ablate[{}] run {r}: {:.2} cm", row.mode, rep.mean_transl_m * 100.0);
            per_run.push(format!("{},{r},{}", row.mode, rep.csv_row()));
            row.reports.push(rep);
        }
    }
    for row in rows.iter_mut() {
        row.ms_per_frame /= frames.max(1) as f64;
    }

    create_out(out)?;
    write_with(&out.join(ABLATION_FILE), |w| {
        writeln!(w, "{ABLATION_COLUMNS}")?;
        for row in &rows {
            writeln!(w, "{}", row.csv_row())?;
        }
        Ok(())
    })?;
    write_with(&out.join(ABLATION_RUNS_FILE), |w| {
        writeln!(w, "mode,run,{REPORT_COLUMNS}")?;
        for l in &per_run {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    let mut m = Manifest::new("ablate", cfg);
    m.artifacts = [ABLATION_FILE, ABLATION_RUNS_FILE, MANIFEST_FILE].iter().map(|f| display(&out.join(f))).collect();
    m.stage_ms = rows.iter().map(|r| (format!("{}_ms_per_frame", r.mode), r.ms_per_frame)).collect();
    m.write(&out.join(MANIFEST_FILE))?;

    let all_complete = rows.iter().all(|r| r.reports.iter().all(|x| x.complete));
    Ok((rows, if all_complete { Outcome::Complete } else { Outcome::Interrupted }))
}

/// Dumps the depth map and oracle flows of one pair, rendered at the
/// ground-truth pose of `frame` (or the frame-0 prior).
pub fn debug_frame(cfg: Option<&ExperimentConfig>, scenario_dir: &Path, frame: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (sc, scenario_cfg) = load_scenario(scenario_dir)?;
    let cfg = cfg.cloned().unwrap_or(scenario_cfg);
    cfg.validate()?;
    if frame >= sc.gt.len() {
        return Err(Error::config("frame", format!("must be < {}", sc.gt.len())));
    }
    let tc = &cfg.tracker;
    let t_init = if frame == 0 { sc.t0 } else { sc.gt.poses[frame] };
    let cloud = crop_local(&sc.map, &t_init, &tc.crop);
    let depth = remove_occlusions(&render_depth(&cloud, &tc.camera, &t_init), &tc.occlusion);
    let provider = OracleProvider::new(&sc.gt, tc, &cfg.outages);
    let next = (frame + 1 < sc.gt.len()).then_some(frame + 1);
    let FlowTriplet { c2d, n2d, c2n } = provider.flows(&FlowRequest {
        depth: &depth,
        cloud: &cloud,
        t_init: &t_init,
        cur: frame,
        next,
    });

    create_out(out)?;
    let paths: Vec<PathBuf> = ["depth.pgm", "c2d.flow", "n2d.flow", "c2n.flow"].iter().map(|f| out.join(f)).collect();
    io::write_depth_pgm(&paths[0], &depth, io::DEFAULT_DEPTH_SCALE)?;
    io::write_flow(&paths[1], &c2d)?;
    io::write_flow(&paths[2], &n2d)?;
    io::write_flow(&paths[3], &c2n)?;
    Ok(paths)
}

/// Reads back an estimate written by [`track`].
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    require(path)?;
    io::read_kitti(path)
}
