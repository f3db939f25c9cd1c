//! Acceptance criteria, one test each. Every test prints a PASS/FAIL line
//! on stderr; run with `--nocapture` to see them.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use crossloc::app::{self, Outcome};
use crossloc::config::ExperimentConfig;
use crossloc::eval::{ate, evaluate, median, EvalOptions, Trajectory};
use crossloc::flow::{consistency_residual, max_abs, oracle_flows_for, FlowNoiseModel, ImageFlowParams, OracleNoise};
use crossloc::geometry::{
    h_project, perturb_pose, pose_error, rotation_angle, se3_exp, PerturbBounds, Twist,
};
use crossloc::io::{read_kitti, write_kitti};
use crossloc::joint::{
    consist_jacobian, consist_residual, optimize_pair, reproj_jacobian, sample_consistency_points, stride_cap,
    trace_is_monotone, ConsistencyPoint, EnergyConfig, TraceRow,
};
use crossloc::map::crop_local;
use crossloc::pnp::{correspondences_from_flow, reprojection_residual, solve_pnp_ransac, Correspondence, RansacConfig};
use crossloc::render::{remove_occlusions, render_depth};
use crossloc::rng::seeded;
use crossloc::synth::{camera_pose, integrate_vo, Profile, Scenario};
use crossloc::tracker::{run_oracle, Mode, Outage, OutageTarget, TrackerConfig};
use crossloc::{CameraIntrinsics, PixelCoord, PoseSE3, Vec3};
use nalgebra::SMatrix;
use rand::Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {id:>2} {name}: {detail}");
}

fn scenario_cfg(seed: u64, frames: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default().with_seed(seed);
    c.trajectory.frame_count = frames;
    c.trajectory.profile = Profile::SCurve;
    c.scene.extent = frames as f64 * c.trajectory.speed + 40.0;
    c
}

fn build(cfg: &ExperimentConfig) -> Scenario {
    Scenario::build(&cfg.scenario(), &cfg.tracker.camera, &cfg.tracker.crop).unwrap()
}

fn gt_pair(k: usize) -> (PoseSE3, PoseSE3) {
    let a = camera_pose(Vec3::new(k as f64, 0.0, 1.7), 0.0);
    let b = camera_pose(Vec3::new(k as f64 + 1.0, 0.1, 1.7), 0.02);
    (a, b)
}

/// Points spread in front of both cameras of [`gt_pair`].
fn scene_points(k: usize, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = seeded(seed, 11);
    (0..n)
        .map(|_| {
            Vec3::new(
                k as f64 + rng.random_range(6.0..40.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(0.0..8.0),
            )
        })
        .collect()
}

fn exact_corrs(k: &CameraIntrinsics, t: &PoseSE3, pts: &[Vec3]) -> Vec<Correspondence> {
    pts.iter()
        .filter_map(|p| {
            let px = h_project(k, t, p).ok()?;
            (px.u >= 0.0 && px.v >= 0.0 && px.u < k.width as f64 && px.v < k.height as f64)
                .then(|| Correspondence::new(*p, px))
        })
        .collect()
}

fn exact_consistency(k: &CameraIntrinsics, a: &PoseSE3, b: &PoseSE3, pts: &[Vec3]) -> Vec<ConsistencyPoint> {
    pts.iter()
        .filter_map(|p| {
            let pa = h_project(k, a, p).ok()?;
            let pb = h_project(k, b, p).ok()?;
            Some(ConsistencyPoint {
                p_world: *p,
                flow: [pb.u - pa.u, pb.v - pa.v],
            })
        })
        .collect()
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_consistency_identity() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut min_valid = usize::MAX;
    for seed in 0..20u64 {
        let cfg = scenario_cfg(100 + seed, 3);
        let sc = build(&cfg);
        let tc = &cfg.tracker;
        let t_init = perturb_pose(&sc.gt.poses[0], &PerturbBounds::default(), 1000 + seed);
        let cloud = crop_local(&sc.map, &t_init, &tc.crop);
        let depth = remove_occlusions(&render_depth(&cloud, &tc.camera, &t_init), &tc.occlusion);
        let f = oracle_flows_for(
            &depth,
            &cloud,
            &t_init,
            &sc.gt.poses[0],
            &sc.gt.poses[1],
            &OracleNoise::default(),
            &ImageFlowParams::default(),
            0,
        );
        let r = consistency_residual(&f).unwrap();
        min_valid = min_valid.min(r.valid_count());
        worst = worst.max(max_abs(&r).unwrap_or(f64::INFINITY));
    }
    let el = start.elapsed();
    let pass = worst < 0.5 && min_valid > 0 && el < Duration::from_secs(60);
    report(
        1,
        "consistency identity",
        pass,
        &format!("max |r| = {worst:.4} px (< 0.5), min valid {min_valid}, {:.1} s (< 60)", el.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

struct JointTrials {
    successes: usize,
    worst: (f64, f64),
    traces: Vec<Vec<TraceRow>>,
    elapsed: Duration,
}

fn joint_trials() -> &'static JointTrials {
    static R: OnceLock<JointTrials> = OnceLock::new();
    R.get_or_init(|| {
        let start = Instant::now();
        let k = CameraIntrinsics::default();
        let bounds = PerturbBounds::new(1.0, 5.0);
        let mut out = JointTrials {
            successes: 0,
            worst: (0.0, 0.0),
            traces: Vec::new(),
            elapsed: Duration::ZERO,
        };
        for seed in 0..100u64 {
            let (a, b) = gt_pair(seed as usize);
            let pts = scene_points(seed as usize, 400, seed);
            let ca = exact_corrs(&k, &a, &pts);
            let cb = exact_corrs(&k, &b, &pts);
            let cons = exact_consistency(&k, &a, &b, &pts);
            let a0 = perturb_pose(&a, &bounds, 2 * seed);
            let b0 = perturb_pose(&b, &bounds, 2 * seed + 1);
            let r = optimize_pair(&a0, &b0, &ca, &cb, &cons, &k, &EnergyConfig::default()).unwrap();
            let ea = pose_error(&r.t_cur, &a);
            let eb = pose_error(&r.t_next, &b);
            let rot = ea.rot_deg.max(eb.rot_deg);
            let tr = ea.transl_m.max(eb.transl_m);
            out.worst = (out.worst.0.max(rot), out.worst.1.max(tr));
            if rot <= 0.05 && tr <= 0.02 {
                out.successes += 1;
            }
            out.traces.push(r.trace);
        }
        out.elapsed = start.elapsed();
        out
    })
}

#[test]
fn c02_joint_optimizer_recovers_poses() {
    let r = joint_trials();
    let pass = r.successes >= 99 && r.elapsed < Duration::from_secs(120);
    report(
        2,
        "joint optimizer correctness",
        pass,
        &format!(
            "{}/100 within 0.05 deg / 2 cm (>= 99), worst {:.2e} deg {:.2e} m, {:.1} s (< 120)",
            r.successes,
            r.worst.0,
            r.worst.1,
            r.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn random_twist(rng: &mut impl Rng, rot: f64, tr: f64) -> Twist {
    Twist::new(
        rng.random_range(-rot..rot),
        rng.random_range(-rot..rot),
        rng.random_range(-rot..rot),
        rng.random_range(-tr..tr),
        rng.random_range(-tr..tr),
        rng.random_range(-tr..tr),
    )
}

fn rel_err<const C: usize>(a: &SMatrix<f64, 2, C>, b: &SMatrix<f64, 2, C>) -> f64 {
    (a - b).norm() / a.norm().max(1e-12)
}

#[test]
fn c03_jacobians_match_finite_differences() {
    const H: f64 = 1e-6;
    let k = CameraIntrinsics::default();
    let mut rng = seeded(3, 0);
    let mut worst_r = 0.0f64;
    let mut worst_c = 0.0f64;
    for i in 0..100 {
        let (a, b) = gt_pair(i);
        let a = se3_exp(&random_twist(&mut rng, 0.1, 1.0)) * a;
        let b = se3_exp(&random_twist(&mut rng, 0.1, 1.0)) * b;
        let p = scene_points(i, 1, 900 + i as u64)[0];
        let c = Correspondence::new(p, PixelCoord::new(100.0, 100.0));
        let cp = ConsistencyPoint {
            p_world: p,
            flow: [3.0, -1.0],
        };

        let jr = reproj_jacobian(&k, &a, &p);
        let mut fd = SMatrix::<f64, 2, 6>::zeros();
        for j in 0..6 {
            let mut e = Twist::zeros();
            e[j] = H;
            let rp = reprojection_residual(&k, &a.retract(&e), &c).unwrap();
            let rm = reprojection_residual(&k, &a.retract(&-e), &c).unwrap();
            fd[(0, j)] = (rp[0] - rm[0]) / (2.0 * H);
            fd[(1, j)] = (rp[1] - rm[1]) / (2.0 * H);
        }
        worst_r = worst_r.max(rel_err(&jr, &fd));

        let jc = consist_jacobian(&k, &a, &b, &p);
        let mut fd = SMatrix::<f64, 2, 12>::zeros();
        for j in 0..12 {
            let mut e = Twist::zeros();
            e[j % 6] = H;
            let (ap, am, bp, bm) = if j < 6 {
                (a.retract(&e), a.retract(&-e), b, b)
            } else {
                (a, a, b.retract(&e), b.retract(&-e))
            };
            let rp = consist_residual(&k, &ap, &bp, &cp).unwrap();
            let rm = consist_residual(&k, &am, &bm, &cp).unwrap();
            fd[(0, j)] = (rp[0] - rm[0]) / (2.0 * H);
            fd[(1, j)] = (rp[1] - rm[1]) / (2.0 * H);
        }
        worst_c = worst_c.max(rel_err(&jc, &fd));
    }
    let pass = worst_r < 1e-4 && worst_c < 1e-4;
    report(
        3,
        "jacobian fidelity",
        pass,
        &format!("max rel err reproj {worst_r:.2e}, consist {worst_c:.2e} (< 1e-4)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

struct RescueTrials {
    pnp_err: Vec<f64>,
    joint_err: Vec<f64>,
    traces: Vec<Vec<TraceRow>>,
}

fn rescue_trials() -> &'static RescueTrials {
    static R: OnceLock<RescueTrials> = OnceLock::new();
    R.get_or_init(|| {
        let mut out = RescueTrials {
            pnp_err: Vec::new(),
            joint_err: Vec::new(),
            traces: Vec::new(),
        };
        for seed in 0..100u64 {
            let cfg = scenario_cfg(500 + seed, 2);
            let sc = build(&cfg);
            let tc = &cfg.tracker;
            let cam = &tc.camera;
            let noise = OracleNoise {
                n2d: FlowNoiseModel {
                    gaussian_sigma: 4.0,
                    outlier_fraction: 0.2,
                    seed: 77 + seed,
                    ..FlowNoiseModel::noiseless()
                },
                ..OracleNoise::default()
            };
            let (gc, gn) = (sc.gt.poses[0], sc.gt.poses[1]);
            let t_init = sc.t0;
            let cloud = crop_local(&sc.map, &t_init, &tc.crop);
            let depth = remove_occlusions(&render_depth(&cloud, cam, &t_init), &tc.occlusion);
            let f = oracle_flows_for(&depth, &cloud, &t_init, &gc, &gn, &noise, &tc.image_flow, 0);

            let solve = |flow, s| {
                let corrs = correspondences_from_flow(&depth, flow, &cloud).unwrap();
                let rc = RansacConfig { seed: s, ..tc.ransac };
                let r = solve_pnp_ransac(&corrs, cam, &t_init, &rc).unwrap();
                let inl: Vec<_> = corrs.iter().zip(&r.inliers).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
                (r, inl)
            };
            let (pc, in_c) = solve(&f.c2d, 2 * seed);
            let (pn, in_n) = solve(&f.n2d, 2 * seed + 1);
            assert!(pc.success && pn.success, "seed {seed}");
            let pts: Vec<_> = stride_cap(&in_c, tc.consist_cap).iter().map(|c| c.p_world).collect();
            let cons = sample_consistency_points(&pts, cam, &pc.pose, &f.c2n);
            let r = optimize_pair(&pc.pose, &pn.pose, &in_c, &in_n, &cons, cam, &tc.energy).unwrap();
            out.pnp_err.push(pose_error(&pn.pose, &gn).transl_m);
            out.joint_err.push(pose_error(&r.t_next, &gn).transl_m);
            out.traces.push(r.trace);
        }
        out
    })
}

#[test]
fn c05_asymmetric_noise_rescue() {
    let r = rescue_trials();
    let pnp = median(&r.pnp_err);
    let joint = median(&r.joint_err);
    let pass = joint <= 0.7 * pnp;
    report(
        5,
        "asymmetric-noise rescue",
        pass,
        &format!(
            "median T_next error joint {:.2} cm vs PnP-only {:.2} cm, ratio {:.3} (<= 0.7)",
            joint * 100.0,
            pnp * 100.0,
            joint / pnp
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

struct CompletionRuns {
    outcomes: Vec<(Mode, Outcome, usize)>,
    traces: Vec<Vec<TraceRow>>,
    elapsed: Duration,
}

fn completion_runs() -> &'static CompletionRuns {
    static R: OnceLock<CompletionRuns> = OnceLock::new();
    R.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = scenario_cfg(6, 300);
        cfg.outages = [60, 140, 220]
            .map(|s| Outage {
                start: s,
                len: 3,
                target: OutageTarget::CurrentDepth,
            })
            .to_vec();
        let scen = dir.path().join("scene");
        app::synth(&cfg, &scen).unwrap();
        let (sc, _) = app::load_scenario(&scen).unwrap();
        let mut out = CompletionRuns {
            outcomes: Vec::new(),
            traces: Vec::new(),
            elapsed: Duration::ZERO,
        };
        for mode in Mode::ALL {
            let o = app::track(Some(&cfg), &scen, &dir.path().join(mode.name()), Some(mode)).unwrap();
            let tc = TrackerConfig { mode, ..cfg.tracker };
            let run = run_oracle(&tc, &sc, &cfg.outages).unwrap();
            out.traces.extend(run.diagnostics.into_iter().map(|d| d.trace));
            out.outcomes.push((mode, o, run.trajectory.len()));
        }
        out.elapsed = start.elapsed();
        out
    })
}

#[test]
fn c06_tracking_completion_ordering() {
    let r = completion_runs();
    let code = |m: Mode| r.outcomes.iter().find(|o| o.0 == m).map(|o| o.1.exit_code()).unwrap();
    let pass = code(Mode::FrameByFrame) == 2
        && code(Mode::LooseCoupled) == 0
        && code(Mode::MultiView) == 0
        && r.elapsed < Duration::from_secs(300);
    let detail: Vec<String> = r
        .outcomes
        .iter()
        .map(|(m, o, n)| format!("{m} exit {} ({n}/300)", o.exit_code()))
        .collect();
    report(
        6,
        "tracking completion ordering",
        pass,
        &format!("{}, {:.1} s (< 300)", detail.join(", "), r.elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

struct DriftRuns {
    vo_ate: Vec<f64>,
    mv_ate: Vec<f64>,
    traces: Vec<Vec<TraceRow>>,
}

fn drift_runs() -> &'static DriftRuns {
    static R: OnceLock<DriftRuns> = OnceLock::new();
    R.get_or_init(|| {
        let mut out = DriftRuns {
            vo_ate: Vec::new(),
            mv_ate: Vec::new(),
            traces: Vec::new(),
        };
        for seed in 0..20u64 {
            let mut cfg = scenario_cfg(700 + seed, 400);
            cfg.vo.transl_drift_sigma = 0.05;
            cfg.vo.rot_drift_sigma = 0.0;
            cfg.tracker.mode = Mode::MultiView;
            let n = &mut cfg.tracker.noise;
            for (m, s) in [(&mut n.c2d, 1), (&mut n.n2d, 2), (&mut n.c2n, 3)] {
                *m = FlowNoiseModel {
                    gaussian_sigma: 1.0,
                    seed: 7000 + 10 * seed + s,
                    ..FlowNoiseModel::noiseless()
                };
            }
            let sc = build(&cfg);
            let vo = integrate_vo(&sc.gt.poses[0], &sc.vo);
            out.vo_ate.push(ate(&vo, &sc.gt, false).unwrap());
            let run = run_oracle(&cfg.tracker, &sc, &cfg.outages).unwrap();
            assert!(run.complete, "seed {seed}");
            out.mv_ate.push(ate(&run.trajectory, &sc.gt, false).unwrap());
            out.traces.extend(run.diagnostics.into_iter().map(|d| d.trace));
        }
        out
    })
}

#[test]
fn c07_drift_contrast() {
    let r = drift_runs();
    let vo = median(&r.vo_ate);
    let mv = median(&r.mv_ate);
    let pass = vo >= 10.0 * mv;
    report(
        7,
        "drift contrast",
        pass,
        &format!("median ATE VO {vo:.3} m vs multi_view {mv:.4} m, ratio {:.1} (>= 10)", vo / mv),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_energy_monotonicity() {
    let mut total = 0usize;
    let mut bad = 0usize;
    let sets: [&[Vec<TraceRow>]; 4] = [
        &joint_trials().traces,
        &rescue_trials().traces,
        &completion_runs().traces,
        &drift_runs().traces,
    ];
    for t in sets.iter().flat_map(|s| s.iter()) {
        total += 1;
        if !trace_is_monotone(t) {
            bad += 1;
        }
    }
    let pass = bad == 0 && total > 0;
    report(
        4,
        "energy monotonicity",
        pass,
        &format!("{bad} non-monotone traces out of {total}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn random_traj(rng: &mut impl Rng, n: usize) -> Trajectory {
    Trajectory::new(
        (0..n)
            .map(|_| se3_exp(&random_twist(rng, 3.0, 50.0)))
            .collect(),
    )
}

fn perturbed(rng: &mut impl Rng, t: &Trajectory) -> Trajectory {
    Trajectory::new(t.poses.iter().map(|p| se3_exp(&random_twist(rng, 0.1, 6.0)) * *p).collect())
}

/// Camera center, computed from the raw matrix: c = -R^T t.
fn center(p: &PoseSE3) -> [f64; 3] {
    let m = p.to_matrix3x4();
    let mut c = [0.0; 3];
    for (i, ci) in c.iter_mut().enumerate() {
        *ci = -(0..3).map(|r| m[(r, i)] * m[(r, 3)]).sum::<f64>();
    }
    c
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Camera-to-world matrices as plain 4x4 arrays.
fn c2w(p: &PoseSE3) -> nalgebra::Matrix4<f64> {
    let mut m = nalgebra::Matrix4::identity();
    m.fixed_view_mut::<3, 4>(0, 0).copy_from(&p.to_matrix3x4());
    m.try_inverse().unwrap()
}

fn angle_of(m: &nalgebra::Matrix4<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn c08_metrics_match_brute_force() {
    let mut rng = seeded(8, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(5..40);
        let gt = random_traj(&mut rng, n);
        let est = perturbed(&mut rng, &gt);
        let rep = evaluate(&est, &gt, &EvalOptions::default()).unwrap();

        let d: Vec<f64> = est.poses.iter().zip(&gt.poses).map(|(e, g)| dist(center(e), center(g))).collect();
        let ate_bf = (d.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let fail_bf = d.iter().filter(|&&x| x > 4.0).count() as f64 / n as f64;
        let mut rt = Vec::new();
        let mut rr = Vec::new();
        for i in 0..n - 1 {
            let rel_e = c2w(&est.poses[i]).try_inverse().unwrap() * c2w(&est.poses[i + 1]);
            let rel_g = c2w(&gt.poses[i]).try_inverse().unwrap() * c2w(&gt.poses[i + 1]);
            let e = rel_g.try_inverse().unwrap() * rel_e;
            rt.push((e[(0, 3)].powi(2) + e[(1, 3)].powi(2) + e[(2, 3)].powi(2)).sqrt());
            rr.push(angle_of(&e));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for (got, want) in [
            (rep.ate_rmse, ate_bf),
            (rep.failure_rate, fail_bf),
            (rep.rpe_transl_mean, mean(&rt)),
            (rep.rpe_rot_mean, mean(&rr)),
            (rep.mean_transl_m, mean(&d)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }

    // Exactly 4.0 m is not a failure; anything beyond is.
    let g = PoseSE3::identity();
    let at = |x: f64| PoseSE3::from_translation(Vec3::new(-x, 0.0, 0.0));
    let gt = Trajectory::new(vec![g, g]);
    let edge = evaluate(&Trajectory::new(vec![at(4.0), at(4.0 + 1e-9)]), &gt, &EvalOptions::default()).unwrap();
    let threshold_ok = edge.failure_rate == 0.5;

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.txt");
    let t = random_traj(&mut rng, 50);
    write_kitti(&p, &t).unwrap();
    let back = read_kitti(&p).unwrap();
    let rt_err = t
        .poses
        .iter()
        .zip(&back.poses)
        .map(|(a, b)| (a.to_matrix3x4() - b.to_matrix3x4()).abs().max())
        .fold(0.0, f64::max);

    let pass = worst < 1e-9 && threshold_ok && rt_err < 1e-9;
    report(
        8,
        "metrics correctness",
        pass,
        &format!(
            "max |metric - brute force| {worst:.2e} (< 1e-9), 4.0 m boundary {}, KITTI round trip {rt_err:.2e} (< 1e-9)",
            if threshold_ok { "ok" } else { "wrong" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_initial_pose_calibration() {
    let base = camera_pose(Vec3::new(10.0, 2.0, 1.7), 0.3);
    let b = PerturbBounds::default();
    let n = 10_000;
    let (mut rot, mut tr) = (0.0, 0.0);
    for s in 0..n {
        let p = perturb_pose(&base, &b, s);
        rot += rotation_angle(&(p.rotation * base.rotation.inverse())).to_degrees();
        tr += (p.center() - base.center()).norm();
    }
    let rot = rot / n as f64;
    let tr_cm = tr / n as f64 * 100.0;
    let pass = (rot / 9.67 - 1.0).abs() <= 0.15 && (tr_cm / 182.8 - 1.0).abs() <= 0.15;
    report(
        9,
        "initial-pose calibration",
        pass,
        &format!("mean {rot:.2} deg (9.67 +/- 15%), {tr_cm:.1} cm (182.8 +/- 15%)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_track_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("scene");
    let mut cfg = scenario_cfg(10, 20);
    cfg.tracker.noise = OracleNoise::uniform(FlowNoiseModel {
        gaussian_sigma: 1.0,
        outlier_fraction: 0.05,
        ..FlowNoiseModel::noiseless()
    });
    app::synth(&cfg, &scen).unwrap();
    let manifest = scen.join(app::MANIFEST_FILE);
    let files: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|r| {
            let c = app::load_config(Some(&manifest), None).unwrap();
            let out = dir.path().join(r);
            app::track(Some(&c), &scen, &out, None).unwrap();
            std::fs::read(out.join(app::TRAJECTORY_FILE)).unwrap()
        })
        .collect();
    let pass = !files[0].is_empty() && files[0] == files[1];
    report(
        10,
        "determinism",
        pass,
        &format!("two runs from one manifest: {} bytes, identical = {}", files[0].len(), files[0] == files[1]),
    );
    assert!(pass);
}
