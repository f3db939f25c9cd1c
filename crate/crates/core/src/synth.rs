//! Seeded synthetic worlds: a street corridor scene, camera trajectories
//! along it, and a visual-odometry oracle with configurable drift.
//!
//! World frame: x along the corridor, z up, ground at z = 0.

use nalgebra::{Matrix3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geometry::{perturb_pose, se3_exp, CameraIntrinsics, PerturbBounds, PoseSE3, Twist, Vec3};
use crate::map::{crop_local, downsample, CropExtents, GlobalMap, PointCloud};
use crate::render::render_depth;
use crate::rng;

pub const CAMERA_HEIGHT: f64 = 1.7;
/// Corridor starts this far behind the trajectory origin.
pub const SCENE_BACK: f64 = 20.0;
pub const MIN_VISIBLE_PIXELS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Corridor length ahead of the origin, meters.
    pub extent: f64,
    /// Points per square meter of road surface.
    pub ground_density: f64,
    /// Points per square meter of building wall.
    pub facade_density: f64,
    pub pole_count: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 250.0,
            ground_density: 1.0,
            facade_density: 2.0,
            pole_count: 40,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::config("scene.extent", "must be > 0"));
        }
        if !(self.ground_density >= 0.0) {
            return Err(Error::config("scene.ground_density", "must be >= 0"));
        }
        if !(self.facade_density >= 0.0) {
            return Err(Error::config("scene.facade_density", "must be >= 0"));
        }
        Ok(())
    }
}

fn scatter<R: Rng>(r: &mut R, out: &mut Vec<Vec3>, density: f64, area: f64, mut at: impl FnMut(&mut R) -> Vec3) {
    let n = (density * area).round() as usize;
    out.extend((0..n).map(|_| at(r)));
}

/// Road surface, building facades on both sides and street poles.
pub fn generate_scene(cfg: &SceneConfig) -> PointCloud {
    let mut r = rng::seeded(cfg.seed, 0x7363656e);
    let mut pts = Vec::new();
    let (x0, x1) = (-SCENE_BACK, cfg.extent);

    if cfg.ground_density > 0.0 {
        scatter(&mut r, &mut pts, cfg.ground_density, (x1 - x0) * 20.0, |r| {
            Vec3::new(r.random_range(x0..x1), r.random_range(-10.0..10.0), 0.0)
        });
    }

    if cfg.facade_density > 0.0 {
        for side in [-1.0, 1.0] {
            let mut x = x0;
            while x < x1 {
                let len = r.random_range(15.0..30.0);
                let end = (x + len).min(x1);
                let y0: f64 = r.random_range(8.0..14.0);
                let h: f64 = r.random_range(6.0..12.0);
                scatter(&mut r, &mut pts, cfg.facade_density, (end - x) * h, |r| {
                    Vec3::new(r.random_range(x..end), side * y0, r.random_range(0.0..h))
                });
                // side walls toward the next block's setback
                for wx in [x, end] {
                    scatter(&mut r, &mut pts, cfg.facade_density, 4.0 * h, |r| {
                        Vec3::new(wx, side * r.random_range(y0..y0 + 4.0), r.random_range(0.0..h))
                    });
                }
                x = end + r.random_range(0.0..4.0);
            }
        }
    }

    for i in 0..cfg.pole_count {
        let px = x0 + (x1 - x0) * (i as f64 + 0.5) / cfg.pole_count as f64;
        let py = if i % 2 == 0 { 1.0 } else { -1.0 } * r.random_range(6.0..7.5);
        for level in 0..12 {
            for k in 0..5 {
                let a = std::f64::consts::TAU * (k as f64 + 0.5 * (level % 2) as f64) / 5.0;
                pts.push(Vec3::new(px + 0.15 * a.cos(), py + 0.15 * a.sin(), 5.0 * level as f64 / 11.0));
            }
        }
    }
    PointCloud::new(pts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Straight,
    Arc,
    SCurve,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub frame_count: usize,
    /// Meters per frame.
    pub speed: f64,
    /// Degrees per frame; for `s_curve`, the peak rate.
    pub turn_rate: f64,
    pub profile: Profile,
    /// Frames per full `s_curve` oscillation.
    pub period: f64,
    /// Uniform lateral start offset bound, meters.
    pub start_jitter: f64,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frame_count: 100,
            speed: 1.0,
            turn_rate: 0.5,
            profile: Profile::Straight,
            period: 100.0,
            start_jitter: 0.0,
            seed: 1,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 1 {
            return Err(Error::config("trajectory.frame_count", "must be >= 1"));
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(Error::config("trajectory.speed", "must be finite and >= 0"));
        }
        if !self.turn_rate.is_finite() {
            return Err(Error::config("trajectory.turn_rate", "must be finite"));
        }
        if !(self.period > 0.0) {
            return Err(Error::config("trajectory.period", "must be > 0"));
        }
        if !(self.start_jitter >= 0.0) {
            return Err(Error::config("trajectory.start_jitter", "must be >= 0"));
        }
        Ok(())
    }

    fn heading(&self, k: f64) -> f64 {
        let rate = self.turn_rate.to_radians();
        match self.profile {
            Profile::Straight => 0.0,
            Profile::Arc => rate * k,
            Profile::SCurve => {
                let w = std::f64::consts::TAU / self.period;
                rate / w * (w * k).sin()
            }
        }
    }
}

/// Level camera at `center` looking along `heading` (radians from +x).
pub fn camera_pose(center: Vec3, heading: f64) -> PoseSE3 {
    let (s, c) = heading.sin_cos();
    let r = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
    PoseSE3::from_rotation_matrix(&r, -(r * center))
}

pub fn generate_trajectory(cfg: &TrajectoryConfig) -> Trajectory {
    let y0 = if cfg.start_jitter > 0.0 {
        rng::seeded(cfg.seed, 0x7472616a).random_range(-cfg.start_jitter..=cfg.start_jitter)
    } else {
        0.0
    };
    let mut c = Vec3::new(0.0, y0, CAMERA_HEIGHT);
    let mut poses = Vec::with_capacity(cfg.frame_count);
    for k in 0..cfg.frame_count {
        let h = cfg.heading(k as f64);
        poses.push(camera_pose(c, h));
        // chord of a constant-curvature step has the mid heading
        let mid = 0.5 * (h + cfg.heading(k as f64 + 1.0));
        c += cfg.speed * Vec3::new(mid.cos(), mid.sin(), 0.0);
    }
    Trajectory::new(poses)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoOracleConfig {
    /// Degrees per frame, per axis.
    pub rot_drift_sigma: f64,
    /// Meters per frame, per axis.
    pub transl_drift_sigma: f64,
    pub seed: u64,
}

impl VoOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rot_drift_sigma >= 0.0) {
            return Err(Error::config("vo.rot_drift_sigma", "must be >= 0"));
        }
        if !(self.transl_drift_sigma >= 0.0) {
            return Err(Error::config("vo.transl_drift_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

/// Relative motions `rel_k` with `T_{k+1} = rel_k * T_k`, each corrupted by a
/// camera-frame Gaussian twist.
pub fn vo_oracle(gt: &Trajectory, cfg: &VoOracleConfig) -> Vec<PoseSE3> {
    if gt.len() < 2 {
        return Vec::new();
    }
    let mut r = rng::seeded(cfg.seed, 0x766f);
    let nr = Normal::new(0.0, cfg.rot_drift_sigma.to_radians()).expect("sigma");
    let nt = Normal::new(0.0, cfg.transl_drift_sigma).expect("sigma");
    gt.poses
        .windows(2)
        .map(|w| {
            let rel = w[1] * w[0].inverse();
            if cfg.rot_drift_sigma == 0.0 && cfg.transl_drift_sigma == 0.0 {
                return rel;
            }
            let noise: Twist = Vector6::from_fn(|i, _| if i < 3 { nr.sample(&mut r) } else { nt.sample(&mut r) });
            se3_exp(&noise) * rel
        })
        .collect()
}

/// Chains relative motions from `t0`.
pub fn integrate_vo(t0: &PoseSE3, rels: &[PoseSE3]) -> Trajectory {
    let mut poses = vec![*t0];
    for r in rels {
        let last = *poses.last().expect("non-empty");
        poses.push(*r * last);
    }
    Trajectory::new(poses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub max_transl: f64,
    pub max_rot_deg: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            max_transl: 1.0,
            max_rot_deg: 5.0,
            seed: 1,
        }
    }
}

impl InitConfig {
    pub fn bounds(&self) -> Result<PerturbBounds> {
        if !(self.max_transl >= 0.0) {
            return Err(Error::config("init.max_transl", "must be >= 0"));
        }
        if !(self.max_rot_deg >= 0.0) {
            return Err(Error::config("init.max_rot_deg", "must be >= 0"));
        }
        Ok(PerturbBounds::new(self.max_transl, self.max_rot_deg))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
    pub vo: VoOracleConfig,
    pub init: InitConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.trajectory.validate()?;
        self.vo.validate()?;
        self.init.bounds()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub map: GlobalMap,
    pub gt: Trajectory,
    /// Noisy relative motions between consecutive frames.
    pub vo: Vec<PoseSE3>,
    /// Pose prior for frame 0.
    pub t0: PoseSE3,
}

/// Map voxel size.
pub const MAP_RESOLUTION: f64 = 0.1;

impl Scenario {
    pub fn build(cfg: &ScenarioConfig, k: &CameraIntrinsics, extents: &CropExtents) -> Result<Self> {
        cfg.validate()?;
        let gt = generate_trajectory(&cfg.trajectory);
        let raw = GlobalMap::for_extents(generate_scene(&cfg.scene), extents);
        let map = downsample(&raw, MAP_RESOLUTION)?;
        let map = GlobalMap::for_extents(map.cloud, extents);
        let scenario = Self::from_parts(map, gt, cfg)?;
        scenario.check_visibility(k, extents)?;
        Ok(scenario)
    }

    /// Assembles a scenario around an existing map and ground truth.
    pub fn from_parts(map: GlobalMap, gt: Trajectory, cfg: &ScenarioConfig) -> Result<Self> {
        let vo = vo_oracle(&gt, &cfg.vo);
        let t0 = match gt.poses.first() {
            Some(p) => perturb_pose(p, &cfg.init.bounds()?, cfg.init.seed),
            None => PoseSE3::identity(),
        };
        Ok(Self { map, gt, vo, t0 })
    }

    /// Every ground-truth pose must see enough of the map.
    pub fn check_visibility(&self, k: &CameraIntrinsics, extents: &CropExtents) -> Result<()> {
        for (i, t) in self.gt.poses.iter().enumerate() {
            let n = render_depth(&crop_local(&self.map, t, extents), k, t).valid_count();
            if n < MIN_VISIBLE_PIXELS {
                return Err(Error::Degenerate(format!(
                    "frame {i} sees {n} map pixels, need {MIN_VISIBLE_PIXELS}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ate;
    use crate::geometry::{pose_error, rotation_angle};

    #[test]
    fn scene_examples() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg);
        assert!(!a.is_empty());
        assert!(a.points.iter().all(|p| p.z >= 0.0 && p.z <= 12.0));
        assert_eq!(a, generate_scene(&cfg));
        let empty = SceneConfig {
            ground_density: 0.0,
            facade_density: 0.0,
            pole_count: 0,
            ..cfg
        };
        assert!(generate_scene(&empty).is_empty());
        assert_ne!(a, generate_scene(&SceneConfig { seed: 2, ..cfg }));
    }

    #[test]
    fn camera_pose_looks_along_heading() {
        let c = Vec3::new(3.0, -2.0, CAMERA_HEIGHT);
        for h in [0.0, 0.7, -2.0] {
            let t = camera_pose(c, h);
            assert!((t.center() - c).norm() < 1e-12);
            let ahead = c + 10.0 * Vec3::new(h.cos(), h.sin(), 0.0);
            let p = t.transform_point(&ahead);
            assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9 && (p.z - 10.0).abs() < 1e-9);
            let up = t.transform_point(&(c + Vec3::z()));
            assert!((up.y + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_examples() {
        let straight = generate_trajectory(&TrajectoryConfig {
            frame_count: 10,
            ..Default::default()
        });
        for (i, t) in straight.poses.iter().enumerate() {
            assert!((t.center() - Vec3::new(i as f64, 0.0, CAMERA_HEIGHT)).norm() < 1e-12);
        }
        // frame 360 completes the circle
        let arc = generate_trajectory(&TrajectoryConfig {
            frame_count: 361,
            turn_rate: 1.0,
            profile: Profile::Arc,
            ..Default::default()
        });
        let back = arc.poses[0].rotation * arc.poses[360].rotation.inverse();
        assert!(rotation_angle(&back).to_degrees() < 1e-6);
        let one = generate_trajectory(&TrajectoryConfig {
            frame_count: 1,
            ..Default::default()
        });
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn step_length_equals_speed() {
        for profile in [Profile::Straight, Profile::Arc, Profile::SCurve] {
            let t = generate_trajectory(&TrajectoryConfig {
                frame_count: 200,
                speed: 1.3,
                turn_rate: 2.0,
                profile,
                ..Default::default()
            });
            for w in t.poses.windows(2) {
                assert!(((w[1].center() - w[0].center()).norm() - 1.3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn vo_examples() {
        let gt = generate_trajectory(&TrajectoryConfig {
            frame_count: 50,
            profile: Profile::SCurve,
            ..Default::default()
        });
        let rels = vo_oracle(&gt, &VoOracleConfig::default());
        let back = integrate_vo(&gt.poses[0], &rels);
        for (a, b) in back.poses.iter().zip(&gt.poses) {
            let e = pose_error(a, b);
            assert!(e.rot_deg < 1e-9 && e.transl_m < 1e-9);
        }
        assert!(vo_oracle(&gt.prefix(1), &VoOracleConfig::default()).is_empty());
        let noisy = VoOracleConfig {
            rot_drift_sigma: 0.1,
            transl_drift_sigma: 0.05,
            seed: 3,
        };
        assert_eq!(vo_oracle(&gt, &noisy), vo_oracle(&gt, &noisy));
    }

    #[test]
    fn vo_drift_grows_like_a_random_walk() {
        let gt = generate_trajectory(&TrajectoryConfig {
            frame_count: 401,
            ..Default::default()
        });
        let (mut e40, mut e400) = (0.0, 0.0);
        let seeds = 100;
        for seed in 0..seeds {
            let cfg = VoOracleConfig {
                rot_drift_sigma: 0.0,
                transl_drift_sigma: 0.05,
                seed,
            };
            let est = integrate_vo(&gt.poses[0], &vo_oracle(&gt, &cfg));
            e40 += (est.poses[40].center() - gt.poses[40].center()).norm();
            e400 += (est.poses[400].center() - gt.poses[400].center()).norm();
        }
        let ratio = e400 / e40;
        let want = 10f64.sqrt();
        assert!((ratio / want - 1.0).abs() < 0.3, "ratio {ratio}");
        assert!(e400 / seeds as f64 > 0.5);
        let _ = ate;
    }

    #[test]
    fn scenario_is_visible_and_deterministic() {
        let cfg = ScenarioConfig {
            trajectory: TrajectoryConfig {
                frame_count: 30,
                profile: Profile::SCurve,
                ..Default::default()
            },
            ..Default::default()
        };
        let k = CameraIntrinsics::default();
        let e = CropExtents::default();
        let a = Scenario::build(&cfg, &k, &e).unwrap();
        let b = Scenario::build(&cfg, &k, &e).unwrap();
        assert_eq!(a.map.cloud, b.map.cloud);
        assert_eq!(a.t0, b.t0);
        assert_eq!(a.vo.len(), 29);

        let bare = ScenarioConfig {
            scene: SceneConfig {
                ground_density: 0.0,
                facade_density: 0.0,
                pole_count: 1,
                ..Default::default()
            },
            ..cfg
        };
        assert!(matches!(Scenario::build(&bare, &k, &e), Err(Error::Degenerate(_))));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrajectoryConfig {
            frame_count: 0,
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "trajectory.frame_count"),
            other => panic!("{other:?}"),
        }
    }
}
