//! Experiment configuration (TOML) and run manifests (JSON).
//!
//! ```toml
//! seed = 7                     # optional; derives every component seed
//!
//! [scene]
//! extent = 250.0
//! [trajectory]
//! frame_count = 100
//! profile = "s_curve"
//! [vo]
//! transl_drift_sigma = 0.05
//! [init]
//! max_transl = 1.0
//!
//! [[outages]]
//! start = 40
//! len = 3
//! target = "current_depth"     # or "all"
//!
//! [tracker]
//! mode = "multi_view"
//! [tracker.noise.n2d]
//! gaussian_sigma = 1.0
//!
//! [ablate]
//! modes = ["frame_by_frame", "loose_coupled", "multi_view"]
//! runs = 1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::flow::FlowNoiseModel;
use crate::geometry::PoseSE3;
use crate::rng::mix;
use crate::synth::{InitConfig, ScenarioConfig, SceneConfig, TrajectoryConfig, VoOracleConfig};
use crate::tracker::{Mode, Outage, TrackerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub modes: Vec<Mode>,
    /// Paired runs per mode, each on its own derived seed.
    pub runs: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            runs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
    pub vo: VoOracleConfig,
    pub init: InitConfig,
    pub outages: Vec<Outage>,
    pub tracker: TrackerConfig,
    pub ablate: AblateConfig,
    pub eval: EvalOptions,
}

fn set_noise_seed(m: &mut FlowNoiseModel, seed: u64) {
    m.seed = seed;
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            let field = e.span().map(|sp| s[sp].lines().next().unwrap_or("").trim().to_string()).unwrap_or_default();
            Error::config(field, msg)
        })?;
        Ok(cfg.resolved())
    }

    /// Reads a TOML config, or the config snapshot of a JSON manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        if text.trim_start().starts_with('{') {
            let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::config("manifest", e.to_string()))?;
            return Ok(m.config);
        }
        Self::from_toml_str(&text)
    }

    /// Replaces every component seed by one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.resolved()
    }

    /// Expands a top-level seed into the component seeds and clears it, so
    /// the result records every seed explicitly.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed.take() {
            self.scene.seed = mix(s, 1);
            self.trajectory.seed = mix(s, 2);
            self.vo.seed = mix(s, 3);
            self.init.seed = mix(s, 4);
            self.tracker.ransac.seed = mix(s, 5);
            set_noise_seed(&mut self.tracker.noise.c2d, mix(s, 6));
            set_noise_seed(&mut self.tracker.noise.n2d, mix(s, 7));
            set_noise_seed(&mut self.tracker.noise.c2n, mix(s, 8));
        }
        self
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            scene: self.scene,
            trajectory: self.trajectory,
            vo: self.vo,
            init: self.init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario().validate()?;
        self.tracker.validate()?;
        for (i, o) in self.outages.iter().enumerate() {
            if o.len == 0 {
                return Err(Error::config(format!("outages[{i}].len"), "must be >= 1"));
            }
        }
        if self.ablate.modes.is_empty() {
            return Err(Error::config("ablate.modes", "must list at least one mode"));
        }
        if self.ablate.runs == 0 {
            return Err(Error::config("ablate.runs", "must be >= 1"));
        }
        if self.eval.rpe_delta == 0 {
            return Err(Error::config("eval.rpe_delta", "must be >= 1"));
        }
        if !(self.eval.fail_threshold > 0.0) {
            return Err(Error::config("eval.fail_threshold", "must be > 0"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Everything needed to reproduce a command's primary outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    /// Input and output files, relative to the working directory as given.
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub stage_ms: Vec<(String, f64)>,
    pub parallel: bool,
    /// Carried pose prior for frame 0, KITTI row order, camera-to-world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<Vec<f64>>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            tool: "crossloc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            stage_ms: Vec::new(),
            parallel: crate::exec::is_parallel(),
            t0: None,
        }
    }

    pub fn set_t0(&mut self, t: &PoseSE3) {
        let m = t.inverse().to_matrix3x4();
        self.t0 = Some((0..3).flat_map(|i| (0..4).map(move |j| m[(i, j)])).collect());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::config("manifest", e.to_string()))?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config("manifest", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::OutageTarget;

    #[test]
    fn parses_documented_example() {
        let src = r#"
seed = 7
[scene]
extent = 300.0
[trajectory]
frame_count = 20
profile = "s_curve"
[[outages]]
start = 5
len = 3
[[outages]]
start = 9
len = 1
target = "all"
[tracker]
mode = "frame_by_frame"
[tracker.noise.n2d]
gaussian_sigma = 4.0
outlier_fraction = 0.2
[ablate]
modes = ["multi_view"]
"#;
        let c = ExperimentConfig::from_toml_str(src).unwrap();
        assert_eq!(c.seed, None);
        assert_eq!(c.scene.extent, 300.0);
        assert_eq!(c.scene.seed, mix(7, 1));
        assert_eq!(c.outages.len(), 2);
        assert_eq!(c.outages[0].target, OutageTarget::CurrentDepth);
        assert_eq!(c.outages[1].target, OutageTarget::All);
        assert_eq!(c.tracker.mode, Mode::FrameByFrame);
        assert_eq!(c.tracker.noise.n2d.gaussian_sigma, 4.0);
        assert_eq!(c.tracker.noise.c2d.gaussian_sigma, 0.0);
        assert_eq!(c.ablate.modes, vec![Mode::MultiView]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[scene]\nextnt = 3.0\n"),
            Err(Error::Config { .. })
        ));
        let c = ExperimentConfig::from_toml_str("[trajectory]\nframe_count = 0\n").unwrap();
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "trajectory.frame_count"),
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig::from_toml_str("[tracker.noise.c2d]\ndropout_fraction = 1.5\n").unwrap();
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "noise.c2d.dropout_fraction"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toml_and_manifest_round_trip() {
        let c = ExperimentConfig::default().with_seed(3);
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let mut m = Manifest::new("synth", &c);
        m.set_t0(&PoseSE3::identity());
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
        assert_eq!(ExperimentConfig::load(&p).unwrap(), c);
    }
}
