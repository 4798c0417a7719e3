//! Experiment configuration. Every tunable has a named key with a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::estimator::{FrontendConfig, WindowConfig};
use crate::imu::ImuParams;
use crate::loopclosure::LoopConfig;
use crate::marginal::MarginalOptions;
use crate::solver::SolverOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Timestamp association tolerance [s].
    pub association_tolerance: f64,
    /// RPE bucket distances [m].
    pub rpe_buckets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            association_tolerance: 0.01,
            rpe_buckets: vec![10.0, 40.0, 90.0, 160.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub window: WindowConfig,
    pub frontend: FrontendConfig,
    pub solver: SolverOptions,
    /// Options of the background full-graph optimization.
    pub loop_solver: SolverOptions,
    pub marginal: MarginalOptions,
    pub imu: ImuParams,
    /// Overrides the rig stored with the dataset.
    pub rig: Option<CameraRig>,
    pub loop_closure: LoopConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            frontend: FrontendConfig::default(),
            solver: SolverOptions::default(),
            loop_solver: SolverOptions {
                max_iterations: 50,
                function_tolerance: 1e-6,
                ..SolverOptions::default()
            },
            marginal: MarginalOptions::default(),
            imu: ImuParams::default(),
            rig: None,
            loop_closure: LoopConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.imu.validate()?;
        self.loop_closure.validate()?;
        let f = &self.frontend;
        let pos = [f.pixel_sigma, f.match_gate_px, f.triangulation_gate_sigma, f.gap_max];
        if !pos.iter().all(|v| v.is_finite() && *v > 0.0) || f.init_samples == 0 || f.min_parallax_deg < 0.0 {
            return Err(Error::Config("invalid frontend parameters".into()));
        }
        for s in [&self.solver, &self.loop_solver] {
            if s.max_iterations == 0 || s.initial_damping.is_nan() || s.initial_damping < 0.0 {
                return Err(Error::Config("invalid solver options".into()));
            }
            if s.cauchy_scale.is_some_and(|b| !(b > 0.0)) {
                return Err(Error::Config("cauchy_scale must be positive".into()));
            }
        }
        let m = &self.marginal;
        if m.min_joint_observations == 0 || !(m.gate_sigma > 0.0) || !(m.pinv_tolerance > 0.0) {
            return Err(Error::Config("invalid marginalization options".into()));
        }
        let e = &self.eval;
        if !(e.association_tolerance > 0.0) || e.rpe_buckets.is_empty() || e.rpe_buckets.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("invalid evaluation options".into()));
        }
        if let Some(rig) = &self.rig {
            rig.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_empty_object_is_default() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let empty: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, cfg);
        assert_eq!(cfg.window.recent, 3);
        assert_eq!(cfg.window.max_keyframes, 5);
        assert_eq!(cfg.window.max_loop_frames, 5);
        assert_eq!(cfg.window.a_min, 12);
        assert_eq!(cfg.window.delta_t, 2.0);
        assert_eq!(cfg.loop_solver.max_iterations, 50);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = Config::default();
        cfg.window.recent = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let bad: std::result::Result<Config, _> = serde_json::from_str(r#"{"windw": {}}"#);
        assert!(bad.is_err());
    }
}
