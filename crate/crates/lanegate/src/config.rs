//! Run configuration: one TOML file covering map, sim, rewards, training and
//! evaluation. Every section falls back to defaults, so a partial file (or
//! none) is a valid run description. A sha256 content hash of the canonical
//! serialization identifies the configuration a run was produced with.

use crate::error::{Error, Result};
use crate::map::{build_loop_map, MapGraph};
use crate::reward::{HLRewardConfig, LLRewardConfig};
use crate::sim::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub n_lanes: usize,
    pub lane_width: f64,
    pub straight_length: f64,
    pub curve_radius: f64,
    pub lanelet_length: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            n_lanes: 2,
            lane_width: 0.3,
            straight_length: 2.0,
            curve_radius: 1.0,
            lanelet_length: 0.25,
        }
    }
}

impl MapConfig {
    pub fn build(&self) -> Result<MapGraph> {
        build_loop_map(
            self.n_lanes,
            self.lane_width,
            self.straight_length,
            self.curve_radius,
            self.lanelet_length,
        )
    }
}

/// PPO hyperparameters. Epoch count, batch shape, clip range, entropy weight
/// and the linear learning-rate ramp match the written-down training setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub entropy_epsilon: f64,
    pub value_coeff: f64,
    pub num_epochs: usize,
    pub minibatch_size: usize,
    pub frames_per_batch: usize,
    pub n_iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_grad_norm: f64,
    /// Entropy weight for the continuous-action experts. The categorical
    /// gate keeps entropy_epsilon; at that scale a Gaussian's bonus outruns
    /// the policy gradient and parks the action mean on an actuator rail.
    pub expert_entropy_epsilon: f64,
    /// Ego count while training experts. One isolates the lane-following
    /// task; a crowd all pinned to the same target lane punishes compliance.
    pub expert_egos: usize,
    /// Slow traffic present while training experts (off: lane work only).
    pub expert_slow_vehicles: usize,
    /// Slow traffic present while training the gate.
    pub gate_slow_vehicles: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 0.9,
            clip_epsilon: 0.1,
            entropy_epsilon: 0.1,
            value_coeff: 0.5,
            num_epochs: 70,
            minibatch_size: 512,
            frames_per_batch: 4096,
            n_iters: 200,
            lr_start: 1e-4,
            lr_end: 1e-5,
            max_grad_norm: 1.0,
            expert_entropy_epsilon: 0.01,
            expert_egos: 1,
            expert_slow_vehicles: 0,
            gate_slow_vehicles: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.gamma) || !in_unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must be in (0, 1]".into()));
        }
        if self.clip_epsilon <= 0.0 || self.clip_epsilon >= 1.0 {
            return Err(Error::Config("clip_epsilon must be in (0, 1)".into()));
        }
        if self.entropy_epsilon < 0.0 || self.expert_entropy_epsilon < 0.0 || self.value_coeff < 0.0
        {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        if self.num_epochs == 0 || self.n_iters == 0 {
            return Err(Error::Config("num_epochs and n_iters must be positive".into()));
        }
        if self.expert_egos == 0 {
            return Err(Error::Config("expert_egos must be positive".into()));
        }
        if self.minibatch_size == 0 || self.frames_per_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.minibatch_size > self.frames_per_batch {
            return Err(Error::Config(
                "minibatch_size cannot exceed frames_per_batch".into(),
            ));
        }
        if self.lr_end <= 0.0 || self.lr_start < self.lr_end {
            return Err(Error::Config(
                "learning rate must ramp down: lr_start >= lr_end > 0".into(),
            ));
        }
        if self.max_grad_norm <= 0.0 {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Steps per evaluation episode.
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Post-change steps a lane decision must hold to count as completed.
    pub consistency_window: usize,
    pub sweep_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 2000,
            seeds: vec![0, 1, 2, 3, 4, 5],
            consistency_window: 10,
            sweep_thresholds: vec![2.0, 1.5, 1.0, 0.5],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.seeds.is_empty() {
            return Err(Error::Config("eval needs steps > 0 and at least one seed".into()));
        }
        if self.consistency_window == 0 {
            return Err(Error::Config("consistency_window must be positive".into()));
        }
        if self.sweep_thresholds.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::Config("sweep thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub map: MapConfig,
    pub sim: SimConfig,
    pub hl_reward: HLRewardConfig,
    pub ll_reward: LLRewardConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.map.n_lanes < 2 {
            return Err(Error::Config("need at least two lanes".into()));
        }
        self.sim.validate()?;
        self.hl_reward.validate()?;
        self.ll_reward.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// sha256 over the canonical TOML serialization; robust to how the
    /// source file was formatted.
    pub fn content_hash(&self) -> Result<String> {
        let canon = self.to_toml_string()?;
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}
