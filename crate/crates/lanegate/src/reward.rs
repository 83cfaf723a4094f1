//! Per-step rewards for the two policy levels.
//!
//! The high-level reward scores lane decisions: collisions, lane-change cost,
//! and whether the chosen lane is blocked by a slow vehicle. The low-level
//! reward scores driving quality as eight named components whose sum is the
//! scalar reward exactly (the components are logged per step).

use crate::error::{Error, Result};
use crate::geom::forward_mod;
use crate::map::ReferencePath;
use crate::sim::{ControlAction, EgoStepFlags, VehicleKind, VehicleState, World};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HLRewardConfig {
    pub collision_penalty: f64,
    pub lane_change_penalty: f64,
    pub risky_lane_coeff: f64,
    pub safe_lane_reward: f64,
    /// d_safe: forward gap below which a slow vehicle ahead makes a lane risky.
    pub safety_threshold: f64,
}

impl Default for HLRewardConfig {
    fn default() -> Self {
        HLRewardConfig {
            collision_penalty: -20.0,
            lane_change_penalty: -0.5,
            risky_lane_coeff: -5.0,
            safe_lane_reward: 0.1,
            safety_threshold: 1.0,
        }
    }
}

impl HLRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collision_penalty > 0.0
            || self.lane_change_penalty > 0.0
            || self.risky_lane_coeff > 0.0
        {
            return Err(Error::Config("high-level penalties must be <= 0".into()));
        }
        if self.safe_lane_reward < 0.0 {
            return Err(Error::Config("safe_lane_reward must be >= 0".into()));
        }
        if !(self.safety_threshold > 0.0) {
            return Err(Error::Config("safety_threshold must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LLRewardConfig {
    pub boundary_collision_penalty: f64,
    pub agent_collision_penalty: f64,
    /// Per meter of intrusion below proximity_threshold.
    pub proximity_coeff: f64,
    pub proximity_threshold: f64,
    /// Per meter of lateral deviation once driving on the target lane.
    pub centerline_dev_coeff: f64,
    /// Per meter of perpendicular distance to the reference lane centerline.
    pub refpath_dev_coeff: f64,
    /// Per radian of steering change between consecutive actions.
    pub steering_rate_coeff: f64,
    /// Per meter of forward arc progress.
    pub forward_coeff: f64,
    /// Applied to speed / v_max.
    pub speed_coeff: f64,
}

impl Default for LLRewardConfig {
    // Adherence must dominate progress: a vehicle one lane off its reference
    // (0.3 m) must lose more per step than full-speed driving can earn, or
    // the expert learns "drive fast anywhere".
    fn default() -> Self {
        LLRewardConfig {
            boundary_collision_penalty: -30.0,
            agent_collision_penalty: -40.0,
            proximity_coeff: -5.0,
            proximity_threshold: 0.4,
            centerline_dev_coeff: -4.0,
            refpath_dev_coeff: -12.0,
            steering_rate_coeff: -0.5,
            forward_coeff: 4.0,
            speed_coeff: 0.05,
        }
    }
}

impl LLRewardConfig {
    pub fn validate(&self) -> Result<()> {
        let penalties = [
            self.boundary_collision_penalty,
            self.agent_collision_penalty,
            self.proximity_coeff,
            self.centerline_dev_coeff,
            self.refpath_dev_coeff,
            self.steering_rate_coeff,
        ];
        if penalties.iter().any(|p| *p > 0.0) {
            return Err(Error::Config("low-level penalty coefficients must be <= 0".into()));
        }
        if self.forward_coeff < 0.0 || self.speed_coeff < 0.0 {
            return Err(Error::Config("low-level reward coefficients must be >= 0".into()));
        }
        if !(self.proximity_threshold > 0.0) {
            return Err(Error::Config("proximity_threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Forward arc gap to the nearest slow vehicle in the ego's current lane,
/// or None when that lane holds no slow vehicle.
fn nearest_slow_ahead(world: &World, ego: &VehicleState) -> Result<Option<f64>> {
    let map = &world.map;
    let loc = map.locate(ego.position)?;
    let total = map.lane_length(loc.lane_index);
    let mut best: Option<f64> = None;
    for v in &world.vehicles {
        if v.kind != VehicleKind::Slow {
            continue;
        }
        let Ok(vloc) = map.locate(v.position) else { continue };
        if vloc.lane_index != loc.lane_index {
            continue;
        }
        let in_lane = map.locate_in_lane(v.position, loc.lane_index)?;
        let gap = forward_mod(loc.arc_length, in_lane.arc_length, total);
        best = Some(best.map_or(gap, |b: f64| b.min(gap)));
    }
    Ok(best)
}

/// Lane-decision reward: collision and lane-change penalties plus a lane
/// occupancy term. A slow vehicle ahead within `safety_threshold` makes the
/// lane risky with penalty growing linearly as the gap shrinks; otherwise the
/// lane pays the (possibly zero) safe-lane reward.
pub fn reward_high(
    world_after: &World,
    ego: &VehicleState,
    hit_agent: bool,
    decision_prev: usize,
    decision_now: usize,
    cfg: &HLRewardConfig,
) -> Result<f64> {
    let n = world_after.map.n_lanes;
    for d in [decision_prev, decision_now] {
        if d >= n {
            return Err(Error::InvalidDecision { decision: d, n_lanes: n });
        }
    }
    let mut r = 0.0;
    if hit_agent {
        r += cfg.collision_penalty;
    }
    if decision_now != decision_prev {
        r += cfg.lane_change_penalty;
    }
    let d_safe = cfg.safety_threshold;
    match nearest_slow_ahead(world_after, ego)? {
        Some(d) if d < d_safe => r += cfg.risky_lane_coeff * (d_safe - d) / d_safe,
        _ => r += cfg.safe_lane_reward,
    }
    Ok(r)
}

/// The eight Table-style components of the driving reward. `total()` is their
/// exact sum and is what training consumes; the breakdown goes to trace logs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LowRewardComponents {
    pub boundary_collision: f64,
    pub agent_collision: f64,
    pub proximity: f64,
    pub centerline: f64,
    pub ref_deviation: f64,
    pub steering_rate: f64,
    pub forward: f64,
    pub speed: f64,
}

impl LowRewardComponents {
    pub fn total(&self) -> f64 {
        self.boundary_collision
            + self.agent_collision
            + self.proximity
            + self.centerline
            + self.ref_deviation
            + self.steering_rate
            + self.forward
            + self.speed
    }
}

/// Driving reward for one ego transition.
///
/// `before`/`after` are the ego states around the step; pass the pre-respawn
/// state from the step outcome as `after` when the ego crashed, so progress
/// and deviations score the physical motion rather than the teleport.
#[allow(clippy::too_many_arguments)]
pub fn reward_low(
    world_after: &World,
    before: &VehicleState,
    after: &VehicleState,
    flags: EgoStepFlags,
    action_prev: ControlAction,
    action_now: ControlAction,
    reference: &ReferencePath,
    cfg: &LLRewardConfig,
) -> Result<LowRewardComponents> {
    let map = &world_after.map;
    let mut c = LowRewardComponents::default();

    if flags.hit_boundary {
        c.boundary_collision = cfg.boundary_collision_penalty;
    }
    if flags.hit_agent {
        c.agent_collision = cfg.agent_collision_penalty;
    }

    // Nearest other vehicle by center distance (crash-avoidance shaping is
    // about physical closeness, not along-lane gaps).
    let mut nearest = f64::INFINITY;
    for v in &world_after.vehicles {
        if v.id == after.id {
            continue;
        }
        nearest = nearest.min(v.position.dist(after.position));
    }
    if nearest < cfg.proximity_threshold {
        c.proximity = cfg.proximity_coeff * (cfg.proximity_threshold - nearest);
    }

    let lane = reference.target_lane;
    let off_target = map.signed_offset_in_lane(after.position, lane)?;
    c.ref_deviation = cfg.refpath_dev_coeff * off_target.abs();
    // Centerline keeping is only scored once the vehicle drives on its
    // decided lane; during the change the reference term dominates.
    if let Ok(loc) = map.locate(after.position) {
        if loc.lane_index == lane {
            c.centerline = cfg.centerline_dev_coeff * loc.lateral_offset.abs();
        }
    }

    c.steering_rate = cfg.steering_rate_coeff * (action_now.steering - action_prev.steering).abs();

    // Signed forward progress measured along the decided lane.
    let total = map.lane_length(lane);
    let s0 = map.locate_in_lane(before.position, lane)?.arc_length;
    let s1 = map.locate_in_lane(after.position, lane)?.arc_length;
    let fwd = forward_mod(s0, s1, total);
    let progress = if fwd <= total - fwd { fwd } else { fwd - total };
    c.forward = cfg.forward_coeff * progress;

    c.speed = cfg.speed_coeff * after.speed / world_after.cfg.v_max;
    Ok(c)
}
