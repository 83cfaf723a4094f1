//! Multi-vehicle simulator on the loop map.
//!
//! Vehicles are kinematic bicycles with a directly commanded speed. Egos are
//! driven by external actions; slow vehicles track their lane centerline with
//! pure pursuit at a fixed speed. Collisions (vehicle-vehicle via separating
//! axes, vehicle-boundary via footprint corners) respawn the involved egos at
//! a free spot, so the world never carries an overlapping state across steps.

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::map::MapGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    /// Commanded speed, clamped to [v_min, v_max].
    pub speed: f64,
    /// Commanded steering angle, clamped to [delta_min, delta_max].
    pub steering: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    Ego,
    Slow,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub kind: VehicleKind,
    pub position: Vec2,
    /// World-frame heading, wrapped to (-pi, pi].
    pub heading: f64,
    pub speed: f64,
    /// Lane of the vehicle's center, updated after every step.
    pub current_lane: usize,
    /// Lane the vehicle intends to drive in; for egos this is the latest
    /// lane decision, for slow vehicles their fixed lane.
    pub target_lane: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub wheelbase: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Fixed speed of slow vehicles; must sit strictly inside (v_min, v_max).
    pub slow_speed: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub max_steps: u64,
    pub n_egos: usize,
    pub n_slow: usize,
    /// Spawn spacing: same-lane centers keep vehicle_length * (1 + this) apart.
    pub min_gap_factor: f64,
    /// Ego spawn jitter: uniform lateral offset bound in meters.
    pub spawn_lateral_jitter: f64,
    /// Ego spawn jitter: uniform heading offset bound in radians.
    pub spawn_heading_jitter: f64,
    /// Pure-pursuit lookahead distance for slow vehicles.
    pub pursuit_lookahead: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            wheelbase: 0.15,
            vehicle_length: 0.2,
            vehicle_width: 0.1,
            v_min: 0.0,
            v_max: 1.0,
            slow_speed: 0.3,
            delta_min: -0.5,
            delta_max: 0.5,
            max_steps: 512,
            n_egos: 4,
            n_slow: 0,
            min_gap_factor: 1.5,
            spawn_lateral_jitter: 0.06,
            spawn_heading_jitter: 0.25,
            pursuit_lookahead: 0.3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.v_min && self.v_min < self.slow_speed && self.slow_speed < self.v_max) {
            return Err(Error::Config(format!(
                "need 0 <= v_min < slow_speed < v_max, got {} / {} / {}",
                self.v_min, self.slow_speed, self.v_max
            )));
        }
        if !(self.delta_min < 0.0 && 0.0 < self.delta_max) {
            return Err(Error::Config(format!(
                "steering range must straddle zero, got [{}, {}]",
                self.delta_min, self.delta_max
            )));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("wheelbase", self.wheelbase),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_egos == 0 {
            return Err(Error::Config("need at least one ego".into()));
        }
        Ok(())
    }
}

/// Oriented rectangle footprint of a vehicle.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub center: Vec2,
    pub heading: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Footprint {
    pub fn of(v: &VehicleState, cfg: &SimConfig) -> Footprint {
        Footprint {
            center: v.position,
            heading: v.heading,
            half_len: cfg.vehicle_length / 2.0,
            half_wid: cfg.vehicle_width / 2.0,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::unit_from_angle(self.heading);
        let n = Vec2::new(-f.y, f.x);
        let l = f.scale(self.half_len);
        let w = n.scale(self.half_wid);
        [
            self.center.add(l).add(w),
            self.center.add(l).sub(w),
            self.center.sub(l).sub(w),
            self.center.sub(l).add(w),
        ]
    }

    fn axes(&self) -> [Vec2; 2] {
        let f = Vec2::unit_from_angle(self.heading);
        [f, Vec2::new(-f.y, f.x)]
    }
}

/// Minimal projection overlap across the four face normals of two rectangles.
/// Positive means the rectangles intersect (touching counts), negative is the
/// separation along the widest separating axis.
pub fn rect_overlap_depth(a: &Footprint, b: &Footprint) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let mut depth = f64::INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &ca {
            let d = p.dot(axis);
            amin = amin.min(d);
            amax = amax.max(d);
        }
        let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &cb {
            let d = p.dot(axis);
            bmin = bmin.min(d);
            bmax = bmax.max(d);
        }
        depth = depth.min(amax.min(bmax) - amin.max(bmin));
    }
    depth
}

pub fn rects_collide(a: &Footprint, b: &Footprint) -> bool {
    rect_overlap_depth(a, b) >= 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollisionEvent {
    AgentAgent { a: usize, b: usize },
    Boundary { vehicle: usize },
}

/// Per-ego outcome flags for a single step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EgoStepFlags {
    pub hit_agent: bool,
    pub hit_boundary: bool,
    pub respawned: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub collisions: Vec<CollisionEvent>,
    /// Indexed by ego slot (0..n_egos), not vehicle id.
    pub ego_flags: Vec<EgoStepFlags>,
    /// For respawned egos: the post-kinematics state at the moment of the
    /// collision, before teleporting. Rewards score this state, not the spawn.
    pub pre_respawn: Vec<Option<VehicleState>>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub map: MapGraph,
    pub cfg: SimConfig,
    /// Egos occupy slots 0..n_egos, slow vehicles the rest.
    pub vehicles: Vec<VehicleState>,
    pub step_index: u64,
    pub seed: u64,
}

/// Advance one vehicle by one step of the kinematic bicycle with direct speed
/// command: the heading updates first, then the position advances along the
/// new heading. With constant inputs the visited points lie on a circle.
pub fn step_kinematics(v: &VehicleState, action: ControlAction, cfg: &SimConfig) -> VehicleState {
    let speed = action.speed.clamp(cfg.v_min, cfg.v_max);
    let delta = action.steering.clamp(cfg.delta_min, cfg.delta_max);
    let heading = wrap_angle(v.heading + speed / cfg.wheelbase * delta.tan() * cfg.dt);
    let position = v.position.add(Vec2::unit_from_angle(heading).scale(speed * cfg.dt));
    VehicleState {
        position,
        heading,
        speed,
        ..*v
    }
}

/// Steering command tracking the own-lane centerline: aim at the point
/// `lookahead` meters ahead along the lane and steer onto the circle through it.
pub fn pure_pursuit(v: &VehicleState, map: &MapGraph, cfg: &SimConfig) -> Result<ControlAction> {
    let loc = map.locate_in_lane(v.position, v.target_lane)?;
    let target = map.center_point_at(
        v.target_lane,
        loc.arc_length + cfg.pursuit_lookahead,
    );
    let to = target.sub(v.position);
    let alpha = wrap_angle(to.y.atan2(to.x) - v.heading);
    let ld = to.norm().max(1e-6);
    let steering = (2.0 * cfg.wheelbase * alpha.sin() / ld)
        .atan()
        .clamp(cfg.delta_min, cfg.delta_max);
    Ok(ControlAction {
        speed: cfg.slow_speed,
        steering,
    })
}

/// Collision scan of the current vehicle set: all vehicle pairs by separating
/// axes, plus per-vehicle boundary checks (any footprint corner outside the
/// road band, or the center off the map entirely).
pub fn detect_collisions(map: &MapGraph, cfg: &SimConfig, vehicles: &[VehicleState]) -> Vec<CollisionEvent> {
    let mut events = Vec::new();
    let feet: Vec<Footprint> = vehicles.iter().map(|v| Footprint::of(v, cfg)).collect();
    for i in 0..vehicles.len() {
        for j in i + 1..vehicles.len() {
            if rects_collide(&feet[i], &feet[j]) {
                events.push(CollisionEvent::AgentAgent {
                    a: vehicles[i].id,
                    b: vehicles[j].id,
                });
            }
        }
    }
    for (v, foot) in vehicles.iter().zip(&feet) {
        if footprint_off_road(map, foot) {
            events.push(CollisionEvent::Boundary { vehicle: v.id });
        }
    }
    events
}

fn footprint_off_road(map: &MapGraph, foot: &Footprint) -> bool {
    let w = map.lane_width;
    for corner in foot.corners() {
        match map.locate(corner) {
            Err(_) => return true,
            Ok(loc) => {
                let beyond_inner = loc.lane_index == 0 && loc.lateral_offset > w / 2.0;
                let beyond_outer =
                    loc.lane_index == map.n_lanes - 1 && loc.lateral_offset < -w / 2.0;
                if beyond_inner || beyond_outer {
                    return true;
                }
            }
        }
    }
    false
}

impl World {
    /// Build a world with `n_egos + n_slow` vehicles placed collision-free.
    ///
    /// Egos start stationary with small lateral/heading jitter; slow vehicles
    /// start on their lane centerline at `slow_speed`. Placement is rejection
    /// sampled from a ChaCha8 stream, so equal seeds give equal worlds.
    pub fn spawn(map: MapGraph, cfg: SimConfig, seed: u64) -> Result<World> {
        cfg.validate()?;
        let n_total = cfg.n_egos + cfg.n_slow;
        let min_gap = cfg.vehicle_length * (1.0 + cfg.min_gap_factor);
        let capacity: usize = (0..map.n_lanes)
            .map(|l| (map.lane_length(l) / min_gap).floor() as usize)
            .sum();
        if n_total > capacity {
            return Err(Error::Capacity {
                requested: n_total,
                capacity,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = World {
            map,
            cfg,
            vehicles: Vec::with_capacity(n_total),
            step_index: 0,
            seed,
        };
        for slot in 0..n_total {
            let kind = if slot < world.cfg.n_egos {
                VehicleKind::Ego
            } else {
                VehicleKind::Slow
            };
            let v = world.place_vehicle(slot, kind, &mut rng)?;
            world.vehicles.push(v);
        }
        Ok(world)
    }

    /// Rejection-sample a collision-free pose for a new or respawning vehicle.
    fn place_vehicle(
        &self,
        id: usize,
        kind: VehicleKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<VehicleState> {
        let cfg = &self.cfg;
        let map = &self.map;
        let min_gap = cfg.vehicle_length * (1.0 + cfg.min_gap_factor);
        for _ in 0..1000 {
            let lane = rng.gen_range(0..map.n_lanes);
            let arc = rng.gen_range(0.0..map.lane_length(lane));
            let road_heading = map.heading_at(lane, arc);
            let (lateral, heading, speed) = match kind {
                VehicleKind::Ego => (
                    rng.gen_range(-cfg.spawn_lateral_jitter..=cfg.spawn_lateral_jitter),
                    wrap_angle(
                        road_heading
                            + rng.gen_range(-cfg.spawn_heading_jitter..=cfg.spawn_heading_jitter),
                    ),
                    0.0,
                ),
                VehicleKind::Slow => (0.0, road_heading, cfg.slow_speed),
            };
            let left = Vec2::unit_from_angle(road_heading + PI / 2.0);
            let position = map.center_point_at(lane, arc).add(left.scale(lateral));
            let candidate = VehicleState {
                id,
                kind,
                position,
                heading,
                speed,
                current_lane: lane,
                target_lane: lane,
            };
            let foot = Footprint::of(&candidate, cfg);
            let clear = self.vehicles.iter().filter(|o| o.id != id).all(|o| {
                let gap_ok = o.position.dist(position) >= min_gap
                    || o.current_lane != lane
                    || o.id == id;
                gap_ok && !rects_collide(&foot, &Footprint::of(o, cfg))
            });
            if clear && !footprint_off_road(map, &foot) {
                return Ok(candidate);
            }
        }
        Err(Error::Capacity {
            requested: self.vehicles.len() + 1,
            capacity: self.vehicles.len(),
        })
    }

    /// Record a lane decision for an ego; takes effect in observations,
    /// reference paths, and rewards from the next call onward.
    pub fn set_target_lane(&mut self, slot: usize, lane: usize) -> Result<()> {
        if lane >= self.map.n_lanes {
            return Err(Error::InvalidDecision {
                decision: lane,
                n_lanes: self.map.n_lanes,
            });
        }
        self.vehicles[slot].target_lane = lane;
        Ok(())
    }

    pub fn ego_count(&self) -> usize {
        self.cfg.n_egos
    }

    /// Advance every vehicle one step and resolve collisions.
    ///
    /// `ego_actions` has one entry per ego slot. Slow vehicles steer by pure
    /// pursuit on their fixed lane. Each ego involved in any collision is
    /// respawned at a free spot drawn from a stream derived from
    /// (world seed, step index, vehicle id), keeping replays bit-identical.
    pub fn step(&mut self, ego_actions: &[ControlAction]) -> Result<StepOutcome> {
        if ego_actions.len() != self.cfg.n_egos {
            return Err(Error::ShapeMismatch(format!(
                "got {} ego actions for {} egos",
                ego_actions.len(),
                self.cfg.n_egos
            )));
        }
        for a in ego_actions {
            if !a.speed.is_finite() || !a.steering.is_finite() {
                return Err(Error::NonFinite("ego action".into()));
            }
        }
        let cfg = self.cfg.clone();
        for slot in 0..self.vehicles.len() {
            let action = if slot < cfg.n_egos {
                ego_actions[slot]
            } else {
                pure_pursuit(&self.vehicles[slot], &self.map, &cfg)?
            };
            self.vehicles[slot] = step_kinematics(&self.vehicles[slot], action, &cfg);
        }
        self.step_index += 1;

        // Lane bookkeeping; an unlocatable center counts as a boundary hit below.
        for v in &mut self.vehicles {
            if let Ok(loc) = self.map.locate(v.position) {
                v.current_lane = loc.lane_index;
            }
        }

        let collisions = detect_collisions(&self.map, &cfg, &self.vehicles);
        let mut flags = vec![EgoStepFlags::default(); cfg.n_egos];
        for ev in &collisions {
            match *ev {
                CollisionEvent::AgentAgent { a, b } => {
                    for id in [a, b] {
                        if id < cfg.n_egos {
                            flags[id].hit_agent = true;
                        }
                    }
                }
                CollisionEvent::Boundary { vehicle } => {
                    if vehicle < cfg.n_egos {
                        flags[vehicle].hit_boundary = true;
                    }
                }
            }
        }
        let mut pre_respawn = vec![None; cfg.n_egos];
        for slot in 0..cfg.n_egos {
            let f = flags[slot];
            if f.hit_agent || f.hit_boundary {
                pre_respawn[slot] = Some(self.vehicles[slot]);
                let mut rng = self.respawn_rng(slot);
                let fresh = self.place_vehicle(slot, VehicleKind::Ego, &mut rng)?;
                self.vehicles[slot] = fresh;
                flags[slot].respawned = true;
            }
        }
        Ok(StepOutcome {
            collisions,
            ego_flags: flags,
            pre_respawn,
        })
    }

    /// Stateless respawn stream: a function of (seed, step, slot) only, so a
    /// replayed episode respawns identically without threading RNG state.
    fn respawn_rng(&self, slot: usize) -> ChaCha8Rng {
        let mix = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.step_index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add((slot as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
        ChaCha8Rng::seed_from_u64(mix)
    }
}
