//! Fixed-length observation vectors for the two policy levels.
//!
//! Layouts are frozen here and exported as a JSON schema with a content hash;
//! checkpoints refuse to load under a different hash. All entries are clamped
//! to [-1, 1].
//!
//! High level, length 33:
//!   [0..5)   ego: x, y (absolute / half_extent), heading/pi, speed/v_max, lane (±1)
//!   [5..33)  4 nearest vehicles x 7: rel x, rel y (ego frame / d_norm),
//!            rel heading/pi, speed/v_max, lane, arc distance / d_norm,
//!            is-ahead flag (±1). Missing slots: zeros with distance 1, flag 0.
//!
//! Low level, length 57:
//!   [0..5)   ego: x, y (absolute / half_extent), heading/pi, vx/v_max, vy/v_max
//!   [5..17)  6 reference waypoints, ego frame / d_norm
//!   [17]     signed lateral distance to the reference lane centerline / d_norm
//!   [18..22) nearest left boundary point, nearest right boundary point (ego frame / d_norm)
//!   [22..24) signed lateral distance to left (+) and right (-) boundary / d_norm
//!   [24..57) 3 nearest vehicles x 11: rel x, rel y, rel heading, speed, lane,
//!            longitudinal arc gap (signed, ahead positive), lateral road gap,
//!            2 waypoints of their own reference path (ego frame / d_norm).
//!            Missing slots: zeros with the longitudinal entry 1.
//!
//! "Distance" between vehicles is the modular arc-length gap measured in the
//! ego's current lane parametrization; Euclidean distance is ambiguous on a loop.

use crate::error::{Error, Result};
use crate::geom::{forward_mod, wrap_angle, Vec2};
use crate::map::ReferencePath;
use crate::sim::World;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

pub const HL_LEN: usize = 33;
pub const LL_LEN: usize = 57;
pub const HL_NEIGHBORS: usize = 4;
pub const LL_NEIGHBORS: usize = 3;
/// Waypoints consumed from the ego reference path.
pub const REF_POINTS: usize = 6;
/// Waypoints of a neighbor's own reference path embedded in its block.
pub const NEIGHBOR_REF_POINTS: usize = 2;

#[derive(Debug, Clone)]
pub struct ObsParams {
    /// Scale for relative positions and gaps, in meters.
    pub d_norm: f64,
    /// Arc spacing of reference waypoints, in meters.
    pub ref_spacing: f64,
}

impl Default for ObsParams {
    fn default() -> Self {
        ObsParams {
            d_norm: 2.0,
            ref_spacing: 0.2,
        }
    }
}

fn clamp1(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Lane index mapped onto [-1, 1]; lane 0 (inner) is -1.
fn lane_coord(lane: usize, n_lanes: usize) -> f64 {
    if n_lanes <= 1 {
        return 0.0;
    }
    2.0 * lane as f64 / (n_lanes - 1) as f64 - 1.0
}

/// Rotate a world-frame offset into the ego frame.
fn to_ego_frame(offset: Vec2, ego_heading: f64) -> Vec2 {
    offset.rotate(-ego_heading)
}

struct NeighborGap {
    slot: usize,
    /// Unsigned modular arc gap in the ego lane's parametrization.
    distance: f64,
    /// Signed gap: positive ahead of the ego, negative behind.
    signed: f64,
}

/// Arc gaps from the ego to every other vehicle, sorted by non-decreasing
/// unsigned gap with ties broken by vehicle id.
fn neighbor_gaps(world: &World, ego_slot: usize, ego_lane: usize, ego_arc: f64) -> Vec<NeighborGap> {
    let total = world.map.lane_length(ego_lane);
    let mut gaps: Vec<NeighborGap> = world
        .vehicles
        .iter()
        .enumerate()
        .filter(|(slot, _)| *slot != ego_slot)
        .filter_map(|(slot, v)| {
            let loc = world.map.locate_in_lane(v.position, ego_lane).ok()?;
            let fwd = forward_mod(ego_arc, loc.arc_length, total);
            let signed = if fwd <= total - fwd { fwd } else { fwd - total };
            Some(NeighborGap {
                slot,
                distance: signed.abs(),
                signed,
            })
        })
        .collect();
    gaps.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(world.vehicles[a.slot].id.cmp(&world.vehicles[b.slot].id))
    });
    gaps
}

/// Lane-selection observation: ego pose plus the four nearest vehicles.
pub fn observe_high(world: &World, ego_slot: usize, params: &ObsParams) -> Result<Vec<f64>> {
    let ego = &world.vehicles[ego_slot];
    let map = &world.map;
    let loc = map.locate(ego.position)?;
    let he = map.half_extent().max(1e-9);
    let v_max = world.cfg.v_max;

    let mut out = Vec::with_capacity(HL_LEN);
    out.push(clamp1(ego.position.x / he));
    out.push(clamp1(ego.position.y / he));
    out.push(clamp1(ego.heading / PI));
    out.push(clamp1(ego.speed / v_max));
    out.push(lane_coord(loc.lane_index, map.n_lanes));

    let gaps = neighbor_gaps(world, ego_slot, loc.lane_index, loc.arc_length);
    for k in 0..HL_NEIGHBORS {
        match gaps.get(k) {
            Some(g) => {
                let other = &world.vehicles[g.slot];
                let rel = to_ego_frame(other.position.sub(ego.position), ego.heading);
                let other_lane = map.locate(other.position).map(|l| l.lane_index).unwrap_or(0);
                out.push(clamp1(rel.x / params.d_norm));
                out.push(clamp1(rel.y / params.d_norm));
                out.push(clamp1(wrap_angle(other.heading - ego.heading) / PI));
                out.push(clamp1(other.speed / v_max));
                out.push(lane_coord(other_lane, map.n_lanes));
                out.push(clamp1(g.distance / params.d_norm));
                out.push(if g.signed >= 0.0 { 1.0 } else { -1.0 });
            }
            None => out.extend_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        }
    }
    debug_assert_eq!(out.len(), HL_LEN);
    check_finite(&out)?;
    Ok(out)
}

/// Lane-following observation: ego pose, reference waypoints, boundaries,
/// and the three nearest vehicles with their own path geometry.
pub fn observe_low(
    world: &World,
    ego_slot: usize,
    reference: &ReferencePath,
    params: &ObsParams,
) -> Result<Vec<f64>> {
    if reference.points.len() < REF_POINTS {
        return Err(Error::InsufficientReferencePath {
            got: reference.points.len(),
            need: REF_POINTS,
        });
    }
    let ego = &world.vehicles[ego_slot];
    let map = &world.map;
    let loc = map.locate(ego.position)?;
    let he = map.half_extent().max(1e-9);
    let v_max = world.cfg.v_max;
    let dn = params.d_norm;

    let mut out = Vec::with_capacity(LL_LEN);
    out.push(clamp1(ego.position.x / he));
    out.push(clamp1(ego.position.y / he));
    out.push(clamp1(ego.heading / PI));
    out.push(clamp1(ego.speed * ego.heading.cos() / v_max));
    out.push(clamp1(ego.speed * ego.heading.sin() / v_max));

    for p in reference.points.iter().take(REF_POINTS) {
        let rel = to_ego_frame(p.sub(ego.position), ego.heading);
        out.push(clamp1(rel.x / dn));
        out.push(clamp1(rel.y / dn));
    }

    let ref_offset = map.signed_offset_in_lane(ego.position, reference.target_lane)?;
    out.push(clamp1(ref_offset / dn));

    // Perpendicular feet on the current lane's edges.
    let w = map.lane_width;
    let center = map.center_point_at(loc.lane_index, loc.arc_length);
    let left_n = Vec2::unit_from_angle(map.heading_at(loc.lane_index, loc.arc_length) + PI / 2.0);
    let p_left = center.add(left_n.scale(w / 2.0));
    let p_right = center.add(left_n.scale(-w / 2.0));
    for p in [p_left, p_right] {
        let rel = to_ego_frame(p.sub(ego.position), ego.heading);
        out.push(clamp1(rel.x / dn));
        out.push(clamp1(rel.y / dn));
    }
    out.push(clamp1((w / 2.0 - loc.lateral_offset) / dn));
    out.push(clamp1(-(w / 2.0 + loc.lateral_offset) / dn));

    let ego_road_lat = map.road_lateral(&loc);
    let gaps = neighbor_gaps(world, ego_slot, loc.lane_index, loc.arc_length);
    for k in 0..LL_NEIGHBORS {
        match gaps.get(k) {
            Some(g) => {
                let other = &world.vehicles[g.slot];
                let rel = to_ego_frame(other.position.sub(ego.position), ego.heading);
                let other_loc = map.locate(other.position)?;
                out.push(clamp1(rel.x / dn));
                out.push(clamp1(rel.y / dn));
                out.push(clamp1(wrap_angle(other.heading - ego.heading) / PI));
                out.push(clamp1(other.speed / v_max));
                out.push(lane_coord(other_loc.lane_index, map.n_lanes));
                out.push(clamp1(g.signed / dn));
                out.push(clamp1((map.road_lateral(&other_loc) - ego_road_lat) / dn));
                let their_ref = map.reference_path_for(
                    other.position,
                    other.target_lane,
                    NEIGHBOR_REF_POINTS,
                    params.ref_spacing,
                )?;
                for p in &their_ref.points {
                    let rel = to_ego_frame(p.sub(ego.position), ego.heading);
                    out.push(clamp1(rel.x / dn));
                    out.push(clamp1(rel.y / dn));
                }
            }
            None => out.extend_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        }
    }
    debug_assert_eq!(out.len(), LL_LEN);
    check_finite(&out)?;
    Ok(out)
}

fn check_finite(values: &[f64]) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("observation entry {i} = {v}")));
        }
    }
    Ok(())
}

/// Canonical machine-readable description of both layouts, for decoding logs.
pub fn schema_json() -> String {
    let hl_entries = hl_entry_names();
    let ll_entries = ll_entry_names();
    let schema = serde_json::json!({
        "high_level": { "length": HL_LEN, "entries": hl_entries },
        "low_level": { "length": LL_LEN, "entries": ll_entries },
        "normalization": {
            "positions": "map half extent",
            "relative_positions_and_gaps": "d_norm",
            "angles": "pi",
            "speeds": "v_max",
            "lane": "affine onto [-1, 1], inner lane is -1",
        },
    });
    serde_json::to_string_pretty(&schema).expect("schema serialization")
}

/// Hex SHA-256 of the schema; stored in checkpoints to reject stale weights.
pub fn schema_hash() -> String {
    let mut hasher = Sha256::new();
    hasher.update(schema_json().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hl_entry_names() -> Vec<String> {
    let mut names = vec![
        "ego_x".into(),
        "ego_y".into(),
        "ego_heading".into(),
        "ego_speed".into(),
        "ego_lane".into(),
    ];
    for k in 0..HL_NEIGHBORS {
        for field in [
            "rel_x", "rel_y", "rel_heading", "speed", "lane", "distance", "is_ahead",
        ] {
            names.push(format!("vehicle{k}_{field}"));
        }
    }
    assert_eq!(names.len(), HL_LEN);
    names
}

fn ll_entry_names() -> Vec<String> {
    let mut names = vec![
        "ego_x".into(),
        "ego_y".into(),
        "ego_heading".into(),
        "ego_vx".into(),
        "ego_vy".into(),
    ];
    for k in 0..REF_POINTS {
        names.push(format!("ref{k}_x"));
        names.push(format!("ref{k}_y"));
    }
    names.push("ref_signed_distance".into());
    names.extend(
        ["left_bd_x", "left_bd_y", "right_bd_x", "right_bd_y", "d_left", "d_right"]
            .map(String::from),
    );
    for k in 0..LL_NEIGHBORS {
        for field in [
            "rel_x", "rel_y", "rel_heading", "speed", "lane", "long_gap", "lat_gap",
        ] {
            names.push(format!("vehicle{k}_{field}"));
        }
        for p in 0..NEIGHBOR_REF_POINTS {
            names.push(format!("vehicle{k}_ref{p}_x"));
            names.push(format!("vehicle{k}_ref{p}_y"));
        }
    }
    assert_eq!(names.len(), LL_LEN);
    names
}
