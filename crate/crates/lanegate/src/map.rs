//! Closed two-lane loop road map built from lanelets.
//!
//! The map is a stadium-shaped loop (two straights joined by two semicircular
//! arcs) discretized into short lanelets per lane. Lane 0 is the inner (left)
//! lane relative to the counterclockwise travel direction, lane `n-1` the
//! outermost. Every query is a pure function of the immutable [`MapGraph`].
//!
//! Positions along a lane are tracked as arc length modulo that lane's total
//! centerline length; "ahead" always means forward modular distance.

use crate::error::{Error, Result};
use crate::geom::{project_on_segment, wrap_angle, Vec2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Target spacing between stored polyline points, in meters.
const POINT_SPACING: f64 = 0.05;

/// A short atomic road segment: centerline plus left/right boundary samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lanelet {
    pub id: usize,
    pub lane_index: usize,
    /// Arc length of the first centerline point, in this lane's parametrization.
    pub arc_start: f64,
    /// Centerline arc length covered by this lanelet.
    pub arc_len: f64,
    pub successor_id: usize,
    /// Adjacent lanelet in a neighboring lane covering the same normalized span.
    pub neighbor_id: Option<usize>,
    pub centerline: Vec<Vec2>,
    pub left_boundary: Vec<Vec2>,
    pub right_boundary: Vec<Vec2>,
}

/// Geometry parameters of the builtin stadium loop; kept on the map so that
/// queries can use exact closed-form projections instead of polyline search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StadiumSpec {
    pub straight_length: f64,
    pub curve_radius: f64,
    pub lanelet_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapGraph {
    pub n_lanes: usize,
    pub lane_width: f64,
    /// Centerline arc length of lane 0.
    pub loop_length: f64,
    /// Centerline arc length per lane.
    pub lane_lengths: Vec<f64>,
    pub lanelets: Vec<Lanelet>,
    /// Present for maps built by [`build_loop_map`]; absent for maps loaded
    /// from external JSON, which fall back to polyline projection.
    pub stadium: Option<StadiumSpec>,
    /// Lanelet ids per lane, ordered by `arc_start`.
    #[serde(skip)]
    by_lane: Vec<Vec<usize>>,
    /// Cached bounding-box half extent, rebuilt with the index.
    #[serde(skip)]
    half_extent: f64,
}

/// Result of projecting a position onto the road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Located {
    pub lanelet_id: usize,
    pub lane_index: usize,
    /// Arc length along the lane's centerline, in [0, lane_length).
    pub arc_length: f64,
    /// Perpendicular offset from the lane centerline; positive toward the left boundary.
    pub lateral_offset: f64,
}

/// Short forward sequence of centerline waypoints in the decided target lane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferencePath {
    pub points: Vec<Vec2>,
    pub target_lane: usize,
    pub source_lanelet_id: usize,
}

/// Build a closed stadium loop with `n_lanes` concentric lanes.
///
/// The loop runs counterclockwise: two straights of `straight_length` parallel
/// to the x axis joined by semicircles of `curve_radius` (measured to the
/// lane-0 centerline) centered at (±straight_length/2, 0). Lane `i`'s
/// centerline sits `i * lane_width` outside lane 0's.
pub fn build_loop_map(
    n_lanes: usize,
    lane_width: f64,
    straight_length: f64,
    curve_radius: f64,
    lanelet_length: f64,
) -> Result<MapGraph> {
    if n_lanes < 2 {
        return Err(Error::InvalidGeometry(format!(
            "need at least 2 lanes, got {n_lanes}"
        )));
    }
    for (name, v) in [
        ("lane_width", lane_width),
        ("straight_length", straight_length),
        ("curve_radius", curve_radius),
        ("lanelet_length", lanelet_length),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidGeometry(format!("{name} must be positive, got {v}")));
        }
    }
    if lanelet_length >= straight_length {
        return Err(Error::InvalidGeometry(format!(
            "lanelet_length {lanelet_length} must be smaller than straight_length {straight_length}"
        )));
    }
    if curve_radius <= lane_width * n_lanes as f64 {
        return Err(Error::InvalidGeometry(format!(
            "curve_radius {curve_radius} must exceed lane_width * n_lanes = {}",
            lane_width * n_lanes as f64
        )));
    }

    let spec = StadiumSpec {
        straight_length,
        curve_radius,
        lanelet_length,
    };
    let lane0_len = 2.0 * straight_length + 2.0 * PI * curve_radius;
    let n_lanelets = (lane0_len / lanelet_length).round().max(4.0) as usize;

    let lane_lengths: Vec<f64> = (0..n_lanes)
        .map(|i| 2.0 * straight_length + 2.0 * PI * (curve_radius + i as f64 * lane_width))
        .collect();

    let mut lanelets = Vec::with_capacity(n_lanes * n_lanelets);
    for lane in 0..n_lanes {
        let total = lane_lengths[lane];
        let seg_len = total / n_lanelets as f64;
        let r_center = curve_radius + lane as f64 * lane_width;
        let pts_per = ((seg_len / POINT_SPACING).ceil() as usize).max(2) + 1;
        for k in 0..n_lanelets {
            let arc_start = k as f64 * seg_len;
            let at = |j: usize| {
                let frac = j as f64 / (pts_per - 1) as f64;
                arc_start + frac * seg_len
            };
            let centerline: Vec<Vec2> =
                (0..pts_per).map(|j| stadium_point_at(&spec, r_center, at(j))).collect();
            // Boundaries sit lane_width/2 along the centerline normal; left is
            // toward the loop interior for counterclockwise travel.
            let boundary = |side: f64| -> Vec<Vec2> {
                (0..pts_per)
                    .map(|j| {
                        let s = at(j);
                        let p = stadium_point_at(&spec, r_center, s);
                        let heading = stadium_heading_at(&spec, r_center, s);
                        p.add(Vec2::unit_from_angle(heading + PI / 2.0).scale(side))
                    })
                    .collect()
            };
            let left_boundary = boundary(lane_width / 2.0);
            let right_boundary = boundary(-lane_width / 2.0);
            let id = lane * n_lanelets + k;
            let successor_id = lane * n_lanelets + (k + 1) % n_lanelets;
            let neighbor_id = if n_lanes == 2 {
                Some((1 - lane) * n_lanelets + k)
            } else if lane + 1 < n_lanes {
                Some((lane + 1) * n_lanelets + k)
            } else {
                Some((lane - 1) * n_lanelets + k)
            };
            lanelets.push(Lanelet {
                id,
                lane_index: lane,
                arc_start,
                arc_len: seg_len,
                successor_id,
                neighbor_id,
                centerline,
                left_boundary,
                right_boundary,
            });
        }
    }

    let mut map = MapGraph {
        n_lanes,
        lane_width,
        loop_length: lane0_len,
        lane_lengths,
        lanelets,
        stadium: Some(spec),
        by_lane: Vec::new(),
        half_extent: 0.0,
    };
    map.rebuild_index();
    Ok(map)
}

/// Centerline length of the loop at spine distance `r`.
fn lane_length_for(spec: &StadiumSpec, r: f64) -> f64 {
    2.0 * spec.straight_length + 2.0 * PI * r
}

/// Point on the loop at spine distance `r` and arc length `s` (parametrized
/// for that radius). Arc length 0 is the start of the bottom straight at
/// (-straight/2, -r); travel is counterclockwise.
fn stadium_point_at(spec: &StadiumSpec, r: f64, s: f64) -> Vec2 {
    let h = spec.straight_length / 2.0;
    let total = lane_length_for(spec, r);
    let mut s = s % total;
    if s < 0.0 {
        s += total;
    }
    let straight = spec.straight_length;
    let arc = PI * r;
    if s < straight {
        Vec2::new(-h + s, -r)
    } else if s < straight + arc {
        let theta = -PI / 2.0 + (s - straight) / r;
        Vec2::new(h + r * theta.cos(), r * theta.sin())
    } else if s < 2.0 * straight + arc {
        Vec2::new(h - (s - straight - arc), r)
    } else {
        let theta = PI / 2.0 + (s - 2.0 * straight - arc) / r;
        Vec2::new(-h + r * theta.cos(), r * theta.sin())
    }
}

/// Travel-direction heading at arc length `s` for spine distance `r`.
fn stadium_heading_at(spec: &StadiumSpec, r: f64, s: f64) -> f64 {
    let total = lane_length_for(spec, r);
    let mut s = s % total;
    if s < 0.0 {
        s += total;
    }
    let straight = spec.straight_length;
    let arc = PI * r;
    if s < straight {
        0.0
    } else if s < straight + arc {
        let theta = -PI / 2.0 + (s - straight) / r;
        wrap_angle(theta + PI / 2.0)
    } else if s < 2.0 * straight + arc {
        PI
    } else {
        let theta = PI / 2.0 + (s - 2.0 * straight - arc) / r;
        wrap_angle(theta + PI / 2.0)
    }
}

/// Exact perpendicular projection of `p` onto the lane centerline at spine
/// distance `r_lane`: returns (spine distance of p, arc length in that lane's
/// parametrization). On straights the foot keeps the x progress; on arcs it
/// keeps the angle.
fn stadium_arc_at(spec: &StadiumSpec, r_lane: f64, p: Vec2) -> (f64, f64) {
    let h = spec.straight_length / 2.0;
    let straight = spec.straight_length;
    if p.x.abs() <= h {
        let d = p.y.abs();
        let s = if p.y < 0.0 {
            p.x + h
        } else {
            straight + PI * r_lane + (h - p.x)
        };
        (d, s)
    } else {
        let cx = if p.x > h { h } else { -h };
        let rel = Vec2::new(p.x - cx, p.y);
        let d = rel.norm();
        let theta = rel.y.atan2(rel.x);
        let s = if p.x > h {
            // Right arc spans theta in [-pi/2, pi/2].
            straight + (theta + PI / 2.0) * r_lane
        } else {
            // Left arc spans theta in [pi/2, 3pi/2].
            let t = if theta < 0.0 { theta + 2.0 * PI } else { theta };
            2.0 * straight + PI * r_lane + (t - PI / 2.0) * r_lane
        };
        (d, s)
    }
}

impl MapGraph {
    pub fn rebuild_index(&mut self) {
        let mut by_lane = vec![Vec::new(); self.n_lanes];
        for ll in &self.lanelets {
            by_lane[ll.lane_index].push(ll.id);
        }
        for ids in &mut by_lane {
            ids.sort_by(|a, b| {
                self.lanelets[*a]
                    .arc_start
                    .partial_cmp(&self.lanelets[*b].arc_start)
                    .unwrap()
            });
        }
        self.by_lane = by_lane;
        let mut m: f64 = 0.0;
        for ll in &self.lanelets {
            for p in ll.left_boundary.iter().chain(&ll.right_boundary) {
                m = m.max(p.x.abs()).max(p.y.abs());
            }
        }
        self.half_extent = m;
    }

    pub fn lanelet(&self, id: usize) -> &Lanelet {
        &self.lanelets[id]
    }

    pub fn lane_ids(&self, lane: usize) -> &[usize] {
        &self.by_lane[lane]
    }

    pub fn lane_length(&self, lane: usize) -> f64 {
        self.lane_lengths[lane]
    }

    /// Half-extent of the map's bounding box around the origin, for
    /// normalizing absolute positions.
    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    /// Centerline point of `lane` at arc length `s` (modular).
    pub fn center_point_at(&self, lane: usize, s: f64) -> Vec2 {
        if let Some(spec) = &self.stadium {
            let r = spec.curve_radius + lane as f64 * self.lane_width;
            return stadium_point_at(spec, r, s);
        }
        self.polyline_point_at(lane, s)
    }

    /// Travel-direction heading of `lane` at arc length `s`.
    pub fn heading_at(&self, lane: usize, s: f64) -> f64 {
        if let Some(spec) = &self.stadium {
            let r = spec.curve_radius + lane as f64 * self.lane_width;
            return stadium_heading_at(spec, r, s);
        }
        // Finite difference along the polyline.
        let eps = 1e-3;
        let a = self.polyline_point_at(lane, s);
        let b = self.polyline_point_at(lane, s + eps);
        (b.y - a.y).atan2(b.x - a.x)
    }

    fn polyline_point_at(&self, lane: usize, s: f64) -> Vec2 {
        let total = self.lane_lengths[lane];
        let mut s = s % total;
        if s < 0.0 {
            s += total;
        }
        let ids = &self.by_lane[lane];
        // Find the lanelet containing s.
        let ll = ids
            .iter()
            .map(|&id| &self.lanelets[id])
            .find(|ll| s >= ll.arc_start && s < ll.arc_start + ll.arc_len)
            .unwrap_or_else(|| &self.lanelets[ids[ids.len() - 1]]);
        let frac = ((s - ll.arc_start) / ll.arc_len).clamp(0.0, 1.0);
        let fidx = frac * (ll.centerline.len() - 1) as f64;
        let i = (fidx.floor() as usize).min(ll.centerline.len() - 2);
        let t = fidx - i as f64;
        let a = ll.centerline[i];
        let b = ll.centerline[i + 1];
        a.add(b.sub(a).scale(t))
    }

    /// Project `position` onto the nearest lane centerline.
    ///
    /// Returns an off-map error when the perpendicular distance to the nearest
    /// centerline exceeds `2 * lane_width`.
    pub fn locate(&self, position: Vec2) -> Result<Located> {
        if let Some(spec) = &self.stadium {
            let w = self.lane_width;
            let d0 = stadium_arc_at(spec, spec.curve_radius, position).0;
            let rel = (d0 - spec.curve_radius) / w;
            let lane = rel.round().clamp(0.0, (self.n_lanes - 1) as f64) as usize;
            let r_lane = spec.curve_radius + lane as f64 * w;
            let (d, arc) = stadium_arc_at(spec, r_lane, position);
            let offset = r_lane - d;
            if offset.abs() > 2.0 * w {
                return Err(Error::OffMap {
                    x: position.x,
                    y: position.y,
                    dist: offset.abs(),
                });
            }
            let total = self.lane_lengths[lane];
            let arc = arc.rem_euclid(total);
            let lanelet_id = self.lanelet_at(lane, arc);
            Ok(Located {
                lanelet_id,
                lane_index: lane,
                arc_length: arc,
                lateral_offset: offset,
            })
        } else {
            self.locate_polyline(position, None)
        }
    }

    /// Like [`locate`](Self::locate) but restricted to a single lane.
    pub fn locate_in_lane(&self, position: Vec2, lane: usize) -> Result<Located> {
        if let Some(spec) = &self.stadium {
            let r_lane = spec.curve_radius + lane as f64 * self.lane_width;
            let (d, arc) = stadium_arc_at(spec, r_lane, position);
            let offset = r_lane - d;
            let total = self.lane_lengths[lane];
            let arc = arc.rem_euclid(total);
            let lanelet_id = self.lanelet_at(lane, arc);
            Ok(Located {
                lanelet_id,
                lane_index: lane,
                arc_length: arc,
                lateral_offset: offset,
            })
        } else {
            self.locate_polyline(position, Some(lane))
        }
    }

    /// Nearest-segment polyline projection over all lanelets (optionally one lane).
    fn locate_polyline(&self, position: Vec2, lane_filter: Option<usize>) -> Result<Located> {
        let mut best: Option<(f64, Located)> = None;
        for ll in &self.lanelets {
            if let Some(lane) = lane_filter {
                if ll.lane_index != lane {
                    continue;
                }
            }
            let pts = &ll.centerline;
            for i in 0..pts.len() - 1 {
                let (proj, t) = project_on_segment(position, pts[i], pts[i + 1]);
                let dist = position.dist(proj);
                if best.map_or(true, |(bd, _)| dist < bd) {
                    let seg_frac = (i as f64 + t) / (pts.len() - 1) as f64;
                    let arc = ll.arc_start + seg_frac * ll.arc_len;
                    let dir = pts[i + 1].sub(pts[i]);
                    let side = dir.cross(position.sub(proj));
                    // Counterclockwise loop: left of travel is the interior.
                    let offset = if side >= 0.0 { dist } else { -dist };
                    best = Some((
                        dist,
                        Located {
                            lanelet_id: ll.id,
                            lane_index: ll.lane_index,
                            arc_length: arc % self.lane_lengths[ll.lane_index],
                            lateral_offset: offset,
                        },
                    ));
                }
            }
        }
        let (dist, loc) = best.ok_or_else(|| Error::InvalidGeometry("empty map".into()))?;
        if dist > 2.0 * self.lane_width {
            return Err(Error::OffMap {
                x: position.x,
                y: position.y,
                dist,
            });
        }
        Ok(loc)
    }

    fn lanelet_at(&self, lane: usize, arc: f64) -> usize {
        let ids = &self.by_lane[lane];
        for &id in ids {
            let ll = &self.lanelets[id];
            if arc >= ll.arc_start && arc < ll.arc_start + ll.arc_len {
                return id;
            }
        }
        ids[ids.len() - 1]
    }

    /// Sample a reference path of `n_points` centerline points in `target_lane`,
    /// starting just ahead of `position` and spaced `spacing` apart in arc length.
    ///
    /// When `target_lane` differs from the vehicle's current lane the path
    /// starts at the arc length of the nearest point in the target lane, so the
    /// path encodes the lane-change intention while staying strictly forward.
    pub fn reference_path_for(
        &self,
        position: Vec2,
        target_lane: usize,
        n_points: usize,
        spacing: f64,
    ) -> Result<ReferencePath> {
        if target_lane >= self.n_lanes {
            return Err(Error::InvalidDecision {
                decision: target_lane,
                n_lanes: self.n_lanes,
            });
        }
        // Validate the vehicle is on the road at all.
        let _ = self.locate(position)?;
        let in_target = self.locate_in_lane(position, target_lane)?;
        let total = self.lane_lengths[target_lane];
        let mut points = Vec::with_capacity(n_points);
        for j in 1..=n_points {
            let s = (in_target.arc_length + j as f64 * spacing) % total;
            points.push(self.center_point_at(target_lane, s));
        }
        let first_arc = (in_target.arc_length + spacing) % total;
        let source_lanelet_id = self.lanelet_at(target_lane, first_arc);
        Ok(ReferencePath {
            points,
            target_lane,
            source_lanelet_id,
        })
    }

    /// Signed lateral offset of `position` from the target lane's centerline
    /// (positive toward the left boundary), the distance-to-reference-path
    /// quantity used by observations and rewards.
    pub fn signed_offset_in_lane(&self, position: Vec2, lane: usize) -> Result<f64> {
        Ok(self.locate_in_lane(position, lane)?.lateral_offset)
    }

    /// Outward-positive road-lateral coordinate: 0 on lane 0's centerline,
    /// `lane_width` on lane 1's. Shared scale for cross-lane gaps.
    pub fn road_lateral(&self, loc: &Located) -> f64 {
        loc.lane_index as f64 * self.lane_width - loc.lateral_offset
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<MapGraph> {
        let mut map: MapGraph = serde_json::from_str(s)?;
        map.validate()?;
        map.rebuild_index();
        Ok(map)
    }

    /// Structural invariants checked on load.
    pub fn validate(&self) -> Result<()> {
        if self.n_lanes == 0 || self.lanelets.is_empty() {
            return Err(Error::InvalidGeometry("empty map".into()));
        }
        if self.lane_lengths.len() != self.n_lanes {
            return Err(Error::InvalidGeometry("lane_lengths length mismatch".into()));
        }
        for ll in &self.lanelets {
            if ll.centerline.is_empty()
                || ll.centerline.len() != ll.left_boundary.len()
                || ll.centerline.len() != ll.right_boundary.len()
            {
                return Err(Error::InvalidGeometry(format!(
                    "lanelet {} has inconsistent point counts",
                    ll.id
                )));
            }
            if ll.lane_index >= self.n_lanes {
                return Err(Error::InvalidGeometry(format!(
                    "lanelet {} has lane_index {} out of range",
                    ll.id, ll.lane_index
                )));
            }
            if ll.successor_id >= self.lanelets.len() {
                return Err(Error::InvalidGeometry(format!(
                    "lanelet {} has dangling successor {}",
                    ll.id, ll.successor_id
                )));
            }
        }
        Ok(())
    }
}
