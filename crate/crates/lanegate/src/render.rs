//! Trace visualization: standalone SVG frames and per-step summary CSV.

use crate::error::Result;
use crate::map::MapGraph;
use crate::sim::SimConfig;
use crate::trace::TraceStep;
use std::fmt::Write as _;
use std::path::Path;

const EGO_COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#d62728", "#17becf"];

fn polyline(points: &[crate::geom::Vec2], style: &str) -> String {
    let mut s = String::from("<polyline points=\"");
    for p in points {
        let _ = write!(s, "{:.4},{:.4} ", p.x, p.y);
    }
    let _ = write!(s, "\" fill=\"none\" {style}/>");
    s
}

/// One trace step as a standalone SVG document string.
pub fn render_frame(map: &MapGraph, sim: &SimConfig, step: &TraceStep) -> String {
    let he = map.half_extent();
    let margin = 0.3;
    let (w, h) = (2.0 * (he + margin), 2.0 * (he + margin));
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"{:.0}\" \
         viewBox=\"{:.3} {:.3} {:.3} {:.3}\">",
        800.0 * h / w,
        -(he + margin),
        -(he + margin),
        w,
        h
    );
    // World y points up; SVG y points down.
    svg.push_str("<g transform=\"scale(1,-1)\">");
    svg.push_str("<rect x=\"-1000\" y=\"-1000\" width=\"2000\" height=\"2000\" fill=\"#fcfcf7\"/>");
    // Road surface boundaries: solid outer edges, dashed shared markings.
    for lane in 0..map.n_lanes {
        for &id in map.lane_ids(lane) {
            let ll = map.lanelet(id);
            let right_style = if lane == 0 {
                "stroke=\"#333333\" stroke-width=\"0.02\""
            } else {
                "stroke=\"#999999\" stroke-width=\"0.01\" stroke-dasharray=\"0.08,0.08\""
            };
            svg.push_str(&polyline(&ll.right_boundary, right_style));
            if lane == map.n_lanes - 1 {
                svg.push_str(&polyline(
                    &ll.left_boundary,
                    "stroke=\"#333333\" stroke-width=\"0.02\"",
                ));
            }
            svg.push_str(&polyline(
                &ll.centerline,
                "stroke=\"#dddddd\" stroke-width=\"0.005\"",
            ));
        }
    }
    // Vehicles as oriented rectangles; egos colored, slow traffic gray.
    let (vl, vw) = (sim.vehicle_length, sim.vehicle_width);
    for v in &step.vehicles {
        let color = if v.is_slow {
            "#888888"
        } else {
            EGO_COLORS[v.id % EGO_COLORS.len()]
        };
        let _ = write!(
            svg,
            "<g transform=\"translate({:.4},{:.4}) rotate({:.3})\">\
             <rect x=\"{:.4}\" y=\"{:.4}\" width=\"{:.4}\" height=\"{:.4}\" \
             fill=\"{color}\" stroke=\"#222222\" stroke-width=\"0.005\"/>\
             <line x1=\"0\" y1=\"0\" x2=\"{:.4}\" y2=\"0\" stroke=\"#222222\" stroke-width=\"0.008\"/></g>",
            v.x,
            v.y,
            v.heading.to_degrees(),
            -vl / 2.0,
            -vw / 2.0,
            vl,
            vw,
            vl / 2.0
        );
    }
    svg.push_str("</g>");
    let _ = write!(
        svg,
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"0.12\" font-family=\"monospace\">step {}</text>",
        -(he + margin) + 0.05,
        -(he + margin) + 0.15,
        step.step_index
    );
    svg.push_str("</svg>");
    svg
}

/// Write every `every`-th frame of the trace as `frame_<step>.svg`.
/// Returns the number of frames written.
pub fn render_trace(
    map: &MapGraph,
    sim: &SimConfig,
    steps: &[TraceStep],
    out_dir: &Path,
    every: usize,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let every = every.max(1);
    let mut written = 0;
    for step in steps.iter().step_by(every) {
        let svg = render_frame(map, sim, step);
        std::fs::write(out_dir.join(format!("frame_{:05}.svg", step.step_index)), svg)?;
        written += 1;
    }
    Ok(written)
}

/// Per-step aggregates for plotting: mean ego speed, active collision flags
/// and how many agents switched their decision since the previous step.
pub fn summary_csv(steps: &[TraceStep]) -> String {
    let mut csv = String::from("step,mean_ego_speed,agent_collisions,boundary_collisions,decision_changes\n");
    let mut prev: Option<Vec<usize>> = None;
    for step in steps {
        let egos: Vec<&crate::trace::TraceVehicle> =
            step.vehicles.iter().filter(|v| !v.is_slow).collect();
        let mean_speed = if egos.is_empty() {
            0.0
        } else {
            egos.iter().map(|v| v.speed).sum::<f64>() / egos.len() as f64
        };
        let hits_a = step.agents.iter().filter(|a| a.hit_agent).count();
        let hits_b = step.agents.iter().filter(|a| a.hit_boundary).count();
        let decisions: Vec<usize> = step.agents.iter().map(|a| a.decision).collect();
        let changes = match &prev {
            Some(p) => decisions.iter().zip(p).filter(|(a, b)| a != b).count(),
            None => 0,
        };
        prev = Some(decisions);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            step.step_index, mean_speed, hits_a, hits_b, changes
        );
    }
    csv
}
