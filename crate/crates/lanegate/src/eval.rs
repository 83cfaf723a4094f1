//! Evaluation: greedy rollouts to traces, collision counting over seeds,
//! threshold sweeps over manifest families, and decision-consistency
//! statistics extracted from traces.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::map::MapGraph;
use crate::obs::{observe_high, observe_low, ObsParams};
use crate::policy::{
    reference_for_decision, ActionMode, ExpertPool, HighLevelPolicy,
};
use crate::reward::{reward_high, reward_low};
use crate::sim::{SimConfig, VehicleKind, World};
use crate::trace::{validate_trace, TraceAgent, TraceStep, TraceVehicle, TraceWriter};
use crate::train::{TrainedManifest, MANIFEST_NAME};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Lane decisions during an evaluation episode: the trained gate, one forced
/// lane, each agent's own spawn lane (never change), or uniform random
/// decisions (the reference baselines).
#[derive(Clone, Copy)]
pub enum GateMode<'a> {
    Learned(&'a HighLevelPolicy),
    FixedLane(usize),
    SpawnLane,
    UniformRandom,
}

pub struct EpisodeResult {
    pub trace: Vec<TraceStep>,
    pub agent_agent: u64,
    pub boundary: u64,
}

impl EpisodeResult {
    pub fn total(&self) -> u64 {
        self.agent_agent + self.boundary
    }
}

/// Number of false→true transitions, counting a true at the start as one.
pub fn count_rising_edges<I: IntoIterator<Item = bool>>(flags: I) -> u64 {
    let mut count = 0;
    let mut prev = false;
    for f in flags {
        if f && !prev {
            count += 1;
        }
        prev = f;
    }
    count
}

/// Collision events in a trace: rising edges per agent per flag, summed.
/// Returns (agent-agent events, boundary events).
pub fn count_trace_collisions(steps: &[TraceStep]) -> (u64, u64) {
    if steps.is_empty() {
        return (0, 0);
    }
    let n_agents = steps[0].agents.len();
    let mut agent_agent = 0;
    let mut boundary = 0;
    for slot in 0..n_agents {
        agent_agent += count_rising_edges(steps.iter().map(|s| s.agents[slot].hit_agent));
        boundary += count_rising_edges(steps.iter().map(|s| s.agents[slot].hit_boundary));
    }
    (agent_agent, boundary)
}

/// One greedy evaluation episode under the given gate, producing the full
/// trace. Experts always act greedily; random-gate draws come from the seed.
pub fn run_greedy_episode(
    map: &MapGraph,
    sim_cfg: &SimConfig,
    run: &RunConfig,
    gate: GateMode,
    pool: &ExpertPool,
    steps: usize,
    seed: u64,
) -> Result<EpisodeResult> {
    let params = ObsParams::default();
    let n_agents = sim_cfg.n_egos;
    let mut world = World::spawn(map.clone(), sim_cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD6E8FEB86659FD93);
    let spawn_lanes: Vec<usize> =
        (0..n_agents).map(|slot| world.vehicles[slot].current_lane).collect();
    let mut prev_decisions = spawn_lanes.clone();
    let mut prev_actions = vec![crate::sim::ControlAction { speed: 0.0, steering: 0.0 }; n_agents];
    let mut trace = Vec::with_capacity(steps);
    for step_index in 0..steps {
        let mut actions = Vec::with_capacity(n_agents);
        let mut pending = Vec::with_capacity(n_agents);
        for slot in 0..n_agents {
            let decision = match gate {
                GateMode::Learned(hl) => {
                    let obs_h = observe_high(&world, slot, &params)?;
                    hl.decide(&obs_h, ActionMode::Greedy, &mut rng)?.0
                }
                GateMode::FixedLane(lane) => lane,
                GateMode::SpawnLane => spawn_lanes[slot],
                GateMode::UniformRandom => rng.gen_range(0..map.n_lanes),
            };
            world.set_target_lane(slot, decision)?;
            let reference = reference_for_decision(&world, slot, decision, &params)?;
            let obs_l = observe_low(&world, slot, &reference, &params)?;
            let ea = pool.act_expert(decision, &obs_l, ActionMode::Greedy, &mut rng)?;
            actions.push(ea.action);
            pending.push((decision, reference));
        }
        let before: Vec<crate::sim::VehicleState> = world.vehicles[..n_agents].to_vec();
        let outcome = world.step(&actions)?;
        let mut agents = Vec::with_capacity(n_agents);
        for (slot, (decision, reference)) in pending.into_iter().enumerate() {
            let flags = outcome.ego_flags[slot];
            let after = outcome.pre_respawn[slot].unwrap_or(world.vehicles[slot]);
            let comps = reward_low(
                &world,
                &before[slot],
                &after,
                flags,
                prev_actions[slot],
                actions[slot],
                &reference,
                &run.ll_reward,
            )?;
            let hl_r = reward_high(
                &world,
                &after,
                flags.hit_agent,
                prev_decisions[slot],
                decision,
                &run.hl_reward,
            )?;
            let mut reward = BTreeMap::new();
            reward.insert("hl_total".to_string(), hl_r);
            reward.insert("ll_boundary_collision".to_string(), comps.boundary_collision);
            reward.insert("ll_agent_collision".to_string(), comps.agent_collision);
            reward.insert("ll_proximity".to_string(), comps.proximity);
            reward.insert("ll_centerline".to_string(), comps.centerline);
            reward.insert("ll_ref_deviation".to_string(), comps.ref_deviation);
            reward.insert("ll_steering_rate".to_string(), comps.steering_rate);
            reward.insert("ll_forward".to_string(), comps.forward);
            reward.insert("ll_speed".to_string(), comps.speed);
            reward.insert("ll_total".to_string(), comps.total());
            agents.push(TraceAgent {
                id: slot,
                decision,
                hit_agent: flags.hit_agent,
                hit_boundary: flags.hit_boundary,
                reward,
            });
            prev_decisions[slot] = decision;
        }
        prev_actions = actions;
        let vehicles = world
            .vehicles
            .iter()
            .map(|v| TraceVehicle {
                id: v.id,
                x: v.position.x,
                y: v.position.y,
                heading: v.heading,
                speed: v.speed,
                lane: v.current_lane,
                is_slow: v.kind == VehicleKind::Slow,
            })
            .collect();
        trace.push(TraceStep {
            step_index: step_index as u64,
            vehicles,
            agents,
        });
    }
    let (agent_agent, boundary) = count_trace_collisions(&trace);
    Ok(EpisodeResult {
        trace,
        agent_agent,
        boundary,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub agent_agent: u64,
    pub boundary: u64,
    pub total: u64,
}

/// Collision counts over an evaluation seed sweep: `best` is the minimum
/// per-seed total; `std` is the sample standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub avg: f64,
    pub std: f64,
    pub best: u64,
    pub schema_hash: String,
    pub config_hash: String,
    pub config: RunConfig,
}

/// (mean, sample std, min) of per-seed totals.
pub fn aggregate_counts(counts: &[u64]) -> (f64, f64, u64) {
    let n = counts.len();
    let avg = counts.iter().sum::<u64>() as f64 / n as f64;
    let std = if n > 1 {
        (counts.iter().map(|c| (*c as f64 - avg).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let best = *counts.iter().min().unwrap();
    (avg, std, best)
}

/// Greedy evaluation of a trained manifest over the configured seeds,
/// writing one trace per seed plus the report JSON into `out_dir`.
pub fn evaluate(
    run: &RunConfig,
    manifest: &TrainedManifest,
    manifest_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    run.validate()?;
    let (hl, pool) = manifest.load_policies(manifest_dir)?;
    let map = manifest.map.build()?;
    std::fs::create_dir_all(out_dir)?;
    let mut per_seed = Vec::with_capacity(run.eval.seeds.len());
    for &seed in &run.eval.seeds {
        let result = run_greedy_episode(
            &map,
            &run.sim,
            run,
            GateMode::Learned(&hl),
            &pool,
            run.eval.steps,
            seed,
        )?;
        let mut writer = TraceWriter::create(&out_dir.join(format!("trace_seed_{seed}.jsonl")))?;
        for step in &result.trace {
            writer.write_step(step)?;
        }
        writer.finish()?;
        per_seed.push(SeedResult {
            seed,
            agent_agent: result.agent_agent,
            boundary: result.boundary,
            total: result.total(),
        });
    }
    let totals: Vec<u64> = per_seed.iter().map(|s| s.total).collect();
    let (avg, std, best) = aggregate_counts(&totals);
    let report = EvalReport {
        steps: run.eval.steps,
        seeds: run.eval.seeds.clone(),
        per_seed,
        avg,
        std,
        best,
        schema_hash: crate::obs::schema_hash(),
        config_hash: run.content_hash()?,
        config: run.clone(),
    };
    std::fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Evaluate one trained manifest per safety threshold and emit the CSV
/// `threshold,avg,std,best` with one row per threshold, in the given order.
/// Each entry's directory must contain a manifest; traces and reports land in
/// per-threshold subdirectories of `out_dir`.
pub fn sweep_threshold(
    run: &RunConfig,
    entries: &[(f64, std::path::PathBuf)],
    out_dir: &Path,
) -> Result<(String, Vec<(f64, EvalReport)>)> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("threshold,avg,std,best\n");
    let mut reports = Vec::with_capacity(entries.len());
    for (threshold, dir) in entries {
        let manifest = TrainedManifest::load(&dir.join(MANIFEST_NAME))?;
        let mut run_t = run.clone();
        run_t.hl_reward.safety_threshold = *threshold;
        let sub = out_dir.join(format!("threshold_{threshold}"));
        let report = evaluate(&run_t, &manifest, dir, &sub)?;
        csv.push_str(&format!(
            "{threshold},{},{},{}\n",
            report.avg, report.std, report.best
        ));
        reports.push((*threshold, report));
    }
    std::fs::write(out_dir.join("sweep.csv"), &csv)?;
    Ok((csv, reports))
}

/// One decision-change run and what came of it. `completed` and `hesitation`
/// are mutually exclusive; a run that is neither was aborted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneChangeEvent {
    pub agent_id: usize,
    pub start_step: usize,
    /// Last step index of the decision run (inclusive).
    pub end_step: usize,
    pub from_lane: usize,
    pub to_lane: usize,
    pub run_length: usize,
    pub completed: bool,
    pub hesitation: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub events: usize,
    pub completed: usize,
    pub hesitations: usize,
    pub aborted: usize,
}

/// Segment each agent's decision sequence into runs and classify every
/// decision change:
/// - completed: the run lasted at least `consistency_window` steps and the
///   located lane actually moved to the decided lane by the end of the run;
/// - hesitation: the decision flipped for fewer than 3 steps, then reverted
///   to the previous decision, with the located lane never changing;
/// - aborted: anything else.
/// Pure function of the trace; malformed traces are rejected.
pub fn analyze_decisions(
    steps: &[TraceStep],
    consistency_window: usize,
) -> Result<(Vec<LaneChangeEvent>, DecisionSummary)> {
    validate_trace(steps)?;
    if steps.is_empty() {
        return Ok((Vec::new(), DecisionSummary::default()));
    }
    let mut events = Vec::new();
    for (slot, agent0) in steps[0].agents.iter().enumerate() {
        let agent_id = agent0.id;
        let decisions: Vec<usize> = steps.iter().map(|s| s.agents[slot].decision).collect();
        let lanes: Vec<usize> = steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.vehicles
                    .iter()
                    .find(|v| v.id == agent_id)
                    .map(|v| v.lane)
                    .ok_or(Error::MalformedTrace {
                        line: i + 1,
                        reason: format!("agent {agent_id} has no vehicle entry"),
                    })
            })
            .collect::<Result<_>>()?;
        // Maximal runs of equal decisions: (decision, start, len).
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for (t, &d) in decisions.iter().enumerate() {
            match runs.last_mut() {
                Some((rd, _, len)) if *rd == d => *len += 1,
                _ => runs.push((d, t, 1)),
            }
        }
        for k in 1..runs.len() {
            let (to_lane, start, len) = runs[k];
            let end = start + len - 1;
            let from_lane = lanes[start - 1];
            let lane_at_end = lanes[end];
            let completed = len >= consistency_window && to_lane != from_lane && lane_at_end == to_lane;
            let reverted = k + 1 < runs.len() && runs[k + 1].0 == runs[k - 1].0;
            let lane_unchanged = lanes[start..=end].iter().all(|l| *l == from_lane);
            let hesitation = !completed && len < 3 && reverted && lane_unchanged;
            events.push(LaneChangeEvent {
                agent_id,
                start_step: start,
                end_step: end,
                from_lane,
                to_lane,
                run_length: len,
                completed,
                hesitation,
            });
        }
    }
    let summary = DecisionSummary {
        events: events.len(),
        completed: events.iter().filter(|e| e.completed).count(),
        hesitations: events.iter().filter(|e| e.hesitation).count(),
        aborted: events.iter().filter(|e| !e.completed && !e.hesitation).count(),
    };
    Ok((events, summary))
}
