//! PPO training for both levels and the two-phase curriculum.
//!
//! Experts are trained first, each with every agent's decision pinned to the
//! expert's target lane; the gate is trained afterwards over frozen experts
//! acting greedily. Training is decentralized: every frame holds one agent's
//! own observation, and all agents share the policy being trained.

use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::map::MapGraph;
use crate::nn::AdamState;
use crate::obs::{observe_high, observe_low, schema_hash, ObsParams};
use crate::policy::{
    log_softmax, reference_for_decision, softmax, ActionMode, ExpertPool, HighLevelPolicy,
    LowLevelExpert,
};
use crate::reward::{reward_high, reward_low};
use crate::sim::{ControlAction, VehicleState, World};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Which policy a buffer was collected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Expert { lane: usize },
    Gate,
}

/// One agent-frame. `u` is the pre-squash control sample (expert phase);
/// `decision` the lane choice (pinned in expert phase, sampled in gate phase).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub obs: Vec<f64>,
    pub decision: usize,
    pub u: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub agent_id: usize,
    pub episode_id: usize,
}

/// Contiguous frames of one (agent, episode) sequence, plus the critic value
/// of the state after the last frame (used only when it did not terminate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub bootstrap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub phase: PhaseKind,
    pub frames: Vec<Frame>,
    pub spans: Vec<Span>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Advantages and returns are in place; updates refuse to run otherwise.
    pub ready: bool,
    /// Mean over agents and episodes of the per-agent reward sum.
    pub mean_episode_reward: f64,
    pub n_episodes: usize,
}

impl RolloutBuffer {
    /// Fill `advantages`/`returns` per sequence, then normalize advantages
    /// batch-wide to zero mean and unit variance.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let n = self.frames.len();
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        for span in &self.spans {
            let range = span.start..span.start + span.len;
            let rewards: Vec<f64> = self.frames[range.clone()].iter().map(|f| f.reward).collect();
            let values: Vec<f64> = self.frames[range.clone()].iter().map(|f| f.value).collect();
            let dones: Vec<bool> = self.frames[range.clone()].iter().map(|f| f.done).collect();
            let (adv, ret) = gae_sequence(&rewards, &values, &dones, gamma, lambda, span.bootstrap)?;
            self.advantages[range.clone()].copy_from_slice(&adv);
            self.returns[range].copy_from_slice(&ret);
        }
        let mean = self.advantages.iter().sum::<f64>() / n as f64;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for a in &mut self.advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
        self.ready = true;
        Ok(())
    }
}

/// Generalized advantage estimation over one sequence.
/// δ_t = r_t + γ·v_{t+1}·(1−done_t) − v_t, A_t = δ_t + γλ·(1−done_t)·A_{t+1},
/// with v after the last frame given by `bootstrap_value`.
/// Returns (advantages, returns = advantages + values), unnormalized.
pub fn gae_sequence(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "gae lengths: rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        adv[t] = next_adv;
    }
    let ret: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Linear learning-rate ramp from `lr_start` at iteration 0 down to `lr_end`
/// at the final iteration.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.n_iters <= 1 {
        return cfg.lr_start;
    }
    let frac = iter as f64 / (cfg.n_iters - 1) as f64;
    cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
}

fn mix3(seed: u64, stream: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15)
        ^ stream.wrapping_mul(0xBF58476D1CE4E5B9)
        ^ index.wrapping_mul(0x94D049BB133111EB)
}

struct SeqTmp {
    frames: Vec<Frame>,
}

fn flush_episode(
    buf_frames: &mut Vec<Frame>,
    spans: &mut Vec<Span>,
    seqs: Vec<SeqTmp>,
    bootstraps: &[f64],
    episode_reward_acc: &mut Vec<f64>,
) {
    for (slot, seq) in seqs.into_iter().enumerate() {
        let start = buf_frames.len();
        let len = seq.frames.len();
        episode_reward_acc.push(seq.frames.iter().map(|f| f.reward).sum());
        buf_frames.extend(seq.frames);
        spans.push(Span {
            start,
            len,
            bootstrap: bootstraps[slot],
        });
    }
}

/// Roll the simulator with every agent pinned to one expert's lane, recording
/// the expert's own reward. Episodes cap at `max_steps`; the final episode is
/// truncated so the frame count is exactly `frames_per_batch`.
pub fn collect_expert_rollouts(
    run: &RunConfig,
    map: &MapGraph,
    expert: &LowLevelExpert,
    seed: u64,
) -> Result<RolloutBuffer> {
    let mut sim_cfg = run.sim.clone();
    sim_cfg.n_egos = run.train.expert_egos;
    sim_cfg.n_slow = run.train.expert_slow_vehicles;
    let n_agents = sim_cfg.n_egos;
    let t = &run.train;
    if t.frames_per_batch % n_agents != 0 {
        return Err(Error::Config(format!(
            "frames_per_batch {} not divisible by {} agents",
            t.frames_per_batch, n_agents
        )));
    }
    let params = ObsParams::default();
    let lane = expert.target_lane;
    let steps_needed = t.frames_per_batch / n_agents;
    let mut frames = Vec::with_capacity(t.frames_per_batch);
    let mut spans = Vec::new();
    let mut episode_rewards = Vec::new();
    let mut steps_done = 0usize;
    let mut episode = 0usize;
    while steps_done < steps_needed {
        let ep_steps = (steps_needed - steps_done).min(sim_cfg.max_steps as usize);
        let mut world = World::spawn(map.clone(), sim_cfg.clone(), mix3(seed, 1, episode as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, 2, episode as u64));
        for slot in 0..n_agents {
            world.set_target_lane(slot, lane)?;
        }
        let mut seqs: Vec<SeqTmp> = (0..n_agents).map(|_| SeqTmp { frames: Vec::new() }).collect();
        let mut prev_actions = vec![ControlAction { speed: 0.0, steering: 0.0 }; n_agents];
        for _ in 0..ep_steps {
            let mut actions = Vec::with_capacity(n_agents);
            let mut pending = Vec::with_capacity(n_agents);
            for slot in 0..n_agents {
                let reference = reference_for_decision(&world, slot, lane, &params)?;
                let obs = observe_low(&world, slot, &reference, &params)?;
                let ea = expert.act(&obs, ActionMode::Sample, &mut rng)?;
                actions.push(ea.action);
                pending.push((obs, ea, reference));
            }
            let before: Vec<VehicleState> = world.vehicles[..n_agents].to_vec();
            let outcome = world.step(&actions)?;
            for (slot, (obs, ea, reference)) in pending.into_iter().enumerate() {
                let after = outcome.pre_respawn[slot].unwrap_or(world.vehicles[slot]);
                let comps = reward_low(
                    &world,
                    &before[slot],
                    &after,
                    outcome.ego_flags[slot],
                    prev_actions[slot],
                    actions[slot],
                    &reference,
                    &run.ll_reward,
                )?;
                seqs[slot].frames.push(Frame {
                    obs,
                    decision: lane,
                    u: ea.u,
                    log_prob: ea.log_prob,
                    value: ea.value,
                    reward: comps.total(),
                    done: outcome.ego_flags[slot].respawned,
                    agent_id: slot,
                    episode_id: episode,
                });
            }
            prev_actions = actions;
        }
        let mut bootstraps = vec![0.0; n_agents];
        for (slot, b) in bootstraps.iter_mut().enumerate() {
            let reference = reference_for_decision(&world, slot, lane, &params)?;
            let obs = observe_low(&world, slot, &reference, &params)?;
            let (_, value, _) = expert.net.forward(&obs)?;
            *b = value;
        }
        flush_episode(&mut frames, &mut spans, seqs, &bootstraps, &mut episode_rewards);
        steps_done += ep_steps;
        episode += 1;
    }
    let mean_episode_reward =
        episode_rewards.iter().sum::<f64>() / episode_rewards.len().max(1) as f64;
    Ok(RolloutBuffer {
        phase: PhaseKind::Expert { lane },
        frames,
        spans,
        advantages: Vec::new(),
        returns: Vec::new(),
        ready: false,
        mean_episode_reward,
        n_episodes: episode,
    })
}

/// Roll the simulator with the gate sampling lane decisions and the frozen
/// experts acting greedily, recording the lane-selection reward.
pub fn collect_gate_rollouts(
    run: &RunConfig,
    map: &MapGraph,
    hl: &HighLevelPolicy,
    pool: &ExpertPool,
    seed: u64,
) -> Result<RolloutBuffer> {
    let mut sim_cfg = run.sim.clone();
    sim_cfg.n_slow = run.train.gate_slow_vehicles;
    let n_agents = sim_cfg.n_egos;
    let t = &run.train;
    if t.frames_per_batch % n_agents != 0 {
        return Err(Error::Config(format!(
            "frames_per_batch {} not divisible by {} agents",
            t.frames_per_batch, n_agents
        )));
    }
    let params = ObsParams::default();
    let steps_needed = t.frames_per_batch / n_agents;
    let mut frames = Vec::with_capacity(t.frames_per_batch);
    let mut spans = Vec::new();
    let mut episode_rewards = Vec::new();
    let mut steps_done = 0usize;
    let mut episode = 0usize;
    while steps_done < steps_needed {
        let ep_steps = (steps_needed - steps_done).min(sim_cfg.max_steps as usize);
        let mut world = World::spawn(map.clone(), sim_cfg.clone(), mix3(seed, 3, episode as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, 4, episode as u64));
        let mut seqs: Vec<SeqTmp> = (0..n_agents).map(|_| SeqTmp { frames: Vec::new() }).collect();
        let mut prev_decisions: Vec<usize> =
            (0..n_agents).map(|slot| world.vehicles[slot].current_lane).collect();
        for _ in 0..ep_steps {
            let mut actions = Vec::with_capacity(n_agents);
            let mut pending = Vec::with_capacity(n_agents);
            for slot in 0..n_agents {
                let obs_h = observe_high(&world, slot, &params)?;
                let (decision, log_prob, value) = hl.decide(&obs_h, ActionMode::Sample, &mut rng)?;
                world.set_target_lane(slot, decision)?;
                let reference = reference_for_decision(&world, slot, decision, &params)?;
                let obs_l = observe_low(&world, slot, &reference, &params)?;
                let ea = pool.act_expert(decision, &obs_l, ActionMode::Greedy, &mut rng)?;
                actions.push(ea.action);
                pending.push((obs_h, decision, log_prob, value));
            }
            let outcome = world.step(&actions)?;
            for (slot, (obs_h, decision, log_prob, value)) in pending.into_iter().enumerate() {
                let after = outcome.pre_respawn[slot].unwrap_or(world.vehicles[slot]);
                let r = reward_high(
                    &world,
                    &after,
                    outcome.ego_flags[slot].hit_agent,
                    prev_decisions[slot],
                    decision,
                    &run.hl_reward,
                )?;
                seqs[slot].frames.push(Frame {
                    obs: obs_h,
                    decision,
                    u: [0.0; 2],
                    log_prob,
                    value,
                    reward: r,
                    done: outcome.ego_flags[slot].respawned,
                    agent_id: slot,
                    episode_id: episode,
                });
                prev_decisions[slot] = decision;
            }
        }
        let mut bootstraps = vec![0.0; n_agents];
        for (slot, b) in bootstraps.iter_mut().enumerate() {
            let obs_h = observe_high(&world, slot, &params)?;
            let (_, value, _) = hl.net.forward(&obs_h)?;
            *b = value;
        }
        flush_episode(&mut frames, &mut spans, seqs, &bootstraps, &mut episode_rewards);
        steps_done += ep_steps;
        episode += 1;
    }
    let mean_episode_reward =
        episode_rewards.iter().sum::<f64>() / episode_rewards.len().max(1) as f64;
    Ok(RolloutBuffer {
        phase: PhaseKind::Gate,
        frames,
        spans,
        advantages: Vec::new(),
        returns: Vec::new(),
        ready: false,
        mean_episode_reward,
        n_episodes: episode,
    })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

impl LossStats {
    fn total(&self, cfg: &TrainConfig) -> f64 {
        self.policy_loss + cfg.value_coeff * self.value_loss - cfg.entropy_epsilon * self.entropy
    }
}

/// Whether the clipped surrogate still passes gradient at ratio ρ.
/// min(ρA, clip(ρ)A) is flat exactly when the clip bound is active on the
/// chosen branch.
fn surrogate_passes_gradient(ratio: f64, advantage: f64, eps: f64) -> bool {
    if advantage >= 0.0 {
        ratio <= 1.0 + eps
    } else {
        ratio >= 1.0 - eps
    }
}

/// Loss, per-minibatch statistics and the mean flat gradient for the gate on
/// the given frame indices.
pub fn hl_loss_and_grad(
    hl: &HighLevelPolicy,
    buf: &RolloutBuffer,
    idxs: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, LossStats, Vec<f64>)> {
    let mut grad = vec![0.0; hl.net.param_count()];
    let mut stats = LossStats::default();
    let scale = 1.0 / idxs.len() as f64;
    for &i in idxs {
        let frame = &buf.frames[i];
        let adv = buf.advantages[i];
        let ret = buf.returns[i];
        let (logits, value, cache) = hl.net.forward(&frame.obs)?;
        let logp = log_softmax(&logits);
        let probs = softmax(&logits);
        let logp_new = logp[frame.decision];
        let ratio = (logp_new - frame.log_prob).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
        stats.policy_loss += -(ratio * adv).min(clipped * adv) * scale;
        stats.value_loss += (value - ret).powi(2) * scale;
        let entropy = -probs.iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
        stats.entropy += entropy * scale;
        stats.clip_fraction += if (ratio - 1.0).abs() > cfg.clip_epsilon { scale } else { 0.0 };
        stats.approx_kl += (frame.log_prob - logp_new) * scale;

        // d loss / d logits: clipped surrogate + entropy bonus.
        let policy_coeff = if surrogate_passes_gradient(ratio, adv, cfg.clip_epsilon) {
            -adv * ratio * scale
        } else {
            0.0
        };
        let mut d_logits = vec![0.0; logits.len()];
        for j in 0..logits.len() {
            let onehot = if j == frame.decision { 1.0 } else { 0.0 };
            d_logits[j] += policy_coeff * (onehot - probs[j]);
            // dH/dz_j = -p_j (log p_j + H); loss carries -entropy_epsilon * H.
            d_logits[j] += cfg.entropy_epsilon * probs[j] * (logp[j] + entropy) * scale;
        }
        let d_value = 2.0 * cfg.value_coeff * (value - ret) * scale;
        let g = hl.net.backward(&cache, &d_logits, d_value)?;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let total = stats.total(cfg);
    if !total.is_finite() {
        return Err(Error::NonFinite("gate loss".into()));
    }
    Ok((total, stats, grad))
}

/// Loss, statistics and mean flat gradient for an expert on the given frames.
/// The tanh-squash correction is constant in the parameters, so it cancels in
/// the ratio and contributes no gradient; entropy is the pre-squash Gaussian's.
pub fn ll_loss_and_grad(
    expert: &LowLevelExpert,
    buf: &RolloutBuffer,
    idxs: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, LossStats, Vec<f64>)> {
    use crate::policy::{dlogstd_draw, dmu_draw, squashed_log_prob, LowLevelExpert as Ex};
    let mut grad = vec![0.0; expert.net.param_count()];
    let mut stats = LossStats::default();
    let scale = 1.0 / idxs.len() as f64;
    const HALF_LN_2PIE: f64 = 1.4189385332046727; // 0.5·ln(2πe)
    for &i in idxs {
        let frame = &buf.frames[i];
        let adv = buf.advantages[i];
        let ret = buf.returns[i];
        let (actor_out, value, cache) = expert.net.forward(&frame.obs)?;
        let p = Ex::gauss_params(&actor_out);
        let logp_new = squashed_log_prob(&frame.u, &p.mu, &p.logstd, &expert.bounds);
        let ratio = (logp_new - frame.log_prob).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
        stats.policy_loss += -(ratio * adv).min(clipped * adv) * scale;
        stats.value_loss += (value - ret).powi(2) * scale;
        let entropy: f64 = p.logstd.iter().map(|ls| ls + HALF_LN_2PIE).sum();
        stats.entropy += entropy * scale;
        stats.clip_fraction += if (ratio - 1.0).abs() > cfg.clip_epsilon { scale } else { 0.0 };
        stats.approx_kl += (frame.log_prob - logp_new) * scale;

        let policy_coeff = if surrogate_passes_gradient(ratio, adv, cfg.clip_epsilon) {
            -adv * ratio * scale
        } else {
            0.0
        };
        let mut d_actor = [0.0; 4];
        for k in 0..2 {
            let sigma = p.logstd[k].exp();
            let z = (frame.u[k] - p.mu[k]) / sigma;
            let dlogp_dmu = z / sigma;
            let dlogp_dlogstd = z * z - 1.0;
            d_actor[k] += policy_coeff * dlogp_dmu * dmu_draw(p.raw[k]);
            // Entropy depends on logstd alone: dH/dlogstd = 1.
            let d_logstd = policy_coeff * dlogp_dlogstd - cfg.entropy_epsilon * scale;
            d_actor[2 + k] += d_logstd * dlogstd_draw(p.raw[2 + k]);
        }
        let d_value = 2.0 * cfg.value_coeff * (value - ret) * scale;
        let g = expert.net.backward(&cache, &d_actor, d_value)?;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let total = stats.total(cfg);
    if !total.is_finite() {
        return Err(Error::NonFinite("expert loss".into()));
    }
    Ok((total, stats, grad))
}

fn require_ready(buf: &RolloutBuffer) -> Result<()> {
    if !buf.ready || buf.advantages.len() != buf.frames.len() {
        return Err(Error::Config(
            "advantages must be computed before updating".into(),
        ));
    }
    Ok(())
}

fn minibatch_plan(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(|c| c.to_vec()).collect()
}

macro_rules! ppo_update_impl {
    ($name:ident, $policy:ty, $loss_and_grad:ident, $label:literal) => {
        /// Shuffled-minibatch PPO epochs over the buffer; returns statistics
        /// averaged over every minibatch update performed.
        pub fn $name(
            policy: &mut $policy,
            buf: &RolloutBuffer,
            cfg: &TrainConfig,
            opt: &mut AdamState,
            lr: f64,
            rng: &mut ChaCha8Rng,
        ) -> Result<LossStats> {
            require_ready(buf)?;
            let mut agg = LossStats::default();
            let mut updates = 0usize;
            for _ in 0..cfg.num_epochs {
                for idxs in minibatch_plan(buf.frames.len(), cfg.minibatch_size, rng) {
                    let (_, stats, mut grad) = $loss_and_grad(policy, buf, &idxs, cfg)?;
                    let mut params = policy.net.flat_params();
                    opt.step(&mut params, &mut grad, lr, cfg.max_grad_norm)?;
                    policy.net.set_flat_params(&params)?;
                    agg.policy_loss += stats.policy_loss;
                    agg.value_loss += stats.value_loss;
                    agg.entropy += stats.entropy;
                    agg.clip_fraction += stats.clip_fraction;
                    agg.approx_kl += stats.approx_kl;
                    updates += 1;
                }
            }
            let k = updates.max(1) as f64;
            agg.policy_loss /= k;
            agg.value_loss /= k;
            agg.entropy /= k;
            agg.clip_fraction /= k;
            agg.approx_kl /= k;
            if !agg.total(cfg).is_finite() {
                return Err(Error::NonFinite(concat!($label, " loss").into()));
            }
            Ok(agg)
        }
    };
}

ppo_update_impl!(ppo_update_hl, HighLevelPolicy, hl_loss_and_grad, "gate");
ppo_update_impl!(ppo_update_ll, LowLevelExpert, ll_loss_and_grad, "expert");

/// Everything a finished curriculum produced, binding the map, observation
/// schema and checkpoint files together for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedManifest {
    pub version: u32,
    pub schema_hash: String,
    pub config_hash: String,
    pub n_lanes: usize,
    pub seed: u64,
    pub map: crate::config::MapConfig,
    pub hl_checkpoint: String,
    pub expert_checkpoints: Vec<String>,
}

impl TrainedManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainedManifest> {
        if !path.exists() {
            return Err(Error::MissingManifest(path.display().to_string()));
        }
        let m: TrainedManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema_hash != schema_hash() {
            return Err(Error::SchemaMismatch {
                stored: m.schema_hash,
                current: schema_hash(),
            });
        }
        Ok(m)
    }

    /// Load the policies this manifest points at, relative to its directory.
    pub fn load_policies(&self, dir: &Path) -> Result<(HighLevelPolicy, ExpertPool)> {
        let hl = HighLevelPolicy::load(&dir.join(&self.hl_checkpoint))?;
        let experts = self
            .expert_checkpoints
            .iter()
            .map(|name| LowLevelExpert::load(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        Ok((hl, ExpertPool::new(experts)?))
    }
}

pub fn expert_checkpoint_name(lane: usize) -> String {
    format!("expert_{lane}.json")
}

pub const HL_CHECKPOINT_NAME: &str = "hl.json";
pub const MANIFEST_NAME: &str = "manifest.json";

fn write_curves(
    out_dir: &Path,
    name: &str,
    rewards: &[f64],
    losses: &[LossStats],
) -> Result<()> {
    let mut csv = String::from("iter,episode_reward\n");
    for (i, r) in rewards.iter().enumerate() {
        csv.push_str(&format!("{i},{r}\n"));
    }
    std::fs::write(out_dir.join(format!("{name}_rewards.csv")), csv)?;
    let mut lcsv = String::from("iter,policy_loss,value_loss,entropy,clip_fraction,approx_kl\n");
    for (i, s) in losses.iter().enumerate() {
        lcsv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            s.policy_loss, s.value_loss, s.entropy, s.clip_fraction, s.approx_kl
        ));
    }
    std::fs::write(out_dir.join(format!("{name}_losses.csv")), lcsv)?;
    Ok(())
}

/// Train one lane expert and write its checkpoint plus reward/loss curves.
/// On a non-finite loss the current parameters are saved as an abort
/// checkpoint and the error propagates.
pub fn train_expert(run: &RunConfig, lane: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    run.validate()?;
    let map = run.map.build()?;
    if lane >= map.n_lanes {
        return Err(Error::InvalidDecision {
            decision: lane,
            n_lanes: map.n_lanes,
        });
    }
    std::fs::create_dir_all(out_dir)?;
    let bounds = [
        [run.sim.v_min, run.sim.v_max],
        [run.sim.delta_min, run.sim.delta_max],
    ];
    let mut expert = LowLevelExpert::new(lane, bounds, mix3(seed, 10, lane as u64))?;
    let mut opt = AdamState::new(expert.net.param_count());
    let mut update_rng = ChaCha8Rng::seed_from_u64(mix3(seed, 11, lane as u64));
    let mut update_cfg = run.train.clone();
    update_cfg.entropy_epsilon = run.train.expert_entropy_epsilon;
    let mut rewards = Vec::with_capacity(run.train.n_iters);
    let mut losses = Vec::with_capacity(run.train.n_iters);
    for iter in 0..run.train.n_iters {
        let mut buf = collect_expert_rollouts(
            run,
            &map,
            &expert,
            mix3(seed, 12 + lane as u64, iter as u64),
        )?;
        buf.compute_advantages(run.train.gamma, run.train.gae_lambda)?;
        let lr = lr_schedule(iter, &run.train);
        match ppo_update_ll(&mut expert, &buf, &update_cfg, &mut opt, lr, &mut update_rng) {
            Ok(stats) => {
                rewards.push(buf.mean_episode_reward);
                losses.push(stats);
            }
            Err(e) => {
                expert.save(&out_dir.join(format!("expert_{lane}_abort.json")))?;
                return Err(e);
            }
        }
        print_progress(&format!("expert {lane}"), iter, run.train.n_iters, buf.mean_episode_reward);
    }
    let path = out_dir.join(expert_checkpoint_name(lane));
    expert.save(&path)?;
    write_curves(out_dir, &format!("expert_{lane}"), &rewards, &losses)?;
    Ok(path)
}

/// Train the gate over frozen experts loaded from `out_dir`, then write the
/// gate checkpoint, curves, the config copy with its hash, and the manifest.
pub fn train_gate(run: &RunConfig, seed: u64, out_dir: &Path) -> Result<TrainedManifest> {
    run.validate()?;
    let map = run.map.build()?;
    std::fs::create_dir_all(out_dir)?;
    let mut experts = Vec::with_capacity(map.n_lanes);
    for lane in 0..map.n_lanes {
        let path = out_dir.join(expert_checkpoint_name(lane));
        if !path.exists() {
            return Err(Error::Config(format!(
                "expert checkpoint {} not found; train experts first",
                path.display()
            )));
        }
        experts.push(LowLevelExpert::load(&path)?);
    }
    let pool = ExpertPool::new(experts)?;
    let mut hl = HighLevelPolicy::new(map.n_lanes, mix3(seed, 20, 0))?;
    let mut opt = AdamState::new(hl.net.param_count());
    let mut update_rng = ChaCha8Rng::seed_from_u64(mix3(seed, 21, 0));
    let mut rewards = Vec::with_capacity(run.train.n_iters);
    let mut losses = Vec::with_capacity(run.train.n_iters);
    for iter in 0..run.train.n_iters {
        let mut buf = collect_gate_rollouts(run, &map, &hl, &pool, mix3(seed, 22, iter as u64))?;
        buf.compute_advantages(run.train.gamma, run.train.gae_lambda)?;
        let lr = lr_schedule(iter, &run.train);
        match ppo_update_hl(&mut hl, &buf, &run.train, &mut opt, lr, &mut update_rng) {
            Ok(stats) => {
                rewards.push(buf.mean_episode_reward);
                losses.push(stats);
            }
            Err(e) => {
                hl.save(&out_dir.join("hl_abort.json"))?;
                return Err(e);
            }
        }
        print_progress("gate", iter, run.train.n_iters, buf.mean_episode_reward);
    }
    hl.save(&out_dir.join(HL_CHECKPOINT_NAME))?;
    write_curves(out_dir, "gate", &rewards, &losses)?;
    run.save(&out_dir.join("config.toml"))?;
    let manifest = TrainedManifest {
        version: 1,
        schema_hash: schema_hash(),
        config_hash: run.content_hash()?,
        n_lanes: map.n_lanes,
        seed,
        map: run.map.clone(),
        hl_checkpoint: HL_CHECKPOINT_NAME.to_string(),
        expert_checkpoints: (0..map.n_lanes).map(expert_checkpoint_name).collect(),
    };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Full curriculum: every lane expert, then the gate over the frozen pool.
pub fn run_curriculum(run: &RunConfig, seed: u64, out_dir: &Path) -> Result<TrainedManifest> {
    for lane in 0..run.map.n_lanes {
        train_expert(run, lane, seed, out_dir)?;
    }
    train_gate(run, seed, out_dir)
}

fn print_progress(label: &str, iter: usize, total: usize, reward: f64) {
    if iter == 0 || (iter + 1) % 10 == 0 || iter + 1 == total {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "[{label}] iter {}/{total} episode_reward {reward:.3}", iter + 1);
    }
}
