//! Actor-critic policies for both levels and the expert dispatcher.
//!
//! The high-level policy is categorical over lanes; each low-level expert
//! emits a tanh-squashed diagonal Gaussian over (speed, steering). Both use a
//! shared trunk (tanh MLP ending in tanh features) with separate linear actor
//! and critic heads. The dispatcher routes every decision to exactly one
//! expert and counts rollout forward passes, so sparsity is checkable.
//!
//! Log-stds are state-dependent: the expert actor emits raw values mapped
//! smoothly onto [-5, 1] via tanh, so gradients never die at the clamp.

use crate::error::{Error, Result};
use crate::map::ReferencePath;
use crate::nn::{Activation, MlpNet};
use crate::obs::{observe_high, observe_low, schema_hash, ObsParams, HL_LEN, LL_LEN, REF_POINTS};
use crate::sim::{ControlAction, World};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

pub const HIDDEN: [usize; 2] = [64, 64];
pub const LOGSTD_MIN: f64 = -5.0;
// Cap sigma at 1: a pre-squash Gaussian wider than that is already
// bang-bang after tanh, so headroom above only feeds the entropy bonus.
pub const LOGSTD_MAX: f64 = 0.0;
/// Raw actor output mapping to an initial log-std of -0.5.
pub const LOGSTD_RAW_INIT: f64 = 1.0986122886681098; // atanh(0.8)
// Soft bound on the pre-squash mean. Beyond ~2 the tanh squash is flat, so
// sampled actions stop varying and the score gradient can strand the mean
// on an actuator rail; the bound keeps an escape gradient alive.
pub const MU_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|l| l - lse).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gauss_log_pdf(u: f64, mu: f64, logstd: f64) -> f64 {
    let z = (u - mu) / logstd.exp();
    -0.5 * z * z - logstd - 0.5 * (2.0 * PI).ln()
}

/// Map an unbounded pre-squash value into [lo, hi].
pub fn tanh_squash(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (u.tanh() + 1.0) / 2.0 * (hi - lo)
}

/// log |da/du| of the squash map, via the stable identity
/// log(1 - tanh²(u)) = 2·(log 2 - u - softplus(-2u)).
pub fn squash_log_correction(u: f64, lo: f64, hi: f64) -> f64 {
    ((hi - lo) / 2.0).ln() + 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Joint log-density of a squashed-Gaussian action, evaluated at the stored
/// pre-squash point `u`. Used both at sampling time and for PPO ratios.
pub fn squashed_log_prob(u: &[f64], mu: &[f64], logstd: &[f64], bounds: &[[f64; 2]]) -> f64 {
    let mut lp = 0.0;
    for i in 0..u.len() {
        lp += gauss_log_pdf(u[i], mu[i], logstd[i]);
        lp -= squash_log_correction(u[i], bounds[i][0], bounds[i][1]);
    }
    lp
}

/// Smooth map from a raw actor output onto the bounded log-std range.
pub fn logstd_from_raw(raw: f64) -> f64 {
    LOGSTD_MIN + (LOGSTD_MAX - LOGSTD_MIN) * (raw.tanh() + 1.0) / 2.0
}

pub fn mu_from_raw(raw: f64) -> f64 {
    MU_LIMIT * (raw / MU_LIMIT).tanh()
}

/// d mu / d raw, for routing gradients back through the actor head.
pub fn dmu_draw(raw: f64) -> f64 {
    let t = (raw / MU_LIMIT).tanh();
    1.0 - t * t
}

/// d logstd / d raw, for routing gradients back through the actor head.
pub fn dlogstd_draw(raw: f64) -> f64 {
    let t = raw.tanh();
    (LOGSTD_MAX - LOGSTD_MIN) / 2.0 * (1.0 - t * t)
}

/// Caches from one shared-trunk forward pass, consumed by `backward`.
pub struct TrunkHeadsCache {
    trunk: crate::nn::FwdCache,
    actor: crate::nn::FwdCache,
    critic: crate::nn::FwdCache,
}

/// Shared-trunk actor-critic wiring used by both levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorCritic {
    pub trunk: MlpNet,
    pub actor: MlpNet,
    pub critic: MlpNet,
}

impl ActorCritic {
    fn new(
        obs_len: usize,
        actor_out: usize,
        actor_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActorCritic> {
        let trunk_sizes = [obs_len, HIDDEN[0], HIDDEN[1]];
        let trunk = MlpNet::init(&trunk_sizes, Activation::Tanh, 2f64.sqrt(), 2f64.sqrt(), rng)?;
        let actor = MlpNet::init(&[HIDDEN[1], actor_out], Activation::Linear, 1.0, actor_gain, rng)?;
        let critic = MlpNet::init(&[HIDDEN[1], 1], Activation::Linear, 1.0, 1.0, rng)?;
        Ok(ActorCritic { trunk, actor, critic })
    }

    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, f64, TrunkHeadsCache)> {
        let (feat, trunk_cache) = self.trunk.forward(obs)?;
        let (actor_out, actor_cache) = self.actor.forward(&feat)?;
        let (value, critic_cache) = self.critic.forward(&feat)?;
        Ok((
            actor_out,
            value[0],
            TrunkHeadsCache {
                trunk: trunk_cache,
                actor: actor_cache,
                critic: critic_cache,
            },
        ))
    }

    /// Flat gradient (aligned with `flat_params`) of a scalar objective with
    /// the given gradients at the actor output and the value output.
    pub fn backward(
        &self,
        cache: &TrunkHeadsCache,
        d_actor_out: &[f64],
        d_value: f64,
    ) -> Result<Vec<f64>> {
        let (actor_grads, d_feat_a) = self.actor.backward(&cache.actor, d_actor_out)?;
        let (critic_grads, d_feat_c) = self.critic.backward(&cache.critic, &[d_value])?;
        let d_feat: Vec<f64> = d_feat_a.iter().zip(&d_feat_c).map(|(a, b)| a + b).collect();
        let (trunk_grads, _) = self.trunk.backward(&cache.trunk, &d_feat)?;
        let mut flat = trunk_grads.flat();
        flat.extend(actor_grads.flat());
        flat.extend(critic_grads.flat());
        Ok(flat)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.trunk.flat_params();
        p.extend(self.actor.flat_params());
        p.extend(self.critic.flat_params());
        p
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let (nt, na) = (self.trunk.param_count(), self.actor.param_count());
        let nc = self.critic.param_count();
        if params.len() != nt + na + nc {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                nt + na + nc,
                params.len()
            )));
        }
        self.trunk.set_flat_params(&params[..nt])?;
        self.actor.set_flat_params(&params[nt..nt + na])?;
        self.critic.set_flat_params(&params[nt + na..])?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.actor.param_count() + self.critic.param_count()
    }
}

/// Categorical lane-selection policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HighLevelPolicy {
    pub net: ActorCritic,
    pub n_lanes: usize,
}

impl HighLevelPolicy {
    pub fn new(n_lanes: usize, seed: u64) -> Result<HighLevelPolicy> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(HighLevelPolicy {
            net: ActorCritic::new(HL_LEN, n_lanes, 0.01, &mut rng)?,
            n_lanes,
        })
    }

    /// Lane decision with its log-probability and the critic value.
    /// Greedy mode takes the argmax (ties resolve to the lower index).
    pub fn decide(
        &self,
        obs: &[f64],
        mode: ActionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(usize, f64, f64)> {
        let (logits, value, _) = self.net.forward(obs)?;
        for l in &logits {
            if !l.is_finite() {
                return Err(Error::NonFinite("lane logits".into()));
            }
        }
        let logp = log_softmax(&logits);
        let decision = match mode {
            ActionMode::Greedy => {
                let mut best = 0;
                for (i, l) in logits.iter().enumerate() {
                    if *l > logits[best] {
                        best = i;
                    }
                }
                best
            }
            ActionMode::Sample => {
                let probs = softmax(&logits);
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        Ok((decision, logp[decision], value))
    }
}

/// Gaussian head outputs of one expert forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GaussParams {
    pub mu: [f64; 2],
    pub logstd: [f64; 2],
    /// Raw actor outputs: [mu_raw x2, logstd_raw x2].
    pub raw: [f64; 4],
}

/// One sampled (or greedy) expert action with everything PPO needs stored.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpertAction {
    pub action: ControlAction,
    /// Pre-squash Gaussian sample; ratios re-evaluate the density here.
    pub u: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
}

/// Lane-keeping/reaching driving expert for one target lane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowLevelExpert {
    pub target_lane: usize,
    pub net: ActorCritic,
    /// [[v_min, v_max], [delta_min, delta_max]]
    pub bounds: [[f64; 2]; 2],
}

impl LowLevelExpert {
    pub fn new(target_lane: usize, bounds: [[f64; 2]; 2], seed: u64) -> Result<LowLevelExpert> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ActorCritic::new(LL_LEN, 4, 0.01, &mut rng)?;
        // Raw log-std outputs start at logstd ≈ -0.5 for healthy exploration.
        net.actor.biases[0][2] = LOGSTD_RAW_INIT;
        net.actor.biases[0][3] = LOGSTD_RAW_INIT;
        Ok(LowLevelExpert {
            target_lane,
            net,
            bounds,
        })
    }

    pub fn gauss_params(actor_out: &[f64]) -> GaussParams {
        GaussParams {
            mu: [mu_from_raw(actor_out[0]), mu_from_raw(actor_out[1])],
            raw: [actor_out[0], actor_out[1], actor_out[2], actor_out[3]],
            logstd: [logstd_from_raw(actor_out[2]), logstd_from_raw(actor_out[3])],
        }
    }

    /// Sample or take the mean action, with log-probability and value.
    pub fn act(
        &self,
        obs: &[f64],
        mode: ActionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExpertAction> {
        let (actor_out, value, _) = self.net.forward(obs)?;
        let p = Self::gauss_params(&actor_out);
        let mut u = [0.0; 2];
        for i in 0..2 {
            u[i] = match mode {
                ActionMode::Greedy => p.mu[i],
                ActionMode::Sample => {
                    let z: f64 = StandardNormal.sample(rng);
                    p.mu[i] + p.logstd[i].exp() * z
                }
            };
        }
        let log_prob = squashed_log_prob(&u, &p.mu, &p.logstd, &self.bounds);
        let action = ControlAction {
            speed: tanh_squash(u[0], self.bounds[0][0], self.bounds[0][1]),
            steering: tanh_squash(u[1], self.bounds[1][0], self.bounds[1][1]),
        };
        if !action.speed.is_finite() || !action.steering.is_finite() {
            return Err(Error::NonFinite("expert action".into()));
        }
        Ok(ExpertAction {
            action,
            u,
            log_prob,
            value,
        })
    }
}

/// One expert per lane plus an invocation counter for sparsity checks.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExpertPool {
    pub experts: Vec<LowLevelExpert>,
    #[serde(skip)]
    forward_count: AtomicU64,
}

impl Clone for ExpertPool {
    fn clone(&self) -> Self {
        ExpertPool {
            experts: self.experts.clone(),
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

impl ExpertPool {
    pub fn new(experts: Vec<LowLevelExpert>) -> Result<ExpertPool> {
        for (lane, e) in experts.iter().enumerate() {
            if e.target_lane != lane {
                return Err(Error::Config(format!(
                    "expert at slot {lane} targets lane {}",
                    e.target_lane
                )));
            }
        }
        Ok(ExpertPool {
            experts,
            forward_count: AtomicU64::new(0),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Rollout forward passes so far; exactly one per agent-step.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    /// Evaluate ONLY the decided lane's expert (the whole point of the pool:
    /// one small network runs per agent per step).
    pub fn act_expert(
        &self,
        decision: usize,
        obs: &[f64],
        mode: ActionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ExpertAction> {
        let expert = self.experts.get(decision).ok_or(Error::InvalidDecision {
            decision,
            n_lanes: self.experts.len(),
        })?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        expert.act(obs, mode, rng)
    }
}

/// Everything one agent's timestep produced, for traces and analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision: usize,
    pub hl_log_prob: f64,
    pub hl_value: f64,
    pub ll_action: ControlAction,
    pub ll_log_prob: f64,
    pub ll_value: f64,
}

/// Full two-level step for one agent: observe, decide a lane, build the
/// reference path for that lane, then run exactly that lane's expert.
/// Pure in the world; the caller applies the action and target lane.
pub fn hierarchical_step(
    hl: &HighLevelPolicy,
    pool: &ExpertPool,
    world: &World,
    ego_slot: usize,
    params: &ObsParams,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<DecisionRecord> {
    let obs_h = observe_high(world, ego_slot, params)?;
    let (decision, hl_log_prob, hl_value) = hl.decide(&obs_h, mode, rng)?;
    let reference = reference_for_decision(world, ego_slot, decision, params)?;
    let obs_l = observe_low(world, ego_slot, &reference, params)?;
    let ea = pool.act_expert(decision, &obs_l, mode, rng)?;
    Ok(DecisionRecord {
        decision,
        hl_log_prob,
        hl_value,
        ll_action: ea.action,
        ll_log_prob: ea.log_prob,
        ll_value: ea.value,
    })
}

/// Reference path for an agent under a given lane decision.
pub fn reference_for_decision(
    world: &World,
    ego_slot: usize,
    decision: usize,
    params: &ObsParams,
) -> Result<ReferencePath> {
    world.map.reference_path_for(
        world.vehicles[ego_slot].position,
        decision,
        REF_POINTS,
        params.ref_spacing,
    )
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    version: u32,
    /// Observation-layout hash; loading refuses a mismatch.
    schema_hash: String,
    payload: T,
}

fn save_checkpoint<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        schema_hash: schema_hash(),
        payload,
    };
    let json = serde_json::to_string(&cp)?;
    std::fs::write(path, json)?;
    Ok(())
}

fn load_checkpoint<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let cp: Checkpoint<T> = serde_json::from_str(&text)?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported",
            cp.version
        )));
    }
    let current = schema_hash();
    if cp.schema_hash != current {
        return Err(Error::SchemaMismatch {
            stored: cp.schema_hash,
            current,
        });
    }
    Ok(cp.payload)
}

impl HighLevelPolicy {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    pub fn load(path: &Path) -> Result<HighLevelPolicy> {
        load_checkpoint(path)
    }
}

impl LowLevelExpert {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self)
    }

    pub fn load(path: &Path) -> Result<LowLevelExpert> {
        load_checkpoint(path)
    }
}
