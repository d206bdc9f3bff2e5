//! Closed-loop rollouts: a trainable ego policy acts while a frozen world
//! model moves every other agent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{invalid, Result};
use crate::policy::{log_prob, sample_token, teacher_forced, PolicyParams, SceneContext, Session};
use crate::reward::{evaluate, RewardBreakdown, RewardConfig};
use crate::scalar::Scalar;
use crate::scene::{Pose2, Scenario};
use crate::tokenizer::{encode_tracking, VocabSet};

/// A scenario prepared for the network, with tracking-encoded ground truth
/// when futures are recorded.
#[derive(Clone, Debug)]
pub struct Episode<T: Scalar> {
    pub scenario: Scenario<T>,
    pub ctx: SceneContext<T>,
    /// Per agent, the (token, reached pose) sequence closest to the recorded future.
    pub gt: Option<Vec<Vec<(usize, Pose2<T>)>>>,
}

impl<T: Scalar> Episode<T> {
    pub fn new(scenario: Scenario<T>, vocabs: &VocabSet<T>, params: &PolicyParams<T>) -> Result<Self> {
        if scenario.horizon > params.config.max_steps {
            return Err(invalid(format!(
                "scenario {} horizon {} exceeds model max_steps {}",
                scenario.id, scenario.horizon, params.config.max_steps
            )));
        }
        let ctx = SceneContext::new(&scenario, vocabs, &params.config)?;
        let gt = if scenario.has_full_futures() {
            let mut all = Vec::with_capacity(scenario.agents.len());
            for a in &scenario.agents {
                let fut = a.future.as_ref().expect("checked above");
                let (ids, poses) = encode_tracking(a.current(), fut, vocabs.get(a.category))?;
                all.push(ids.into_iter().zip(poses).collect());
            }
            Some(all)
        } else {
            None
        };
        Ok(Self { scenario, ctx, gt })
    }

    pub fn horizon(&self) -> usize {
        self.scenario.horizon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Other agents sampled from the world model.
    Reactive,
    /// Other agents follow their recorded futures.
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Rollout<T: Scalar> {
    /// `tokens[agent][step]`, ego first.
    pub tokens: Vec<Vec<usize>>,
    pub poses: Vec<Vec<Pose2<T>>>,
    /// Ego log-probs under the sampling policy.
    pub ego_log_probs: Vec<T>,
    /// Other agents' log-probs under the world model, `[agent - 1][step]`.
    pub other_log_probs: Vec<Vec<T>>,
    /// Sampling policy's ego logits per step.
    pub ego_logits: Vec<Vec<T>>,
    /// World model's logits for the ego row per step (the reference policy).
    pub ref_logits: Vec<Vec<T>>,
    /// Joint log-probability accumulated step by step, ego then agents.
    pub joint_log_prob: T,
    pub reward: RewardBreakdown<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RolloutGroup<T: Scalar> {
    pub scenario_id: String,
    pub seed: u64,
    pub rollouts: Vec<Rollout<T>>,
}

impl<T: Scalar> RolloutGroup<T> {
    /// `rewards[g][t]`.
    pub fn rewards(&self) -> Vec<Vec<T>> {
        self.rollouts.iter().map(|r| r.reward.totals()).collect()
    }

    /// Some member violates a safety bit at some step.
    pub fn is_unsafe(&self) -> bool {
        self.rollouts.iter().any(|r| !r.reward.is_safe())
    }
}

/// Independent stream per (seed, scenario index, group member).
pub fn rollout_rng(seed: u64, scenario: usize, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scenario as u64) << 20) | member as u64);
    rng
}

/// One joint future. Ego tokens come from `ego` at `temperature`; others
/// from `world` at temperature 1 (reactive) or their recorded futures
/// (replay). Draw order per step: ego, then agents by index.
pub fn dual_rollout<T: Scalar>(
    ego: &PolicyParams<T>,
    world: &PolicyParams<T>,
    ep: &Episode<T>,
    rng: &mut ChaCha8Rng,
    temperature: f64,
    mode: AgentMode,
    reward_cfg: &RewardConfig,
) -> Result<Rollout<T>> {
    if ego.config != world.config {
        return Err(invalid("ego and world models must share a configuration"));
    }
    let gt = match mode {
        AgentMode::Replay => Some(
            ep.gt
                .as_ref()
                .ok_or_else(|| invalid(format!("replay needs recorded futures in {}", ep.scenario.id)))?,
        ),
        AgentMode::Reactive => None,
    };
    let ctx = &ep.ctx;
    let n = ctx.num_agents();
    let f = ep.horizon();
    let all: Vec<usize> = (0..n).collect();
    let (mut es, mut e_logits) = Session::new(ego, ctx, &[0])?;
    let (mut ws, mut w_logits) = Session::new(world, ctx, &all)?;

    let mut tokens = vec![Vec::with_capacity(f); n];
    let mut poses = vec![Vec::with_capacity(f); n];
    let mut cur: Vec<Pose2<T>> = (0..n).map(|a| ctx.current_pose(a)).collect();
    let mut ego_log_probs = Vec::with_capacity(f);
    let mut other_log_probs = vec![Vec::with_capacity(f); n - 1];
    let mut ego_logits = Vec::with_capacity(f);
    let mut ref_logits = Vec::with_capacity(f);
    let mut joint = T::zero();

    for t in 0..f {
        let mut step = Vec::with_capacity(n);
        let id = sample_token(&e_logits[0], rng, temperature);
        let lp = log_prob(&e_logits[0], id);
        joint += lp;
        ego_log_probs.push(lp);
        let pose = ctx.apply_token(0, &cur[0], id)?;
        step.push((id, pose));
        for a in 1..n {
            let (id, pose) = match gt {
                Some(gt) => gt[a][t],
                None => {
                    let id = sample_token(&w_logits[a], rng, 1.0);
                    (id, ctx.apply_token(a, &cur[a], id)?)
                }
            };
            let lp = log_prob(&w_logits[a], id);
            joint += lp;
            other_log_probs[a - 1].push(lp);
            step.push((id, pose));
        }
        ego_logits.push(std::mem::take(&mut e_logits[0]));
        ref_logits.push(std::mem::take(&mut w_logits[0]));
        for (a, &(id, pose)) in step.iter().enumerate() {
            tokens[a].push(id);
            poses[a].push(pose);
            cur[a] = pose;
        }
        if t + 1 < f {
            e_logits = es.advance(&step, &[0])?;
            w_logits = ws.advance(&step, &all)?;
        }
    }

    let reward = evaluate(&ep.scenario, &poses[0], &poses[1..], reward_cfg)?;
    Ok(Rollout {
        tokens,
        poses,
        ego_log_probs,
        other_log_probs,
        ego_logits,
        ref_logits,
        joint_log_prob: joint,
        reward,
    })
}

/// `g` reactive rollouts with ego temperature 1, member `i` drawing from
/// `rollout_rng(seed, scenario_index, i)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_group<T: Scalar>(
    ego: &PolicyParams<T>,
    world: &PolicyParams<T>,
    ep: &Episode<T>,
    g: usize,
    seed: u64,
    scenario_index: usize,
    reward_cfg: &RewardConfig,
) -> Result<RolloutGroup<T>> {
    if g < 2 {
        return Err(invalid("group size must be at least 2"));
    }
    let rollouts = (0..g)
        .map(|i| {
            let mut rng = rollout_rng(seed, scenario_index, i);
            dual_rollout(ego, world, ep, &mut rng, 1.0, AgentMode::Reactive, reward_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        scenario_id: ep.scenario.id.clone(),
        seed,
        rollouts,
    })
}

/// Greedy ego rollouts, one per episode.
pub fn closed_loop_eval<T: Scalar>(
    ego: &PolicyParams<T>,
    world: &PolicyParams<T>,
    episodes: &[Episode<T>],
    mode: AgentMode,
    seed: u64,
    reward_cfg: &RewardConfig,
) -> Result<Vec<Rollout<T>>> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = rollout_rng(seed, i, 0);
            dual_rollout(ego, world, ep, &mut rng, 0.0, mode, reward_cfg)
        })
        .collect()
}

/// Joint log-probability of a finished rollout recomputed with full
/// teacher-forced passes, summed in sampling order.
pub fn joint_log_prob<T: Scalar>(
    ego: &PolicyParams<T>,
    world: &PolicyParams<T>,
    ep: &Episode<T>,
    r: &Rollout<T>,
) -> Result<T> {
    let n = ep.ctx.num_agents();
    let f = ep.horizon();
    let inputs: Vec<Vec<(usize, Pose2<T>)>> = (0..n)
        .map(|a| (0..f - 1).map(|t| (r.tokens[a][t], r.poses[a][t])).collect())
        .collect();
    let table = |params: &PolicyParams<T>, agents: &[usize]| -> Result<Vec<Vec<T>>> {
        let predict: Vec<(usize, usize)> = (0..f).flat_map(|t| agents.iter().map(move |&a| (a, t))).collect();
        let mut tape = Tape::new(&params.values);
        let groups = teacher_forced(&mut tape, params, &ep.ctx, &inputs, &predict)?;
        let k = params.config.vocab_size;
        let mut out = vec![T::zero(); predict.len()];
        for g in &groups {
            let v = tape.value(g.var);
            for (i, &pos) in g.rows.iter().enumerate() {
                let (a, t) = predict[pos];
                out[pos] = log_prob(&v[i * k..(i + 1) * k], r.tokens[a][t]);
            }
        }
        Ok(out.chunks(agents.len()).map(|c| c.to_vec()).collect())
    };
    let e = table(ego, &[0])?;
    let others: Vec<usize> = (1..n).collect();
    let w = if others.is_empty() { vec![vec![]; f] } else { table(world, &others)? };
    let mut joint = T::zero();
    for t in 0..f {
        joint += e[t][0];
        for lp in &w[t] {
            joint += *lp;
        }
    }
    Ok(joint)
}
