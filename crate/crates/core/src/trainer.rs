//! Imitation pre-training and group-relative policy fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::policy::{kl_categorical, teacher_forced, PolicyParams};
use crate::reward::RewardConfig;
use crate::rollout::{sample_group, Episode, RolloutGroup};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Grpo,
    VdGrpo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub advantage_mode: AdvantageMode,
    pub group_size: usize,
    pub beta: f64,
    pub c: f64,
    pub sigma_floor: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Scenarios drawn (without replacement) per fine-tuning epoch; all when `None`.
    pub scenarios_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            advantage_mode: AdvantageMode::VdGrpo,
            group_size: 4,
            beta: 0.1,
            c: 0.1,
            sigma_floor: 1e-6,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 16,
            scenarios_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale imitation schedule.
    pub fn pretrain() -> Self {
        Self {
            epochs: 8,
            ..Self::default()
        }
    }

    /// Desk-scale fine-tuning schedule: G = 4, beta = c = 0.1.
    pub fn finetune(mode: AdvantageMode) -> Self {
        Self {
            stage: Stage::Finetune,
            advantage_mode: mode,
            learning_rate: 1e-4,
            epochs: 4,
            scenarios_per_epoch: Some(400),
            seed: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(invalid("scaling constant c must be positive"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(invalid("sigma_floor must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.stage == Stage::Finetune && self.group_size < 2 {
            return Err(invalid("group size must be at least 2"));
        }
        Ok(())
    }
}

/// Shaped rewards and reward-to-go advantages of one group, `[g][t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdvantageTensor<T: Scalar> {
    pub shaped: Vec<Vec<T>>,
    pub advantages: Vec<Vec<T>>,
    pub mean: T,
    /// Group standard deviation; set only by the normalizing variant.
    pub std: Option<T>,
}

fn check_matrix<T>(r: &[Vec<T>]) -> Result<usize> {
    if r.len() < 2 {
        return Err(invalid("group size must be at least 2"));
    }
    let f = r[0].len();
    if f == 0 || r.iter().any(|row| row.len() != f) {
        return Err(invalid("group rewards must be a non-empty rectangular matrix"));
    }
    Ok(f)
}

/// Two-pass mean; the correction pass makes a constant matrix's mean exact.
fn group_mean<T: Scalar>(r: &[Vec<T>]) -> T {
    let n = T::lit((r.len() * r[0].len()) as f64);
    let m0 = r.iter().flatten().cloned().sum::<T>() / n;
    m0 + r.iter().flatten().map(|&x| x - m0).sum::<T>() / n
}

/// `A[t] = sum_{tau >= t} shaped[tau]`, accumulated from the last step.
pub fn reward_to_go<T: Scalar>(shaped: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); shaped.len()];
    let mut acc = T::zero();
    for t in (0..shaped.len()).rev() {
        acc = shaped[t] + acc;
        out[t] = acc;
    }
    out
}

/// Group-normalized shaping: `(R - mean) / max(std, floor)` over all G·F
/// token rewards (population std).
pub fn shape_rewards_grpo<T: Scalar>(r: &[Vec<T>], sigma_floor: T) -> Result<AdvantageTensor<T>> {
    check_matrix(r)?;
    let mu = group_mean(r);
    let n = T::lit((r.len() * r[0].len()) as f64);
    let var = r.iter().flatten().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    let sigma = var.sqrt();
    let denom = sigma.max(sigma_floor);
    let shaped: Vec<Vec<T>> = r.iter().map(|row| row.iter().map(|&x| (x - mu) / denom).collect()).collect();
    let advantages = shaped.iter().map(|s| reward_to_go(s)).collect();
    Ok(AdvantageTensor {
        shaped,
        advantages,
        mean: mu,
        std: Some(sigma),
    })
}

/// Centered shaping with a fixed scale: `(R - mean) / c`.
pub fn shape_rewards_vdgrpo<T: Scalar>(r: &[Vec<T>], c: T) -> Result<AdvantageTensor<T>> {
    if !(c > T::zero()) {
        return Err(invalid("scaling constant c must be positive"));
    }
    check_matrix(r)?;
    let mu = group_mean(r);
    let shaped: Vec<Vec<T>> = r.iter().map(|row| row.iter().map(|&x| (x - mu) / c).collect()).collect();
    let advantages = shaped.iter().map(|s| reward_to_go(s)).collect();
    Ok(AdvantageTensor {
        shaped,
        advantages,
        mean: mu,
        std: None,
    })
}

pub fn shape_rewards<T: Scalar>(r: &[Vec<T>], cfg: &TrainConfig) -> Result<AdvantageTensor<T>> {
    match cfg.advantage_mode {
        AdvantageMode::Grpo => shape_rewards_grpo(r, T::lit(cfg.sigma_floor)),
        AdvantageMode::VdGrpo => shape_rewards_vdgrpo(r, T::lit(cfg.c)),
    }
}

fn accumulate<T: Scalar>(tape: &mut Tape<'_, T>, total: Option<Var>, v: Var) -> Var {
    match total {
        None => v,
        Some(t) => tape.add(t, v),
    }
}

/// Teacher-forced negative log-likelihood of every agent's ground-truth
/// tokens, averaged over all (step, agent) terms.
pub fn pretrain_loss_graph<'p, T: Scalar>(tape: &mut Tape<'p, T>, params: &'p PolicyParams<T>, ep: &Episode<T>) -> Result<Var> {
    let gt = ep
        .gt
        .as_ref()
        .ok_or_else(|| invalid(format!("scenario {} lacks recorded futures", ep.scenario.id)))?;
    let n = ep.ctx.num_agents();
    let f = ep.horizon();
    let inputs: Vec<Vec<_>> = gt.iter().map(|g| g[..f - 1].to_vec()).collect();
    let predict: Vec<(usize, usize)> = (0..f).flat_map(|t| (0..n).map(move |a| (a, t))).collect();
    let groups = teacher_forced(tape, params, &ep.ctx, &inputs, &predict)?;
    let mut total = None;
    for g in &groups {
        let lp = tape.log_softmax(g.var);
        let targets = g
            .rows
            .iter()
            .map(|&pos| {
                let (a, t) = predict[pos];
                gt[a][t].0
            })
            .collect();
        let picked = tape.pick(lp, targets);
        let s = tape.sum_all(picked);
        total = Some(accumulate(tape, total, s));
    }
    let total = total.expect("at least one agent");
    Ok(tape.scale(total, T::lit(-1.0 / (f * n) as f64)))
}

/// Loss value and gradient.
pub fn pretrain_loss<T: Scalar>(params: &PolicyParams<T>, ep: &Episode<T>) -> Result<(T, Vec<T>)> {
    crate::autodiff::grad(&params.values, |tape| pretrain_loss_graph(tape, params, ep))
}

/// `-(1/GF) sum_g sum_t [ratio * A - beta * KL(pi || ref)]` where the ratio
/// is taken against the log-probs stored at sampling time.
pub fn finetune_loss_graph<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    params: &'p PolicyParams<T>,
    ep: &Episode<T>,
    group: &RolloutGroup<T>,
    adv: &AdvantageTensor<T>,
    beta: T,
) -> Result<Var> {
    let n = ep.ctx.num_agents();
    let f = ep.horizon();
    let k = params.config.vocab_size;
    let g_count = group.rollouts.len();
    if adv.advantages.len() != g_count {
        return Err(invalid("advantages do not match the group size"));
    }
    let predict: Vec<(usize, usize)> = (0..f).map(|t| (0, t)).collect();
    let mut total = None;
    let mut ratios = Vec::with_capacity(g_count);
    for (gi, r) in group.rollouts.iter().enumerate() {
        let inputs: Vec<Vec<_>> = (0..n)
            .map(|a| (0..f - 1).map(|t| (r.tokens[a][t], r.poses[a][t])).collect())
            .collect();
        let groups = teacher_forced(tape, params, &ep.ctx, &inputs, &predict)?;
        let logits = groups[0].var;
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, r.tokens[0].clone());
        let old = tape.constant(r.ego_log_probs.clone(), f, 1);
        let diff = tape.sub(picked, old);
        let ratio = tape.exp(diff);
        let ratio = tape.named(ratio, "importance_ratio");
        ratios.push(ratio);
        let a = tape.constant(adv.advantages[gi].clone(), f, 1);
        let gain = tape.mul(ratio, a);

        let mut lq = vec![T::zero(); f * k];
        for (t, row) in r.ref_logits.iter().enumerate() {
            log_softmax_row(row, &mut lq[t * k..(t + 1) * k]);
        }
        let lq = tape.constant(lq, f, k);
        let p = tape.exp(lp);
        let d = tape.sub(lp, lq);
        let pk = tape.mul(p, d);
        let kl = tape.row_sum(pk);
        let kl = tape.scale(kl, beta);
        let term = tape.sub(gain, kl);
        let s = tape.sum_all(term);
        total = Some(accumulate(tape, total, s));
    }
    for (gi, &ratio) in ratios.iter().enumerate() {
        if let Some(t) = tape.value(ratio).iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("importance ratio at group member {gi}, step {t}"),
            });
        }
    }
    let total = total.expect("group is non-empty");
    Ok(tape.scale(total, T::lit(-1.0 / (g_count * f) as f64)))
}

pub fn finetune_loss<T: Scalar>(
    params: &PolicyParams<T>,
    ep: &Episode<T>,
    group: &RolloutGroup<T>,
    adv: &AdvantageTensor<T>,
    beta: T,
) -> Result<(T, Vec<T>)> {
    crate::autodiff::grad(&params.values, |tape| finetune_loss_graph(tape, params, ep, group, adv, beta))
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grads.len(), "gradient length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer state length mismatch");
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::one() - T::lit(self.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let wd = T::lit(weight_decay);
        let eps = T::lit(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + eps) + wd * params[i]);
        }
    }
}

/// Half-cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub mean_reward: Option<f64>,
    pub unsafe_group_ratio: Option<f64>,
    pub comfort_mean: Option<f64>,
    pub ttc_mean: Option<f64>,
    pub speed_mean: Option<f64>,
    pub progress_mean: Option<f64>,
    pub kl_mean: Option<f64>,
    pub lr: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entries serialize")
    }
}

fn mean_grad<T: Scalar>(sum: &mut [T], count: usize) {
    let s = T::one() / T::lit(count as f64);
    for g in sum.iter_mut() {
        *g *= s;
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Imitation training with a cosine schedule. `on_epoch` sees the params
/// after each epoch (checkpointing).
pub fn run_pretrain<T, F>(
    params: &mut PolicyParams<T>,
    episodes: &[Episode<T>],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    T: Scalar,
    F: FnMut(&EpochLog, &PolicyParams<T>) -> Result<()>,
{
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut opt = AdamW::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = episodes.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = vec![T::zero(); params.len()];
            for &i in batch {
                let (l, gi) = pretrain_loss(params, &episodes[i])?;
                loss_sum += l.as_f64();
                add_into(&mut g, &gi);
            }
            mean_grad(&mut g, batch.len());
            lr = cosine_lr(cfg.learning_rate, step, total);
            opt.update(&mut params.values, &g, lr, cfg.weight_decay);
            step += 1;
        }
        params.check_finite()?;
        let log = EpochLog {
            epoch,
            stage: Stage::Pretrain,
            loss: loss_sum / episodes.len() as f64,
            mean_reward: None,
            unsafe_group_ratio: None,
            comfort_mean: None,
            ttc_mean: None,
            speed_mean: None,
            progress_mean: None,
            kl_mean: None,
            lr,
        };
        log::info!("pretrain epoch {epoch}: loss {:.5}", log.loss);
        on_epoch(&log, params)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Statistics of the groups sampled during one epoch.
#[derive(Default)]
struct GroupStats {
    groups: usize,
    unsafe_groups: usize,
    rollouts: usize,
    reward: f64,
    comfort: f64,
    ttc: f64,
    speed: f64,
    progress: f64,
    kl: f64,
    kl_steps: usize,
}

impl GroupStats {
    fn add<T: Scalar>(&mut self, g: &RolloutGroup<T>) {
        self.groups += 1;
        if g.is_unsafe() {
            self.unsafe_groups += 1;
        }
        for r in &g.rollouts {
            self.rollouts += 1;
            self.reward += r.reward.mean_total().as_f64();
            self.comfort += r.reward.comfort().as_f64();
            self.ttc += r.reward.mean_ttc().as_f64();
            self.speed += r.reward.speed().as_f64();
            self.progress += r.reward.progress().as_f64();
            for (p, q) in r.ego_logits.iter().zip(&r.ref_logits) {
                self.kl += kl_categorical(p, q).as_f64();
                self.kl_steps += 1;
            }
        }
    }
}

/// Policy-gradient fine-tuning of `params` against the frozen `world`
/// model (also the KL reference). The old policy is snapshotted per batch.
pub fn run_finetune<T, F>(
    params: &mut PolicyParams<T>,
    world: &PolicyParams<T>,
    episodes: &[Episode<T>],
    cfg: &TrainConfig,
    reward_cfg: &RewardConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    T: Scalar,
    F: FnMut(&EpochLog, &PolicyParams<T>) -> Result<()>,
{
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut opt = AdamW::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta = T::lit(cfg.beta);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let take = cfg.scenarios_per_epoch.unwrap_or(episodes.len()).min(episodes.len());
        let epoch_seed = cfg.seed.wrapping_add(1 + epoch as u64);
        let mut stats = GroupStats::default();
        let mut loss_sum = 0.0;
        for batch in order[..take].chunks(cfg.batch_size) {
            let snapshot = params.clone();
            let mut g = vec![T::zero(); params.len()];
            for &i in batch {
                let ep = &episodes[i];
                let group = sample_group(&snapshot, world, ep, cfg.group_size, epoch_seed, i, reward_cfg)?;
                stats.add(&group);
                let adv = shape_rewards(&group.rewards(), cfg)?;
                let (l, gi) = finetune_loss(params, ep, &group, &adv, beta)?;
                loss_sum += l.as_f64();
                add_into(&mut g, &gi);
            }
            mean_grad(&mut g, batch.len());
            opt.update(&mut params.values, &g, cfg.learning_rate, cfg.weight_decay);
        }
        params.check_finite()?;
        let r = stats.rollouts.max(1) as f64;
        let log = EpochLog {
            epoch,
            stage: Stage::Finetune,
            loss: loss_sum / take.max(1) as f64,
            mean_reward: Some(stats.reward / r),
            unsafe_group_ratio: Some(stats.unsafe_groups as f64 / stats.groups.max(1) as f64),
            comfort_mean: Some(stats.comfort / r),
            ttc_mean: Some(stats.ttc / r),
            speed_mean: Some(stats.speed / r),
            progress_mean: Some(stats.progress / r),
            kl_mean: Some(stats.kl / stats.kl_steps.max(1) as f64),
            lr: cfg.learning_rate,
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.5} reward {:.4} unsafe {:.3}",
            log.loss,
            stats.reward / r,
            log.unsafe_group_ratio.unwrap()
        );
        on_epoch(&log, params)?;
        logs.push(log);
    }
    Ok(logs)
}
