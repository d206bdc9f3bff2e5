//! Rule-based per-token reward: hard safety gates times a weighted sum of
//! soft scores.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::{normalize_angle, Scalar};
use crate::scene::{box_in_drivable, boxes_intersect, time_to_collision, BoxDims, MovingBox, Pose2, SceneMap, Scenario, Vec2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub comfort: f64,
    pub ttc: f64,
    pub speed: f64,
    pub progress: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            comfort: 2.0,
            ttc: 5.0,
            speed: 2.0,
            progress: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn sum(&self) -> f64 {
        self.comfort + self.ttc + self.speed + self.progress
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub max_lon_accel: f64,
    pub max_lat_accel: f64,
    pub max_yaw_rate: f64,
    pub max_yaw_accel: f64,
    pub ttc_threshold: f64,
    pub ttc_horizon: f64,
    /// Sub-step used when propagating boxes for time-to-collision.
    pub ttc_step: f64,
    pub max_overspeed_integral: f64,
    /// Floor on the expert's progress, meters.
    pub min_expert_progress: f64,
    pub normalize_by_weight_sum: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            max_lon_accel: 3.0,
            max_lat_accel: 4.0,
            max_yaw_rate: 1.0,
            max_yaw_accel: 2.0,
            ttc_threshold: 0.95,
            ttc_horizon: 3.0,
            ttc_step: 0.1,
            max_overspeed_integral: 10.0,
            min_expert_progress: 1.0,
            normalize_by_weight_sum: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.comfort, w.ttc, w.speed, w.progress].iter().any(|&x| !(x >= 0.0)) {
            return Err(invalid("reward weights must be nonnegative"));
        }
        let pos = [
            self.max_lon_accel,
            self.max_lat_accel,
            self.max_yaw_rate,
            self.max_yaw_accel,
            self.ttc_threshold,
            self.ttc_horizon,
            self.ttc_step,
            self.max_overspeed_integral,
            self.min_expert_progress,
        ];
        if pos.iter().any(|&x| !(x > 0.0)) {
            return Err(invalid("reward thresholds must be positive"));
        }
        Ok(())
    }
}

/// Per-step hard constraints; `true` means satisfied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyBits {
    pub drivable: bool,
    pub dynamic_collision: bool,
    pub static_collision: bool,
}

impl SafetyBits {
    pub fn all(&self) -> bool {
        self.drivable && self.dynamic_collision && self.static_collision
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StepReward<T: Scalar> {
    pub bits: SafetyBits,
    pub comfort: T,
    pub ttc: T,
    pub speed: T,
    pub progress: T,
    pub total: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RewardBreakdown<T: Scalar> {
    pub steps: Vec<StepReward<T>>,
    /// Overspeed integral, meters.
    pub overspeed: T,
    /// Forward arclength gained by the ego along the route, meters.
    pub ego_progress: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    pub fn totals(&self) -> Vec<T> {
        self.steps.iter().map(|s| s.total).collect()
    }

    /// No safety bit is zero at any step.
    pub fn is_safe(&self) -> bool {
        self.steps.iter().all(|s| s.bits.all())
    }

    pub fn ttc_ok(&self) -> bool {
        self.steps.iter().all(|s| s.ttc == T::one())
    }

    pub fn comfort(&self) -> T {
        self.steps.first().map_or(T::zero(), |s| s.comfort)
    }

    pub fn speed(&self) -> T {
        self.steps.first().map_or(T::zero(), |s| s.speed)
    }

    pub fn progress(&self) -> T {
        self.steps.first().map_or(T::zero(), |s| s.progress)
    }

    pub fn mean_ttc(&self) -> T {
        mean(self.steps.iter().map(|s| s.ttc))
    }

    pub fn mean_total(&self) -> T {
        mean(self.steps.iter().map(|s| s.total))
    }
}

fn mean<T: Scalar>(it: impl ExactSizeIterator<Item = T>) -> T {
    let n = it.len();
    if n == 0 {
        return T::zero();
    }
    it.sum::<T>() / T::lit(n as f64)
}

/// Safety bits for each ego pose. `others[i]` pairs an agent's box with its
/// poses at the same steps.
pub fn safety_indicators<T: Scalar>(
    ego: &[Pose2<T>],
    ego_dims: &BoxDims<T>,
    map: &SceneMap<T>,
    others: &[(BoxDims<T>, &[Pose2<T>])],
) -> Result<Vec<SafetyBits>> {
    for (i, (_, p)) in others.iter().enumerate() {
        if p.len() != ego.len() {
            return Err(invalid(format!(
                "agent {} has {} poses, ego has {}",
                i + 1,
                p.len(),
                ego.len()
            )));
        }
    }
    Ok(ego
        .iter()
        .enumerate()
        .map(|(t, pose)| SafetyBits {
            drivable: box_in_drivable(pose, ego_dims, map),
            dynamic_collision: !others
                .iter()
                .any(|(d, p)| boxes_intersect((pose, ego_dims), (&p[t], d))),
            static_collision: !map
                .static_obstacles
                .iter()
                .any(|o| boxes_intersect((pose, ego_dims), (&o.pose, &o.dims))),
        })
        .collect())
}

/// 1 when every finite-difference longitudinal and lateral acceleration, yaw
/// rate and yaw acceleration along `poses` is within bounds (inclusive).
pub fn comfort_score<T: Scalar>(poses: &[Pose2<T>], dt: T, cfg: &RewardConfig) -> T {
    if poses.len() < 2 {
        return T::one();
    }
    let speeds: Vec<T> = poses.windows(2).map(|w| w[1].position().dist(w[0].position()) / dt).collect();
    let yaw_rates: Vec<T> = poses
        .windows(2)
        .map(|w| normalize_angle(w[1].heading - w[0].heading) / dt)
        .collect();
    let ok = |v: T, lim: f64| v.abs() <= T::lit(lim);
    let turning_ok = speeds
        .iter()
        .zip(&yaw_rates)
        .all(|(&v, &w)| ok(w, cfg.max_yaw_rate) && ok(v * w, cfg.max_lat_accel));
    if !turning_ok {
        return T::zero();
    }
    for i in 1..speeds.len() {
        let lon = (speeds[i] - speeds[i - 1]) / dt;
        let yaw_acc = (yaw_rates[i] - yaw_rates[i - 1]) / dt;
        if !(ok(lon, cfg.max_lon_accel) && ok(yaw_acc, cfg.max_yaw_accel)) {
            return T::zero();
        }
    }
    T::one()
}

fn velocity<T: Scalar>(path: &[Pose2<T>], t: usize, dt: T) -> Vec2<T> {
    (path[t].position() - path[t - 1].position()) * (T::one() / dt)
}

/// Per-step time-to-collision indicator for steps `1..len`. Paths start at
/// the current pose; velocities are backward differences.
pub fn ttc_score<T: Scalar>(
    ego: &[Pose2<T>],
    ego_dims: &BoxDims<T>,
    others: &[(BoxDims<T>, &[Pose2<T>])],
    map: &SceneMap<T>,
    dt: T,
    cfg: &RewardConfig,
) -> Vec<T> {
    (1..ego.len())
        .map(|t| {
            let me = MovingBox {
                pose: ego[t],
                dims: *ego_dims,
                velocity: velocity(ego, t, dt),
            };
            let mut boxes: Vec<MovingBox<T>> = others
                .iter()
                .map(|(d, p)| MovingBox {
                    pose: p[t],
                    dims: *d,
                    velocity: velocity(p, t, dt),
                })
                .collect();
            boxes.extend(map.static_obstacles.iter().map(|o| MovingBox {
                pose: o.pose,
                dims: o.dims,
                velocity: Vec2::zero(),
            }));
            let ttc = time_to_collision(&me, &boxes, T::lit(cfg.ttc_horizon), T::lit(cfg.ttc_step));
            if ttc > T::lit(cfg.ttc_threshold) {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Overspeed integral over steps `1..len` of a path starting at the current pose.
pub fn overspeed_integral<T: Scalar>(path: &[Pose2<T>], limit: T, dt: T) -> T {
    path.windows(2)
        .map(|w| (w[1].position().dist(w[0].position()) / dt - limit).max(T::zero()) * dt)
        .sum()
}

pub fn speed_score<T: Scalar>(path: &[Pose2<T>], map: &SceneMap<T>, dt: T, cfg: &RewardConfig) -> T {
    let o = overspeed_integral(path, map.speed_limit, dt);
    (T::one() - o / T::lit(cfg.max_overspeed_integral)).max(T::zero()).min(T::one())
}

/// Sum of forward arclength increments of route projections.
pub fn route_progress<T: Scalar>(path: &[Pose2<T>], map: &SceneMap<T>) -> T {
    let s: Vec<T> = path.iter().map(|p| map.route.project(p.position()).0).collect();
    s.windows(2).map(|w| (w[1] - w[0]).max(T::zero())).sum()
}

pub fn progress_score<T: Scalar>(ego: &[Pose2<T>], expert: &[Pose2<T>], map: &SceneMap<T>, cfg: &RewardConfig) -> T {
    let e = route_progress(ego, map);
    let x = route_progress(expert, map).max(T::lit(cfg.min_expert_progress));
    (e / x).max(T::zero()).min(T::one())
}

/// Gated weighted sum for one step.
pub fn total_reward<T: Scalar>(bits: &SafetyBits, comfort: T, ttc: T, speed: T, progress: T, cfg: &RewardConfig) -> T {
    if !bits.all() {
        return T::zero();
    }
    let w = &cfg.weights;
    let s = T::lit(w.comfort) * comfort + T::lit(w.ttc) * ttc + T::lit(w.speed) * speed + T::lit(w.progress) * progress;
    if cfg.normalize_by_weight_sum {
        s / T::lit(w.sum())
    } else {
        s
    }
}

/// Full breakdown for an ego future (`ego_future.len() == horizon`) given
/// every other agent's future at the same steps.
pub fn evaluate<T: Scalar>(
    scenario: &Scenario<T>,
    ego_future: &[Pose2<T>],
    others_future: &[Vec<Pose2<T>>],
    cfg: &RewardConfig,
) -> Result<RewardBreakdown<T>> {
    let n_other = scenario.agents.len() - 1;
    if others_future.len() != n_other {
        return Err(invalid(format!(
            "expected futures for {n_other} other agents, got {}",
            others_future.len()
        )));
    }
    let f = ego_future.len();
    let ego_track = scenario.ego();
    let expert = ego_track
        .future
        .as_ref()
        .ok_or_else(|| invalid("progress needs the expert's recorded future"))?;
    let cur = *ego_track.current();

    let others: Vec<(BoxDims<T>, &[Pose2<T>])> = scenario.agents[1..]
        .iter()
        .zip(others_future)
        .map(|(a, p)| (a.dims, p.as_slice()))
        .collect();
    let bits = safety_indicators(ego_future, &ego_track.dims, &scenario.map, &others)?;

    let mut ego_path = Vec::with_capacity(f + 1);
    ego_path.push(cur);
    ego_path.extend_from_slice(ego_future);
    let other_paths: Vec<Vec<Pose2<T>>> = scenario.agents[1..]
        .iter()
        .zip(others_future)
        .map(|(a, p)| {
            let mut v = Vec::with_capacity(f + 1);
            v.push(*a.current());
            v.extend_from_slice(p);
            v
        })
        .collect();
    let other_refs: Vec<(BoxDims<T>, &[Pose2<T>])> = scenario.agents[1..]
        .iter()
        .zip(&other_paths)
        .map(|(a, p)| (a.dims, p.as_slice()))
        .collect();
    let ttc = ttc_score(&ego_path, &ego_track.dims, &other_refs, &scenario.map, scenario.dt, cfg);

    // Comfort includes the two last history poses so the first future step
    // has accelerations.
    let h = &ego_track.history;
    let mut comfort_path = h[h.len().saturating_sub(2)..].to_vec();
    comfort_path.extend_from_slice(ego_future);
    let comfort = comfort_score(&comfort_path, scenario.dt, cfg);

    let overspeed = overspeed_integral(&ego_path, scenario.map.speed_limit, scenario.dt);
    let speed = speed_score(&ego_path, &scenario.map, scenario.dt, cfg);
    let mut expert_path = vec![cur];
    expert_path.extend_from_slice(&expert[..f.min(expert.len())]);
    let ego_progress = route_progress(&ego_path, &scenario.map);
    let progress = progress_score(&ego_path, &expert_path, &scenario.map, cfg);

    let steps = bits
        .iter()
        .zip(&ttc)
        .map(|(b, &tt)| StepReward {
            bits: *b,
            comfort,
            ttc: tt,
            speed,
            progress,
            total: total_reward(b, comfort, tt, speed, progress, cfg),
        })
        .collect();
    Ok(RewardBreakdown {
        steps,
        overspeed,
        ego_progress,
    })
}
