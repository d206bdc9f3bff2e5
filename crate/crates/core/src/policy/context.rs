use super::{ModelConfig, MAP_FEATURES, REL_FEATURES};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::scene::{Category, Pose2, Scenario, Vec2};
use crate::tokenizer::{encode_poses, MotionSegment, VocabSet};

/// A sampled map element with its tangent direction.
#[derive(Clone, Debug)]
pub struct MapPoint<T> {
    pub pose: Pose2<T>,
    pub features: [T; MAP_FEATURES],
}

/// Everything the network needs from a scenario besides future tokens.
#[derive(Clone, Debug)]
pub struct SceneContext<T: Scalar> {
    pub categories: Vec<Category>,
    pub map_points: Vec<MapPoint<T>>,
    pub dt: T,
    /// Tokens between consecutive history poses, per agent.
    pub hist_tokens: Vec<Vec<usize>>,
    /// Pose reached by each history token, per agent.
    pub hist_poses: Vec<Vec<Pose2<T>>>,
    pub vocab_sizes: [usize; 3],
    pub(crate) segments: [Vec<MotionSegment<T>>; 3],
}

/// One (agent, slot) input row: the token taken and the pose it reached.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Item<T> {
    pub agent: usize,
    pub slot: usize,
    pub token: usize,
    pub pose: Pose2<T>,
}

fn map_point<T: Scalar>(pose: Pose2<T>, kind: usize, limit: T, len: T, width: T) -> MapPoint<T> {
    let mut f = [T::zero(); MAP_FEATURES];
    f[kind] = T::one();
    f[3] = limit / T::lit(10.0);
    f[4] = len / T::lit(5.0);
    f[5] = width / T::lit(5.0);
    MapPoint { pose, features: f }
}

fn sample_segment<T: Scalar>(a: Vec2<T>, b: Vec2<T>, spacing: T, out: &mut Vec<Pose2<T>>) {
    let d = b - a;
    let len = d.norm();
    if !(len > T::zero()) {
        return;
    }
    let heading = d.angle();
    // Slack keeps the count stable under rounding noise in `len`.
    let n = (len / spacing - T::lit(1e-6)).ceil().to_usize().unwrap_or(1).max(1);
    for i in 0..n {
        let p = a + d * (T::lit(i as f64) / T::lit(n as f64));
        out.push(Pose2::new(p.x, p.y, heading));
    }
}

impl<T: Scalar> SceneContext<T> {
    pub fn new(scenario: &Scenario<T>, vocabs: &VocabSet<T>, cfg: &ModelConfig) -> Result<Self> {
        let n = scenario.agents.len();
        if n > cfg.max_agents {
            return Err(invalid(format!(
                "scenario {} has {n} agents, model supports {}",
                scenario.id, cfg.max_agents
            )));
        }
        let mut vocab_sizes = [0; 3];
        let mut segments: [Vec<MotionSegment<T>>; 3] = Default::default();
        for c in Category::ALL {
            let v = vocabs.get(c);
            if v.len() > cfg.vocab_size {
                return Err(invalid(format!(
                    "{} vocabulary has {} tokens, model head has {}",
                    c.name(),
                    v.len(),
                    cfg.vocab_size
                )));
            }
            vocab_sizes[c.index()] = v.len();
            segments[c.index()] = v.tokens().iter().map(|t| t.segment).collect();
        }
        let mut hist_tokens = Vec::with_capacity(n);
        let mut hist_poses = Vec::with_capacity(n);
        for a in &scenario.agents {
            hist_tokens.push(encode_poses(&a.history, vocabs.get(a.category))?);
            hist_poses.push(a.history[1..].to_vec());
        }

        let map = &scenario.map;
        let spacing = T::lit(cfg.map_spacing);
        let zero = T::zero();
        let mut points = Vec::new();
        let mut poses = Vec::new();
        for w in map.route.vertices().windows(2) {
            sample_segment(w[0], w[1], spacing, &mut poses);
        }
        if let Some(&last) = map.route.vertices().last() {
            let prev = map.route.vertices()[map.route.vertices().len() - 2];
            poses.push(Pose2::new(last.x, last.y, (last - prev).angle()));
        }
        points.extend(poses.drain(..).map(|p| map_point(p, 0, map.speed_limit, zero, zero)));
        for (a, b) in map.drivable.edges() {
            sample_segment(a, b, spacing, &mut poses);
        }
        points.extend(poses.drain(..).map(|p| map_point(p, 1, map.speed_limit, zero, zero)));
        for o in &map.static_obstacles {
            points.push(map_point(o.pose, 2, map.speed_limit, o.dims.length, o.dims.width));
        }

        Ok(Self {
            categories: scenario.agents.iter().map(|a| a.category).collect(),
            map_points: points,
            dt: scenario.dt,
            hist_tokens,
            hist_poses,
            vocab_sizes,
            segments,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.categories.len()
    }

    /// Input slots taken by history tokens.
    pub fn hist_slots(&self) -> usize {
        self.hist_tokens[0].len()
    }

    /// Current pose of each agent.
    pub fn current_pose(&self, agent: usize) -> Pose2<T> {
        *self.hist_poses[agent].last().expect("history has at least one token")
    }

    /// Pose reached from `from` by `agent` taking `token`.
    pub fn apply_token(&self, agent: usize, from: &Pose2<T>, token: usize) -> Result<Pose2<T>> {
        let segs = &self.segments[self.categories[agent].index()];
        let seg = segs.get(token).ok_or_else(|| {
            invalid(format!("token id {token} out of range for vocabulary of size {}", segs.len()))
        })?;
        Ok(seg.apply(from))
    }

    pub(crate) fn history_items(&self) -> Vec<Item<T>> {
        let mut items = Vec::new();
        for slot in 0..self.hist_slots() {
            for agent in 0..self.num_agents() {
                items.push(Item {
                    agent,
                    slot,
                    token: self.hist_tokens[agent][slot],
                    pose: self.hist_poses[agent][slot],
                });
            }
        }
        items
    }

    /// Up to `max_map_keys` nearest map points within `map_radius`, nearest
    /// first, ties by index.
    pub(crate) fn map_keys(&self, pose: &Pose2<T>, cfg: &ModelConfig) -> Vec<usize> {
        let r2 = T::lit(cfg.map_radius * cfg.map_radius);
        let p = pose.position();
        // Distances are bucketed to 1e-6 m² so that equidistant points keep
        // their index order after a rigid transform of the scene.
        let mut near: Vec<(i64, usize)> = self
            .map_points
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                let d2 = (m.pose.position() - p).norm_sq();
                (d2 <= r2).then(|| ((d2.as_f64() * 1e6).round() as i64, i))
            })
            .collect();
        near.sort_unstable();
        near.truncate(cfg.max_map_keys);
        near.into_iter().map(|(_, i)| i).collect()
    }
}

/// Key pose relative to the query: distance, offset in the query frame,
/// relative heading, and time gap. All inputs are frame-free.
pub(crate) fn rel_features<T: Scalar>(query: &Pose2<T>, key: &Pose2<T>, gap: T) -> [T; REL_FEATURES] {
    let local = query.to_local(key.position());
    let dh = key.heading - query.heading;
    let s = T::lit(0.1);
    [
        local.norm() * s,
        local.x * s,
        local.y * s,
        dh.cos(),
        dh.sin(),
        gap * T::lit(0.25),
    ]
}
