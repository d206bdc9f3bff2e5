//! Synthetic scenarios with a scripted, deliberately flawed expert.
//!
//! The expert follows the route with a gap-keeping longitudinal law and
//! pure-pursuit steering. On a configurable fraction of scenarios its target
//! speed is set above the limit, reproducing speeding demonstrations.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::reward::{evaluate, RewardConfig};
use crate::scene::{AgentTrack, BoxDims, Category, Polygon, Polyline, Pose2, SceneMap, Scenario, StaticObstacle, Vec2};

const LANE: f64 = 3.5;
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Curve,
    Intersection,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Curve => "curve",
            Template::Intersection => "intersection",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertGains {
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub max_decel: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub lookahead_base: f64,
    pub lookahead_gain: f64,
    pub wheelbase: f64,
    /// Lateral acceleration the expert plans curves for.
    pub curve_lat_accel: f64,
    pub sim_dt: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        Self {
            max_accel: 1.5,
            comfort_decel: 2.0,
            max_decel: 2.8,
            time_headway: 1.2,
            min_gap: 3.0,
            lookahead_base: 4.0,
            lookahead_gain: 0.6,
            wheelbase: 2.8,
            curve_lat_accel: 2.0,
            sim_dt: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_scenarios: usize,
    pub num_eval: usize,
    pub templates: Vec<Template>,
    /// Inclusive range of agents per scenario, ego included.
    pub num_agents: (usize, usize),
    pub speed_limit: (f64, f64),
    pub speeding_injection_rate: f64,
    /// Ratio of expert target speed to the limit when speeding is injected.
    pub speeding_factor: f64,
    pub obstacle_rate: f64,
    pub lead_vehicle_rate: f64,
    pub dt: f64,
    pub history: usize,
    pub horizon: usize,
    pub random_transform: bool,
    pub expert: ExpertGains,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenarios: 2000,
            num_eval: 200,
            templates: vec![Template::Straight, Template::Curve, Template::Intersection],
            num_agents: (3, 7),
            speed_limit: (8.0, 14.0),
            speeding_injection_rate: 0.12,
            speeding_factor: 1.3,
            obstacle_rate: 0.2,
            lead_vehicle_rate: 0.6,
            dt: 0.5,
            history: 3,
            horizon: 8,
            random_transform: true,
            expert: ExpertGains::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("speeding_injection_rate", self.speeding_injection_rate),
            ("obstacle_rate", self.obstacle_rate),
            ("lead_vehicle_rate", self.lead_vehicle_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if self.templates.is_empty() {
            return Err(invalid("at least one road template is required"));
        }
        let (lo, hi) = self.num_agents;
        if lo < 1 || lo > hi {
            return Err(invalid(format!("bad agent count range ({lo}, {hi})")));
        }
        let (vlo, vhi) = self.speed_limit;
        if !(vlo > 0.0 && vlo <= vhi && vhi <= 25.0) {
            return Err(invalid(format!("speed limits must lie in (0, 25] m/s, got ({vlo}, {vhi})")));
        }
        if self.speeding_factor <= 1.0 {
            return Err(invalid("speeding_factor must exceed 1"));
        }
        if self.history < 2 || self.horizon < 1 {
            return Err(invalid("need at least 2 history poses and 1 future step"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        let steps = self.dt / self.expert.sim_dt;
        if !(self.expert.sim_dt > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(invalid("dt must be a whole multiple of the expert's sim_dt"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub template: Template,
    pub has_injected_speeding: bool,
}

/// A path followed at constant speed, with optional lateral offset already
/// baked into the polyline.
struct Mover {
    path: Polyline<f64>,
    s0: f64,
    speed: f64,
}

impl Mover {
    fn pose(&self, t: f64) -> Pose2<f64> {
        let (p, dir) = self.path.sample(self.s0 + self.speed * t);
        Pose2::new(p.x, p.y, dir.angle())
    }
}

struct Layout {
    map: SceneMap<f64>,
    /// Lines other agents may travel, each paired with whether a vehicle
    /// on it shares the ego's direction.
    same_dir: Vec<Polyline<f64>>,
    opposite: Vec<Polyline<f64>>,
    crossing: Vec<Polyline<f64>>,
    sidewalks: Vec<Polyline<f64>>,
    /// Arclength on the route where the ego starts.
    ego_s: f64,
}

fn offset_line(line: &[Vec2<f64>], d: f64) -> Vec<Vec2<f64>> {
    let n = line.len();
    (0..n)
        .map(|i| {
            let a = line[i.saturating_sub(1)];
            let b = line[(i + 1).min(n - 1)];
            let dir = b - a;
            let normal = dir.perp() * (1.0 / dir.norm());
            line[i] + normal * d
        })
        .collect()
}

/// Pulls both endpoints `by` metres inward so the line stays strictly
/// inside a polygon built on the untrimmed line.
fn trim_ends(line: &[Vec2<f64>], by: f64) -> Vec<Vec2<f64>> {
    let mut v = line.to_vec();
    let n = v.len();
    let d0 = (v[1] - v[0]) * (1.0 / v[1].dist(v[0]));
    let d1 = (v[n - 2] - v[n - 1]) * (1.0 / v[n - 2].dist(v[n - 1]));
    v[0] = v[0] + d0 * by;
    v[n - 1] = v[n - 1] + d1 * by;
    v
}

fn reversed(line: &[Vec2<f64>]) -> Vec<Vec2<f64>> {
    line.iter().rev().copied().collect()
}

fn polyline(v: Vec<Vec2<f64>>) -> Result<Polyline<f64>> {
    Polyline::new(v)
}

/// Straight or curved two-lane corridor along `center`.
fn corridor(center: Vec<Vec2<f64>>, limit: f64, two_way: bool, ego_s: f64) -> Result<Layout> {
    let right = offset_line(&center, -LANE / 2.0 - 0.5);
    let left = offset_line(&center, LANE / 2.0 + LANE);
    let mut ring = right;
    ring.extend(reversed(&left));
    let drivable = Polygon::new(ring)?;
    let other = offset_line(&center, LANE);
    let route = trim_ends(&center, 5.0);
    let (same_dir, opposite) = if two_way {
        (vec![], vec![polyline(reversed(&other))?])
    } else {
        (vec![polyline(other)?], vec![])
    };
    let sidewalks = vec![
        polyline(offset_line(&center, -LANE / 2.0 - 3.0))?,
        polyline(offset_line(&center, LANE * 1.5 + 3.0))?,
    ];
    Ok(Layout {
        map: SceneMap {
            drivable,
            route: polyline(route)?,
            speed_limit: limit,
            static_obstacles: vec![],
        },
        same_dir,
        opposite,
        crossing: vec![],
        sidewalks,
        ego_s,
    })
}

fn straight_layout(limit: f64) -> Result<Layout> {
    let center = vec![Vec2::new(-80.0, 0.0), Vec2::new(220.0, 0.0)];
    corridor(center, limit, true, 80.0)
}

fn curve_layout(rng: &mut ChaCha8Rng, limit: f64) -> Result<Layout> {
    let radius = rng.gen_range(60.0..150.0);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let lead_in = rng.gen_range(40.0..90.0);
    let arc_len = 160.0;
    let mut pts = vec![Vec2::new(-60.0, 0.0), Vec2::new(lead_in, 0.0)];
    let n = (arc_len / 4.0) as usize;
    // Arc centre sits at (lead_in, sign * radius); turning left for sign = 1.
    for i in 1..=n {
        let phi = (arc_len * i as f64 / n as f64) / radius;
        pts.push(Vec2::new(
            lead_in + radius * phi.sin(),
            sign * radius * (1.0 - phi.cos()),
        ));
    }
    let last = pts[pts.len() - 1];
    let prev = pts[pts.len() - 2];
    let dir = (last - prev) * (1.0 / last.dist(prev));
    pts.push(last + dir * 60.0);
    // A left curve with the extra lane on the left keeps the inner edge radius
    // comfortably positive; a right curve mirrors it.
    if sign < 0.0 && radius - LANE * 1.5 - 1.0 < 10.0 {
        return Err(Error::Geometry("curve radius too small for the lane layout".into()));
    }
    corridor(pts, limit, false, 60.0)
}

fn intersection_layout(rng: &mut ChaCha8Rng, limit: f64) -> Result<Layout> {
    let cx = rng.gen_range(110.0..150.0);
    let (x0, x1, y0, y1) = (-80.0, 260.0, -120.0, 120.0);
    let c = 8.0;
    let h = LANE;
    let ring = vec![
        Vec2::new(x0, -h),
        Vec2::new(cx - h - c, -h),
        Vec2::new(cx - h, -h - c),
        Vec2::new(cx - h, y0),
        Vec2::new(cx + h, y0),
        Vec2::new(cx + h, -h - c),
        Vec2::new(cx + h + c, -h),
        Vec2::new(x1, -h),
        Vec2::new(x1, h),
        Vec2::new(cx + h + c, h),
        Vec2::new(cx + h, h + c),
        Vec2::new(cx + h, y1),
        Vec2::new(cx - h, y1),
        Vec2::new(cx - h, h + c),
        Vec2::new(cx - h - c, h),
        Vec2::new(x0, h),
    ];
    let drivable = Polygon::new(ring)?;
    let y = -h / 2.0;
    let turn = rng.gen_bool(0.35);
    let route = if turn {
        // Right turn onto the southbound lane through a rounded corner.
        let r = 10.0;
        let xs = cx - h / 2.0;
        let (ax, ay) = (xs - r, y - r);
        let mut pts = vec![Vec2::new(x0 + 10.0, y), Vec2::new(ax, y)];
        for i in 1..12 {
            let phi = FRAC_PI_2 * i as f64 / 12.0;
            pts.push(Vec2::new(ax + r * phi.sin(), ay + r * phi.cos()));
        }
        pts.push(Vec2::new(xs, ay));
        pts.push(Vec2::new(xs, y0 + 10.0));
        pts
    } else {
        vec![Vec2::new(x0 + 10.0, y), Vec2::new(x1 - 10.0, y)]
    };
    let horiz = |d: f64| vec![Vec2::new(x0, d), Vec2::new(x1, d)];
    let vert = |d: f64| vec![Vec2::new(cx + d, y0), Vec2::new(cx + d, y1)];
    Ok(Layout {
        map: SceneMap {
            drivable,
            route: polyline(route)?,
            speed_limit: limit,
            static_obstacles: vec![],
        },
        same_dir: vec![],
        opposite: vec![polyline(reversed(&horiz(h / 2.0)))?],
        crossing: vec![polyline(vert(h / 2.0))?, polyline(reversed(&vert(-h / 2.0)))?],
        sidewalks: vec![polyline(horiz(-h - 3.0))?, polyline(horiz(h + 3.0))?],
        ego_s: rng.gen_range(cx - 100.0..cx - 50.0) - (x0 + 10.0),
    })
}

fn dims_for(c: Category, rng: &mut ChaCha8Rng) -> BoxDims<f64> {
    let (l, w) = match c {
        Category::Vehicle => (rng.gen_range(4.2..5.0), rng.gen_range(1.8..2.0)),
        Category::Pedestrian => (0.6, 0.6),
        Category::Cyclist => (1.8, 0.7),
    };
    BoxDims { length: l, width: w }
}

struct Other {
    category: Category,
    dims: BoxDims<f64>,
    mover: Mover,
}

/// Gap-keeping acceleration toward `v0` behind a leader `gap` metres ahead
/// closing at `dv`.
fn gap_keeping_accel(v: f64, v0: f64, lead: Option<(f64, f64)>, g: &ExpertGains) -> f64 {
    let free = 1.0 - (v / v0).powi(4);
    let interaction = match lead {
        Some((gap, dv)) => {
            let s_star = g.min_gap + (v * g.time_headway + v * dv / (2.0 * (g.max_accel * g.comfort_decel).sqrt())).max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (g.max_accel * (free - interaction)).clamp(-g.max_decel, g.max_accel)
}

/// Highest curvature of the route over `[s, s + ahead]`.
fn max_curvature(route: &Polyline<f64>, s: f64, ahead: f64) -> f64 {
    let mut k: f64 = 0.0;
    let step = 2.0;
    let mut u = s;
    while u < s + ahead {
        let (_, d0) = route.sample(u);
        let (_, d1) = route.sample(u + step);
        let dh = d0.cross(d1).atan2(d0.dot(d1));
        k = k.max(dh.abs() / step);
        u += step;
    }
    k
}

struct ExpertRun {
    poses: Vec<Pose2<f64>>,
}

/// Simulates the ego from `t0` with a kinematic bicycle at `g.sim_dt`,
/// returning poses every `sample_every` sim steps.
#[allow(clippy::too_many_arguments)]
fn run_expert(
    route: &Polyline<f64>,
    start: Pose2<f64>,
    v_init: f64,
    v_target: f64,
    ego_len: f64,
    others: &[Other],
    obstacles: &[StaticObstacle<f64>],
    t0: f64,
    samples: usize,
    sample_every: usize,
    g: &ExpertGains,
) -> ExpertRun {
    let mut pose = start;
    let mut v = v_init;
    let mut poses = vec![pose];
    let mut t = t0;
    for _ in 1..samples {
        for _ in 0..sample_every {
            let (s, _) = route.project(pose.position());
            let mut lead: Option<(f64, f64)> = None;
            let mut consider = |p: Pose2<f64>, len: f64, speed: f64| {
                let (so, d) = route.project(p.position());
                if d.abs() > 2.4 || so <= s {
                    return;
                }
                let (_, dir) = route.sample(so);
                let along = speed * (p.heading - dir.angle()).cos();
                let gap = so - s - (ego_len + len) / 2.0;
                if lead.map_or(true, |(lg, _)| gap < lg) {
                    lead = Some((gap, v - along));
                }
            };
            for o in others.iter().filter(|o| o.category == Category::Vehicle) {
                consider(o.mover.pose(t), o.dims.length, o.mover.speed);
            }
            for ob in obstacles {
                consider(ob.pose, ob.dims.length, 0.0);
            }
            let kappa = max_curvature(route, s, 10.0 + 2.0 * v);
            let v_curve = if kappa > 1e-6 { (g.curve_lat_accel / kappa).sqrt() } else { f64::INFINITY };
            let v0 = v_target.min(v_curve).max(0.5);
            let a = gap_keeping_accel(v, v0, lead, g);

            let ld = g.lookahead_base + g.lookahead_gain * v;
            let (target, _) = route.sample(s + ld);
            let local = pose.to_local(target);
            let alpha = local.y.atan2(local.x);
            let delta = (2.0 * g.wheelbase * alpha.sin() / ld).atan();

            let dt = g.sim_dt;
            let v_next = (v + a * dt).max(0.0);
            let v_mid = 0.5 * (v + v_next);
            let yaw_rate = v_mid * delta.tan() / g.wheelbase;
            let h_mid = pose.heading + 0.5 * yaw_rate * dt;
            pose = Pose2::new(
                pose.x + v_mid * h_mid.cos() * dt,
                pose.y + v_mid * h_mid.sin() * dt,
                pose.heading + yaw_rate * dt,
            );
            v = v_next;
            t += dt;
        }
        poses.push(pose);
    }
    ExpertRun { poses }
}

fn transform_scenario(s: &Scenario<f64>, rot: f64, tr: Vec2<f64>) -> Result<Scenario<f64>> {
    let (sn, cs) = rot.sin_cos();
    let pt = |p: Vec2<f64>| Vec2::new(cs * p.x - sn * p.y + tr.x, sn * p.x + cs * p.y + tr.y);
    let ps = |p: &Pose2<f64>| p.transformed(rot, tr);
    let map = SceneMap {
        drivable: Polygon::with_holes(
            s.map.drivable.outer().iter().map(|&p| pt(p)).collect(),
            s.map.drivable.holes().iter().map(|h| h.iter().map(|&p| pt(p)).collect()).collect(),
        )?,
        route: Polyline::new(s.map.route.vertices().iter().map(|&p| pt(p)).collect())?,
        speed_limit: s.map.speed_limit,
        static_obstacles: s
            .map
            .static_obstacles
            .iter()
            .map(|o| StaticObstacle {
                pose: ps(&o.pose),
                dims: o.dims,
            })
            .collect(),
    };
    let agents = s
        .agents
        .iter()
        .map(|a| AgentTrack {
            category: a.category,
            dims: a.dims,
            history: a.history.iter().map(ps).collect(),
            future: a.future.as_ref().map(|f| f.iter().map(ps).collect()),
        })
        .collect();
    Scenario::new(s.id.clone(), map, agents, s.dt, s.horizon)
}

/// Independent generator stream per scenario index.
pub fn scenario_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn attempt(
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    id: &str,
    template: Template,
    injected: bool,
    reward_cfg: &RewardConfig,
) -> Result<Option<Scenario<f64>>> {
    let limit = rng.gen_range(cfg.speed_limit.0..=cfg.speed_limit.1);
    let mut lay = match template {
        Template::Straight => straight_layout(limit)?,
        Template::Curve => match curve_layout(rng, limit) {
            Ok(l) => l,
            Err(Error::Geometry(_)) => return Ok(None),
            Err(e) => return Err(e),
        },
        Template::Intersection => intersection_layout(rng, limit)?,
    };
    let g = &cfg.expert;
    let t0 = -(cfg.history as f64 - 1.0) * cfg.dt;
    let v_target = if injected {
        limit * cfg.speeding_factor
    } else {
        limit * rng.gen_range(0.7..0.98)
    };
    let v_init = v_target * rng.gen_range(0.9..1.0);
    let ego_dims = dims_for(Category::Vehicle, rng);
    let route = lay.map.route.clone();
    let route_pts = route.vertices().to_vec();

    let n_agents = rng.gen_range(cfg.num_agents.0..=cfg.num_agents.1);
    let mut others: Vec<Other> = Vec::new();
    let ego_s = lay.ego_s;
    // The ego starts at `ego_s` at t0; other movers are placed relative to
    // where it is at t = 0.
    let ego_s_now = ego_s + v_init * (-t0);
    if n_agents > 1 && rng.gen_bool(cfg.lead_vehicle_rate) {
        let speed = limit * rng.gen_range(0.4..0.85);
        let gap = rng.gen_range(18.0..45.0);
        let s0 = ego_s_now + gap;
        others.push(Other {
            category: Category::Vehicle,
            dims: dims_for(Category::Vehicle, rng),
            mover: Mover {
                path: route.clone(),
                s0,
                speed,
            },
        });
    }
    while others.len() + 1 < n_agents {
        let pick = rng.gen_range(0..4);
        let other = match pick {
            0 if !lay.opposite.is_empty() || !lay.same_dir.is_empty() => {
                let opposite = !lay.opposite.is_empty();
                let path = if opposite { &lay.opposite[0] } else { &lay.same_dir[0] };
                let (s_e, _) = path.project(route.point_at(ego_s_now, 0.0));
                let s0 = s_e + rng.gen_range(-40.0..80.0);
                Other {
                    category: Category::Vehicle,
                    dims: dims_for(Category::Vehicle, rng),
                    mover: Mover {
                        path: path.clone(),
                        s0,
                        speed: limit * rng.gen_range(0.5..1.0),
                    },
                }
            }
            1 if !lay.crossing.is_empty() => {
                let path = &lay.crossing[rng.gen_range(0..lay.crossing.len())];
                Other {
                    category: Category::Vehicle,
                    dims: dims_for(Category::Vehicle, rng),
                    mover: Mover {
                        path: path.clone(),
                        s0: rng.gen_range(20.0..200.0),
                        speed: limit * rng.gen_range(0.4..0.9),
                    },
                }
            }
            2 => {
                let path = &lay.sidewalks[rng.gen_range(0..lay.sidewalks.len())];
                let (s_e, _) = path.project(route.point_at(ego_s_now, 0.0));
                let back = rng.gen_bool(0.5);
                let base = if back { polyline(reversed(path.vertices()))? } else { path.clone() };
                let s0 = if back { path.length() - s_e } else { s_e } + rng.gen_range(-20.0..60.0);
                Other {
                    category: Category::Pedestrian,
                    dims: dims_for(Category::Pedestrian, rng),
                    mover: Mover {
                        path: base,
                        s0,
                        speed: rng.gen_range(0.8..1.6),
                    },
                }
            }
            _ => {
                let path = &lay.sidewalks[rng.gen_range(0..lay.sidewalks.len())];
                let shifted = polyline(offset_line(path.vertices(), 1.0))?;
                let (s_e, _) = shifted.project(route.point_at(ego_s_now, 0.0));
                Other {
                    category: Category::Cyclist,
                    dims: dims_for(Category::Cyclist, rng),
                    mover: Mover {
                        path: shifted,
                        s0: s_e + rng.gen_range(-20.0..50.0),
                        speed: rng.gen_range(3.0..6.0),
                    },
                }
            }
        };
        others.push(other);
    }

    if rng.gen_bool(cfg.obstacle_rate) {
        let s = ego_s_now + rng.gen_range(45.0..100.0);
        let (p, dir) = route.sample(s);
        lay.map.static_obstacles.push(StaticObstacle {
            pose: Pose2::new(p.x, p.y, dir.angle()),
            dims: BoxDims { length: 4.5, width: 1.9 },
        });
    }
    // Parked car off the roadway.
    if rng.gen_bool(0.5) {
        let s = ego_s_now + rng.gen_range(0.0..80.0);
        let side = offset_line(&route_pts, -LANE / 2.0 - 2.5);
        let pl = polyline(side)?;
        let (p, dir) = pl.sample(s);
        lay.map.static_obstacles.push(StaticObstacle {
            pose: Pose2::new(p.x, p.y, dir.angle()),
            dims: BoxDims { length: 4.5, width: 1.9 },
        });
    }

    let (p, dir) = route.sample(ego_s);
    let start = Pose2::new(p.x, p.y, dir.angle());
    let every = (cfg.dt / g.sim_dt).round() as usize;
    let total = cfg.history + cfg.horizon;
    let run = run_expert(&route, start, v_init, v_target, ego_dims.length, &others, &lay.map.static_obstacles, t0, total, every, g);

    let split = |poses: Vec<Pose2<f64>>| {
        let fut = poses[cfg.history..].to_vec();
        let mut hist = poses;
        hist.truncate(cfg.history);
        (hist, fut)
    };
    let (eh, ef) = split(run.poses);
    let mut agents = vec![AgentTrack {
        category: Category::Vehicle,
        dims: ego_dims,
        history: eh,
        future: Some(ef),
    }];
    for o in &others {
        let poses: Vec<Pose2<f64>> = (0..total).map(|i| o.mover.pose(t0 + i as f64 * cfg.dt)).collect();
        let (h, f) = split(poses);
        agents.push(AgentTrack {
            category: o.category,
            dims: o.dims,
            history: h,
            future: Some(f),
        });
    }
    let scenario = match Scenario::new(id, lay.map, agents, cfg.dt, cfg.horizon) {
        Ok(s) => s,
        Err(Error::Geometry(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !expert_is_valid(&scenario, injected, reward_cfg)? {
        return Ok(None);
    }
    Ok(Some(scenario))
}

/// Safe and comfortable at every step, within the speed limit unless
/// speeding was injected (in which case the speed score must drop), and no
/// agents overlapping at the current pose.
pub fn expert_is_valid(s: &Scenario<f64>, injected: bool, reward_cfg: &RewardConfig) -> Result<bool> {
    let ego = s.ego();
    let fut = ego.future.as_ref().ok_or_else(|| invalid("expert future missing"))?;
    let others: Vec<Vec<Pose2<f64>>> = s.agents[1..].iter().map(|a| a.future.clone().unwrap_or_default()).collect();
    let b = evaluate(s, fut, &others, reward_cfg)?;
    let speed_ok = if injected { b.speed() < 1.0 } else { b.speed() == 1.0 };
    let start_clear = s.agents[1..]
        .iter()
        .all(|a| !crate::scene::boxes_intersect((ego.current(), &ego.dims), (a.current(), &a.dims)));
    let hist_ok = crate::reward::comfort_score(&ego.history, s.dt, reward_cfg) == 1.0;
    Ok(b.is_safe() && b.comfort() == 1.0 && speed_ok && start_clear && hist_ok)
}

/// Generates scenario `index`. Template and injection are drawn first so
/// rejection resampling does not shift their frequencies.
pub fn generate_scenario(cfg: &GeneratorConfig, index: usize, id: &str) -> Result<(Scenario<f64>, ScenarioMeta)> {
    cfg.validate()?;
    let reward_cfg = RewardConfig::default();
    let mut rng = scenario_rng(cfg.seed, index);
    let template = cfg.templates[rng.gen_range(0..cfg.templates.len())];
    let injected = rng.gen_bool(cfg.speeding_injection_rate);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(s) = attempt(cfg, &mut rng, id, template, injected, &reward_cfg)? {
            let s = if cfg.random_transform {
                let rot = rng.gen_range(-PI..PI);
                let tr = Vec2::new(rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0));
                transform_scenario(&s, rot, tr)?
            } else {
                s
            };
            return Ok((
                s,
                ScenarioMeta {
                    template,
                    has_injected_speeding: injected,
                },
            ));
        }
    }
    Err(invalid(format!(
        "could not generate a valid {} scenario for index {index} after {MAX_ATTEMPTS} attempts",
        template.name()
    )))
}
