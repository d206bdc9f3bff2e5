#![allow(dead_code)]

use drivelab::scene::{AgentTrack, BoxDims, Category, Polygon, Polyline, Pose2, SceneMap, Scenario, StaticObstacle, Vec2};
use drivelab::policy::ModelConfig;
use drivelab::tokenizer::VocabSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn straight_map(limit: f64) -> SceneMap<f64> {
    let drivable = Polygon::new(vec![
        Vec2::new(-60.0, -4.0),
        Vec2::new(200.0, -4.0),
        Vec2::new(200.0, 4.0),
        Vec2::new(-60.0, 4.0),
    ])
    .unwrap();
    let route = Polyline::new(vec![Vec2::new(-50.0, -1.75), Vec2::new(190.0, -1.75)]).unwrap();
    SceneMap {
        drivable,
        route,
        speed_limit: limit,
        static_obstacles: vec![StaticObstacle {
            pose: Pose2::new(60.0, 3.0, 0.0),
            dims: BoxDims::new(4.0, 1.8).unwrap(),
        }],
    }
}

/// Constant-velocity track along heading `h` with 3 history poses.
pub fn track(cat: Category, x: f64, y: f64, h: f64, speed: f64, horizon: usize, dt: f64) -> AgentTrack<f64> {
    let (l, w) = match cat {
        Category::Vehicle => (4.6, 1.9),
        Category::Pedestrian => (0.6, 0.6),
        Category::Cyclist => (1.8, 0.7),
    };
    let at = |k: i32| {
        let t = k as f64 * dt;
        Pose2::new(x + speed * t * h.cos(), y + speed * t * h.sin(), h)
    };
    AgentTrack {
        category: cat,
        dims: BoxDims::new(l, w).unwrap(),
        history: (-2..=0).map(at).collect(),
        future: Some((1..=horizon as i32).map(at).collect()),
    }
}

pub fn straight_scene(horizon: usize) -> Scenario<f64> {
    let dt = 0.5;
    let agents = vec![
        track(Category::Vehicle, 0.0, -1.75, 0.0, 10.0, horizon, dt),
        track(Category::Vehicle, 18.0, -1.75, 0.0, 8.0, horizon, dt),
        track(Category::Vehicle, 60.0, 1.75, std::f64::consts::PI, 9.0, horizon, dt),
        track(Category::Pedestrian, 10.0, 3.5, 0.0, 1.4, horizon, dt),
        track(Category::Cyclist, -10.0, 2.5, 0.0, 4.0, horizon, dt),
    ];
    Scenario::new("straight", straight_map(12.0), agents, dt, horizon).unwrap()
}

/// Vocabularies from a spread of synthetic speeds and turn rates.
pub fn vocabs(k: usize) -> VocabSet<f64> {
    let dt = 0.5;
    let mut tracks = Vec::new();
    for (cat, vmax) in [(Category::Vehicle, 16.0), (Category::Pedestrian, 2.0), (Category::Cyclist, 6.0)] {
        for i in 0..12 {
            let v = vmax * i as f64 / 11.0;
            for turn in [-0.2f64, -0.05, 0.0, 0.05, 0.2] {
                let mut poses = vec![Pose2::new(0.0, 0.0, 0.0)];
                for _ in 0..4 {
                    let p = *poses.last().unwrap();
                    let h = p.heading + turn;
                    poses.push(Pose2::new(p.x + v * dt * h.cos(), p.y + v * dt * h.sin(), h));
                }
                let mut t = track(cat, 0.0, 0.0, 0.0, 0.0, 1, dt);
                t.history = poses[..3].to_vec();
                t.future = Some(poses[3..].to_vec());
                tracks.push(t);
            }
        }
    }
    VocabSet::build(tracks.iter(), dt, k, 3).unwrap()
}

/// Two layers, width 16, K = 16.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        vocab_size: 16,
        max_steps: 6,
        ..ModelConfig::default()
    }
}

/// Largest relative error between `grad` and central differences of `loss`
/// at `coords` random coordinates. Relative error uses a 1e-3 floor.
pub fn max_fd_error(values: &[f64], grad: &[f64], loss: impl Fn(&[f64]) -> f64, coords: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.gen_range(0..values.len());
        let mut up = values.to_vec();
        up[i] += h;
        let mut dn = values.to_vec();
        dn[i] -= h;
        let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

/// Safe group: every reward 0.9 + 0.01 c_g with per-member offsets in
/// [-1, 1]. Unsafe group: the same, except member 0 is gated to zero from
/// step 3 on. G = 4, F = 8.
pub fn dominance_fixture() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let offsets = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    let safe: Vec<Vec<f64>> = offsets.iter().map(|c| vec![0.9 + 0.01 * c; 8]).collect();
    let mut unsafe_ = safe.clone();
    for t in 3..8 {
        unsafe_[0][t] = 0.0;
    }
    (safe, unsafe_)
}

/// Direct-summation references for the two shaping rules, sharing no code
/// with the library: plain sum/n mean, population variance, and
/// reward-to-go as an explicit inner sum.
pub mod oracle {
    fn stats(r: &[Vec<f64>]) -> (f64, f64) {
        let mut sum = 0.0;
        let mut n = 0.0;
        for row in r {
            for &x in row {
                sum += x;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for row in r {
            for &x in row {
                ss += (x - mean) * (x - mean);
            }
        }
        (mean, (ss / n).sqrt())
    }

    fn to_go(shaped: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        shaped
            .iter()
            .map(|row| (0..row.len()).map(|t| (t..row.len()).map(|u| row[u]).sum()).collect())
            .collect()
    }

    pub fn grpo(r: &[Vec<f64>], floor: f64) -> Vec<Vec<f64>> {
        let (mean, std) = stats(r);
        let s = if std > floor { std } else { floor };
        to_go(r.iter().map(|row| row.iter().map(|x| (x - mean) / s).collect()).collect())
    }

    pub fn vdgrpo(r: &[Vec<f64>], c: f64) -> Vec<Vec<f64>> {
        let (mean, _) = stats(r);
        to_go(r.iter().map(|row| row.iter().map(|x| (x - mean) / c).collect()).collect())
    }
}

/// `|a - b| <= tol * max(1, |b|)` everywhere.
pub fn close_rel(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol * q.abs().max(1.0))
        })
}

pub fn max_abs(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
}
