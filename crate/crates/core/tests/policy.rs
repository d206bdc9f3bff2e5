mod common;

use drivelab::autodiff::{grad, Tape};
use drivelab::policy::{forward, log_prob, sample_token, teacher_forced, kl_categorical, PolicyParams, SceneContext, Session};
use drivelab::scene::{Pose2, Scenario, Vec2};
use drivelab::tokenizer::encode_tracking;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::tiny_config;

/// Ground-truth (token, pose) inputs per agent from tracking encoding.
fn gt_inputs(s: &Scenario<f64>, v: &drivelab::tokenizer::VocabSet<f64>, steps: usize) -> Vec<Vec<(usize, Pose2<f64>)>> {
    s.agents
        .iter()
        .map(|a| {
            let fut = &a.future.as_ref().unwrap()[..steps];
            let (ids, poses) = encode_tracking(a.current(), fut, v.get(a.category)).unwrap();
            ids.into_iter().zip(poses).collect()
        })
        .collect()
}

fn logits_of(tape: &Tape<f64>, groups: &[drivelab::policy::CategoryLogits], n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n];
    for g in groups {
        let v = tape.value(g.var);
        for (i, &pos) in g.rows.iter().enumerate() {
            out[pos] = v[i * k..(i + 1) * k].to_vec();
        }
    }
    out
}

#[test]
fn zero_params_give_uniform_logits() {
    let s = common::straight_scene(4);
    let v = common::vocabs(16);
    let p = PolicyParams::<f64>::zeros(tiny_config()).unwrap();
    let ctx = SceneContext::new(&s, &v, &p.config).unwrap();
    let out = forward(&p, &ctx, &vec![vec![]; s.agents.len()]).unwrap();
    for (a, row) in out.logits.iter().enumerate() {
        let size = ctx.vocab_sizes[s.agents[a].category.index()];
        assert!(row[..size].iter().all(|&x| x == row[0]), "agent {a}");
    }
}

#[test]
fn session_matches_teacher_forcing_bitwise() {
    let s = common::straight_scene(5);
    let v = common::vocabs(16);
    let p = PolicyParams::<f64>::init(tiny_config(), 1).unwrap();
    let ctx = SceneContext::new(&s, &v, &p.config).unwrap();
    let n = s.agents.len();
    let inputs = gt_inputs(&s, &v, 5);
    let all: Vec<usize> = (0..n).collect();

    let (mut sess, first) = Session::new(&p, &ctx, &all).unwrap();
    let mut incremental = vec![first];
    for t in 0..4 {
        let step: Vec<_> = inputs.iter().map(|f| f[t]).collect();
        incremental.push(sess.advance(&step, &all).unwrap());
    }

    let prefix: Vec<_> = inputs.iter().map(|f| f[..4].to_vec()).collect();
    let predict: Vec<(usize, usize)> = (0..5).flat_map(|t| (0..n).map(move |a| (a, t))).collect();
    let mut tape = Tape::new(&p.values);
    let groups = teacher_forced(&mut tape, &p, &ctx, &prefix, &predict).unwrap();
    let full = logits_of(&tape, &groups, predict.len(), 16);
    for t in 0..5 {
        for a in 0..n {
            assert_eq!(incremental[t][a], full[t * n + a], "step {t} agent {a}");
        }
    }
}

#[test]
fn logits_ignore_tokens_at_or_after_the_predicted_step() {
    let s = common::straight_scene(5);
    let v = common::vocabs(16);
    let p = PolicyParams::<f64>::init(tiny_config(), 2).unwrap();
    let ctx = SceneContext::new(&s, &v, &p.config).unwrap();
    let n = s.agents.len();
    let mut inputs = gt_inputs(&s, &v, 5);
    let predict: Vec<(usize, usize)> = (0..n).map(|a| (a, 2)).collect();
    let run = |inputs: &Vec<Vec<(usize, Pose2<f64>)>>| {
        let mut tape = Tape::new(&p.values);
        let g = teacher_forced(&mut tape, &p, &ctx, inputs, &predict).unwrap();
        logits_of(&tape, &g, n, 16)
    };
    let base = run(&inputs);
    for f in inputs.iter_mut() {
        for e in f[2..].iter_mut() {
            e.0 = (e.0 + 3) % 10;
            e.1 = Pose2::new(e.1.x + 5.0, e.1.y - 1.0, e.1.heading + 0.3);
        }
    }
    assert_eq!(run(&inputs), base);
    let hist: Vec<Vec<usize>> = gt_inputs(&s, &v, 2).iter().map(|f| f.iter().map(|e| e.0).collect()).collect();
    assert_eq!(forward(&p, &ctx, &hist).unwrap().logits, base);
}

fn transform(s: &Scenario<f64>, rot: f64, tx: f64, ty: f64) -> Scenario<f64> {
    let t = Vec2::new(tx, ty);
    let pt = |p: Vec2<f64>| {
        let q = Pose2::new(p.x, p.y, 0.0).transformed(rot, t);
        Vec2::new(q.x, q.y)
    };
    let mut out = s.clone();
    out.map.drivable = drivelab::scene::Polygon::new(s.map.drivable.outer().iter().map(|&p| pt(p)).collect()).unwrap();
    out.map.route = drivelab::scene::Polyline::new(s.map.route.vertices().iter().map(|&p| pt(p)).collect()).unwrap();
    for o in out.map.static_obstacles.iter_mut() {
        o.pose = o.pose.transformed(rot, t);
    }
    for a in out.agents.iter_mut() {
        for p in a.history.iter_mut().chain(a.future.as_mut().unwrap().iter_mut()) {
            *p = p.transformed(rot, t);
        }
    }
    out
}

#[test]
fn rigid_transform_leaves_logits_unchanged() {
    let s = common::straight_scene(4);
    let v = common::vocabs(16);
    let p = PolicyParams::<f64>::init(tiny_config(), 3).unwrap();
    let ctx = SceneContext::new(&s, &v, &p.config).unwrap();
    let hist: Vec<Vec<usize>> = gt_inputs(&s, &v, 3).iter().map(|f| f.iter().map(|e| e.0).collect()).collect();
    let base = forward(&p, &ctx, &hist).unwrap();
    for (rot, tx, ty) in [(0.7, 120.0, -35.0), (-2.4, -500.0, 310.0), (3.1, 0.0, 0.0)] {
        let ts = transform(&s, rot, tx, ty);
        let tctx = SceneContext::new(&ts, &v, &p.config).unwrap();
        let out = forward(&p, &tctx, &hist).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in base.logits.iter().flatten().zip(out.logits.iter().flatten()) {
            if *a > -1e8 {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-5, "max |dlogit| = {worst}");
    }
}

#[test]
fn history_beyond_max_steps_is_an_error() {
    let s = common::straight_scene(4);
    let v = common::vocabs(16);
    let p = PolicyParams::<f64>::init(tiny_config(), 4).unwrap();
    let ctx = SceneContext::new(&s, &v, &p.config).unwrap();
    let hist = vec![vec![0usize; 7]; s.agents.len()];
    assert!(forward(&p, &ctx, &hist).is_err());
}

#[test]
fn log_likelihood_gradient_matches_finite_differences() {
    let s = common::straight_scene(3);
    let v = common::vocabs(16);
    let p = PolicyParams::<f64>::init(tiny_config(), 5).unwrap();
    let ctx = SceneContext::new(&s, &v, &p.config).unwrap();
    let n = s.agents.len();
    let inputs = gt_inputs(&s, &v, 3);
    let prefix: Vec<_> = inputs.iter().map(|f| f[..2].to_vec()).collect();
    let predict: Vec<(usize, usize)> = (0..3).flat_map(|t| (0..n).map(move |a| (a, t))).collect();
    let targets: Vec<usize> = predict.iter().map(|&(a, t)| inputs[a][t].0).collect();

    let loss = |values: &[f64]| -> f64 {
        let mut q = p.clone();
        q.values = values.to_vec();
        let mut tape = Tape::new(&q.values);
        let g = teacher_forced(&mut tape, &q, &ctx, &prefix, &predict).unwrap();
        let out = logits_of(&tape, &g, predict.len(), 16);
        -out.iter().zip(&targets).map(|(l, &y)| log_prob(l, y)).sum::<f64>()
    };
    let (value, g) = grad(&p.values, |tape| {
        let groups = teacher_forced(tape, &p, &ctx, &prefix, &predict)?;
        let mut total = None;
        for cg in &groups {
            let lp = tape.log_softmax(cg.var);
            let picked = tape.pick(lp, cg.rows.iter().map(|&r| targets[r]).collect());
            let s = tape.sum_all(picked);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        Ok(tape.scale(total.unwrap(), -1.0))
    })
    .unwrap();
    assert!((value - loss(&p.values)).abs() < 1e-12);

    let worst = common::max_fd_error(&p.values, &g, loss, 100, 1e-4, 17);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn sampling_frequencies_match_softmax() {
    let logits = [0.5f64, -0.3, 1.2, 0.0, -2.0];
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        counts[sample_token(&logits, &mut rng, 1.0)] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "count {c} vs p {p}");
    }
}

fn direct_kl(p: &[f64], q: &[f64]) -> f64 {
    let zp: f64 = p.iter().map(|x| x.exp()).sum();
    let zq: f64 = q.iter().map(|x| x.exp()).sum();
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let pa = a.exp() / zp;
            pa * (pa.ln() - (b.exp() / zq).ln())
        })
        .sum()
}

proptest! {
    #[test]
    fn kl_matches_direct_sum(p in prop::collection::vec(-3.0f64..3.0, 8), q in prop::collection::vec(-3.0f64..3.0, 8)) {
        let kl = kl_categorical(&p, &q);
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - direct_kl(&p, &q)).abs() < 1e-10);
    }

    #[test]
    fn kl_vanishes_under_constant_shift(p in prop::collection::vec(-3.0f64..3.0, 8), c in -5.0f64..5.0) {
        let q: Vec<f64> = p.iter().map(|x| x + c).collect();
        prop_assert!(kl_categorical(&p, &q) < 1e-12);
    }
}
