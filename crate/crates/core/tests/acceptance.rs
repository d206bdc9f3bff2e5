//! One pass/fail line per acceptance criterion. Runs the full desk-scale
//! pipeline twice (criteria 7, 8 and 10), so expect several minutes.

mod common;

use std::time::Instant;

use drivelab::analysis::{composite_score, pass_at_k, PassAtK};
use drivelab::gen::{generate_scenario, GeneratorConfig};
use drivelab::io::{generate_dataset, DatasetManifest};
use drivelab::policy::{ModelConfig, PolicyParams};
use drivelab::reward::{total_reward, RewardConfig, SafetyBits};
use drivelab::rollout::{closed_loop_eval, dual_rollout, rollout_rng, sample_group, AgentMode, Episode};
use drivelab::tokenizer::{corner_distance, segment_trajectory, VocabSet};
use drivelab::trainer::{
    finetune_loss, pretrain_loss, run_finetune, run_pretrain, shape_rewards_grpo, shape_rewards_vdgrpo, AdvantageMode,
    EpochLog, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-12;
const SCALE_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;
const PASS_K_MAX: usize = 16;
const PASS_SPEED_THRESHOLD: f64 = 0.8;
const PASS_SEED: u64 = 3;
const EVAL_SEED: u64 = 0;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, ok: bool, what: &str, detail: String, t: Instant) {
        if !ok {
            self.failed += 1;
        }
        println!(
            "criterion {n:>2} {} {what}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let g = rng.gen_range(2..9);
    let f = rng.gen_range(1..13);
    (0..g).map(|_| (0..f).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

fn criterion_1(rep: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut recursion_ok) = (0.0f64, true);
    for _ in 0..1000 {
        let r = random_matrix(&mut rng);
        let c = rng.gen_range(0.01..2.0);
        let g = shape_rewards_grpo(&r, 1e-6).unwrap();
        let v = shape_rewards_vdgrpo(&r, c).unwrap();
        for (got, want) in [(&g.advantages, common::oracle::grpo(&r, 1e-6)), (&v.advantages, common::oracle::vdgrpo(&r, c))] {
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
        for a in [&g, &v] {
            for (adv, sh) in a.advantages.iter().zip(&a.shaped) {
                let f = adv.len();
                recursion_ok &= adv[f - 1] == sh[f - 1];
                recursion_ok &= (0..f - 1).all(|t| adv[t] == sh[t] + adv[t + 1]);
            }
        }
    }
    rep.line(
        1,
        worst <= ORACLE_TOL && recursion_ok,
        "advantage oracles",
        format!("1000 matrices, max rel err {worst:.2e} (tol {ORACLE_TOL:.0e}), reward-to-go recursion exact: {recursion_ok}"),
        t,
    );
}

fn criterion_2(rep: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut grpo_err, mut vd_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let r = random_matrix(&mut rng);
        for alpha in [0.1, 10.0] {
            let s: Vec<Vec<f64>> = r.iter().map(|row| row.iter().map(|x| alpha * x).collect()).collect();
            let (g0, g1) = (shape_rewards_grpo(&r, 1e-12).unwrap(), shape_rewards_grpo(&s, 1e-12).unwrap());
            if g0.std.unwrap() > 1e-9 {
                for (a, b) in g1.advantages.iter().flatten().zip(g0.advantages.iter().flatten()) {
                    grpo_err = grpo_err.max((a - b).abs() / b.abs().max(1.0));
                }
            }
            let (v0, v1) = (shape_rewards_vdgrpo(&r, 0.1).unwrap(), shape_rewards_vdgrpo(&s, 0.1).unwrap());
            for (a, b) in v1.advantages.iter().flatten().zip(v0.advantages.iter().flatten()) {
                vd_err = vd_err.max((a - alpha * b).abs() / (alpha * b).abs().max(1.0));
            }
        }
    }
    rep.line(
        2,
        grpo_err <= SCALE_TOL && vd_err <= SCALE_TOL,
        "scale erasure vs preservation",
        format!("alpha in {{0.1, 10}}: grpo invariance err {grpo_err:.2e}, vd-grpo linearity err {vd_err:.2e} (tol {SCALE_TOL:.0e})"),
        t,
    );
}

fn criterion_3(rep: &mut Report) {
    let t = Instant::now();
    let (safe, unsafe_) = common::dominance_fixture();
    let gs = common::max_abs(&shape_rewards_grpo(&safe, 1e-6).unwrap().advantages);
    let gu = common::max_abs(&shape_rewards_grpo(&unsafe_, 1e-6).unwrap().advantages);
    let vs = common::max_abs(&shape_rewards_vdgrpo(&safe, 0.1).unwrap().advantages);
    let vu = common::max_abs(&shape_rewards_vdgrpo(&unsafe_, 0.1).unwrap().advantages);
    let g_ratio = gs.max(gu) / gs.min(gu);
    let v_ratio = vu / vs;
    rep.line(
        3,
        g_ratio <= 2.0 && v_ratio >= 10.0,
        "dominance fixture",
        format!("vd-grpo unsafe/safe max|A| {v_ratio:.2} (need >= 10), grpo spread {g_ratio:.2} (need <= 2)"),
        t,
    );
}

fn criterion_4(rep: &mut Report) {
    let t = Instant::now();
    let old = PolicyParams::<f64>::init(common::tiny_config(), 3).unwrap();
    let ep = Episode::new(common::straight_scene(3), &common::vocabs(16), &old).unwrap();
    let with = |v: &[f64]| {
        let mut q = old.clone();
        q.values = v.to_vec();
        q
    };
    let (_, g) = pretrain_loss(&old, &ep).unwrap();
    let pre = common::max_fd_error(&old.values, &g, |v| pretrain_loss(&with(v), &ep).unwrap().0, 100, FD_STEP, 1);

    let group = sample_group(&old, &old, &ep, 2, 4, 0, &RewardConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let adv = shape_rewards_vdgrpo(&r, 0.1).unwrap();
    let mut p = old.clone();
    for v in &mut p.values {
        *v += 0.02 * rng.gen_range(-1.0..1.0);
    }
    let (_, g) = finetune_loss(&p, &ep, &group, &adv, 0.1).unwrap();
    let with_p = |v: &[f64]| {
        let mut q = p.clone();
        q.values = v.to_vec();
        q
    };
    let fine = common::max_fd_error(
        &p.values,
        &g,
        |v| finetune_loss(&with_p(v), &ep, &group, &adv, 0.1).unwrap().0,
        100,
        FD_STEP,
        2,
    );
    rep.line(
        4,
        pre < FD_TOL && fine < FD_TOL,
        "finite-difference gradients",
        format!("h {FD_STEP:.0e}, 100 coords: pretrain {pre:.2e}, finetune {fine:.2e} (tol {FD_TOL:.0e})"),
        t,
    );
}

fn criterion_5(rep: &mut Report) {
    let t = Instant::now();
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..10_000 {
        let b = SafetyBits {
            drivable: rng.gen_bool(0.7),
            dynamic_collision: rng.gen_bool(0.7),
            static_collision: rng.gen_bool(0.7),
        };
        let s: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let r = total_reward(&b, s[0], s[1], s[2], s[3], &cfg);
        ok &= if b.all() {
            let want = (2.0 * s[0] + 5.0 * s[1] + 2.0 * s[2] + s[3]) / 10.0;
            (0.0..=1.0).contains(&r) && (r - want).abs() <= 1e-15
        } else {
            r == 0.0
        };
    }
    let all = SafetyBits {
        drivable: true,
        dynamic_collision: true,
        static_collision: true,
    };
    let worked = total_reward(&all, 1.0, 1.0, 0.5, 1.0, &cfg);
    rep.line(
        5,
        ok && worked == 0.9,
        "reward gating and bounds",
        format!("10^4 breakdowns gated and bounded: {ok}, worked value {worked}"),
        t,
    );
}

fn criterion_6(rep: &mut Report) {
    let t = Instant::now();
    let cfg = common::tiny_config();
    let ego = PolicyParams::init(cfg.clone(), 1).unwrap();
    let world = PolicyParams::init(cfg, 2).unwrap();
    let ep = Episode::new(common::straight_scene(5), &common::vocabs(16), &ego).unwrap();
    let rc = RewardConfig::default();
    let mut exact = 0;
    for seed in 0..100 {
        let mut rng = rollout_rng(seed, 0, 0);
        let r = dual_rollout(&ego, &world, &ep, &mut rng, 1.0, AgentMode::Reactive, &rc).unwrap();
        let mut sum = 0.0f64;
        for t in 0..r.ego_log_probs.len() {
            sum += r.ego_log_probs[t];
            for a in &r.other_log_probs {
                sum += a[t];
            }
        }
        if sum.to_bits() == r.joint_log_prob.to_bits() {
            exact += 1;
        }
    }
    rep.line(
        6,
        exact == 100,
        "factorization",
        format!("{exact}/100 rollouts bit-exact"),
        t,
    );
}

fn criterion_9(rep: &mut Report) {
    let t = Instant::now();
    let cfg = GeneratorConfig::default();
    let train: Vec<_> = (0..cfg.num_scenarios)
        .map(|i| generate_scenario(&cfg, i, "t").unwrap().0)
        .collect();
    let vocabs = VocabSet::build(train.iter().flat_map(|s| s.agents.iter()), cfg.dt, 64, 0).unwrap();
    let mut worst_coverage = 1.0f64;
    let mut recon_ok = true;
    let mut all_segments = Vec::new();
    for c in drivelab::scene::Category::ALL {
        let v = vocabs.get(c);
        let segs: Vec<_> = train
            .iter()
            .flat_map(|s| s.agents.iter())
            .filter(|a| a.category == c)
            .flat_map(|a| segment_trajectory(a, cfg.dt))
            .collect();
        if segs.is_empty() {
            continue;
        }
        let mut covered = 0;
        for s in &segs {
            let (id, d) = v.nearest(s);
            if d <= v.eps {
                covered += 1;
                recon_ok &= corner_distance(s, v.segment(id).unwrap(), &v.ref_dims) <= v.eps;
            }
        }
        worst_coverage = worst_coverage.min(covered as f64 / segs.len() as f64);
        all_segments.extend(segs.into_iter().map(|s| (s, v.ref_dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut metric_ok = true;
    let dims = vocabs.vehicle.ref_dims;
    for _ in 0..10_000 {
        let mut pick = || all_segments[rng.gen_range(0..all_segments.len())].0;
        let (a, b, c) = (pick(), pick(), pick());
        let ab = corner_distance(&a, &b, &dims);
        let bc = corner_distance(&b, &c, &dims);
        let ac = corner_distance(&a, &c, &dims);
        metric_ok &= ab >= 0.0
            && ab == corner_distance(&b, &a, &dims)
            && corner_distance(&a, &a, &dims) == 0.0
            && ac <= ab + bc + 1e-12;
    }
    rep.line(
        9,
        worst_coverage >= 0.99 && recon_ok && metric_ok,
        "tokenizer",
        format!(
            "min category coverage {:.4} (need >= 0.99), per-step error <= eps: {recon_ok}, pseudometric on 10^4 triples: {metric_ok}",
            worst_coverage
        ),
        t,
    );
}

struct PipelineRun {
    manifest: DatasetManifest,
    vocabs: VocabSet<f64>,
    logs: Vec<String>,
    pretrained: PolicyParams<f64>,
    grpo: PolicyParams<f64>,
    vd: PolicyParams<f64>,
    grpo_final_unsafe: f64,
    vd_final_unsafe: f64,
    eval: Vec<Episode<f64>>,
}

fn pipeline() -> PipelineRun {
    let dir = tempfile::tempdir().unwrap();
    let gen = GeneratorConfig::default();
    let manifest = generate_dataset(&gen, dir.path()).unwrap();
    let train = manifest.load_split::<f64>(dir.path(), "train").unwrap();
    let eval = manifest.load_split::<f64>(dir.path(), "eval").unwrap();
    let vocabs = VocabSet::build(train.iter().flat_map(|s| s.agents.iter()), gen.dt, 64, 0).unwrap();

    let mut pretrained = PolicyParams::<f64>::init(ModelConfig::default(), 0).unwrap();
    let train_eps: Vec<_> = train
        .into_iter()
        .map(|s| Episode::new(s, &vocabs, &pretrained).unwrap())
        .collect();
    let eval_eps: Vec<_> = eval
        .into_iter()
        .map(|s| Episode::new(s, &vocabs, &pretrained).unwrap())
        .collect();

    let line = |l: &EpochLog| l.to_json_line();
    let pre_logs = run_pretrain(&mut pretrained, &train_eps, &TrainConfig::pretrain(), |_, _| Ok(())).unwrap();
    let mut logs: Vec<String> = pre_logs.iter().map(line).collect();

    let rc = RewardConfig::default();
    let mut tune = |mode| {
        let mut p = pretrained.clone();
        let l = run_finetune(&mut p, &pretrained, &train_eps, &TrainConfig::finetune(mode), &rc, |_, _| Ok(())).unwrap();
        let last = l.last().and_then(|x| x.unsafe_group_ratio).unwrap_or(f64::NAN);
        logs.extend(l.iter().map(line));
        (p, last)
    };
    let (grpo, grpo_final_unsafe) = tune(AdvantageMode::Grpo);
    let (vd, vd_final_unsafe) = tune(AdvantageMode::VdGrpo);
    PipelineRun {
        manifest,
        vocabs,
        logs,
        pretrained,
        grpo,
        vd,
        grpo_final_unsafe,
        vd_final_unsafe,
        eval: eval_eps,
    }
}

/// Composite score and mean speed score under greedy reactive evaluation.
fn evaluate(run: &PipelineRun, p: &PolicyParams<f64>) -> (f64, f64) {
    let rc = RewardConfig::default();
    let r = closed_loop_eval(p, &run.pretrained, &run.eval, AgentMode::Reactive, EVAL_SEED, &rc).unwrap();
    let b: Vec<_> = r.into_iter().map(|x| x.reward).collect();
    let speed = b.iter().map(|x| x.speed()).sum::<f64>() / b.len() as f64;
    (composite_score(&b, &rc).unwrap().aggregate, speed)
}

fn criterion_7(rep: &mut Report, run: &PipelineRun, t: Instant) {
    let (pc, ps) = evaluate(run, &run.pretrained);
    let (gc, gs) = evaluate(run, &run.grpo);
    let (vc, vs) = evaluate(run, &run.vd);
    let a = gc > pc && vc > pc;
    let b = vc >= gc;
    let c = run.vd_final_unsafe <= 0.8 * run.grpo_final_unsafe;
    let d = gs > ps && vs > ps;
    let mark = |x: bool| if x { "ok" } else { "fail" };
    rep.line(
        7,
        a && b && c && d,
        "headline experiment",
        format!(
            "composite pre {pc:.2} grpo {gc:.2} vd {vc:.2}; final unsafe ratio grpo {:.4} vd {:.4}; speed pre {ps:.4} grpo {gs:.4} vd {vs:.4}; (a) {} (b) {} (c) {} (d) {}",
            run.grpo_final_unsafe,
            run.vd_final_unsafe,
            mark(a),
            mark(b),
            mark(c),
            mark(d)
        ),
        t,
    );
}

fn criterion_8(rep: &mut Report, run: &PipelineRun) {
    let t = Instant::now();
    let rc = RewardConfig::default();
    let curve = |p: &PolicyParams<f64>| -> PassAtK {
        pass_at_k(p, &run.pretrained, &run.eval, PASS_K_MAX, PASS_SEED, PASS_SPEED_THRESHOLD, &rc).unwrap()
    };
    let pre = curve(&run.pretrained);
    let grpo = curve(&run.grpo);
    let vd = curve(&run.vd);
    let monotone = [&pre, &grpo, &vd]
        .iter()
        .all(|c| c.curve.windows(2).all(|w| w[1] >= w[0]));
    let dominates = vd.curve.iter().zip(&pre.curve).all(|(v, p)| v >= p);
    rep.line(
        8,
        monotone && dominates,
        "pass@k",
        format!(
            "k_max {PASS_K_MAX}: pre {:.3}..{:.3}, grpo {:.3}..{:.3}, vd {:.3}..{:.3}; monotone {monotone}, vd >= pre at every k {dominates}",
            pre.curve[0],
            pre.curve[PASS_K_MAX - 1],
            grpo.curve[0],
            grpo.curve[PASS_K_MAX - 1],
            vd.curve[0],
            vd.curve[PASS_K_MAX - 1]
        ),
        t,
    );
}

fn same_bits(a: &PolicyParams<f64>, b: &PolicyParams<f64>) -> bool {
    a.values.len() == b.values.len() && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_10(rep: &mut Report, first: &PipelineRun) {
    let t = Instant::now();
    let second = pipeline();
    let data = first.manifest == second.manifest && first.vocabs == second.vocabs;
    let logs = first.logs == second.logs;
    let ckpt = same_bits(&first.pretrained, &second.pretrained)
        && same_bits(&first.grpo, &second.grpo)
        && same_bits(&first.vd, &second.vd);
    rep.line(
        10,
        data && logs && ckpt,
        "determinism",
        format!("dataset and vocabulary identical {data}, {} log lines identical {logs}, checkpoints bit-identical {ckpt}", first.logs.len()),
        t,
    );
}

fn main() {
    let mut rep = Report { failed: 0 };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);
    criterion_6(&mut rep);
    criterion_9(&mut rep);
    let t = Instant::now();
    let run = pipeline();
    criterion_7(&mut rep, &run, t);
    criterion_8(&mut rep, &run);
    criterion_10(&mut rep, &run);
    println!("acceptance: {} of 10 criteria failed", rep.failed);
    if rep.failed > 0 {
        std::process::exit(1);
    }
}
