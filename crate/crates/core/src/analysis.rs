//! Evaluation metrics and training diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::PolicyParams;
use crate::reward::{RewardBreakdown, RewardConfig};
use crate::rollout::{dual_rollout, rollout_rng, AgentMode, Episode, RolloutGroup};
use crate::scalar::Scalar;
use crate::trainer::AdvantageTensor;

pub const HIST_BINS: usize = 50;
pub const HIST_MIN: f64 = 1e-4;
pub const HIST_MAX: f64 = 1e2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub safety_gate: bool,
    pub soft_mean: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub per_scenario: Vec<ScenarioScore>,
    pub aggregate: f64,
}

pub fn scenario_score<T: Scalar>(b: &RewardBreakdown<T>, cfg: &RewardConfig) -> ScenarioScore {
    let gate = b.is_safe() && b.ttc_ok();
    let w = &cfg.weights;
    let soft = (w.comfort * b.comfort().as_f64()
        + w.ttc * b.mean_ttc().as_f64()
        + w.speed * b.speed().as_f64()
        + w.progress * b.progress().as_f64())
        / w.sum();
    ScenarioScore {
        safety_gate: gate,
        soft_mean: soft,
        score: if gate { 100.0 * soft } else { 0.0 },
    }
}

/// 100 x (all safety bits and TTC hold at every step) x weighted soft mean,
/// averaged over scenarios.
pub fn composite_score<T: Scalar>(breakdowns: &[RewardBreakdown<T>], cfg: &RewardConfig) -> Result<CompositeScore> {
    if breakdowns.is_empty() {
        return Err(invalid("no rollouts to score"));
    }
    let per_scenario: Vec<ScenarioScore> = breakdowns.iter().map(|b| scenario_score(b, cfg)).collect();
    let aggregate = per_scenario.iter().map(|s| s.score).sum::<f64>() / per_scenario.len() as f64;
    Ok(CompositeScore {
        per_scenario,
        aggregate,
    })
}

/// Fraction of groups with a safety violation in any member.
pub fn unsafe_ratio<T: Scalar>(groups: &[RolloutGroup<T>]) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    groups.iter().filter(|g| g.is_unsafe()).count() as f64 / groups.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsAdvantageSummary {
    pub groups: usize,
    pub values: usize,
    /// Counts over `HIST_BINS` log-spaced bins on `[HIST_MIN, HIST_MAX)`.
    pub histogram: Vec<u64>,
    pub below: u64,
    pub above: u64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageDistribution {
    pub safe: Option<AbsAdvantageSummary>,
    #[serde(rename = "unsafe")]
    pub unsafe_: Option<AbsAdvantageSummary>,
}

pub fn bin_edges() -> Vec<f64> {
    let (lo, hi) = (HIST_MIN.log10(), HIST_MAX.log10());
    (0..=HIST_BINS)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / HIST_BINS as f64))
        .collect()
}

fn summarize(values: &mut [f64], groups: usize) -> AbsAdvantageSummary {
    let edges = bin_edges();
    let mut histogram = vec![0u64; HIST_BINS];
    let (mut below, mut above) = (0, 0);
    for &v in values.iter() {
        if v < HIST_MIN {
            below += 1;
        } else if v >= HIST_MAX {
            above += 1;
        } else {
            let i = edges.partition_point(|&e| e <= v) - 1;
            histogram[i.min(HIST_BINS - 1)] += 1;
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    AbsAdvantageSummary {
        groups,
        values: n,
        histogram,
        below,
        above,
        median,
        max: values.last().copied().unwrap_or(0.0),
    }
}

/// |A| summaries for safe and unsafe groups. A label with no groups is
/// omitted (and logged).
pub fn advantage_distribution<T: Scalar>(advantages: &[AdvantageTensor<T>], is_unsafe: &[bool]) -> Result<AdvantageDistribution> {
    if advantages.len() != is_unsafe.len() {
        return Err(invalid("one label per group required"));
    }
    let mut safe = Vec::new();
    let mut unsafe_ = Vec::new();
    let (mut ns, mut nu) = (0, 0);
    for (a, &u) in advantages.iter().zip(is_unsafe) {
        let dst = if u {
            nu += 1;
            &mut unsafe_
        } else {
            ns += 1;
            &mut safe
        };
        dst.extend(a.advantages.iter().flatten().map(|x| x.as_f64().abs()));
    }
    let pick = |mut v: Vec<f64>, n: usize, label: &str| {
        if n == 0 {
            log::warn!("no {label} groups; omitting that distribution");
            None
        } else {
            Some(summarize(&mut v, n))
        }
    };
    Ok(AdvantageDistribution {
        safe: pick(safe, ns, "safe"),
        unsafe_: pick(unsafe_, nu, "unsafe"),
    })
}

impl AdvantageDistribution {
    /// `bin_lo,bin_hi,safe,unsafe` rows.
    pub fn to_csv(&self) -> String {
        let edges = bin_edges();
        let mut s = String::from("bin_lo,bin_hi,safe,unsafe\n");
        let count = |x: &Option<AbsAdvantageSummary>, i: usize| x.as_ref().map_or(0, |h| h.histogram[i]);
        for i in 0..HIST_BINS {
            s.push_str(&format!(
                "{:.6e},{:.6e},{},{}\n",
                edges[i],
                edges[i + 1],
                count(&self.safe, i),
                count(&self.unsafe_, i)
            ));
        }
        s
    }
}

/// Trajectory success for pass@k: every safety bit holds, comfortable, and
/// the speed score is at least `speed_threshold`.
pub fn is_success<T: Scalar>(b: &RewardBreakdown<T>, speed_threshold: f64) -> bool {
    b.is_safe() && b.comfort() == T::one() && b.speed().as_f64() >= speed_threshold
}

/// Unbiased estimate of P(at least one success among k draws) from `c`
/// successes in `n` samples.
pub fn pass_at_k_estimate(n: usize, c: usize, k: usize) -> f64 {
    assert!(k <= n && c <= n);
    if n - c < k {
        return 1.0;
    }
    let mut fail = 1.0;
    for i in (n - c + 1)..=n {
        fail *= 1.0 - k as f64 / i as f64;
    }
    1.0 - fail
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    /// Successes per scenario out of `k_max` samples.
    pub successes: Vec<usize>,
    /// `curve[k - 1]` is pass@k.
    pub curve: Vec<f64>,
}

impl PassAtK {
    pub fn from_counts(successes: Vec<usize>, k_max: usize) -> Self {
        let curve = (1..=k_max)
            .map(|k| {
                successes
                    .iter()
                    .map(|&c| pass_at_k_estimate(k_max, c, k))
                    .sum::<f64>()
                    / successes.len().max(1) as f64
            })
            .collect();
        Self { successes, curve }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,pass_at_k\n");
        for (i, v) in self.curve.iter().enumerate() {
            s.push_str(&format!("{},{:.6}\n", i + 1, v));
        }
        s
    }
}

/// Samples `k_max` reactive rollouts (ego temperature 1) per episode.
pub fn pass_at_k<T: Scalar>(
    ego: &PolicyParams<T>,
    world: &PolicyParams<T>,
    episodes: &[Episode<T>],
    k_max: usize,
    seed: u64,
    speed_threshold: f64,
    reward_cfg: &RewardConfig,
) -> Result<PassAtK> {
    if k_max == 0 {
        return Err(invalid("k_max must be at least 1"));
    }
    let mut successes = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let mut c = 0;
        for j in 0..k_max {
            let mut rng = rollout_rng(seed, i, j);
            let r = dual_rollout(ego, world, ep, &mut rng, 1.0, AgentMode::Reactive, reward_cfg)?;
            if is_success(&r.reward, speed_threshold) {
                c += 1;
            }
        }
        successes.push(c);
    }
    Ok(PassAtK::from_counts(successes, k_max))
}
