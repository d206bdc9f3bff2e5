//! Autoregressive multi-agent motion-token policy.

mod context;
mod net;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax_row;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

pub use context::{MapPoint, SceneContext};
pub use net::{forward, teacher_forced, CategoryLogits, Session, StepLogits};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Finite stand-in for minus infinity on logits of ids past a category's
/// vocabulary.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_agents: usize,
    pub max_steps: usize,
    pub neighbor_radius: f64,
    pub map_radius: f64,
    /// Nearest map points each query may attend to.
    pub max_map_keys: usize,
    /// Spacing of sampled route and boundary points, meters.
    pub map_spacing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            vocab_size: 64,
            max_agents: 8,
            max_steps: 16,
            neighbor_radius: 30.0,
            map_radius: 30.0,
            max_map_keys: 20,
            map_spacing: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.num_layers,
            self.model_dim,
            self.num_heads,
            self.vocab_size,
            self.max_agents,
            self.max_steps,
            self.max_map_keys,
        ];
        if ints.contains(&0) {
            return Err(invalid("model config sizes must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(invalid(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(self.neighbor_radius > 0.0 && self.map_radius > 0.0 && self.map_spacing > 0.0) {
            return Err(invalid("radii and map spacing must be positive"));
        }
        Ok(())
    }
}

/// Number of relative-position features fed to the positional perceptrons.
pub(crate) const REL_FEATURES: usize = 6;
/// Map point features: type one-hot, speed limit, length, width.
pub(crate) const MAP_FEATURES: usize = 6;
/// Agent row features: category one-hot, ego flag.
pub(crate) const ROW_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttnSlices {
    pub ln_g: Slice,
    pub ln_b: Slice,
    pub wq: Slice,
    pub wk: Slice,
    pub wv: Slice,
    pub wo: Slice,
    pub bo: Slice,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerSlices {
    pub temporal: AttnSlices,
    pub map: AttnSlices,
    pub agent: AttnSlices,
    pub ffn_ln_g: Slice,
    pub ffn_ln_b: Slice,
    pub ffn_w1: Slice,
    pub ffn_b1: Slice,
    pub ffn_w2: Slice,
    pub ffn_b2: Slice,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MlpSlices {
    pub w1: Slice,
    pub b1: Slice,
    pub w2: Slice,
    pub b2: Slice,
}

/// Named slices of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub(crate) tok_emb: Slice,
    pub(crate) in_w: Slice,
    pub(crate) in_b: Slice,
    pub(crate) map_w: Slice,
    pub(crate) map_b: Slice,
    /// Relative-position perceptrons for temporal, map and agent attention.
    pub(crate) rel: [MlpSlices; 3],
    pub(crate) layers: Vec<LayerSlices>,
    pub(crate) head_ln_g: Slice,
    pub(crate) head_ln_b: Slice,
    pub(crate) head_w1: Slice,
    pub(crate) head_b1: Slice,
    pub(crate) head_w2: [Slice; 3],
    pub(crate) head_b2: [Slice; 3],
    all: Vec<Slice>,
    total: usize,
}

struct LayoutBuilder {
    all: Vec<Slice>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> Slice {
        let s = Slice {
            name,
            offset: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        self.all.push(s.clone());
        s
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnSlices {
        AttnSlices {
            ln_g: self.add(format!("{p}.ln_gain"), 1, d),
            ln_b: self.add(format!("{p}.ln_bias"), 1, d),
            wq: self.add(format!("{p}.wq"), d, d),
            wk: self.add(format!("{p}.wk"), d, d),
            wv: self.add(format!("{p}.wv"), d, d),
            wo: self.add(format!("{p}.wo"), d, d),
            bo: self.add(format!("{p}.bo"), 1, d),
        }
    }

    fn mlp(&mut self, p: &str, i: usize, d: usize) -> MlpSlices {
        MlpSlices {
            w1: self.add(format!("{p}.w1"), i, d),
            b1: self.add(format!("{p}.b1"), 1, d),
            w2: self.add(format!("{p}.w2"), d, d),
            b2: self.add(format!("{p}.b2"), 1, d),
        }
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let k = cfg.vocab_size;
        let mut b = LayoutBuilder {
            all: Vec::new(),
            total: 0,
        };
        let tok_emb = b.add("token_embedding".into(), 3 * k, d);
        let in_w = b.add("input.w".into(), ROW_FEATURES, d);
        let in_b = b.add("input.b".into(), 1, d);
        let map_w = b.add("map_encoder.w".into(), MAP_FEATURES, d);
        let map_b = b.add("map_encoder.b".into(), 1, d);
        let rel = [
            b.mlp("rel_temporal", REL_FEATURES, d),
            b.mlp("rel_map", REL_FEATURES, d),
            b.mlp("rel_agent", REL_FEATURES, d),
        ];
        let layers = (0..cfg.num_layers)
            .map(|l| LayerSlices {
                temporal: b.attn(&format!("layer{l}.temporal"), d),
                map: b.attn(&format!("layer{l}.agent_map"), d),
                agent: b.attn(&format!("layer{l}.agent_agent"), d),
                ffn_ln_g: b.add(format!("layer{l}.ffn.ln_gain"), 1, d),
                ffn_ln_b: b.add(format!("layer{l}.ffn.ln_bias"), 1, d),
                ffn_w1: b.add(format!("layer{l}.ffn.w1"), d, 2 * d),
                ffn_b1: b.add(format!("layer{l}.ffn.b1"), 1, 2 * d),
                ffn_w2: b.add(format!("layer{l}.ffn.w2"), 2 * d, d),
                ffn_b2: b.add(format!("layer{l}.ffn.b2"), 1, d),
            })
            .collect();
        let head_ln_g = b.add("head.ln_gain".into(), 1, d);
        let head_ln_b = b.add("head.ln_bias".into(), 1, d);
        let head_w1 = b.add("head.w1".into(), d, d);
        let head_b1 = b.add("head.b1".into(), 1, d);
        let head_w2 = [
            b.add("head.vehicle.w2".into(), d, k),
            b.add("head.pedestrian.w2".into(), d, k),
            b.add("head.cyclist.w2".into(), d, k),
        ];
        let head_b2 = [
            b.add("head.vehicle.b2".into(), 1, k),
            b.add("head.pedestrian.b2".into(), 1, k),
            b.add("head.cyclist.b2".into(), 1, k),
        ];
        Self {
            tok_emb,
            in_w,
            in_b,
            map_w,
            map_b,
            rel,
            layers,
            head_ln_g,
            head_ln_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            all: b.all,
            total: b.total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn slices(&self) -> &[Slice] {
        &self.all
    }

    pub fn find(&self, name: &str) -> Option<&Slice> {
        self.all.iter().find(|s| s.name == name)
    }
}

/// Model weights: a flat vector plus its named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T: Scalar> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<T>,
    /// Seed used for initialization, kept for provenance.
    pub seed: u64,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let values = vec![T::zero(); layout.total()];
        Ok(Self {
            config,
            layout,
            values,
            seed: 0,
        })
    }

    /// Uniform init in ±1/sqrt(fan_in); layer-norm gains 1, biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in p.layout.all.clone() {
            let vals = &mut p.values[s.offset..s.offset + s.len()];
            if s.name.ends_with("ln_gain") {
                vals.fill(T::one());
            } else if s.name.ends_with("ln_bias") || s.rows == 1 {
                vals.fill(T::zero());
            } else {
                let fan_in = if s.name == "token_embedding" { 1 } else { s.rows };
                let a = 1.0 / (fan_in as f64).sqrt();
                for v in vals.iter_mut() {
                    *v = T::lit(rng.gen_range(-a..a));
                }
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .find(name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn check_finite(&self) -> Result<()> {
        for s in self.layout.slices() {
            if self.values[s.offset..s.offset + s.len()]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite {
                    tensor: s.name.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            params: self.values.iter().map(|v| v.as_f64()).collect(),
        };
        serde_json::to_string(&doc).map_err(|e| Error::Parse {
            what: "checkpoint".into(),
            msg: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "checkpoint".into(),
            msg: e.to_string(),
        })?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: doc.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut p = Self::zeros(doc.config)?;
        if doc.params.len() != p.len() {
            return Err(Error::Parse {
                what: "checkpoint".into(),
                msg: format!("expected {} parameters, found {}", p.len(), doc.params.len()),
            });
        }
        p.values = doc.params.into_iter().map(T::lit).collect();
        p.seed = doc.seed;
        p.check_finite()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    config: ModelConfig,
    seed: u64,
    params: Vec<f64>,
}

/// `log softmax(logits)[id]`.
pub fn log_prob<T: Scalar>(logits: &[T], id: usize) -> T {
    let mut out = vec![T::zero(); logits.len()];
    log_softmax_row(logits, &mut out);
    out[id]
}

/// Temperature 0 picks the argmax (smallest id on ties); otherwise draws from
/// `softmax(logits / temperature)` with one uniform variate.
pub fn sample_token<T: Scalar, R: Rng + ?Sized>(logits: &[T], rng: &mut R, temperature: f64) -> usize {
    assert!(temperature >= 0.0, "temperature must be nonnegative");
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            last = i;
        }
        acc += wi;
        if u < acc {
            return i;
        }
    }
    last
}

/// Exact `KL(softmax(p) || softmax(q))`.
pub fn kl_categorical<T: Scalar>(logits_p: &[T], logits_q: &[T]) -> T {
    assert_eq!(logits_p.len(), logits_q.len(), "logit lengths differ");
    let mut lp = vec![T::zero(); logits_p.len()];
    let mut lq = vec![T::zero(); logits_q.len()];
    log_softmax_row(logits_p, &mut lp);
    log_softmax_row(logits_q, &mut lq);
    let mut kl = T::zero();
    for (a, b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p > T::zero() {
            kl += p * (*a - *b);
        }
    }
    kl.max(T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_prob_examples() {
        let uniform = vec![0.0f64; 64];
        assert!((log_prob(&uniform, 5) - (1.0f64 / 64.0).ln()).abs() < 1e-12);
        let mut sat = vec![0.0f64; 8];
        sat[2] = 1e6;
        assert!(log_prob(&sat, 2).abs() < 1e-12);
        let l = [0.3f64, -1.2, 2.5, 0.0, 4.1];
        let total: f64 = (0..5).map(|i| log_prob(&l, i).exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_tie_breaks_to_smaller_id() {
        let mut l = vec![0.0f64; 10];
        l[3] = 2.0;
        l[7] = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&l, &mut rng, 0.0), 3);
        let mut one_hot = vec![-1e9f64; 6];
        one_hot[4] = 0.0;
        for t in [0.0, 0.5, 1.0, 3.0] {
            assert_eq!(sample_token(&one_hot, &mut rng, t), 4);
        }
    }

    #[test]
    fn kl_examples() {
        let p = [0.1f64, 0.7, -0.3];
        assert_eq!(kl_categorical(&p, &p), 0.0);
        let mut hot = vec![-1e9f64; 64];
        hot[0] = 0.0;
        let uniform = vec![0.0f64; 64];
        assert!((kl_categorical(&hot, &uniform) - 64f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn layout_and_checkpoint_round_trip() {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            vocab_size: 5,
            ..ModelConfig::default()
        };
        let p = PolicyParams::<f64>::init(cfg, 9).unwrap();
        assert_eq!(p.len(), p.layout.total());
        assert!(p.tensor("layer0.ffn.ln_gain").unwrap().iter().all(|&v| v == 1.0));
        let back = PolicyParams::<f64>::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back.values, p.values);
        assert_eq!(back.config, p.config);
        assert_eq!(back.seed, 9);

        let bad = p.to_json().unwrap().replace("\"version\":1", "\"version\":7");
        assert!(matches!(
            PolicyParams::<f64>::from_json(&bad),
            Err(Error::Version { found: 7, .. })
        ));
        let heads = ModelConfig {
            model_dim: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(PolicyParams::<f64>::zeros(heads).is_err());
    }
}
