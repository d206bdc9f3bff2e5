//! Closed-loop trajectory planning with discrete motion tokens.
//!
//! An autoregressive multi-agent policy is pre-trained on (flawed) scripted
//! demonstrations and then fine-tuned with rule-based rewards using
//! group-relative policy optimization, either with per-group variance
//! normalization or with variance-decoupled centering and fixed scaling.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! scalar to `f64`, which is what the training pipeline and CLI use.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gen;
pub mod io;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod trainer;
pub mod scalar;
pub mod scene;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::{normalize_angle, Scalar};

pub type Vec2 = scene::Vec2<f64>;
pub type Pose = scene::Pose2<f64>;
pub type BoxDims = scene::BoxDims<f64>;
pub type Polyline = scene::Polyline<f64>;
pub type Polygon = scene::Polygon<f64>;
pub type SceneMap = scene::SceneMap<f64>;
pub type AgentTrack = scene::AgentTrack<f64>;
pub type Scenario = scene::Scenario<f64>;
pub type Vocabulary = tokenizer::Vocabulary<f64>;
pub type VocabSet = tokenizer::VocabSet<f64>;
pub type MotionSegment = tokenizer::MotionSegment<f64>;
pub type PolicyParams = policy::PolicyParams<f64>;
pub type SceneContext = policy::SceneContext<f64>;
pub type RewardBreakdown = reward::RewardBreakdown<f64>;
pub type Episode = rollout::Episode<f64>;
pub type Rollout = rollout::Rollout<f64>;
pub type RolloutGroup = rollout::RolloutGroup<f64>;
pub type AdvantageTensor = trainer::AdvantageTensor<f64>;
