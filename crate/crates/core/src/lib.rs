//! Speaker-listener 3D dense captioning and visual grounding on synthetic
//! desk-scale scenes: a point-cluster detector, a relational caption
//! decoder, a fusion listener, CIDEr-D rewards with self-critical REINFORCE,
//! stage-wise training and the evaluation suite.

pub mod detector;
pub mod eval;
pub mod geometry;
pub mod listener;
pub mod nn;
pub mod reward;
pub mod rng;
pub mod scene;
pub mod speaker;
pub mod tensor;
pub mod trainer;

pub use detector::{Detector, DetectorConfig, Proposal};
pub use eval::{CaptionMetrics, GroundingMetrics, MetricsReport};
pub use geometry::{Aabb, Point3};
pub use listener::{Listener, ListenerConfig};
pub use reward::{CiderCorpus, RewardRecord, RewardWeights};
pub use scene::{Dataset, DatasetConfig, Scene, Vocab};
pub use speaker::{Speaker, SpeakerConfig, TokenSeq};
pub use tensor::{Graph, ParamStore, Tensor};
pub use trainer::{Model, Stage, TrainConfig};
