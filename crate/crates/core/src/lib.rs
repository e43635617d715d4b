//! Analysis-guided reinforcement learning for egocentric interaction
//! reasoning and grounding, at desk scale.

pub mod afs;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod grpo;
pub mod numerics;
pub mod parser;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod synth_env;
pub mod text_metrics;

pub use error::{Error, Result};
