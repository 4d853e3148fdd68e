//! Asynchronous diffusion sampling: per-pixel timestep fields driven by
//! concave schedules, with masks extracted from cross-attention.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod latent;
pub mod noise;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use latent::LatentState;
pub use noise::{NoiseKind, NoiseSchedule};
pub use sampler::{MaskPolicy, SampleOutput, Sampler, SamplerConfig, SamplerKind};
pub use schedule::{Curve, ScheduleFamily, ShiftSolution, TimestepField, TimestepMode};
