//! CPU reference implementation of mixture-of-groups attention (MoGA) for
//! long video-latent sequences.
//!
//! A single linear router assigns every token to one of `M` groups; attention
//! runs independently inside each group and the output is scaled by the
//! router's gate probability. Static spatial-temporal groups (window × shot,
//! and per-frame) supply local context, and the streams are averaged.
//!
//! Modules:
//! - [`tensor`]: dense matrices, softmax, linear layers, finite differences
//! - [`latent`]: latent video token geometry and shot maps
//! - [`routing`]: router, balancing loss and its gradient, trainer
//! - [`grouped`]: varlen group layout and the MoGA forward
//! - [`stga`]: static window-shot and per-frame groups, stream combiner
//! - [`cost`]: attended-pair accounting and the FLOPs model
//! - [`seqpar`]: sequence-parallel simulation
//! - [`oracle`]: independent 64-bit reference implementations

// NaN-rejecting `!(x > 0.0)` checks and index loops in kernels are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cost;
pub mod error;
pub mod grouped;
pub mod latent;
pub mod oracle;
pub mod routing;
pub mod seqpar;
pub mod stga;
pub mod synth;
pub mod tensor;

pub use cost::{count_pairs_exact, flops_curve, CostReport, FlopsModel, ModelShape};
pub use error::{Error, Result};
pub use grouped::{full_attention, moga_attention, AttentionHeads, GroupLayout};
pub use latent::{tokens_for_duration, LatentGrid, ShotMap};
pub use routing::{balance_stats, Router, RoutingResult};
pub use seqpar::{sharded_moga, sharded_route, ShardPlan};
pub use stga::{build_static_groups, combine_streams, static_group_attention, StaticGroup, StaticGroupSpec};
pub use tensor::{Matrix, Real};
