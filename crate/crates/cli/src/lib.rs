//! Batch front end for `moga-core`: JSON config, artifact writers and the
//! `verify` self-check registry behind the `moga` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

pub use commands::{cmd_balance, cmd_flops, cmd_groups, Precision};
pub use config::RunConfig;
pub use error::CliError;
pub use verify::{run_verify, VerifyReport};
