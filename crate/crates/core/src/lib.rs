// SPDX-License-Identifier: Apache-2.0

//! Region-referring instruction toolkit: coordinate normalization and
//! serialization, instruction corpus construction, model backends, the
//! evaluation harness and a multi-turn session service.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod evalkit;
pub mod geometry;
pub mod instructgen;
pub mod session;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
