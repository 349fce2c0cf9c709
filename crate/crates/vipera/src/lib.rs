//! Service layer for text-to-image audits: model providers, session
//! persistence, background jobs, the HTTP API and the `vipera` CLI.
//!
//! The algorithms live in [`vipera_core`]; this crate adds the IO around them.

pub mod config;
pub mod demo;
pub mod http;
pub mod jobs;
pub mod labeling;
pub mod providers;
pub mod service;
pub mod store;

pub use vipera_core as core;
