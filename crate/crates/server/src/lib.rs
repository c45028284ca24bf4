//! Operator surface for `speechserve-core`: scenario configs, the sweep
//! runner, the HTTP streaming service and its load-test client.

pub mod config;
pub mod frame;
pub mod loadtest;
pub mod runner;
pub mod service;
