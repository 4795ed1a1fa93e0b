//! Command-line pipelines and the HTTP annotation service.

pub mod commands;
pub mod error;
pub mod queue;
pub mod service;
