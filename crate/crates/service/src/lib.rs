//! HTTP service and command-line front end over the `lensground` engine.

pub mod api;
pub mod cli;
pub mod engine;
pub mod registry;

pub use lensground;
