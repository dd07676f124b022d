//! Core of a layer-7 API security proxy: request parsing, flow tagging,
//! policy-variable extraction, request and container context, tag caching,
//! policy evaluation and the offline evaluation harness.

pub mod audit_log;
pub mod config;
pub mod context;
pub mod eval;
pub mod http_model;
pub mod pipeline;
pub mod policy;
pub mod replay;
pub mod tag_cache;
pub mod tag_params;
pub mod tagging;
pub mod taxonomy;
