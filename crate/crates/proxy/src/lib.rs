//! Network side of flowtag: the enforcing reverse proxy, a stub upstream
//! for tests, and the latency bench.

pub mod bench;
pub mod server;
pub mod setup;
pub mod upstream;

pub use server::{spawn, ProxyState, RunningProxy, TRACE_HEADER};
pub use upstream::{StubOptions, StubUpstream};
