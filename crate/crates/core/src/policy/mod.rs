//! Policy chain: pre-tag handlers, then handlers for each tag present on the
//! request, then post-tag handlers. The first failing handler denies.

mod builtin;
mod config;
pub mod intentions;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::context::{ContainerContext, RequestContext};
use crate::tag_params::TagDetail;

pub use builtin::{
    comment_policy, login_policy, purchase_product_policy, registration_policy, response_size_policy,
    add_to_cart_policy, token_in_url_policy, CART_HOLD, COMMENT_RATE, CREDENTIAL_PARAMS, DEMOTED,
    LOGIN_RATE, PLAINTEXT_CREDENTIAL, PLAINTEXT_TOKEN, PURCHASE_LIMIT, REGISTRATION_RATE,
    RESPONSE_SIZE, TOKEN_IN_URL,
};
pub use config::{ConfigError, FailMode, PolicyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Allow,
    Deny,
    Audit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reason {
    pub policy: String,
    pub message: String,
}

impl Reason {
    pub fn new(policy: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            policy: policy.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub reasons: Vec<Reason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deciding_policy: Option<String>,
}

impl Decision {
    pub fn allow() -> Self {
        Self {
            outcome: Outcome::Allow,
            reasons: Vec::new(),
            deciding_policy: None,
        }
    }

    pub fn deny(policy: &str, message: impl Into<String>) -> Self {
        Self {
            outcome: Outcome::Deny,
            reasons: vec![Reason::new(policy, message)],
            deciding_policy: Some(policy.to_string()),
        }
    }

    pub fn audit(policy: &str, message: impl Into<String>) -> Self {
        Self {
            outcome: Outcome::Audit,
            reasons: vec![Reason::new(policy, message)],
            deciding_policy: None,
        }
    }

    pub fn is_deny(&self) -> bool {
        self.outcome == Outcome::Deny
    }

    /// Whether the request goes upstream.
    pub fn forwards(&self) -> bool {
        self.outcome != Outcome::Deny
    }

    /// JSON body returned with a 403.
    pub fn deny_body(&self, trace_id: &str) -> String {
        serde_json::json!({
            "error": "request denied",
            "deciding_policy": self.deciding_policy,
            "reasons": self.reasons,
            "trace_id": trace_id,
        })
        .to_string()
    }
}

/// Result of one handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub pass: bool,
    pub message: Option<String>,
    /// Audit flags raised without denying: (flag, message).
    pub audits: Vec<(String, String)>,
}

impl Check {
    pub fn pass() -> Self {
        Self {
            pass: true,
            message: None,
            audits: Vec::new(),
        }
    }

    pub fn fail(message: impl Into<String>) -> Self {
        Self {
            pass: false,
            message: Some(message.into()),
            audits: Vec::new(),
        }
    }

    pub fn with_audit(mut self, flag: &str, message: impl Into<String>) -> Self {
        self.audits.push((flag.to_string(), message.into()));
        self
    }
}

/// Everything a handler sees.
pub struct PolicyInput<'a> {
    pub detail: &'a TagDetail,
    pub ctx: &'a RequestContext<'a>,
    pub cc: Option<&'a ContainerContext>,
    pub cfg: &'a PolicyConfig,
}

/// A policy handler. Must be safe to call concurrently.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    fn check(&self, input: &PolicyInput<'_>) -> Check;
}

/// Adapts a plain function into a named policy.
pub struct FnPolicy<F> {
    name: String,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&PolicyInput<'_>) -> Check + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&PolicyInput<'_>) -> Check + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn check(&self, input: &PolicyInput<'_>) -> Check {
        (self.f)(input)
    }
}

pub fn policy_fn<F>(name: &str, f: F) -> Arc<dyn Policy>
where
    F: Fn(&PolicyInput<'_>) -> Check + Send + Sync + 'static,
{
    Arc::new(FnPolicy::new(name, f))
}

pub const POLICY_PANIC: &str = "PolicyPanic";

#[derive(Clone, Default)]
pub struct PolicyChain {
    pre_tag: Vec<Arc<dyn Policy>>,
    per_tag: BTreeMap<String, Vec<Arc<dyn Policy>>>,
    post_tag: Vec<Arc<dyn Policy>>,
}

impl PolicyChain {
    /// A chain with no handlers: every request is allowed.
    pub fn empty() -> Self {
        Self::default()
    }

    /// The built-in handlers, one per threat-bearing tag.
    pub fn builtin() -> Self {
        use crate::taxonomy::*;
        let mut c = Self::empty();
        c.on_tag(RESPONSE_DATA_LIMIT, policy_fn(RESPONSE_SIZE, response_size_policy));
        c.on_tag(PURCHASE_PRODUCT, policy_fn(PURCHASE_LIMIT, purchase_product_policy));
        c.on_tag(LOGIN, policy_fn(LOGIN_RATE, login_policy));
        c.on_tag(ADD_TO_CART, policy_fn(CART_HOLD, add_to_cart_policy));
        c.on_tag(USER_REGISTRATION, policy_fn(REGISTRATION_RATE, registration_policy));
        c.on_tag(COMMENTING, policy_fn(COMMENT_RATE, comment_policy));
        c.post(policy_fn(TOKEN_IN_URL, token_in_url_policy));
        c
    }

    pub fn pre(&mut self, p: Arc<dyn Policy>) -> &mut Self {
        self.pre_tag.push(p);
        self
    }

    pub fn on_tag(&mut self, tag: &str, p: Arc<dyn Policy>) -> &mut Self {
        self.per_tag.entry(tag.to_string()).or_default().push(p);
        self
    }

    pub fn post(&mut self, p: Arc<dyn Policy>) -> &mut Self {
        self.post_tag.push(p);
        self
    }

    /// Names of all handlers, in registration order per stage.
    pub fn handler_names(&self) -> Vec<String> {
        self.pre_tag
            .iter()
            .chain(self.per_tag.values().flatten())
            .chain(&self.post_tag)
            .map(|p| p.name().to_string())
            .collect()
    }

    /// Runs the chain. Tag handlers run in tag-name order and only for tags
    /// on the request. A panicking handler is treated per `cfg.fail_mode`.
    pub fn evaluate(
        &self,
        detail: &TagDetail,
        ctx: &RequestContext<'_>,
        cc: Option<&ContainerContext>,
        cfg: &PolicyConfig,
    ) -> Decision {
        let input = PolicyInput { detail, ctx, cc, cfg };
        let tag_handlers = detail
            .tags
            .iter()
            .filter_map(|t| self.per_tag.get(t))
            .flatten();
        let mut audits: Vec<Reason> = Vec::new();
        for p in self.pre_tag.iter().chain(tag_handlers).chain(&self.post_tag) {
            let check = match catch_unwind(AssertUnwindSafe(|| p.check(&input))) {
                Ok(c) => c,
                Err(payload) => {
                    let what = panic_message(&payload);
                    tracing::error!(policy = p.name(), "policy panicked: {what}");
                    match cfg.fail_mode {
                        FailMode::Open => {
                            Check::pass().with_audit(POLICY_PANIC, format!("{} panicked: {what}", p.name()))
                        }
                        FailMode::Closed => Check::fail(format!("{POLICY_PANIC}: {what}")),
                    }
                }
            };
            for (flag, msg) in check.audits {
                audits.push(Reason::new(p.name(), format!("{flag}: {msg}")));
            }
            if !check.pass {
                let mut d = Decision::deny(p.name(), check.message.unwrap_or_else(|| "denied".into()));
                d.reasons.extend(audits);
                return d;
            }
        }
        if audits.is_empty() {
            Decision::allow()
        } else {
            Decision {
                outcome: Outcome::Audit,
                reasons: audits,
                deciding_policy: None,
            }
        }
    }
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}
