use std::collections::BTreeMap;

use crate::http_model::parse_urlencoded;
use crate::tag_params::{normalize_name, COMMENT, EMAIL, NUM_RECORDS, PRODUCT_ID, QUANTITY, USERNAME};
use crate::taxonomy::{COMMENTING, LOGIN, USER_REGISTRATION};

use super::{Check, PolicyInput};

pub const RESPONSE_SIZE: &str = "ResponseSize";
pub const PURCHASE_LIMIT: &str = "PurchaseLimit";
pub const LOGIN_RATE: &str = "LoginRate";
pub const CART_HOLD: &str = "CartHold";
pub const REGISTRATION_RATE: &str = "RegistrationRate";
pub const COMMENT_RATE: &str = "CommentRate";
pub const TOKEN_IN_URL: &str = "TokenInUrl";

/// Audit flags.
pub const DEMOTED: &str = "DemotedTag";
pub const PLAINTEXT_CREDENTIAL: &str = "PlaintextCredential";
pub const PLAINTEXT_TOKEN: &str = "PlaintextToken";

/// Normalised parameter names that carry a secret.
pub const CREDENTIAL_PARAMS: &[&str] = &[
    "password",
    "passwd",
    "pwd",
    "pass",
    "passcode",
    "secret",
    "token",
    "api_key",
    "apikey",
    "key",
    "auth",
    "authorization",
    "session",
    "session_id",
    "sid",
];

fn is_credential_param(name: &str) -> bool {
    let n = normalize_name(name.rsplit('.').next().unwrap_or(name));
    CREDENTIAL_PARAMS.contains(&n.as_str())
        || ["_token", "_password", "_secret", "_api_key", "_apikey"]
            .iter()
            .any(|s| n.ends_with(s))
}

fn credentials_in_query(input: &PolicyInput<'_>) -> Vec<String> {
    parse_urlencoded(&input.ctx.dest.query)
        .into_keys()
        .filter(|k| is_credential_param(k))
        .collect()
}

/// A non-negative finite number.
fn parse_amount(v: &str) -> Option<f64> {
    v.trim().parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0)
}

fn having_product(input: &PolicyInput<'_>) -> BTreeMap<String, String> {
    let mut having = BTreeMap::new();
    if let Some(p) = input.detail.variable(PRODUCT_ID) {
        having.insert(PRODUCT_ID.to_string(), p.to_string());
    }
    having
}

/// Allows while the requested record count is below `record_threshold`.
pub fn response_size_policy(input: &PolicyInput<'_>) -> Check {
    let threshold = input.cfg.record_threshold as f64;
    match input.detail.variable(NUM_RECORDS) {
        None => Check::pass().with_audit(DEMOTED, "ResponseDataLimit without a record count parameter"),
        Some(v) => match parse_amount(v) {
            Some(n) if n < threshold => Check::pass(),
            Some(n) => Check::fail(format!("{NUM_RECORDS}={n} is not below {threshold}")),
            None => Check::fail(format!("{NUM_RECORDS}={v:?} is not a valid count")),
        },
    }
}

/// Current quantity plus the quantities bought for the same product on this
/// endpoint within `purchase_window` must stay below `max_purchase_qty`.
/// A purchase with no quantity parameter counts as one item.
pub fn purchase_product_policy(input: &PolicyInput<'_>) -> Check {
    let (qty, audit) = match input.detail.variable(QUANTITY) {
        None => (1.0, true),
        Some(v) => match parse_amount(v) {
            Some(q) => (q, false),
            None => return Check::fail(format!("{QUANTITY}={v:?} is not a valid quantity")),
        },
    };
    let q = input.ctx.window(input.cfg.purchase_window);
    let prior = input.ctx.hist.window_aggregate(input.ctx.key, &q, QUANTITY, &having_product(input));
    let total = qty + prior.sum;
    let max = input.cfg.max_purchase_qty as f64;
    let check = if total < max {
        Check::pass()
    } else {
        Check::fail(format!("total quantity {total} within {:?} is not below {max}", input.cfg.purchase_window))
    };
    if audit {
        check.with_audit(DEMOTED, "purchase without a quantity parameter counted as 1")
    } else {
        check
    }
}

fn prior_count(input: &PolicyInput<'_>, tag: &str, window: std::time::Duration) -> u64 {
    let q = input.ctx.window_for_source(window);
    let counts = input.ctx.hist.count_by_tag(tag, &q, input.ctx.group_by);
    counts.get(&input.ctx.source_key()).copied().unwrap_or(0)
}

/// Denies once this source already has `login_attempt_limit` logins in the
/// window. Credentials in the query string raise an audit flag.
pub fn login_policy(input: &PolicyInput<'_>) -> Check {
    let prior = prior_count(input, LOGIN, input.cfg.login_window);
    let limit = input.cfg.login_attempt_limit;
    let mut check = if prior < limit {
        Check::pass()
    } else {
        Check::fail(format!("{prior} login attempts from {} within {:?}", input.ctx.source_key(), input.cfg.login_window))
    };
    let leaked = credentials_in_query(input);
    if !leaked.is_empty() {
        check = check.with_audit(PLAINTEXT_CREDENTIAL, format!("credentials in URL: {}", leaked.join(",")));
    }
    check
}

/// Quantity held in carts for one product by one source, including this
/// request, must stay below `cart_hold_limit`.
pub fn add_to_cart_policy(input: &PolicyInput<'_>) -> Check {
    let qty = match input.detail.variable(QUANTITY) {
        None => 1.0,
        Some(v) => match parse_amount(v) {
            Some(q) => q,
            None => return Check::fail(format!("{QUANTITY}={v:?} is not a valid quantity")),
        },
    };
    let q = input.ctx.window_for_source(input.cfg.cart_window);
    let prior = input.ctx.hist.window_aggregate(input.ctx.key, &q, QUANTITY, &having_product(input));
    let total = qty + prior.sum;
    let limit = input.cfg.cart_hold_limit as f64;
    if total < limit {
        Check::pass()
    } else {
        Check::fail(format!("{total} items held from {} is not below {limit}", input.ctx.source_key()))
    }
}

/// Limits registrations per source and rejects empty registrations.
pub fn registration_policy(input: &PolicyInput<'_>) -> Check {
    let blank = |v: Option<&str>| v.is_none_or(|s| s.trim().is_empty());
    if blank(input.detail.variable(USERNAME)) && blank(input.detail.variable(EMAIL)) {
        return Check::fail("registration without username or email");
    }
    let prior = prior_count(input, USER_REGISTRATION, input.cfg.registration_window);
    if prior < input.cfg.registration_limit {
        Check::pass()
    } else {
        Check::fail(format!(
            "{prior} registrations from {} within {:?}",
            input.ctx.source_key(),
            input.cfg.registration_window
        ))
    }
}

/// Limits how often one source may post comments.
pub fn comment_policy(input: &PolicyInput<'_>) -> Check {
    let prior = prior_count(input, COMMENTING, input.cfg.comment_window);
    let check = if prior < input.cfg.comment_limit {
        Check::pass()
    } else {
        Check::fail(format!("{prior} comments from {} within {:?}", input.ctx.source_key(), input.cfg.comment_window))
    };
    if input.detail.variable(COMMENT).is_some_and(|c| c.trim().is_empty()) {
        check.with_audit(DEMOTED, "empty comment")
    } else {
        check
    }
}

/// Flags secrets sent in the query string on requests not already covered
/// by the login policy.
pub fn token_in_url_policy(input: &PolicyInput<'_>) -> Check {
    if input.detail.tags.contains(LOGIN) {
        return Check::pass();
    }
    let leaked = credentials_in_query(input);
    if leaked.is_empty() {
        Check::pass()
    } else {
        Check::pass().with_audit(PLAINTEXT_TOKEN, format!("secrets in URL: {}", leaked.join(",")))
    }
}
