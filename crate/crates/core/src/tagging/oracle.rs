//! Deterministic keyword-rule tagger. Stands in for the model in offline
//! tests and defines the decidable labels of the bundled corpus.

use crate::http_model::ParsedRequest;
use crate::tag_params::normalize_name;
use crate::taxonomy::{
    Taxonomy, ADD_TO_CART, COMMENTING, CONTAINS_AUTH_TOKENS, FILE_UPLOAD, LOGIN, LOGOUT,
    PURCHASE_PRODUCT, RESPONSE_DATA_LIMIT, USER_REGISTRATION,
};

use super::{InferenceError, TagSet, TagSource, Tagger};

const LOGOUT_SEGMENTS: &[&str] = &["logout", "signout", "logoff"];
const LOGIN_SEGMENTS: &[&str] = &["login", "signin", "authenticate"];
const SESSION_SEGMENTS: &[&str] = &["session", "sessions"];
const REGISTER_SEGMENTS: &[&str] = &["register", "registration", "signup", "createaccount"];
const ACCOUNT_COLLECTIONS: &[&str] = &["users", "accounts", "customers", "members"];
const COMMENT_WORDS: &[&str] = &["comment", "comments", "review", "reviews", "reply", "replies", "feedback", "feedbacks"];
const PURCHASE_WORDS: &[&str] = &["checkout", "purchase", "purchases", "buy", "order", "orders"];
const CART_WORDS: &[&str] = &["cart", "carts", "basket", "baskets"];
const UPLOAD_SEGMENTS: &[&str] = &["upload", "uploads", "fileupload"];
const FILE_PARAMS: &[&str] = &["file", "file_name", "filename", "file_path", "attachment", "upload"];
const LIMIT_PARAMS: &[&str] = &[
    "count",
    "limit",
    "max_results",
    "num_results",
    "num_result",
    "num_records",
    "page_size",
    "per_page",
    "max_records",
    "results_per_page",
    "rows",
    "max_count",
];
const TOKEN_PARAMS: &[&str] = &[
    "token",
    "access_token",
    "api_key",
    "apikey",
    "auth_token",
    "session_token",
    "id_token",
    "refresh_token",
    "jwt",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleTagger;

struct Segment {
    /// Lowercase alphanumerics only: `sign-in` -> `signin`.
    compact: String,
    /// Lowercase words after camel-case splitting: `addToCart` -> add, to, cart.
    words: Vec<String>,
}

fn segments(path: &str) -> Vec<Segment> {
    path.split('/')
        .filter(|s| !s.is_empty())
        .map(|s| Segment {
            compact: s
                .chars()
                .filter(char::is_ascii_alphanumeric)
                .map(|c| c.to_ascii_lowercase())
                .collect(),
            words: normalize_name(s)
                .split('_')
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect(),
        })
        .collect()
}

impl OracleTagger {
    pub fn new() -> Self {
        Self
    }

    /// Tag names the rules assign, before normalisation into a `TagSet`.
    pub fn rule_tags(&self, r: &ParsedRequest) -> Vec<&'static str> {
        let segs = segments(&r.path);
        let method = r.method.to_ascii_uppercase();
        let write = matches!(method.as_str(), "POST" | "PUT" | "PATCH");
        let last = segs.last().map(|s| s.compact.as_str()).unwrap_or("");
        let any_segment = |set: &[&str]| segs.iter().any(|s| set.contains(&s.compact.as_str()));
        let any_word = |set: &[&str]| {
            segs.iter()
                .any(|s| set.contains(&s.compact.as_str()) || s.words.iter().any(|w| set.contains(&w.as_str())))
        };
        let params: Vec<String> = r.merged_params().keys().map(|k| param_leaf(k)).collect();
        let any_param = |set: &[&str]| params.iter().any(|p| set.contains(&p.as_str()));

        let mut tags = Vec::new();

        let logout = any_segment(LOGOUT_SEGMENTS)
            || (method == "DELETE" && (SESSION_SEGMENTS.contains(&last) || last == "login"));
        if logout {
            tags.push(LOGOUT);
        } else if any_segment(LOGIN_SEGMENTS) || (method == "POST" && SESSION_SEGMENTS.contains(&last)) {
            tags.push(LOGIN);
        }

        if any_segment(REGISTER_SEGMENTS) || (method == "POST" && ACCOUNT_COLLECTIONS.contains(&last)) {
            tags.push(USER_REGISTRATION);
        }

        if write && any_word(COMMENT_WORDS) {
            tags.push(COMMENTING);
        }

        let purchase = write && any_word(PURCHASE_WORDS);
        if purchase {
            tags.push(PURCHASE_PRODUCT);
        } else if write && any_word(CART_WORDS) {
            tags.push(ADD_TO_CART);
        }

        if any_param(LIMIT_PARAMS) {
            tags.push(RESPONSE_DATA_LIMIT);
        }

        let multipart = r
            .headers
            .get("content-type")
            .is_some_and(|ct| ct.to_ascii_lowercase().starts_with("multipart/form-data"));
        if write && (multipart || any_param(FILE_PARAMS) || any_segment(UPLOAD_SEGMENTS)) {
            tags.push(FILE_UPLOAD);
        }

        if r.headers.contains("authorization") || any_param(TOKEN_PARAMS) {
            tags.push(CONTAINS_AUTH_TOKENS);
        }
        tags
    }
}

fn param_leaf(name: &str) -> String {
    normalize_name(name.rsplit('.').next().unwrap_or(name))
}

impl Tagger for OracleTagger {
    fn tag(&self, r: &ParsedRequest, tx: &Taxonomy) -> Result<TagSet, InferenceError> {
        let tags = self
            .rule_tags(r)
            .into_iter()
            .filter(|t| tx.by_name(t).is_some());
        Ok(TagSet::new(tags, TagSource::Oracle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http_model::parse_request;
    use crate::taxonomy::default_taxonomy;

    fn tags(raw: &str) -> Vec<String> {
        let r = parse_request(raw.as_bytes(), "127.0.0.1".parse().unwrap()).unwrap();
        OracleTagger
            .tag(&r, &default_taxonomy())
            .unwrap()
            .iter()
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn feed_and_thread_requests_are_response_limited() {
        assert_eq!(tags("GET /feed/list?count=10 HTTP/1.1\r\n\r\n"), [RESPONSE_DATA_LIMIT]);
        assert_eq!(tags("GET /commentThreads?part=7&maxResults=30 HTTP/1.1\r\n\r\n"), [RESPONSE_DATA_LIMIT]);
        assert_eq!(tags("GET /query?numResults=10 HTTP/1.1\r\n\r\n"), [RESPONSE_DATA_LIMIT]);
    }

    #[test]
    fn bearer_header_marks_tokens() {
        let t = tags("GET /me HTTP/1.1\r\nauthorization: Bearer x\r\n\r\n");
        assert!(t.contains(&CONTAINS_AUTH_TOKENS.to_string()));
    }

    #[test]
    fn token_query_param_marks_tokens() {
        assert_eq!(tags("GET /feed?access_token=abc HTTP/1.1\r\n\r\n"), [CONTAINS_AUTH_TOKENS]);
    }

    #[test]
    fn delete_session_is_logout() {
        assert_eq!(tags("DELETE /session HTTP/1.1\r\n\r\n"), [LOGOUT]);
        assert_eq!(tags("POST /api/v1/logout HTTP/1.1\r\nContent-Length: 0\r\n\r\n"), [LOGOUT]);
    }

    #[test]
    fn login_form_is_login() {
        let body = "user=alice&password=secret";
        let raw = format!(
            "POST /login HTTP/1.1\r\nContent-Type: application/x-www-form-urlencoded\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        assert_eq!(tags(&raw), [LOGIN]);
    }

    #[test]
    fn static_asset_is_none() {
        assert_eq!(tags("GET /static/logo.png HTTP/1.1\r\n\r\n"), ["None"]);
    }

    #[test]
    fn checkout_under_cart_is_purchase_only() {
        assert_eq!(tags("POST /cart/checkout HTTP/1.1\r\nContent-Length: 0\r\n\r\n"), [PURCHASE_PRODUCT]);
        assert_eq!(tags("POST /api/BasketItems HTTP/1.1\r\nContent-Length: 0\r\n\r\n"), [ADD_TO_CART]);
    }

    #[test]
    fn reading_comments_is_not_commenting() {
        assert_eq!(tags("GET /posts/4/comments HTTP/1.1\r\n\r\n"), ["None"]);
        assert_eq!(tags("POST /posts/4/comments HTTP/1.1\r\nContent-Length: 0\r\n\r\n"), [COMMENTING]);
    }

    #[test]
    fn registration_routes() {
        assert_eq!(tags("POST /api/Users HTTP/1.1\r\nContent-Length: 0\r\n\r\n"), [USER_REGISTRATION]);
        assert_eq!(tags("POST /auth/sign-up HTTP/1.1\r\nContent-Length: 0\r\n\r\n"), [USER_REGISTRATION]);
        assert_eq!(tags("GET /api/Users HTTP/1.1\r\n\r\n"), ["None"]);
    }

    #[test]
    fn multipart_is_file_upload() {
        let body = "--b\r\nContent-Disposition: form-data; name=\"doc\"; filename=\"a.pdf\"\r\n\r\nx\r\n--b--\r\n";
        let raw = format!(
            "POST /documents HTTP/1.1\r\nContent-Type: multipart/form-data; boundary=b\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        assert_eq!(tags(&raw), [FILE_UPLOAD]);
    }

    #[test]
    fn tags_missing_from_taxonomy_are_skipped() {
        let tx = crate::taxonomy::Taxonomy::from_toml_str(
            "[[tag]]\nname = \"Login\"\nkind = \"technical\"\nreasoning = \"l\"\n[[tag]]\nname = \"None\"\nkind = \"none\"\nreasoning = \"\"\n",
        )
        .unwrap();
        let r = parse_request(b"GET /feed?count=3 HTTP/1.1\r\n\r\n", "127.0.0.1".parse().unwrap()).unwrap();
        assert!(OracleTagger.tag(&r, &tx).unwrap().is_none());
    }
}
