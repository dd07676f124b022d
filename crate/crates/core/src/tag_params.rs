//! Policy variables: normalised names (e.g. `num_records`) filled from
//! whichever request parameter carries the same meaning.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http_model::ParsedRequest;
use crate::tagging::TagSet;
use crate::taxonomy::{Taxonomy, RESPONSE_DATA_LIMIT};

pub const NUM_RECORDS: &str = "num_records";
pub const USERNAME: &str = "username";
pub const EMAIL: &str = "email";
pub const FILE_NAME: &str = "file_name";
pub const QUANTITY: &str = "quantity";
pub const PRODUCT_ID: &str = "product_id";
pub const COMMENT: &str = "comment";

const DEFAULT_SYNONYMS: &str = include_str!("../data/synonyms.toml");

#[derive(Debug, Error)]
pub enum SynonymError {
    #[error("policy variable {0:?} has no parameter patterns")]
    EmptyPatterns(String),
    #[error("invalid synonym file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read synonym file: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercases, splits camel case with underscores and maps `-`, `.` and
/// spaces to underscores: `maxResults` -> `max_results`.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    let chars: Vec<char> = name.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_uppercase() {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            let boundary = match prev {
                Some(p) if p.is_ascii_lowercase() || p.is_ascii_digit() => true,
                Some(p) if p.is_ascii_uppercase() => next.is_some_and(|n| n.is_ascii_lowercase()),
                _ => false,
            };
            if boundary && !out.ends_with('_') {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else if c == '-' || c == ' ' || c == '.' {
            if !out.ends_with('_') {
                out.push('_');
            }
        } else {
            out.push(c.to_ascii_lowercase());
        }
    }
    out.trim_matches('_').to_string()
}

#[derive(Debug, Deserialize)]
struct SynonymFile {
    variables: BTreeMap<String, Vec<String>>,
}

/// Normalised parameter-name patterns per policy variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymTable {
    patterns: BTreeMap<String, BTreeSet<String>>,
}

pub fn default_synonyms() -> SynonymTable {
    SynonymTable::from_toml_str(DEFAULT_SYNONYMS).expect("bundled synonym table is valid")
}

impl SynonymTable {
    pub fn new(patterns: BTreeMap<String, Vec<String>>) -> Result<Self, SynonymError> {
        let mut out = BTreeMap::new();
        for (var, pats) in patterns {
            if pats.is_empty() {
                return Err(SynonymError::EmptyPatterns(var));
            }
            out.insert(var, pats.iter().map(|p| normalize_name(p)).collect());
        }
        Ok(Self { patterns: out })
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SynonymError> {
        let file: SynonymFile = toml::from_str(s)?;
        Self::new(file.variables)
    }

    pub fn load(path: &Path) -> Result<Self, SynonymError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.patterns.keys().map(String::as_str)
    }

    pub fn patterns(&self, variable: &str) -> Option<&BTreeSet<String>> {
        self.patterns.get(variable)
    }
}

/// True when `param_name` is a known spelling of `variable`. For flattened
/// JSON names (`order.qty`) the last component is also tried.
pub fn synonym_match(param_name: &str, variable: &str, syn: &SynonymTable) -> bool {
    let Some(patterns) = syn.patterns(variable) else {
        return false;
    };
    if patterns.contains(&normalize_name(param_name)) {
        return true;
    }
    match param_name.rsplit_once('.') {
        Some((_, leaf)) => patterns.contains(&normalize_name(leaf)),
        None => false,
    }
}

/// Policy variables of a tag, as declared in the taxonomy.
pub fn policy_variables_for<'a>(tx: &'a Taxonomy, tag: &str) -> &'a [String] {
    tx.by_name(tag)
        .map(|e| e.policy_variables.as_slice())
        .unwrap_or(&[])
}

/// Tags of a request plus the policy-variable values found in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagDetail {
    pub tags: TagSet,
    /// Policy variable -> raw request value.
    pub variables: BTreeMap<String, String>,
    /// Policy variable -> request parameter name the value came from.
    pub param_names: BTreeMap<String, String>,
    /// Expected variables with no matching parameter.
    pub missing: BTreeSet<String>,
}

impl TagDetail {
    pub fn variable(&self, name: &str) -> Option<&str> {
        self.variables.get(name).map(String::as_str)
    }

    /// A response-limit tag without a record count is likely a false
    /// positive; policies decide what to do with that.
    pub fn demotable(&self) -> bool {
        self.tags.contains(RESPONSE_DATA_LIMIT) && self.missing.contains(NUM_RECORDS)
    }
}

fn expected_variables(tags: &TagSet, tx: &Taxonomy) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for tag in tags.iter() {
        for v in policy_variables_for(tx, tag) {
            if !out.contains(v) {
                out.push(v.clone());
            }
        }
    }
    out
}

/// Fills the policy variables of every tag in `tags` from the request's
/// query and body parameters. The first matching parameter wins, scanning
/// query parameters then body parameters in order.
pub fn extract_tag_params(
    tags: &TagSet,
    r: &ParsedRequest,
    syn: &SynonymTable,
    tx: &Taxonomy,
) -> TagDetail {
    let merged = r.merged_params();
    let mut detail = TagDetail {
        tags: tags.clone(),
        variables: BTreeMap::new(),
        param_names: BTreeMap::new(),
        missing: BTreeSet::new(),
    };
    for var in expected_variables(tags, tx) {
        resolve_by_synonym(&var, &merged, syn, &mut detail);
    }
    detail
}

fn resolve_by_synonym(var: &str, merged: &IndexMap<&str, &str>, syn: &SynonymTable, detail: &mut TagDetail) {
    match merged.iter().find(|(name, _)| synonym_match(name, var, syn)) {
        Some((name, value)) => {
            detail.variables.insert(var.to_string(), value.to_string());
            detail.param_names.insert(var.to_string(), name.to_string());
        }
        None => {
            detail.missing.insert(var.to_string());
        }
    }
}

/// Re-extraction for a cache hit: values are read from the parameter names
/// resolved earlier for this endpoint. Variables that had no resolved name
/// fall back to synonym matching; a cached name absent from this request
/// leaves the variable missing.
pub fn extract_with_cached_names(
    tags: &TagSet,
    r: &ParsedRequest,
    cached: &BTreeMap<String, String>,
    syn: &SynonymTable,
    tx: &Taxonomy,
) -> TagDetail {
    let merged = r.merged_params();
    let mut detail = TagDetail {
        tags: tags.clone(),
        variables: BTreeMap::new(),
        param_names: BTreeMap::new(),
        missing: BTreeSet::new(),
    };
    for var in expected_variables(tags, tx) {
        match cached.get(&var) {
            Some(name) => match merged.get(name.as_str()) {
                Some(value) => {
                    detail.variables.insert(var.clone(), value.to_string());
                    detail.param_names.insert(var, name.clone());
                }
                None => {
                    detail.missing.insert(var);
                }
            },
            None => resolve_by_synonym(&var, &merged, syn, &mut detail),
        }
    }
    detail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http_model::parse_request;
    use crate::tagging::TagSource;
    use crate::taxonomy::{
        default_taxonomy, ADD_TO_CART, COMMENTING, CONTAINS_AUTH_TOKENS, FILE_UPLOAD, LOGIN, LOGOUT,
        PURCHASE_PRODUCT, USER_REGISTRATION,
    };

    fn req(raw: &str) -> ParsedRequest {
        parse_request(raw.as_bytes(), "127.0.0.1".parse().unwrap()).unwrap()
    }

    fn tags(names: &[&str]) -> TagSet {
        TagSet::new(names.iter().copied(), TagSource::Oracle)
    }

    #[test]
    fn normalisation() {
        assert_eq!(normalize_name("maxResults"), "max_results");
        assert_eq!(normalize_name("numResults"), "num_results");
        assert_eq!(normalize_name("fileName"), "file_name");
        assert_eq!(normalize_name("num_records"), "num_records");
        assert_eq!(normalize_name("HTTPCode"), "http_code");
        assert_eq!(normalize_name("page-size"), "page_size");
        assert_eq!(normalize_name("BasketItems"), "basket_items");
    }

    #[test]
    fn variables_per_tag() {
        let tx = default_taxonomy();
        assert_eq!(policy_variables_for(&tx, RESPONSE_DATA_LIMIT), [NUM_RECORDS]);
        assert_eq!(policy_variables_for(&tx, LOGIN), [USERNAME]);
        assert_eq!(policy_variables_for(&tx, FILE_UPLOAD), [FILE_NAME]);
        assert_eq!(policy_variables_for(&tx, USER_REGISTRATION), [USERNAME, EMAIL]);
        assert_eq!(policy_variables_for(&tx, ADD_TO_CART), [QUANTITY, PRODUCT_ID]);
        assert_eq!(policy_variables_for(&tx, PURCHASE_PRODUCT), [QUANTITY, PRODUCT_ID]);
        assert_eq!(policy_variables_for(&tx, COMMENTING), [COMMENT]);
        assert!(policy_variables_for(&tx, LOGOUT).is_empty());
        assert!(policy_variables_for(&tx, CONTAINS_AUTH_TOKENS).is_empty());
    }

    #[test]
    fn synonym_matching() {
        let syn = default_synonyms();
        assert!(synonym_match("maxResults", NUM_RECORDS, &syn));
        assert!(synonym_match("numResults", NUM_RECORDS, &syn));
        assert!(synonym_match("count", NUM_RECORDS, &syn));
        assert!(!synonym_match("part", NUM_RECORDS, &syn));
        assert!(synonym_match("order.qty", QUANTITY, &syn));
        assert!(!synonym_match("count", "no_such_variable", &syn));
    }

    #[test]
    fn extracts_record_counts_from_feed_requests() {
        let tx = default_taxonomy();
        let syn = default_synonyms();
        let t = tags(&[RESPONSE_DATA_LIMIT]);
        let d = extract_tag_params(&t, &req("GET /commentThreads?part=7&maxResults=30 HTTP/1.1\r\n\r\n"), &syn, &tx);
        assert_eq!(d.variables, BTreeMap::from([(NUM_RECORDS.to_string(), "30".to_string())]));
        assert_eq!(d.param_names[NUM_RECORDS], "maxResults");
        let d = extract_tag_params(&t, &req("GET /query?numResults=10 HTTP/1.1\r\n\r\n"), &syn, &tx);
        assert_eq!(d.variable(NUM_RECORDS), Some("10"));
        assert!(!d.demotable());
    }

    #[test]
    fn absent_parameter_is_missing_and_demotable() {
        let d = extract_tag_params(
            &tags(&[RESPONSE_DATA_LIMIT]),
            &req("GET /items HTTP/1.1\r\n\r\n"),
            &default_synonyms(),
            &default_taxonomy(),
        );
        assert!(d.variables.is_empty());
        assert_eq!(d.missing, BTreeSet::from([NUM_RECORDS.to_string()]));
        assert!(d.demotable());
    }

    #[test]
    fn purchase_body_is_extracted() {
        let body = r#"{"quantity":2,"product_id":"A1"}"#;
        let raw = format!(
            "POST /checkout HTTP/1.1\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        let d = extract_tag_params(&tags(&[PURCHASE_PRODUCT]), &req(&raw), &default_synonyms(), &default_taxonomy());
        assert_eq!(d.variable(QUANTITY), Some("2"));
        assert_eq!(d.variable(PRODUCT_ID), Some("A1"));
        assert!(d.missing.is_empty());
    }

    #[test]
    fn query_order_breaks_ties() {
        let d = extract_tag_params(
            &tags(&[RESPONSE_DATA_LIMIT]),
            &req("GET /x?limit=5&count=9 HTTP/1.1\r\n\r\n"),
            &default_synonyms(),
            &default_taxonomy(),
        );
        assert_eq!(d.variable(NUM_RECORDS), Some("5"));
    }

    #[test]
    fn none_tag_has_no_variables() {
        let d = extract_tag_params(
            &TagSet::none(TagSource::Oracle),
            &req("GET /x?count=9 HTTP/1.1\r\n\r\n"),
            &default_synonyms(),
            &default_taxonomy(),
        );
        assert!(d.variables.is_empty() && d.missing.is_empty());
    }

    #[test]
    fn cached_names_match_full_extraction() {
        let tx = default_taxonomy();
        let syn = default_synonyms();
        let t = tags(&[RESPONSE_DATA_LIMIT]);
        let first = extract_tag_params(&t, &req("GET /c?part=1&maxResults=30 HTTP/1.1\r\n\r\n"), &syn, &tx);
        let next = req("GET /c?part=2&maxResults=99 HTTP/1.1\r\n\r\n");
        let cached = extract_with_cached_names(&t, &next, &first.param_names, &syn, &tx);
        assert_eq!(cached, extract_tag_params(&t, &next, &syn, &tx));
    }

    #[test]
    fn drifted_cached_name_is_missing() {
        let tx = default_taxonomy();
        let names = BTreeMap::from([(NUM_RECORDS.to_string(), "maxResults".to_string())]);
        let d = extract_with_cached_names(
            &tags(&[RESPONSE_DATA_LIMIT]),
            &req("GET /c?count=5 HTTP/1.1\r\n\r\n"),
            &names,
            &default_synonyms(),
            &tx,
        );
        assert!(d.missing.contains(NUM_RECORDS));
        assert!(d.variables.is_empty());
    }

    #[test]
    fn unresolved_cached_variable_falls_back_to_synonyms() {
        let d = extract_with_cached_names(
            &tags(&[RESPONSE_DATA_LIMIT]),
            &req("GET /c?count=5 HTTP/1.1\r\n\r\n"),
            &BTreeMap::new(),
            &default_synonyms(),
            &default_taxonomy(),
        );
        assert_eq!(d.variable(NUM_RECORDS), Some("5"));
    }

    #[test]
    fn empty_pattern_list_is_rejected() {
        assert!(matches!(
            SynonymTable::from_toml_str("[variables]\nx = []\n"),
            Err(SynonymError::EmptyPatterns(v)) if v == "x"
        ));
    }
}
