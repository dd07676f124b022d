//! Canonical request model: raw HTTP/1.1 parsing, body parameter extraction,
//! endpoint cache keys and source attributes.

use std::fmt;
use std::net::IpAddr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Default cap on request bodies (1 MiB).
pub const DEFAULT_MAX_BODY: usize = 1024 * 1024;

const MAX_HEADERS: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HttpError {
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("request body of {len} bytes exceeds the {max} byte limit")]
    OversizeBody { len: usize, max: usize },
}

impl HttpError {
    /// Status code the proxy answers with for this error.
    pub fn status(&self) -> u16 {
        match self {
            HttpError::MalformedRequest(_) => 400,
            HttpError::OversizeBody { .. } => 413,
        }
    }
}

/// Header multimap. Names are stored lowercase; insertion order is kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, name: &str, value: impl Into<String>) {
        self.0.push((name.to_ascii_lowercase(), value.into()));
    }

    /// First value for `name`, case-insensitive.
    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A request decomposed into the components policies and taggers look at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRequest {
    pub method: String,
    /// URL path without the query string.
    pub path: String,
    pub query_params: IndexMap<String, String>,
    pub headers: Headers,
    /// Parameters recovered from form, JSON or multipart bodies.
    pub body_params: IndexMap<String, String>,
    pub body_raw: Vec<u8>,
    pub peer_address: IpAddr,
}

impl ParsedRequest {
    /// Builds a request from already-separated parts, e.g. from a server
    /// framework that did its own framing. `target` is the request-target
    /// (path plus optional query).
    pub fn from_parts(
        method: &str,
        target: &str,
        headers: Headers,
        body: Vec<u8>,
        peer: IpAddr,
    ) -> Self {
        let (path, query) = split_target(target);
        let query_params = parse_urlencoded(query.unwrap_or(""));
        let body_params = parse_body_params(headers.get("content-type"), &body);
        ParsedRequest {
            method: method.to_string(),
            path: path.to_string(),
            query_params,
            headers,
            body_params,
            body_raw: body,
            peer_address: peer,
        }
    }

    /// Query and body parameters merged; a body value replaces a query value
    /// of the same name but keeps the query position.
    pub fn merged_params(&self) -> IndexMap<&str, &str> {
        let mut merged: IndexMap<&str, &str> = self
            .query_params
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        for (k, v) in &self.body_params {
            merged.insert(k.as_str(), v.as_str());
        }
        merged
    }

    /// The request-target as it appears on the request line.
    pub fn target(&self) -> String {
        if self.query_params.is_empty() {
            self.path.clone()
        } else {
            let query = form_urlencoded::Serializer::new(String::new())
                .extend_pairs(self.query_params.iter())
                .finish();
            format!("{}?{}", self.path, query)
        }
    }

    /// Renders the request back to HTTP/1.1 wire format. Chunked bodies are
    /// written out with their decoded length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{} {} HTTP/1.1\r\n", self.method, self.target()).into_bytes();
        for (name, value) in self.headers.iter() {
            if name == "transfer-encoding" {
                continue;
            }
            if name == "content-length" {
                continue;
            }
            out.extend_from_slice(format!("{name}: {value}\r\n").as_bytes());
        }
        if !self.body_raw.is_empty() || self.headers.contains("content-length") {
            out.extend_from_slice(format!("content-length: {}\r\n", self.body_raw.len()).as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body_raw);
        out
    }
}

/// Parses raw bytes with the default body limit.
pub fn parse_request(raw: &[u8], peer: IpAddr) -> Result<ParsedRequest, HttpError> {
    RequestParser::default().parse(raw, peer)
}

#[derive(Debug, Clone, Copy)]
pub struct RequestParser {
    pub max_body: usize,
}

impl Default for RequestParser {
    fn default() -> Self {
        Self {
            max_body: DEFAULT_MAX_BODY,
        }
    }
}

impl RequestParser {
    pub fn new(max_body: usize) -> Self {
        Self { max_body }
    }

    pub fn parse(&self, raw: &[u8], peer: IpAddr) -> Result<ParsedRequest, HttpError> {
        let mut slots = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut req = httparse::Request::new(&mut slots);
        let head_len = match req.parse(raw) {
            Ok(httparse::Status::Complete(n)) => n,
            Ok(httparse::Status::Partial) => {
                return Err(HttpError::MalformedRequest("incomplete request head".into()))
            }
            Err(e) => return Err(HttpError::MalformedRequest(e.to_string())),
        };
        let method = req.method.unwrap_or_default().to_string();
        let target = req.path.unwrap_or_default().to_string();
        if !target.starts_with('/') && target != "*" {
            // absolute-form targets are accepted; the authority is dropped
            if !target.contains("://") {
                return Err(HttpError::MalformedRequest(format!("bad request target {target:?}")));
            }
        }
        let mut headers = Headers::new();
        for h in req.headers.iter() {
            let value = std::str::from_utf8(h.value)
                .map_err(|_| HttpError::MalformedRequest(format!("non-UTF-8 value in header {}", h.name)))?;
            headers.append(h.name, value.trim());
        }

        let rest = &raw[head_len..];
        let chunked = headers
            .get_all("transfer-encoding")
            .any(|v| v.to_ascii_lowercase().contains("chunked"));
        let body = if chunked {
            decode_chunked(rest, self.max_body)?
        } else if let Some(len) = headers.get("content-length") {
            let len: usize = len
                .parse()
                .map_err(|_| HttpError::MalformedRequest(format!("bad content-length {len:?}")))?;
            if len > self.max_body {
                return Err(HttpError::OversizeBody { len, max: self.max_body });
            }
            if rest.len() < len {
                return Err(HttpError::MalformedRequest(format!(
                    "body truncated: expected {len} bytes, got {}",
                    rest.len()
                )));
            }
            rest[..len].to_vec()
        } else {
            if rest.len() > self.max_body {
                return Err(HttpError::OversizeBody { len: rest.len(), max: self.max_body });
            }
            rest.to_vec()
        };

        let target = strip_authority(&target);
        Ok(ParsedRequest::from_parts(&method, target, headers, body, peer))
    }
}

fn strip_authority(target: &str) -> &str {
    match target.find("://") {
        Some(i) => {
            let after = &target[i + 3..];
            match after.find('/') {
                Some(j) => &after[j..],
                None => "/",
            }
        }
        None => target,
    }
}

fn decode_chunked(mut input: &[u8], max: usize) -> Result<Vec<u8>, HttpError> {
    let mut body = Vec::new();
    loop {
        let line_end = find_crlf(input)
            .ok_or_else(|| HttpError::MalformedRequest("truncated chunk size line".into()))?;
        let size_line = std::str::from_utf8(&input[..line_end])
            .map_err(|_| HttpError::MalformedRequest("bad chunk size line".into()))?;
        let size_hex = size_line.split(';').next().unwrap_or("").trim();
        let size = usize::from_str_radix(size_hex, 16)
            .map_err(|_| HttpError::MalformedRequest(format!("bad chunk size {size_hex:?}")))?;
        input = &input[line_end + 2..];
        if size == 0 {
            return Ok(body);
        }
        if body.len() + size > max {
            return Err(HttpError::OversizeBody { len: body.len() + size, max });
        }
        if input.len() < size + 2 {
            return Err(HttpError::MalformedRequest("truncated chunk".into()));
        }
        body.extend_from_slice(&input[..size]);
        input = &input[size + 2..];
    }
}

fn find_crlf(buf: &[u8]) -> Option<usize> {
    buf.windows(2).position(|w| w == b"\r\n")
}

fn split_target(target: &str) -> (&str, Option<&str>) {
    let target = target.split('#').next().unwrap_or("");
    match target.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (target, None),
    }
}

/// Decodes `a=1&b=2` pairs. The first occurrence of a repeated name wins.
pub fn parse_urlencoded(input: &str) -> IndexMap<String, String> {
    let mut out = IndexMap::new();
    for (k, v) in form_urlencoded::parse(input.as_bytes()) {
        if k.is_empty() {
            continue;
        }
        out.entry(k.into_owned()).or_insert_with(|| v.into_owned());
    }
    out
}

/// Extracts named parameters from a request body. Unparseable or unknown
/// bodies yield an empty map.
pub fn parse_body_params(content_type: Option<&str>, body: &[u8]) -> IndexMap<String, String> {
    if body.is_empty() {
        return IndexMap::new();
    }
    let ct = content_type.unwrap_or("").to_ascii_lowercase();
    let mime = ct.split(';').next().unwrap_or("").trim();
    if mime == "application/json" || mime.ends_with("+json") {
        flatten_json_body(body).unwrap_or_default()
    } else if mime == "application/x-www-form-urlencoded" {
        std::str::from_utf8(body).map(parse_urlencoded).unwrap_or_default()
    } else if mime == "multipart/form-data" {
        content_type
            .and_then(multipart_boundary)
            .map(|b| multipart_fields(body, &b))
            .unwrap_or_default()
    } else if mime.is_empty() {
        let trimmed = body.iter().position(|b| !b.is_ascii_whitespace());
        match trimmed.map(|i| body[i]) {
            Some(b'{') => flatten_json_body(body).unwrap_or_default(),
            _ => IndexMap::new(),
        }
    } else {
        IndexMap::new()
    }
}

/// Flattens a JSON object one level deep: `{"a":{"b":1}}` becomes `a.b = 1`.
/// Anything nested further keeps its compact JSON text as the value.
pub fn flatten_json_body(body: &[u8]) -> Option<IndexMap<String, String>> {
    let value: Value = serde_json::from_slice(body).ok()?;
    let Value::Object(top) = value else {
        return None;
    };
    let mut out = IndexMap::new();
    for (key, v) in top {
        match v {
            Value::Object(inner) => {
                for (ik, iv) in inner {
                    out.insert(format!("{key}.{ik}"), json_scalar_text(&iv));
                }
            }
            other => {
                out.insert(key, json_scalar_text(&other));
            }
        }
    }
    Some(out)
}

fn json_scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn multipart_boundary(content_type: &str) -> Option<String> {
    content_type.split(';').skip(1).find_map(|part| {
        let (k, v) = part.trim().split_once('=')?;
        k.eq_ignore_ascii_case("boundary")
            .then(|| v.trim_matches('"').to_string())
    })
}

/// Field names of a multipart body. File parts map to their file name,
/// text parts to their content; file contents are never kept.
fn multipart_fields(body: &[u8], boundary: &str) -> IndexMap<String, String> {
    let mut out = IndexMap::new();
    let text = String::from_utf8_lossy(body);
    let delim = format!("--{boundary}");
    for part in text.split(delim.as_str()).skip(1) {
        if part.starts_with("--") {
            break;
        }
        let part = part.trim_start_matches("\r\n");
        let Some((head, content)) = part.split_once("\r\n\r\n") else {
            continue;
        };
        let disposition = head
            .lines()
            .find(|l| l.to_ascii_lowercase().starts_with("content-disposition"));
        let Some(disposition) = disposition else { continue };
        let name = disposition_param(disposition, "name");
        let filename = disposition_param(disposition, "filename");
        if let Some(name) = name {
            let value = match filename {
                Some(f) => f,
                None => content.trim_end_matches("\r\n").to_string(),
            };
            out.entry(name).or_insert(value);
        }
    }
    out
}

fn disposition_param(line: &str, key: &str) -> Option<String> {
    line.split(';').skip(1).find_map(|p| {
        let (k, v) = p.trim().split_once('=')?;
        (k.trim() == key).then(|| v.trim().trim_matches('"').to_string())
    })
}

/// Endpoint identity used for tag caching and history: method plus path,
/// ignoring the query string and body.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub method: String,
    pub path: String,
}

impl CacheKey {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_string(),
            path: normalize_path(path),
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.method, self.path)
    }
}

pub fn request_key(r: &ParsedRequest) -> CacheKey {
    CacheKey::new(&r.method, &r.path)
}

/// Strips one trailing slash (except for the root) and lowercases the hex
/// digits of percent escapes.
pub fn normalize_path(path: &str) -> String {
    let path = if path.len() > 1 {
        path.strip_suffix('/').unwrap_or(path)
    } else {
        path
    };
    let bytes = path.as_bytes();
    let mut out = String::with_capacity(path.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%'
            && i + 2 < bytes.len()
            && bytes[i + 1].is_ascii_hexdigit()
            && bytes[i + 2].is_ascii_hexdigit()
        {
            out.push('%');
            out.push(bytes[i + 1].to_ascii_lowercase() as char);
            out.push(bytes[i + 2].to_ascii_lowercase() as char);
            i += 3;
        } else {
            let ch = path[i..].chars().next().expect("char boundary");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAttributes {
    pub client_ip: IpAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forwarded_for: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_ip: Option<String>,
}

impl SourceAttributes {
    /// First hop in `X-Forwarded-For`, i.e. the original client as claimed
    /// by the outermost proxy.
    pub fn forwarded_head(&self) -> Option<&str> {
        self.forwarded_for
            .as_ref()
            .and_then(|v| v.first())
            .map(String::as_str)
    }
}

pub fn extract_source_attributes(r: &ParsedRequest) -> SourceAttributes {
    let forwarded: Vec<String> = r
        .headers
        .get_all("x-forwarded-for")
        .flat_map(|v| v.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    SourceAttributes {
        client_ip: r.peer_address,
        forwarded_for: (!forwarded.is_empty()).then_some(forwarded),
        real_ip: r.headers.get("x-real-ip").map(|v| v.trim().to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn peer() -> IpAddr {
        IpAddr::V4(Ipv4Addr::new(10, 0, 0, 5))
    }

    #[test]
    fn parses_query_into_params() {
        let r = parse_request(b"GET /query?numResults=10 HTTP/1.1\r\nHost: api\r\n\r\n", peer()).unwrap();
        assert_eq!(r.path, "/query");
        assert_eq!(r.query_params.get("numResults").map(String::as_str), Some("10"));
        assert!(!r.path.contains('?'));
    }

    #[test]
    fn bare_root_has_no_params() {
        let r = parse_request(b"GET / HTTP/1.1\r\nHost: api\r\n\r\n", peer()).unwrap();
        assert!(r.query_params.is_empty());
        assert!(r.body_params.is_empty());
        assert!(r.body_raw.is_empty());
    }

    #[test]
    fn json_body_is_flattened() {
        let body = br#"{"quantity":2,"product_id":"A1"}"#;
        let raw = format!(
            "POST /checkout HTTP/1.1\r\nHost: shop\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            body.len()
        );
        let mut bytes = raw.into_bytes();
        bytes.extend_from_slice(body);
        let r = parse_request(&bytes, peer()).unwrap();
        assert_eq!(r.body_params.get("quantity").unwrap(), "2");
        assert_eq!(r.body_params.get("product_id").unwrap(), "A1");
    }

    #[test]
    fn nested_json_keeps_deeper_values_raw() {
        let m = flatten_json_body(br#"{"order":{"qty":3,"meta":{"a":[1,2]}},"tags":["x"],"ok":true,"n":null}"#)
            .unwrap();
        assert_eq!(m.get("order.qty").unwrap(), "3");
        assert_eq!(m.get("order.meta").unwrap(), r#"{"a":[1,2]}"#);
        assert_eq!(m.get("tags").unwrap(), r#"["x"]"#);
        assert_eq!(m.get("ok").unwrap(), "true");
        assert_eq!(m.get("n").unwrap(), "null");
    }

    #[test]
    fn form_body_is_url_decoded() {
        let body = "username=alice&password=p%40ss+word";
        let raw = format!(
            "POST /login HTTP/1.1\r\nContent-Type: application/x-www-form-urlencoded\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        let r = parse_request(raw.as_bytes(), peer()).unwrap();
        assert_eq!(r.body_params.get("password").unwrap(), "p@ss word");
    }

    #[test]
    fn unparseable_body_keeps_raw_bytes() {
        let raw = "POST /x HTTP/1.1\r\nContent-Type: application/json\r\nContent-Length: 5\r\n\r\n{oops";
        let r = parse_request(raw.as_bytes(), peer()).unwrap();
        assert!(r.body_params.is_empty());
        assert_eq!(r.body_raw, b"{oops");
    }

    #[test]
    fn multipart_file_part_maps_to_file_name() {
        let body = "--XyZ\r\nContent-Disposition: form-data; name=\"title\"\r\n\r\nholiday\r\n--XyZ\r\nContent-Disposition: form-data; name=\"file\"; filename=\"beach.png\"\r\nContent-Type: image/png\r\n\r\n\u{1}\u{2}\r\n--XyZ--\r\n";
        let raw = format!(
            "POST /upload HTTP/1.1\r\nContent-Type: multipart/form-data; boundary=XyZ\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        let r = parse_request(raw.as_bytes(), peer()).unwrap();
        assert_eq!(r.body_params.get("file").unwrap(), "beach.png");
        assert_eq!(r.body_params.get("title").unwrap(), "holiday");
    }

    #[test]
    fn chunked_body_is_decoded() {
        let raw = "POST /c HTTP/1.1\r\nTransfer-Encoding: chunked\r\nContent-Type: application/x-www-form-urlencoded\r\n\r\n4\r\na=12\r\n0\r\n\r\n";
        let r = parse_request(raw.as_bytes(), peer()).unwrap();
        assert_eq!(r.body_raw, b"a=12");
        assert_eq!(r.body_params.get("a").unwrap(), "12");
    }

    #[test]
    fn malformed_request_line_is_rejected() {
        let err = parse_request(b"NOT A REQUEST\r\n\r\n", peer()).unwrap_err();
        assert!(matches!(err, HttpError::MalformedRequest(_)));
        assert_eq!(err.status(), 400);
    }

    #[test]
    fn truncated_body_is_malformed() {
        let raw = b"POST /x HTTP/1.1\r\nContent-Length: 10\r\n\r\nabc";
        assert!(matches!(parse_request(raw, peer()), Err(HttpError::MalformedRequest(_))));
    }

    #[test]
    fn oversize_body_is_rejected() {
        let raw = b"POST /x HTTP/1.1\r\nContent-Length: 11\r\n\r\nhello world";
        let err = RequestParser::new(10).parse(raw, peer()).unwrap_err();
        assert_eq!(err, HttpError::OversizeBody { len: 11, max: 10 });
        assert_eq!(err.status(), 413);
    }

    #[test]
    fn header_lookup_ignores_case() {
        let r = parse_request(b"GET / HTTP/1.1\r\nX-Custom-Thing: v\r\n\r\n", peer()).unwrap();
        assert_eq!(r.headers.get("x-custom-thing"), Some("v"));
        assert_eq!(r.headers.get("X-CUSTOM-THING"), Some("v"));
        assert_eq!(r.headers.iter().next().unwrap().0, "x-custom-thing");
    }

    #[test]
    fn body_wins_on_name_collision() {
        let body = "count=50";
        let raw = format!(
            "POST /list?count=5&page=2 HTTP/1.1\r\nContent-Type: application/x-www-form-urlencoded\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        let r = parse_request(raw.as_bytes(), peer()).unwrap();
        let merged = r.merged_params();
        assert_eq!(merged.get("count"), Some(&"50"));
        assert_eq!(merged.get_index(0).map(|(k, _)| *k), Some("count"));
        assert_eq!(r.query_params.get("count").unwrap(), "5");
    }

    #[test]
    fn cache_key_ignores_query_and_method_distinguishes() {
        let a = parse_request(b"GET /feed/list?count=10 HTTP/1.1\r\n\r\n", peer()).unwrap();
        let b = parse_request(b"GET /feed/list?count=99 HTTP/1.1\r\n\r\n", peer()).unwrap();
        let c = parse_request(b"POST /feed/list HTTP/1.1\r\nContent-Length: 0\r\n\r\n", peer()).unwrap();
        assert_eq!(request_key(&a), CacheKey::new("GET", "/feed/list"));
        assert_eq!(request_key(&a), request_key(&b));
        assert_eq!(request_key(&c), CacheKey::new("POST", "/feed/list"));
        assert_ne!(request_key(&a), request_key(&c));
    }

    #[test]
    fn path_normalization() {
        assert_eq!(normalize_path("/a/b/"), "/a/b");
        assert_eq!(normalize_path("/"), "/");
        assert_eq!(normalize_path("/a//"), "/a/");
        assert_eq!(normalize_path("/a%2Fb%C3%A9"), "/a%2fb%c3%a9");
        assert_eq!(normalize_path("/x%2"), "/x%2");
    }

    #[test]
    fn source_attributes_from_peer_only() {
        let r = parse_request(b"GET / HTTP/1.1\r\n\r\n", peer()).unwrap();
        let s = extract_source_attributes(&r);
        assert_eq!(s.client_ip, peer());
        assert!(s.forwarded_for.is_none());
        assert!(s.real_ip.is_none());
    }

    #[test]
    fn forwarded_headers_are_copied_in_order() {
        let r = parse_request(
            b"GET / HTTP/1.1\r\nX-Forwarded-For: 1.2.3.4, 5.6.7.8\r\nX-Real-Ip: 9.9.9.9\r\n\r\n",
            peer(),
        )
        .unwrap();
        let s = extract_source_attributes(&r);
        assert_eq!(s.forwarded_for, Some(vec!["1.2.3.4".to_string(), "5.6.7.8".to_string()]));
        assert_eq!(s.real_ip.as_deref(), Some("9.9.9.9"));
        assert_eq!(s.forwarded_head(), Some("1.2.3.4"));
    }
}
