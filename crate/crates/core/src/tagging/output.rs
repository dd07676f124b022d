//! Parsing of model completions of the form `classes: [n, m]`.

use crate::taxonomy::Taxonomy;

use super::{TagSet, TagSource};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub tags: TagSet,
    /// Set when the completion had no recognisable class list.
    pub warning: Option<String>,
}

/// Class numbers in a completion, or `None` when no list is present.
/// A list cut short by the token limit is read up to where it stops.
pub fn extract_class_numbers(text: &str) -> Option<Vec<u16>> {
    let lower = text.to_ascii_lowercase();
    let start = lower.find("classes").unwrap_or(0);
    let open = start + lower[start..].find('[')?;
    let inner = &lower[open + 1..];
    let inner = match inner.find(']') {
        Some(close) => &inner[..close],
        None => inner,
    };
    Some(
        inner
            .split(|c: char| !c.is_ascii_digit())
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect(),
    )
}

/// Maps a single-mode completion onto taxonomy tags. Unknown class numbers
/// are dropped and an empty result becomes `{None}`.
pub fn parse_llm_output(text: &str, tx: &Taxonomy) -> ParsedOutput {
    match extract_class_numbers(text) {
        Some(ids) => {
            let names = ids
                .into_iter()
                .filter_map(|id| tx.by_id(id))
                .map(|e| e.tag.name.clone());
            ParsedOutput {
                tags: TagSet::new(names, TagSource::Llm),
                warning: None,
            }
        }
        None => ParsedOutput {
            tags: TagSet::none(TagSource::Llm),
            warning: Some(format!("no class list in model output {:?}", truncate(text, 80))),
        },
    }
}

/// Reads a binary-mode completion: true when `tag_class` is selected.
/// Returns `None` when the completion is unparseable.
pub fn parse_binary_output(text: &str, tag_class: u16) -> Option<bool> {
    extract_class_numbers(text).map(|ids| ids.contains(&tag_class))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
