//! Prompt construction for single (multi-class) and parallel (binary) modes.

use sha2::{Digest, Sha256};

use crate::http_model::ParsedRequest;
use crate::taxonomy::{TagReasoning, Taxonomy};

/// Longest request body, in characters, copied into a prompt.
pub const MAX_PROMPT_BODY_CHARS: usize = 2048;

/// Class numbers used in every binary prompt.
pub const BINARY_TAG_CLASS: u16 = 1;
pub const BINARY_NONE_CLASS: u16 = 2;

const SYSTEM_PROMPT: &str = "You are an API security assistant that classifies HTTP requests by the flow \
they perform. Use only the class descriptions given below. Each class is identified by a class \
number; decide using the reasoning and clues of each class.";

const USER_PROMPT_PREFIX: &str = "Apply the instructions above to the following HTTP request:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassBlock {
    pub id: u16,
    /// Taxonomy tag this block stands for. Not rendered into the prompt.
    pub tag: String,
    pub reasoning: String,
    pub clues: Vec<String>,
}

/// The six parts of a classification prompt, in render order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub system_prompt: String,
    pub class_blocks: Vec<ClassBlock>,
    pub output_format_spec: String,
    pub user_prompt_prefix: String,
    pub user_input: String,
}

impl PromptText {
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(1024 + self.user_input.len());
        out.push_str("[INST] <<SYS>>\n");
        out.push_str(&self.system_prompt);
        out.push_str("\n<</SYS>>\n\n");
        for block in &self.class_blocks {
            out.push_str(&format!("Class {}: {}", block.id, block.reasoning));
            for clue in &block.clues {
                out.push(' ');
                out.push_str(clue);
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.output_format_spec);
        out.push_str("\n\n");
        out.push_str(&self.user_prompt_prefix);
        out.push('\n');
        out.push_str(&self.user_input);
        out.push_str("\n[/INST]");
        out
    }

    /// Hex SHA-256 of the rendered prompt; keys recorded transcripts.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Tag name for a class number appearing in this prompt.
    pub fn tag_for_class(&self, id: u16) -> Option<&str> {
        self.class_blocks
            .iter()
            .find(|b| b.id == id)
            .map(|b| b.tag.as_str())
    }

    /// Class number the prompt reserves for "no tag applies".
    pub fn none_class(&self) -> Option<u16> {
        self.class_blocks.last().map(|b| b.id)
    }
}

/// Textual form of the request given to the model: request line, a few
/// headers (authorization value redacted) and the body.
pub fn render_user_input(r: &ParsedRequest) -> String {
    let mut out = format!("{} {} HTTP/1.1\n", r.method, r.target());
    if let Some(host) = r.headers.get("host") {
        out.push_str(&format!("host: {host}\n"));
    }
    if let Some(ct) = r.headers.get("content-type") {
        out.push_str(&format!("content-type: {ct}\n"));
    }
    if r.headers.contains("authorization") {
        out.push_str("authorization: [redacted]\n");
    }
    out.push('\n');
    let body = String::from_utf8_lossy(&r.body_raw);
    out.extend(body.chars().take(MAX_PROMPT_BODY_CHARS));
    out
}

fn block(id: u16, e: &TagReasoning) -> ClassBlock {
    ClassBlock {
        id,
        tag: e.tag.name.clone(),
        reasoning: e.primary_reasoning.clone(),
        clues: e.clues.clone(),
    }
}

pub fn build_single_prompt(r: &ParsedRequest, tx: &Taxonomy) -> PromptText {
    let none_id = tx.none().tag.id;
    PromptText {
        system_prompt: SYSTEM_PROMPT.to_string(),
        class_blocks: tx.entries().iter().map(|e| block(e.tag.id, e)).collect(),
        output_format_spec: format!(
            "Answer only with the numbers of every class that applies, in the form \
             classes: [n, m]. If no other class applies answer classes: [{none_id}]. \
             Do not explain the answer."
        ),
        user_prompt_prefix: USER_PROMPT_PREFIX.to_string(),
        user_input: render_user_input(r),
    }
}

/// One binary prompt per non-None tag, each holding that tag's block and
/// the None block under the fixed class numbers 1 and 2.
pub fn build_parallel_prompts(r: &ParsedRequest, tx: &Taxonomy) -> Vec<PromptText> {
    let user_input = render_user_input(r);
    let none = tx.none();
    tx.tags()
        .map(|e| PromptText {
            system_prompt: SYSTEM_PROMPT.to_string(),
            class_blocks: vec![block(BINARY_TAG_CLASS, e), block(BINARY_NONE_CLASS, none)],
            output_format_spec: format!(
                "Answer classes: [{BINARY_TAG_CLASS}] if the request belongs to class \
                 {BINARY_TAG_CLASS}, otherwise answer classes: [{BINARY_NONE_CLASS}]. \
                 Do not explain the answer."
            ),
            user_prompt_prefix: USER_PROMPT_PREFIX.to_string(),
            user_input: user_input.clone(),
        })
        .collect()
}
