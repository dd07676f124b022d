//! The closed set of flow tags, their class numbers and the reasoning text
//! used to build classification prompts.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const USER_REGISTRATION: &str = "UserRegistration";
pub const COMMENTING: &str = "Commenting";
pub const PURCHASE_PRODUCT: &str = "PurchaseProduct";
pub const ADD_TO_CART: &str = "AddToCart";
pub const RESPONSE_DATA_LIMIT: &str = "ResponseDataLimit";
pub const LOGIN: &str = "Login";
pub const LOGOUT: &str = "Logout";
pub const FILE_UPLOAD: &str = "FileUpload";
pub const CONTAINS_AUTH_TOKENS: &str = "ContainsAuthTokens";
pub const NONE: &str = "None";

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("tag {0:?} already exists")]
    DuplicateTag(String),
    #[error("taxonomy must contain exactly one None class, found {0}")]
    NoneClass(usize),
    #[error("tag {0:?} has no primary reasoning")]
    MissingReasoning(String),
    #[error("invalid taxonomy file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read taxonomy file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    Business,
    Technical,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tag {
    pub id: u16,
    pub name: String,
    pub kind: TagKind,
}

impl Tag {
    pub fn is_none(&self) -> bool {
        self.kind == TagKind::None
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.name, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagReasoning {
    pub tag: Tag,
    pub primary_reasoning: String,
    pub clues: Vec<String>,
    pub policy_variables: Vec<String>,
}

/// One `[[tag]]` table of a taxonomy file; ids are positional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagDefinition {
    pub name: String,
    pub kind: TagKind,
    pub reasoning: String,
    #[serde(default)]
    pub clues: Vec<String>,
    #[serde(default)]
    pub policy_variables: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct TaxonomyFile {
    tag: Vec<TagDefinition>,
}

/// Ordered taxonomy. Ids are dense from 1 and the None class is last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    entries: Vec<TagReasoning>,
}

pub fn default_taxonomy() -> Taxonomy {
    Taxonomy::from_toml_str(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
}

impl Taxonomy {
    pub fn from_definitions(defs: Vec<TagDefinition>) -> Result<Self, TaxonomyError> {
        let nones = defs.iter().filter(|d| d.kind == TagKind::None).count();
        if nones != 1 {
            return Err(TaxonomyError::NoneClass(nones));
        }
        let mut ordered: Vec<TagDefinition> = defs.iter().filter(|d| d.kind != TagKind::None).cloned().collect();
        ordered.extend(defs.into_iter().filter(|d| d.kind == TagKind::None));

        let mut entries: Vec<TagReasoning> = Vec::with_capacity(ordered.len());
        for (i, d) in ordered.into_iter().enumerate() {
            if entries.iter().any(|e| e.tag.name == d.name) {
                return Err(TaxonomyError::DuplicateTag(d.name));
            }
            if d.kind != TagKind::None && d.reasoning.trim().is_empty() {
                return Err(TaxonomyError::MissingReasoning(d.name));
            }
            entries.push(TagReasoning {
                tag: Tag {
                    id: (i + 1) as u16,
                    name: d.name,
                    kind: d.kind,
                },
                primary_reasoning: d.reasoning,
                clues: d.clues,
                policy_variables: d.policy_variables,
            });
        }
        Ok(Self { entries })
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = toml::from_str(s)?;
        Self::from_definitions(file.tag)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Returns a new taxonomy with `new` appended before None. Existing ids
    /// are unchanged; None moves up by one.
    pub fn extend(&self, new: TagDefinition) -> Result<Self, TaxonomyError> {
        if new.kind == TagKind::None {
            return Err(TaxonomyError::NoneClass(2));
        }
        if self.by_name(&new.name).is_some() {
            return Err(TaxonomyError::DuplicateTag(new.name));
        }
        let mut defs: Vec<TagDefinition> = self.entries.iter().map(TagReasoning::to_definition).collect();
        let none = defs.pop().expect("taxonomy has a None class");
        defs.push(new);
        defs.push(none);
        Self::from_definitions(defs)
    }

    pub fn entries(&self) -> &[TagReasoning] {
        &self.entries
    }

    /// Entries excluding the None class.
    pub fn tags(&self) -> impl Iterator<Item = &TagReasoning> {
        self.entries.iter().filter(|e| !e.tag.is_none())
    }

    pub fn none(&self) -> &TagReasoning {
        self.entries.last().expect("taxonomy has a None class")
    }

    pub fn by_id(&self, id: u16) -> Option<&TagReasoning> {
        self.entries.get((id as usize).checked_sub(1)?)
    }

    pub fn by_name(&self, name: &str) -> Option<&TagReasoning> {
        self.entries.iter().find(|e| e.tag.name == name)
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.by_name(name).map(|e| e.tag.id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TagReasoning {
    fn to_definition(&self) -> TagDefinition {
        TagDefinition {
            name: self.tag.name.clone(),
            kind: self.tag.kind,
            reasoning: self.primary_reasoning.clone(),
            clues: self.clues.clone(),
            policy_variables: self.policy_variables.clone(),
        }
    }
}
