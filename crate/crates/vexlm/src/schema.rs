//! Relation schema: subject/object entity types per relation, with a numeric
//! flag for relations whose objects are plain numbers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("schema file {path}: {message}")]
    BadFile { path: String, message: String },
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub subject_type: String,
    pub object_type: String,
    #[serde(default)]
    pub numeric: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RelationSchema {
    relations: BTreeMap<String, RelationInfo>,
}

impl RelationSchema {
    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|message| SchemaError::BadFile {
            path: path.display().to_string(),
            message,
        })
    }

    /// The 21-relation schema shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(include_str!("../assets/challenge_schema.json"))
            .expect("bundled schema parses")
    }

    fn from_json(text: &str) -> Result<Self, String> {
        // serde_json maps lose duplicate keys silently; detect them first.
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let obj = value.as_object().ok_or("expected a JSON object")?;
        let relations: BTreeMap<String, RelationInfo> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        if obj.len() != relations.len() {
            return Err("duplicate relation entries".to_string());
        }
        Ok(Self { relations })
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn get(&self, relation: &str) -> Result<&RelationInfo, SchemaError> {
        self.relations
            .get(relation)
            .ok_or_else(|| SchemaError::UnknownRelation(relation.to_string()))
    }

    pub fn is_numeric(&self, relation: &str) -> bool {
        self.relations
            .get(relation)
            .map(|r| r.numeric)
            .unwrap_or(false)
    }

    pub fn relations(&self) -> impl Iterator<Item = (&String, &RelationInfo)> {
        self.relations.iter()
    }

    /// Every type that appears as a subject or object type, sorted.
    pub fn entity_types(&self) -> Vec<String> {
        let mut types: Vec<String> = self
            .relations
            .values()
            .flat_map(|r| [r.subject_type.clone(), r.object_type.clone()])
            .collect();
        types.sort();
        types.dedup();
        types
    }
}
