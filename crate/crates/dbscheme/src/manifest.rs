//! Dataset manifest: one CSV file per relation plus declared types and keys.

use std::fs;
use std::path::Path;

use dbscheme_core::relmodel::{AttributeDef, Database, ForeignKeyDef, RawType, RelationDef, SchemaDef, SYNTHETIC_KEY};
use dbscheme_core::sampler::TaskKind;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticOverride {
    Categorical,
    Numeric,
    Text,
    Datetime,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub raw: RawType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticOverride>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKeySpec {
    pub columns: Vec<String>,
    pub references: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub file: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub primary_key: Vec<String>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKeySpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub relation: String,
    pub attribute: String,
    pub task: TaskKind,
}

impl TargetSpec {
    /// Parses `relation.attribute`.
    pub fn parse(s: &str, task: TaskKind) -> Result<Self> {
        let (r, a) = s.split_once('.').ok_or_else(|| Error::Usage(format!("target `{s}` is not of the form relation.attribute")))?;
        Ok(Self { relation: r.into(), attribute: a.into(), task })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub relations: Vec<RelationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    /// JSON-lines file of precomputed text vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_vectors: Option<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(json_err(&path))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(json_err(&path))?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Declared schema with semantic types still undetected.
    pub fn schema(&self) -> SchemaDef {
        SchemaDef {
            relations: self
                .relations
                .iter()
                .map(|r| RelationDef {
                    name: r.name.clone(),
                    attributes: r.columns.iter().map(|c| AttributeDef::new(&c.name, c.raw)).collect(),
                    pk_attrs: r.primary_key.clone(),
                    fks: r
                        .foreign_keys
                        .iter()
                        .map(|f| ForeignKeyDef { source_relation: r.name.clone(), source_attrs: f.columns.clone(), target_relation: f.references.clone() })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Manifest describing `db` with one `<relation>.csv` per relation. Synthetic keys are left out.
    pub fn describe(name: &str, db: &Database, target: Option<TargetSpec>) -> Self {
        let relations = db
            .schema
            .relations
            .iter()
            .map(|r| RelationSpec {
                name: r.name.clone(),
                file: format!("{}.csv", r.name),
                columns: r.attributes.iter().filter(|a| a.name != SYNTHETIC_KEY).map(|a| ColumnSpec { name: a.name.clone(), raw: a.raw, semantic: None }).collect(),
                primary_key: r.pk_attrs.iter().filter(|a| *a != SYNTHETIC_KEY).cloned().collect(),
                foreign_keys: r.fks.iter().map(|f| ForeignKeySpec { columns: f.source_attrs.clone(), references: f.target_relation.clone() }).collect(),
            })
            .collect();
        Self { name: name.into(), relations, target, text_vectors: None }
    }
}
