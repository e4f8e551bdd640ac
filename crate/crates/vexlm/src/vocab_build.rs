//! Typed entity harvesting: pull entity surfaces from dataset splits (typed
//! by each relation's subject/object types) and merge an optional
//! knowledge-graph dump, producing the entity list that expands the
//! vocabulary. Numeric-typed objects never become atoms.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TripleSample;
use crate::schema::{RelationSchema, SchemaError};

#[derive(Debug, thiserror::Error)]
pub enum VocabBuildError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordSource {
    Dataset,
    KgDump,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub surface: String,
    pub entity_type: String,
    pub entity_id: Option<String>,
    pub source: RecordSource,
}

/// Distinct (surface, type) count per entity type.
pub type TypeCounts = BTreeMap<String, usize>;

/// Collect typed entity records from dataset splits. Subjects take the
/// relation's subject type, gold objects its object type. Numeric-typed
/// objects are excluded (numbers stay base-tokenized). Deduplicates on
/// (surface, type), keeping output sorted.
pub fn harvest_entities(
    splits: &[Vec<TripleSample>],
    schema: &RelationSchema,
) -> Result<Vec<EntityRecord>, VocabBuildError> {
    let mut seen: BTreeMap<(String, String), EntityRecord> = BTreeMap::new();
    for samples in splits {
        for s in samples {
            let info = schema.get(&s.relation)?;
            let mut push = |surface: &str, ty: &str| {
                if surface.trim().is_empty() {
                    return;
                }
                seen.entry((surface.to_string(), ty.to_string()))
                    .or_insert_with(|| EntityRecord {
                        surface: surface.to_string(),
                        entity_type: ty.to_string(),
                        entity_id: None,
                        source: RecordSource::Dataset,
                    });
            };
            push(&s.subject, &info.subject_type);
            if !info.numeric {
                for o in &s.objects {
                    push(o, &info.object_type);
                }
            }
        }
    }
    Ok(seen.into_values().collect())
}

/// Rows of an entity dump file: the same JSONL shape as vocabulary entity
/// entries.
#[derive(Debug, Serialize, Deserialize)]
struct DumpLine {
    surface: String,
    #[serde(default)]
    kind: Option<String>,
    #[serde(rename = "type")]
    entity_type: Option<String>,
    #[serde(default)]
    entity_id: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct MergeReport {
    pub per_type: TypeCounts,
    pub total: usize,
    pub malformed_skipped: usize,
}

/// Union dataset records with a knowledge-graph dump, deduplicating on
/// (surface, type). Malformed dump rows are skipped with a warning.
pub fn merge_kg_dump(
    records: Vec<EntityRecord>,
    dump_path: Option<&Path>,
    schema: &RelationSchema,
) -> Result<(Vec<EntityRecord>, MergeReport), VocabBuildError> {
    let mut seen: BTreeMap<(String, String), EntityRecord> = records
        .into_iter()
        .map(|r| ((r.surface.clone(), r.entity_type.clone()), r))
        .collect();
    let mut report = MergeReport::default();

    if let Some(path) = dump_path {
        let file = std::fs::File::open(path).map_err(|source| VocabBuildError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let known_types = schema.entity_types();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| VocabBuildError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Result<DumpLine, _> = serde_json::from_str(&line);
            let row = match parsed {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}:{}: skipping malformed row: {e}", path.display(), lineno + 1);
                    report.malformed_skipped += 1;
                    continue;
                }
            };
            let Some(ty) = row.entity_type else {
                log::warn!("{}:{}: skipping row without type", path.display(), lineno + 1);
                report.malformed_skipped += 1;
                continue;
            };
            if row.surface.trim().is_empty() || !known_types.contains(&ty) {
                log::warn!(
                    "{}:{}: skipping row (empty surface or type {ty:?} not in schema)",
                    path.display(),
                    lineno + 1
                );
                report.malformed_skipped += 1;
                continue;
            }
            let entry = seen
                .entry((row.surface.clone(), ty.clone()))
                .or_insert_with(|| EntityRecord {
                    surface: row.surface.clone(),
                    entity_type: ty.clone(),
                    entity_id: None,
                    source: RecordSource::KgDump,
                });
            // A dump row may supply the id for an already-harvested surface.
            if entry.entity_id.is_none() {
                entry.entity_id = row.entity_id;
            }
        }
    }

    let merged: Vec<EntityRecord> = seen.into_values().collect();
    for r in &merged {
        *report.per_type.entry(r.entity_type.clone()).or_insert(0) += 1;
    }
    report.total = merged.len();
    Ok((merged, report))
}

/// Entity-atom candidates: everything except numeric-typed surfaces.
pub fn atom_candidates(records: &[EntityRecord]) -> Vec<(String, String, Option<String>)> {
    records
        .iter()
        .filter(|r| r.entity_type != "Number")
        .map(|r| (r.surface.clone(), r.entity_type.clone(), r.entity_id.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_jsonl;

    fn sample(subject: &str, relation: &str, objects: &[&str]) -> TripleSample {
        TripleSample {
            subject: subject.into(),
            relation: relation.into(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn harvest_types_subject_and_objects() {
        let schema = RelationSchema::bundled();
        let splits = vec![vec![sample(
            "Canada",
            "CountryBordersCountry",
            &["Greenland"],
        )]];
        let records = harvest_entities(&splits, &schema).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records
            .iter()
            .any(|r| r.surface == "Canada" && r.entity_type == "Country"));
        assert!(records
            .iter()
            .any(|r| r.surface == "Greenland" && r.entity_type == "Country"));
    }

    #[test]
    fn empty_object_list_yields_subject_only() {
        let schema = RelationSchema::bundled();
        let splits = vec![vec![sample("Atlantis", "CountryBordersCountry", &[])]];
        let records = harvest_entities(&splits, &schema).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].surface, "Atlantis");
    }

    #[test]
    fn duplicates_across_splits_dedup() {
        let schema = RelationSchema::bundled();
        let splits = vec![
            vec![sample("Canada", "CountryBordersCountry", &[])],
            vec![sample("Canada", "CountryBordersCountry", &["Greenland"])],
        ];
        let records = harvest_entities(&splits, &schema).unwrap();
        let canada: Vec<_> = records.iter().filter(|r| r.surface == "Canada").collect();
        assert_eq!(canada.len(), 1);
    }

    #[test]
    fn unknown_relation_fails_loudly() {
        let schema = RelationSchema::bundled();
        let splits = vec![vec![sample("X", "MadeUpRelation", &[])]];
        let err = harvest_entities(&splits, &schema).unwrap_err();
        assert!(err.to_string().contains("MadeUpRelation"));
    }

    #[test]
    fn numeric_objects_are_not_entities() {
        let schema = RelationSchema::bundled();
        let splits = vec![vec![sample("Alice", "PersonHasNumberOfChildren", &["3"])]];
        let records = harvest_entities(&splits, &schema).unwrap();
        assert_eq!(records.len(), 1, "only the subject is harvested");
        assert!(atom_candidates(&records).iter().all(|(s, _, _)| s != "3"));
    }

    #[test]
    fn merge_reports_per_type_counts() {
        let schema = RelationSchema::bundled();
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("dump.jsonl");
        #[derive(Serialize)]
        struct Row {
            surface: String,
            kind: String,
            #[serde(rename = "type")]
            entity_type: String,
            entity_id: Option<String>,
        }
        let rows: Vec<Row> = (0..7)
            .map(|i| Row {
                surface: format!("Prize {i}"),
                kind: "entity".into(),
                entity_type: "Prize".into(),
                entity_id: None,
            })
            .collect();
        write_jsonl(&dump, &rows).unwrap();
        let (merged, report) = merge_kg_dump(Vec::new(), Some(&dump), &schema).unwrap();
        assert_eq!(report.per_type.get("Prize"), Some(&7));
        assert_eq!(merged.len(), 7);

        // Brute-force recount of distinct (surface, type) pairs.
        let mut pairs: Vec<(String, String)> = merged
            .iter()
            .map(|r| (r.surface.clone(), r.entity_type.clone()))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), report.total);
    }

    #[test]
    fn empty_dump_is_identity() {
        let schema = RelationSchema::bundled();
        let records = vec![EntityRecord {
            surface: "Canada".into(),
            entity_type: "Country".into(),
            entity_id: None,
            source: RecordSource::Dataset,
        }];
        let (merged, report) = merge_kg_dump(records.clone(), None, &schema).unwrap();
        assert_eq!(merged, records);
        assert_eq!(report.total, 1);
    }

    #[test]
    fn malformed_dump_rows_are_counted() {
        let schema = RelationSchema::bundled();
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("dump.jsonl");
        std::fs::write(
            &dump,
            "garbage\n{\"surface\": \"Berlin\", \"kind\": \"entity\", \"type\": \"City\", \"entity_id\": \"Q64\"}\n{\"surface\": \"X\", \"kind\": \"entity\", \"type\": \"NotAType\", \"entity_id\": null}\n",
        )
        .unwrap();
        let (merged, report) = merge_kg_dump(Vec::new(), Some(&dump), &schema).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(report.malformed_skipped, 2);
        assert_eq!(merged[0].entity_id.as_deref(), Some("Q64"));
    }
}
