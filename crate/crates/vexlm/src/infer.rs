//! Fill-mask inference: score object candidates for subject-relation
//! queries, select per-relation thresholds on validation data, validate
//! numeric relations, and resolve surfaces to entity ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, TemplateSet};
use crate::data::TripleSample;
use crate::eval::score_sample;
use crate::model::{softmax_vec, MlmModel, ModelError};
use crate::schema::RelationSchema;
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query for {relation:?} produced {found} mask tokens, expected exactly 1")]
    BadMaskCount { relation: String, found: usize },
    #[error("top_k must be >= 1")]
    BadTopK,
    #[error("threshold grid empty or out of [0, 1]")]
    BadGrid,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("resolver failure for {surface:?}: {message}")]
    Resolver { surface: String, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("thresholds file {path}: {message}")]
    BadThresholdsFile { path: String, message: String },
}

/// One scored vocabulary entry at the mask position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub surface: String,
    pub token_id: TokenId,
    pub score: f64,
    pub entity_id: Option<String>,
}

/// Per-relation score cutoffs plus a default for unseen relations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationThresholds {
    pub per_relation: BTreeMap<String, f64>,
    pub default: f64,
}

impl RelationThresholds {
    pub fn threshold_for(&self, relation: &str) -> f64 {
        self.per_relation
            .get(relation)
            .copied()
            .unwrap_or(self.default)
    }

    /// JSON map relation -> threshold plus a `"__default__"` entry.
    pub fn save(&self, path: &Path) -> Result<(), InferError> {
        let mut map = self.per_relation.clone();
        map.insert("__default__".to_string(), self.default);
        let json = serde_json::to_string_pretty(&map).expect("thresholds serialize");
        std::fs::write(path, json).map_err(|source| InferError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, InferError> {
        let text = std::fs::read_to_string(path).map_err(|source| InferError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut map: BTreeMap<String, f64> =
            serde_json::from_str(&text).map_err(|e| InferError::BadThresholdsFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let default = map.remove("__default__").unwrap_or(0.5);
        Ok(Self {
            per_relation: map,
            default,
        })
    }
}

/// Scoring and filtering options shared by predict and sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferOptions {
    pub top_k: usize,
    /// Restrict candidates to entity atoms of the relation's object type
    /// (numeric relations are exempt).
    pub type_filter: bool,
    /// Score with raw logits instead of softmax probabilities.
    pub raw_logits: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            top_k: 20,
            type_filter: false,
            raw_logits: false,
        }
    }
}

/// Instantiate the relation's template for the subject and rank the
/// vocabulary by score at the mask position: score descending, token id
/// ascending. Returns the top_k.
pub fn predict_candidates(
    model: &MlmModel<f32>,
    vocab: &Vocabulary,
    subject: &str,
    relation: &str,
    templates: &TemplateSet,
    schema: Option<&RelationSchema>,
    opts: &InferOptions,
) -> Result<Vec<Candidate>, InferError> {
    if opts.top_k < 1 {
        return Err(InferError::BadTopK);
    }
    let template = templates.get(relation)?;
    let query = template.query(subject);
    let seq = vocab.tokenize(&query, true);
    if seq.mask_positions.len() != 1 {
        return Err(InferError::BadMaskCount {
            relation: relation.to_string(),
            found: seq.mask_positions.len(),
        });
    }
    let logits = model.forward_logits(&seq)?;
    let mask_pos = seq.mask_positions[0];
    let row: Vec<f32> = logits.row(mask_pos).to_vec();
    let scores: Vec<f64> = if opts.raw_logits {
        row.iter().map(|&v| v as f64).collect()
    } else {
        softmax_vec(&row).into_iter().map(|v| v as f64).collect()
    };

    let object_type = schema
        .and_then(|s| s.get(relation).ok())
        .map(|info| (info.object_type.clone(), info.numeric));
    let keep = |id: TokenId| -> bool {
        if !opts.type_filter {
            return true;
        }
        match &object_type {
            // Numeric relations keep the full distribution; digits are base
            // tokens, not typed atoms.
            Some((_, true)) | None => true,
            Some((ty, false)) => vocab
                .entry(id)
                .map(|e| {
                    e.kind == crate::tokenizer::TokenKind::EntityAtom
                        && e.entity_type.as_deref() == Some(ty)
                })
                .unwrap_or(false),
        }
    };

    let mut candidates: Vec<Candidate> = (0..vocab.size() as TokenId)
        .filter(|&id| keep(id))
        .map(|id| Candidate {
            surface: vocab.surface_of(id).expect("id in range").to_string(),
            token_id: id,
            score: scores[id as usize],
            entity_id: None,
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.token_id.cmp(&b.token_id))
    });
    candidates.truncate(opts.top_k);
    Ok(candidates)
}

/// Keep candidates scoring at or above the relation's threshold.
pub fn apply_threshold(
    candidates: &[Candidate],
    relation: &str,
    thresholds: &RelationThresholds,
) -> Vec<Candidate> {
    let t = thresholds.threshold_for(relation);
    candidates
        .iter()
        .filter(|c| c.score >= t)
        .cloned()
        .collect()
}

/// For numeric relations, keep only candidates whose surface parses as a
/// non-negative integer, canonicalized to plain decimal digits. Other
/// relations pass through unchanged.
pub fn validate_numeric(
    candidates: &[Candidate],
    relation: &str,
    schema: &RelationSchema,
) -> Vec<Candidate> {
    if !schema.is_numeric(relation) {
        return candidates.to_vec();
    }
    candidates
        .iter()
        .filter_map(|c| {
            let trimmed = c.surface.trim();
            if trimmed.is_empty() || !trimmed.chars().all(|ch| ch.is_ascii_digit()) {
                return None;
            }
            let value: u64 = trimmed.parse().ok()?;
            let mut out = c.clone();
            out.surface = value.to_string();
            Some(out)
        })
        .collect()
}

/// Surface to knowledge-graph id lookup.
pub trait SurfaceResolver {
    fn resolve(&self, surface: &str) -> Result<Option<String>, String>;
}

/// In-memory resolver table (e.g. built from an entity dump).
#[derive(Debug, Clone, Default)]
pub struct LocalResolver {
    table: BTreeMap<String, String>,
}

impl LocalResolver {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Self { table }
    }

    pub fn from_records(records: &[crate::vocab_build::EntityRecord]) -> Self {
        let mut table = BTreeMap::new();
        for r in records {
            if let Some(id) = &r.entity_id {
                table.entry(r.surface.clone()).or_insert_with(|| id.clone());
            }
        }
        Self { table }
    }
}

impl SurfaceResolver for LocalResolver {
    fn resolve(&self, surface: &str) -> Result<Option<String>, String> {
        Ok(self.table.get(surface).cloned())
    }
}

/// Fill entity ids where the resolver knows the surface; unresolved
/// candidates are kept with a null id.
pub fn disambiguate(
    candidates: &[Candidate],
    resolver: &dyn SurfaceResolver,
) -> Result<Vec<Candidate>, InferError> {
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let entity_id = resolver
            .resolve(&c.surface)
            .map_err(|message| InferError::Resolver {
                surface: c.surface.clone(),
                message,
            })?;
        let mut c = c.clone();
        c.entity_id = entity_id;
        out.push(c);
    }
    Ok(out)
}

/// Candidate lists per validation sample, grouped by relation; reused across
/// grid points so each sample runs one forward pass.
pub type SweepCache = BTreeMap<String, Vec<(Vec<Candidate>, Vec<String>)>>;

pub fn build_sweep_cache(
    model: &MlmModel<f32>,
    vocab: &Vocabulary,
    validation: &[TripleSample],
    templates: &TemplateSet,
    schema: &RelationSchema,
    opts: &InferOptions,
) -> Result<SweepCache, InferError> {
    let mut cache: SweepCache = BTreeMap::new();
    for sample in validation {
        let candidates = predict_candidates(
            model,
            vocab,
            &sample.subject,
            &sample.relation,
            templates,
            Some(schema),
            opts,
        )?;
        cache
            .entry(sample.relation.clone())
            .or_default()
            .push((candidates, sample.objects.clone()));
    }
    Ok(cache)
}

/// Macro-F1 of one relation at one threshold, mirroring the predict stage:
/// threshold, then numeric validation, then exact-match scoring.
fn relation_f1_at(
    entries: &[(Vec<Candidate>, Vec<String>)],
    relation: &str,
    schema: &RelationSchema,
    threshold: f64,
) -> f64 {
    let mut total = 0.0;
    for (candidates, gold) in entries {
        let kept: Vec<Candidate> = candidates
            .iter()
            .filter(|c| c.score >= threshold)
            .cloned()
            .collect();
        let kept = validate_numeric(&kept, relation, schema);
        let surfaces: Vec<String> = kept.into_iter().map(|c| c.surface).collect();
        total += score_sample(&surfaces, gold).f1;
    }
    total / entries.len().max(1) as f64
}

/// Pick, per relation, the grid threshold maximizing that relation's macro
/// F1 on validation; ties go to the smallest threshold. Relations absent
/// from validation get the median of the chosen thresholds.
pub fn sweep_thresholds(
    model: &MlmModel<f32>,
    vocab: &Vocabulary,
    validation: &[TripleSample],
    templates: &TemplateSet,
    schema: &RelationSchema,
    grid: &[f64],
    opts: &InferOptions,
) -> Result<RelationThresholds, InferError> {
    if validation.is_empty() {
        return Err(InferError::EmptyValidation);
    }
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(InferError::BadGrid);
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let cache = build_sweep_cache(model, vocab, validation, templates, schema, opts)?;
    let mut per_relation = BTreeMap::new();
    for (relation, entries) in &cache {
        let mut best_t = grid[0];
        let mut best_f1 = f64::NEG_INFINITY;
        for &t in &grid {
            let f1 = relation_f1_at(entries, relation, schema, t);
            if f1 > best_f1 {
                best_f1 = f1;
                best_t = t;
            }
        }
        per_relation.insert(relation.clone(), best_t);
    }

    let mut chosen: Vec<f64> = per_relation.values().copied().collect();
    chosen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let default = if chosen.is_empty() {
        0.5
    } else if chosen.len() % 2 == 1 {
        chosen[chosen.len() / 2]
    } else {
        (chosen[chosen.len() / 2 - 1] + chosen[chosen.len() / 2]) / 2.0
    };
    Ok(RelationThresholds {
        per_relation,
        default,
    })
}

/// The default sweep grid: 0.01..=0.99 step 0.01.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn fixture() -> (MlmModel<f32>, Vocabulary, TemplateSet, RelationSchema) {
        let corpus = [
            "Canada shares a border with Greenland .",
            "People in Canada speak Frenglish .",
            "Alice Stone has 3 children .",
        ];
        // 25 distinct characters + 5 specials = 30; 2 merges keep all entity
        // words split, so every atom below is genuinely new.
        let base = Vocabulary::build_base_vocab(corpus, 32).unwrap();
        let (vocab, out) = base.add_entity_atoms(&[
            ("Canada".into(), "Country".into(), Some("Q16".into())),
            ("Greenland".into(), "Country".into(), Some("Q223".into())),
            ("Frenglish".into(), "Language".into(), None),
            ("Alice Stone".into(), "Person".into(), None),
        ]);
        assert_eq!(out.added, 4, "rejected: {:?}", out.rejected);
        let cfg = ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            ff: 32,
            max_seq_len: 32,
            vocab_size: vocab.size(),
            seed: 5,
        };
        let model = MlmModel::init(&cfg).unwrap();
        let templates = TemplateSet::bundled();
        let schema = RelationSchema::bundled();
        (model, vocab, templates, schema)
    }

    fn cand(surface: &str, score: f64) -> Candidate {
        Candidate {
            surface: surface.into(),
            token_id: 0,
            score,
            entity_id: None,
        }
    }

    #[test]
    fn candidate_scores_sum_below_one() {
        let (model, vocab, templates, schema) = fixture();
        let opts = InferOptions {
            top_k: 5,
            ..Default::default()
        };
        let cands = predict_candidates(
            &model,
            &vocab,
            "Canada",
            "CountryBordersCountry",
            &templates,
            Some(&schema),
            &opts,
        )
        .unwrap();
        assert_eq!(cands.len(), 5);
        let sum: f64 = cands.iter().map(|c| c.score).sum();
        assert!(sum <= 1.0 + 1e-9, "top-k probability mass {sum}");
        // Descending scores, ids ascending on ties.
        for w in cands.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn top_k_equal_vocab_returns_everything() {
        let (model, vocab, templates, schema) = fixture();
        let opts = InferOptions {
            top_k: vocab.size(),
            ..Default::default()
        };
        let cands = predict_candidates(
            &model,
            &vocab,
            "Canada",
            "CountryBordersCountry",
            &templates,
            Some(&schema),
            &opts,
        )
        .unwrap();
        assert_eq!(cands.len(), vocab.size());
    }

    #[test]
    fn missing_template_is_error() {
        let (model, vocab, _, schema) = fixture();
        let templates = TemplateSet::default();
        let err = predict_candidates(
            &model,
            &vocab,
            "Canada",
            "CountryBordersCountry",
            &templates,
            Some(&schema),
            &InferOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("CountryBordersCountry"));
    }

    #[test]
    fn type_filter_keeps_only_object_type_atoms() {
        let (model, vocab, templates, schema) = fixture();
        let opts = InferOptions {
            top_k: vocab.size(),
            type_filter: true,
            ..Default::default()
        };
        let cands = predict_candidates(
            &model,
            &vocab,
            "Canada",
            "CountryBordersCountry",
            &templates,
            Some(&schema),
            &opts,
        )
        .unwrap();
        let surfaces: Vec<&str> = cands.iter().map(|c| c.surface.as_str()).collect();
        assert_eq!(cands.len(), 2);
        assert!(surfaces.contains(&"Canada"));
        assert!(surfaces.contains(&"Greenland"));
    }

    #[test]
    fn threshold_boundaries() {
        let cands = vec![cand("a", 0.7), cand("b", 0.4), cand("c", 0.1)];
        let mut thresholds = RelationThresholds {
            per_relation: BTreeMap::new(),
            default: 0.0,
        };
        assert_eq!(apply_threshold(&cands, "R", &thresholds).len(), 3);
        thresholds.default = 1.0;
        assert!(apply_threshold(&cands, "R", &thresholds).is_empty());
        thresholds.default = 0.4;
        let kept = apply_threshold(&cands, "R", &thresholds);
        assert_eq!(kept.len(), 2, ">= comparison keeps the boundary score");
    }

    #[test]
    fn threshold_anti_monotonic() {
        let cands: Vec<Candidate> = (0..20)
            .map(|i| cand(&format!("c{i}"), i as f64 / 20.0))
            .collect();
        let mut prev_len = usize::MAX;
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let thresholds = RelationThresholds {
                per_relation: BTreeMap::new(),
                default: t,
            };
            let kept = apply_threshold(&cands, "R", &thresholds);
            assert!(kept.len() <= prev_len, "threshold {t} grew the set");
            prev_len = kept.len();
        }
    }

    #[test]
    fn numeric_validation_keeps_digits_only() {
        let schema = RelationSchema::bundled();
        let cands = vec![cand("3", 0.9), cand("three", 0.5), cand("Paris", 0.4)];
        let kept = validate_numeric(&cands, "PersonHasNumberOfChildren", &schema);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].surface, "3");
    }

    #[test]
    fn numeric_validation_passthrough_for_other_relations() {
        let schema = RelationSchema::bundled();
        let cands = vec![cand("three", 0.5), cand("Paris", 0.4)];
        let kept = validate_numeric(&cands, "CountryBordersCountry", &schema);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn numeric_validation_canonicalizes_leading_zeros() {
        let schema = RelationSchema::bundled();
        let kept = validate_numeric(
            &[cand("007", 0.9), cand("0", 0.5)],
            "SeriesHasNumberOfEpisodes",
            &schema,
        );
        assert_eq!(kept[0].surface, "7");
        assert_eq!(kept[1].surface, "0");
    }

    #[test]
    fn disambiguate_local_table() {
        let resolver = LocalResolver::new(
            [("Greenland".to_string(), "Q223".to_string())]
                .into_iter()
                .collect(),
        );
        let out = disambiguate(&[cand("Greenland", 0.8), cand("Xyzzy", 0.1)], &resolver).unwrap();
        assert_eq!(out[0].entity_id.as_deref(), Some("Q223"));
        assert_eq!(out[1].entity_id, None);
        assert_eq!(out.len(), 2, "unresolved candidates are retained");
    }

    #[test]
    fn sweep_single_relation_tiebreaks_to_smallest() {
        // Candidates a:0.6, b:0.3; gold {a}. Every threshold in (0.3, 0.6]
        // gives F1=1; the tie-break picks the smallest grid point, 0.4.
        let schema = RelationSchema::bundled();
        let entries = vec![(vec![cand("a", 0.6), cand("b", 0.3)], vec!["a".to_string()])];
        let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let mut best_t = grid[0];
        let mut best_f1 = f64::NEG_INFINITY;
        for &t in &grid {
            let f1 = relation_f1_at(&entries, "CountryBordersCountry", &schema, t);
            if f1 > best_f1 {
                best_f1 = f1;
                best_t = t;
            }
        }
        assert_eq!(best_f1, 1.0);
        assert!((best_t - 0.4).abs() < 1e-12);
    }

    #[test]
    fn sweep_empty_gold_prefers_empty_prediction() {
        let schema = RelationSchema::bundled();
        let entries = vec![(vec![cand("a", 0.6), cand("b", 0.3)], vec![])];
        let f1 = relation_f1_at(&entries, "CountryBordersCountry", &schema, 0.9);
        assert_eq!(f1, 1.0, "empty prediction vs empty gold is perfect");
    }

    #[test]
    fn sweep_matches_exhaustive_oracle_on_model() {
        let (model, vocab, templates, schema) = fixture();
        let validation = vec![
            TripleSample {
                subject: "Canada".into(),
                relation: "CountryBordersCountry".into(),
                objects: vec!["Greenland".into()],
            },
            TripleSample {
                subject: "Canada".into(),
                relation: "CountryHasOfficialLanguage".into(),
                objects: vec!["Frenglish".into()],
            },
            TripleSample {
                subject: "Alice Stone".into(),
                relation: "PersonHasNumberOfChildren".into(),
                objects: vec!["3".into()],
            },
        ];
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let opts = InferOptions {
            top_k: 10,
            ..Default::default()
        };
        let got = sweep_thresholds(
            &model, &vocab, &validation, &templates, &schema, &grid, &opts,
        )
        .unwrap();

        // Independent exhaustive oracle over the same candidate cache.
        let cache = build_sweep_cache(&model, &vocab, &validation, &templates, &schema, &opts)
            .unwrap();
        for (relation, entries) in &cache {
            let mut scored: Vec<(f64, f64)> = Vec::new(); // (threshold, f1)
            for &t in &grid {
                let mut f1s = Vec::new();
                for (cands, gold) in entries {
                    let surfaces: Vec<String> = validate_numeric(
                        &cands
                            .iter()
                            .filter(|c| c.score >= t)
                            .cloned()
                            .collect::<Vec<_>>(),
                        relation,
                        &schema,
                    )
                    .into_iter()
                    .map(|c| c.surface)
                    .collect();
                    f1s.push(score_sample(&surfaces, gold).f1);
                }
                scored.push((t, f1s.iter().sum::<f64>() / f1s.len() as f64));
            }
            let best = scored
                .iter()
                .fold((f64::NAN, f64::NEG_INFINITY), |acc, &(t, f1)| {
                    if f1 > acc.1 {
                        (t, f1)
                    } else {
                        acc
                    }
                });
            assert_eq!(
                got.per_relation.get(relation).copied().unwrap(),
                best.0,
                "relation {relation}"
            );
        }
        // Unseen relations fall back to the median of chosen thresholds.
        let mut chosen: Vec<f64> = got.per_relation.values().copied().collect();
        chosen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = chosen[chosen.len() / 2];
        assert_eq!(got.default, median);
        assert_eq!(got.threshold_for("StateBordersState"), got.default);
    }

    #[test]
    fn sweep_rejects_bad_inputs() {
        let (model, vocab, templates, schema) = fixture();
        let opts = InferOptions::default();
        assert!(matches!(
            sweep_thresholds(&model, &vocab, &[], &templates, &schema, &[0.5], &opts).unwrap_err(),
            InferError::EmptyValidation
        ));
        let validation = vec![TripleSample {
            subject: "Canada".into(),
            relation: "CountryBordersCountry".into(),
            objects: vec![],
        }];
        assert!(matches!(
            sweep_thresholds(&model, &vocab, &validation, &templates, &schema, &[], &opts)
                .unwrap_err(),
            InferError::BadGrid
        ));
        assert!(matches!(
            sweep_thresholds(
                &model, &vocab, &validation, &templates, &schema, &[1.5], &opts
            )
            .unwrap_err(),
            InferError::BadGrid
        ));
    }

    #[test]
    fn thresholds_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thresholds.json");
        let t = RelationThresholds {
            per_relation: [("R1".to_string(), 0.25)].into_iter().collect(),
            default: 0.4,
        };
        t.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("__default__"));
        let back = RelationThresholds::load(&path).unwrap();
        assert_eq!(back.threshold_for("R1"), 0.25);
        assert_eq!(back.threshold_for("other"), 0.4);
    }

    #[test]
    fn default_grid_spans_unit_interval() {
        let grid = default_grid();
        assert_eq!(grid.len(), 99);
        assert!((grid[0] - 0.01).abs() < 1e-12);
        assert!((grid[98] - 0.99).abs() < 1e-12);
    }
}
