//! Challenge-style evaluation: per-sample precision/recall/F1 over predicted
//! vs gold object sets, macro-averaged per relation and overall.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, PredictionRow, TripleSample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("duplicate key ({subject:?}, {relation:?}) in {file}")]
    DuplicateKey {
        subject: String,
        relation: String,
        file: String,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Score one sample. Matching is case-sensitive exact equality after
/// trimming. Empty prediction against empty gold is a perfect score; an empty
/// gold set grants full recall.
pub fn score_sample<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> Metrics {
    let pred: BTreeSet<&str> = pred.iter().map(|s| s.as_ref().trim()).collect();
    let gold: BTreeSet<&str> = gold.iter().map(|s| s.as_ref().trim()).collect();
    let hits = pred.intersection(&gold).count() as f64;

    let precision = if pred.is_empty() {
        if gold.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        hits / pred.len() as f64
    };
    let recall = if gold.is_empty() {
        1.0
    } else {
        hits / gold.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        precision,
        recall,
        f1,
        support: 1,
    }
}

fn mean_metrics(samples: &[Metrics]) -> Metrics {
    let n = samples.len().max(1) as f64;
    Metrics {
        precision: samples.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: samples.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: samples.iter().map(|m| m.f1).sum::<f64>() / n,
        support: samples.len(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub per_relation: BTreeMap<String, Metrics>,
    pub overall: Metrics,
    pub warnings: Vec<String>,
}

/// Score a predictions file against a gold file, keyed on
/// (SubjectEntity, Relation). Gold keys missing from the predictions score as
/// empty predictions with a warning; duplicate keys are an error.
pub fn score_run(predictions_path: &Path, gold_path: &Path) -> Result<RunReport, EvalError> {
    let predictions: Vec<PredictionRow> = read_jsonl(predictions_path)?;
    let gold: Vec<TripleSample> = read_jsonl(gold_path)?;

    let mut pred_map: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for p in predictions {
        let key = (p.subject.clone(), p.relation.clone());
        if pred_map.insert(key, p.objects).is_some() {
            return Err(EvalError::DuplicateKey {
                subject: p.subject,
                relation: p.relation,
                file: predictions_path.display().to_string(),
            });
        }
    }
    let mut gold_keys = BTreeSet::new();
    let mut warnings = Vec::new();
    let mut by_relation: BTreeMap<String, Vec<Metrics>> = BTreeMap::new();
    let empty: Vec<String> = Vec::new();
    for g in &gold {
        let key = (g.subject.clone(), g.relation.clone());
        if !gold_keys.insert(key.clone()) {
            return Err(EvalError::DuplicateKey {
                subject: g.subject.clone(),
                relation: g.relation.clone(),
                file: gold_path.display().to_string(),
            });
        }
        let pred = match pred_map.get(&key) {
            Some(p) => p,
            None => {
                warnings.push(format!(
                    "no prediction for ({:?}, {:?}); scored as empty",
                    g.subject, g.relation
                ));
                &empty
            }
        };
        by_relation
            .entry(g.relation.clone())
            .or_default()
            .push(score_sample(pred, &g.objects));
    }

    let per_relation: BTreeMap<String, Metrics> = by_relation
        .iter()
        .map(|(rel, ms)| (rel.clone(), mean_metrics(ms)))
        .collect();
    let relation_means: Vec<Metrics> = per_relation.values().copied().collect();
    let mut overall = mean_metrics(&relation_means);
    overall.support = by_relation.values().map(|v| v.len()).sum();

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(RunReport {
        per_relation,
        overall,
        warnings,
    })
}

impl RunReport {
    /// Aligned plain-text table: one row per relation plus an Average row.
    pub fn to_text(&self) -> String {
        let name_width = self
            .per_relation
            .keys()
            .map(|k| k.len())
            .chain(["Average".len()].into_iter())
            .max()
            .unwrap_or(8)
            .max("Relation".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>9}  {:>9}  {:>9}  {:>7}",
            "Relation", "Precision", "Recall", "F1", "Support"
        );
        for (rel, m) in &self.per_relation {
            let _ = writeln!(
                out,
                "{:<name_width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>7}",
                rel, m.precision, m.recall, m.f1, m.support
            );
        }
        let m = &self.overall;
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>7}",
            "Average", m.precision, m.recall, m.f1, m.support
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("relation,precision,recall,f1,support\n");
        for (rel, m) in &self.per_relation {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                rel, m.precision, m.recall, m.f1, m.support
            );
        }
        let m = &self.overall;
        let _ = writeln!(
            out,
            "Average,{},{},{},{}",
            m.precision, m.recall, m.f1, m.support
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
