//! Dataset records and JSONL file formats shared across the pipeline.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    BadLine {
        path: String,
        line: usize,
        message: String,
    },
}

/// One subject-relation query with its (possibly empty) gold object set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleSample {
    #[serde(rename = "SubjectEntity")]
    pub subject: String,
    #[serde(rename = "Relation")]
    pub relation: String,
    #[serde(rename = "ObjectEntities", default)]
    pub objects: Vec<String>,
}

/// One prediction row: object surfaces with ids and scores, aligned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    #[serde(rename = "SubjectEntity")]
    pub subject: String,
    #[serde(rename = "Relation")]
    pub relation: String,
    #[serde(rename = "ObjectEntities")]
    pub objects: Vec<String>,
    #[serde(rename = "ObjectEntitiesID")]
    pub object_ids: Vec<Option<String>>,
    #[serde(rename = "Scores")]
    pub scores: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| DataError::BadLine {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| DataError::BadLine {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<TripleSample>, DataError> {
    read_jsonl(path)
}
