//! Token recode: initialize the embedding rows of newly added entity atoms
//! as the L2-normalized mean of their constituent sub-token rows, applied to
//! both the input embedding matrix and the output projection. The output bias
//! of a new atom is the plain mean of its constituents' biases.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{MlmModel, Scalar};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum RecodeError {
    #[error("degenerate recode: mean vector has zero norm")]
    DegenerateRecode,
    #[error("recode input empty")]
    EmptyInput,
    #[error("recode rows have unequal lengths")]
    RaggedRows,
    #[error(
        "plan atom ids must be exactly {expected_start}..{expected_end}, found {found} at entry {index}"
    )]
    NonContiguousPlan {
        expected_start: TokenId,
        expected_end: TokenId,
        found: TokenId,
        index: usize,
    },
    #[error("constituent id {id} not below old vocab size {old_v}")]
    ConstituentOutOfRange { id: TokenId, old_v: usize },
    #[error("plan entry {index} has no constituents")]
    NoConstituents { index: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("plan file {path}, line {line}: {message}")]
    BadPlanFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// One atom to initialize: its new id and the base-token ids it averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecodeEntry {
    pub surface: String,
    pub atom_id: TokenId,
    pub constituents: Vec<TokenId>,
}

#[derive(Debug, Clone, Default)]
pub struct RecodePlan {
    pub entries: Vec<RecodeEntry>,
}

impl RecodePlan {
    /// Plan covering every atom of `vocab` beyond `old_v` ids.
    pub fn for_vocab(vocab: &Vocabulary, old_v: usize) -> Self {
        let entries = vocab
            .atoms()
            .filter(|(id, _)| (*id as usize) >= old_v)
            .map(|(id, e)| RecodeEntry {
                surface: e.surface.clone(),
                atom_id: id,
                constituents: e.constituents.clone(),
            })
            .collect();
        Self { entries }
    }

    pub fn save(&self, path: &Path) -> Result<(), RecodeError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e).map_err(|err| RecodeError::BadPlanFile {
                path: path.display().to_string(),
                line: 0,
                message: err.to_string(),
            })?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RecodeError> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RecodeEntry =
                serde_json::from_str(&line).map_err(|err| RecodeError::BadPlanFile {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: err.to_string(),
                })?;
            entries.push(e);
        }
        Ok(Self { entries })
    }
}

/// Mean of the rows, divided by its L2 norm.
pub fn recode_vector<F: Scalar>(rows: &[ArrayView1<'_, F>]) -> Result<Array1<F>, RecodeError> {
    if rows.is_empty() {
        return Err(RecodeError::EmptyInput);
    }
    let len = rows[0].len();
    if rows.iter().any(|r| r.len() != len) {
        return Err(RecodeError::RaggedRows);
    }
    let mut mean = Array1::<F>::zeros(len);
    for r in rows {
        mean = mean + r;
    }
    let n = F::from(rows.len()).expect("row count fits scalar");
    mean.mapv_inplace(|v| v / n);
    let norm = mean.dot(&mean).sqrt();
    if norm == F::zero() || !norm.is_finite() {
        return Err(RecodeError::DegenerateRecode);
    }
    mean.mapv_inplace(|v| v / norm);
    Ok(mean)
}

/// Outcome of expanding a model with a recode plan.
#[derive(Debug, Clone, Default)]
pub struct ExpandReport {
    pub recoded: usize,
    /// Surfaces that fell back to random unit init because their mean was
    /// degenerate.
    pub fallback_random: Vec<String>,
}

/// How the new rows are filled when a model grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpandInit {
    /// Mean-then-normalize over constituent rows.
    Recode,
    /// Seeded random unit vectors (the ablation baseline).
    RandomUnit { seed: u64 },
}

/// Resize the model to cover the plan's atoms and install their initial
/// input/output embedding rows.
pub fn expand_model<F: Scalar>(
    model: &MlmModel<F>,
    plan: &RecodePlan,
    init: ExpandInit,
) -> Result<(MlmModel<F>, ExpandReport), RecodeError> {
    let old_v = model.config.vocab_size;
    let new_v = old_v + plan.entries.len();
    for (i, e) in plan.entries.iter().enumerate() {
        let expected = (old_v + i) as TokenId;
        if e.atom_id != expected {
            return Err(RecodeError::NonContiguousPlan {
                expected_start: old_v as TokenId,
                expected_end: new_v as TokenId,
                found: e.atom_id,
                index: i,
            });
        }
        if e.constituents.is_empty() {
            return Err(RecodeError::NoConstituents { index: i });
        }
        for &c in &e.constituents {
            if c as usize >= old_v {
                return Err(RecodeError::ConstituentOutOfRange { id: c, old_v });
            }
        }
    }

    let mut expanded = model.resize_vocab(new_v)?;
    let mut report = ExpandReport::default();
    let mut rng = match init {
        ExpandInit::RandomUnit { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        ExpandInit::Recode => None,
    };

    for e in &plan.entries {
        let atom = e.atom_id as usize;
        match init {
            ExpandInit::Recode => {
                let in_rows: Vec<ArrayView1<F>> = e
                    .constituents
                    .iter()
                    .map(|&c| model.params.tok_emb.row(c as usize))
                    .collect();
                let out_rows: Vec<ArrayView1<F>> = e
                    .constituents
                    .iter()
                    .map(|&c| model.params.out_proj.row(c as usize))
                    .collect();
                let tok_row = match recode_vector(&in_rows) {
                    Ok(v) => v,
                    Err(RecodeError::DegenerateRecode) => {
                        log::warn!("degenerate recode for {:?}: random unit fallback", e.surface);
                        report.fallback_random.push(e.surface.clone());
                        random_unit_row(model.config.hidden, model.config.seed ^ e.atom_id as u64)
                    }
                    Err(err) => return Err(err),
                };
                let out_row = match recode_vector(&out_rows) {
                    Ok(v) => v,
                    Err(RecodeError::DegenerateRecode) => {
                        if !report.fallback_random.contains(&e.surface) {
                            report.fallback_random.push(e.surface.clone());
                        }
                        random_unit_row(
                            model.config.hidden,
                            (model.config.seed ^ e.atom_id as u64).wrapping_add(1),
                        )
                    }
                    Err(err) => return Err(err),
                };
                expanded.params.tok_emb.row_mut(atom).assign(&tok_row);
                expanded.params.out_proj.row_mut(atom).assign(&out_row);
            }
            ExpandInit::RandomUnit { .. } => {
                let rng = rng.as_mut().expect("random init rng");
                let tok_row = sample_unit_row(model.config.hidden, rng);
                let out_row = sample_unit_row(model.config.hidden, rng);
                expanded.params.tok_emb.row_mut(atom).assign(&tok_row);
                expanded.params.out_proj.row_mut(atom).assign(&out_row);
            }
        }
        // Bias: mean of constituent biases under either init.
        let bias_sum = e
            .constituents
            .iter()
            .fold(F::zero(), |acc, &c| acc + model.params.out_bias[c as usize]);
        expanded.params.out_bias[atom] =
            bias_sum / F::from(e.constituents.len()).expect("count fits scalar");
        report.recoded += 1;
    }
    Ok((expanded, report))
}

fn random_unit_row<F: Scalar>(len: usize, seed: u64) -> Array1<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_unit_row(len, &mut rng)
}

fn sample_unit_row<F: Scalar>(len: usize, rng: &mut ChaCha8Rng) -> Array1<F> {
    let normal = StandardNormal;
    loop {
        let mut row = Array1::<F>::zeros(len);
        for v in row.iter_mut() {
            let x: f64 = normal.sample(rng);
            *v = F::from(x).expect("f64 fits scalar");
        }
        let norm = row.dot(&row).sqrt();
        if norm > F::from(1e-12).unwrap() {
            row.mapv_inplace(|v| v / norm);
            return row;
        }
    }
}
