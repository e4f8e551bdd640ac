//! Corpus selection and masked-instance generation for pretraining and
//! triple fine-tuning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TripleSample;
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary, MASK_ID, NUM_SPECIALS};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("mask_rate {0} must be in (0, 1)")]
    BadMaskRate(f64),
    #[error("no prompt template for relation {0:?}")]
    MissingTemplate(String),
    #[error("template for {relation:?} must contain exactly one {placeholder}")]
    BadTemplate {
        relation: String,
        placeholder: String,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("templates file {path}: {message}")]
    BadTemplatesFile { path: String, message: String },
}

/// Where a masked instance came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstanceOrigin {
    Pretrain,
    FineTune(String),
}

/// A training example: token ids with some positions hidden, plus the
/// original ids to recover at those positions.
#[derive(Debug, Clone)]
pub struct MaskedInstance {
    pub input: TokenSequence,
    /// (position, original token id), ascending by position. Includes the
    /// random-replacement and keep-as-is positions of the 80/10/10 scheme.
    pub targets: Vec<(usize, TokenId)>,
    pub origin: InstanceOrigin,
}

/// Per-relation sentence pattern with `{subject}` and `{mask}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub relation: String,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for placeholder in ["{subject}", "{mask}"] {
            if self.pattern.matches(placeholder).count() != 1 {
                return Err(CorpusError::BadTemplate {
                    relation: self.relation.clone(),
                    placeholder: placeholder.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Replace `{subject}`, leaving `{mask}` split out as (prefix, suffix).
    fn instantiate(&self, subject: &str) -> (String, String) {
        let with_subject = self.pattern.replace("{subject}", subject);
        let idx = with_subject.find("{mask}").expect("validated template");
        let prefix = with_subject[..idx].to_string();
        let suffix = with_subject[idx + "{mask}".len()..].to_string();
        (prefix, suffix)
    }

    /// The full sentence with both slots filled.
    pub fn sentence(&self, subject: &str, object: &str) -> String {
        self.pattern
            .replace("{subject}", subject)
            .replace("{mask}", object)
    }

    /// The query sentence with a literal `[MASK]` in the object slot.
    pub fn query(&self, subject: &str) -> String {
        self.sentence(subject, "[MASK]")
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    by_relation: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|message| CorpusError::BadTemplatesFile {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn bundled() -> Self {
        Self::from_json(include_str!("../assets/challenge_templates.json"))
            .expect("bundled templates parse")
    }

    fn from_json(text: &str) -> Result<Self, String> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut by_relation = BTreeMap::new();
        for (relation, pattern) in map {
            let t = PromptTemplate {
                relation: relation.clone(),
                pattern,
            };
            t.validate().map_err(|e| e.to_string())?;
            by_relation.insert(relation, t);
        }
        Ok(Self { by_relation })
    }

    pub fn get(&self, relation: &str) -> Result<&PromptTemplate, CorpusError> {
        self.by_relation
            .get(relation)
            .ok_or_else(|| CorpusError::MissingTemplate(relation.to_string()))
    }

    pub fn len(&self) -> usize {
        self.by_relation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_relation.is_empty()
    }
}

/// A kept sentence together with the entity atoms found in it.
#[derive(Debug, Clone)]
pub struct FilteredSentence {
    pub text: String,
    /// (surface, entity type) of each distinct matched atom.
    pub matches: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
    /// Sentences counted once per entity type present; the column sums may
    /// exceed `kept` because one sentence can hold several types.
    pub per_type_sentences: BTreeMap<String, usize>,
}

/// Keep sentences containing at least `min_entity_count` whole-word entity
/// matches from the vocabulary.
pub fn filter_sentences(
    corpus: impl IntoIterator<Item = impl AsRef<str>>,
    vocab: &Vocabulary,
    min_entity_count: usize,
) -> (Vec<FilteredSentence>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for line in corpus {
        let text = line.as_ref().trim();
        if text.is_empty() {
            continue;
        }
        let seq = vocab.tokenize(text, true);
        let mut matches: Vec<(String, String)> = Vec::new();
        for &id in &seq.ids {
            if let Some(e) = vocab.entry(id) {
                if e.kind == crate::tokenizer::TokenKind::EntityAtom {
                    let pair = (
                        e.surface.clone(),
                        e.entity_type.clone().unwrap_or_default(),
                    );
                    if !matches.contains(&pair) {
                        matches.push(pair);
                    }
                }
            }
        }
        if matches.len() >= min_entity_count.max(1) {
            let mut types: Vec<&String> = matches.iter().map(|(_, t)| t).collect();
            types.sort();
            types.dedup();
            for t in types {
                *report.per_type_sentences.entry(t.clone()).or_insert(0) += 1;
            }
            report.kept += 1;
            kept.push(FilteredSentence {
                text: text.to_string(),
                matches,
            });
        } else {
            report.dropped += 1;
        }
    }
    if kept.is_empty() {
        log::warn!("sentence filter kept nothing");
    }
    (kept, report)
}

/// BERT-style masking: select ceil(mask_rate * n) non-special positions, then
/// 80% become MASK, 10% a random token, 10% stay unchanged; all three are
/// recorded as targets. Deterministic per (seed, sentence index).
pub fn make_pretrain_instances(
    sentences: &[String],
    vocab: &Vocabulary,
    mask_rate: f64,
    seed: u64,
    max_len: usize,
) -> Result<Vec<MaskedInstance>, CorpusError> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(CorpusError::BadMaskRate(mask_rate));
    }
    let mut out = Vec::new();
    for (idx, sentence) in sentences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let seq = vocab.tokenize(sentence, true).truncated(max_len);
        let n = seq.len();
        let maskable: Vec<usize> = (0..n)
            .filter(|&i| !Vocabulary::is_special(seq.ids[i]))
            .collect();
        if maskable.is_empty() {
            continue;
        }
        let want = ((mask_rate * n as f64).ceil() as usize).clamp(1, maskable.len());
        let mut positions = maskable;
        positions.shuffle(&mut rng);
        let mut chosen: Vec<usize> = positions.into_iter().take(want).collect();
        chosen.sort_unstable();

        let mut ids = seq.ids.clone();
        let mut targets = Vec::with_capacity(chosen.len());
        for &pos in &chosen {
            let original = ids[pos];
            targets.push((pos, original));
            let roll: f64 = rng.random();
            if roll < 0.8 {
                ids[pos] = MASK_ID;
            } else if roll < 0.9 {
                // Random non-special replacement.
                let id = rng.random_range(NUM_SPECIALS..vocab.size()) as TokenId;
                ids[pos] = id;
            } // else: keep as is
        }
        let input = TokenSequence::new(ids, seq.word_starts().to_vec());
        out.push(MaskedInstance {
            input,
            targets,
            origin: InstanceOrigin::Pretrain,
        });
    }
    Ok(out)
}

/// One fine-tune instance per (subject, relation, gold object): the template
/// sentence is built with the object in place, then the object's token span
/// is hidden behind MASK ids. Atoms hide as one MASK; other objects hide as
/// one MASK per base token.
pub fn make_finetune_instances(
    samples: &[TripleSample],
    templates: &TemplateSet,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<MaskedInstance>, CorpusError> {
    let mut out = Vec::new();
    for sample in samples {
        if sample.objects.is_empty() {
            continue;
        }
        let template = templates.get(&sample.relation)?;
        for object in &sample.objects {
            let (prefix, suffix) = template.instantiate(&sample.subject);
            let pre_seq = vocab.tokenize(&prefix, true);
            let obj_seq = vocab.tokenize(object, true);
            let post_seq = vocab.tokenize(&suffix, true);

            let mut ids = Vec::new();
            let mut starts = Vec::new();
            ids.extend_from_slice(&pre_seq.ids);
            starts.extend_from_slice(pre_seq.word_starts());

            let obj_from = ids.len();
            let obj_attached = !prefix.is_empty() && !prefix.ends_with(char::is_whitespace);
            for (k, &id) in obj_seq.ids.iter().enumerate() {
                ids.push(id);
                let ws = if k == 0 {
                    !obj_attached
                } else {
                    obj_seq.word_starts()[k]
                };
                starts.push(ws);
            }
            let obj_to = ids.len();

            let post_attached = !suffix.is_empty() && !suffix.starts_with(char::is_whitespace);
            for (k, &id) in post_seq.ids.iter().enumerate() {
                ids.push(id);
                let ws = if k == 0 {
                    !post_attached
                } else {
                    post_seq.word_starts()[k]
                };
                starts.push(ws);
            }

            if obj_to > max_len || ids.len() > max_len {
                log::warn!(
                    "skipping over-length instance for {:?}/{:?}",
                    sample.subject,
                    sample.relation
                );
                continue;
            }

            let mut targets = Vec::with_capacity(obj_to - obj_from);
            for pos in obj_from..obj_to {
                targets.push((pos, ids[pos]));
                ids[pos] = MASK_ID;
            }
            if targets.is_empty() {
                continue;
            }
            out.push(MaskedInstance {
                input: TokenSequence::new(ids, starts),
                targets,
                origin: InstanceOrigin::FineTune(sample.relation.clone()),
            });
        }
    }
    Ok(out)
}
