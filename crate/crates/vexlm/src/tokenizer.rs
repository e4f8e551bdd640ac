//! Expandable subword tokenizer.
//!
//! The vocabulary is laid out as `[specials][base tokens][entity atoms]`.
//! Base tokens come from a frequency-merge (BPE-style) pass over a corpus;
//! entity atoms are whole surface strings ("United States of America") that
//! encode and decode as a single id. Ids are dense and stable: expanding the
//! vocabulary never renumbers existing entries.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const MASK_ID: TokenId = 2;
pub const CLS_ID: TokenId = 3;
pub const SEP_ID: TokenId = 4;

pub const SPECIAL_SURFACES: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];
pub const NUM_SPECIALS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target_size {target} too small: need at least {min} (specials + distinct characters)")]
    TargetSizeTooSmall { target: usize, min: usize },
    #[error("id out of range: {id} >= vocabulary size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("vocabulary file {path}, line {line}: {message}")]
    BadVocabFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    BaseToken,
    EntityAtom,
}

#[derive(Debug, Clone)]
pub struct VocabEntry {
    pub surface: String,
    pub kind: TokenKind,
    pub entity_type: Option<String>,
    pub entity_id: Option<String>,
    /// Base-token ids obtained by sub-tokenizing the surface. Empty for base tokens.
    pub constituents: Vec<TokenId>,
}

/// Immutable token vocabulary. Expansion returns a new value; existing ids
/// keep their meaning.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, TokenId>,
    base_len: usize,
}

/// Result of an [`Vocabulary::add_entity_atoms`] call.
#[derive(Debug, Clone, Default)]
pub struct AddAtomsOutcome {
    pub added: usize,
    pub skipped_duplicates: usize,
    /// (surface, reason) pairs for entries that could not become atoms.
    pub rejected: Vec<(String, String)>,
}

/// Token ids plus the bookkeeping needed to reverse tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
    /// True where the token begins a new whitespace-separated word.
    word_start: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, word_start: Vec<bool>) -> Self {
        assert_eq!(ids.len(), word_start.len());
        let mask_positions = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == MASK_ID)
            .map(|(i, _)| i)
            .collect();
        Self {
            ids,
            mask_positions,
            word_start,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn word_starts(&self) -> &[bool] {
        &self.word_start
    }

    /// Copy with the token at `pos` replaced; mask positions are recomputed.
    pub fn with_id_at(&self, pos: usize, id: TokenId) -> Self {
        let mut ids = self.ids.clone();
        ids[pos] = id;
        Self::new(ids, self.word_start.clone())
    }

    pub fn truncated(&self, max_len: usize) -> Self {
        if self.ids.len() <= max_len {
            return self.clone();
        }
        Self::new(
            self.ids[..max_len].to_vec(),
            self.word_start[..max_len].to_vec(),
        )
    }
}

/// One word of scanned text: punctuation splits off as its own word, and
/// `attached` records whether the piece followed the previous one with no
/// whitespace in between (needed to reconstruct "Greenland." from two tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
struct ScannedWord {
    text: String,
    attached: bool,
}

fn is_word_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Split text into words: whitespace separates, ASCII punctuation becomes its
/// own word, and special-token literals like `[MASK]` survive intact.
fn scan_words(text: &str) -> Vec<ScannedWord> {
    let mut words = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let mut after_gap = true; // start of string behaves like whitespace
    while i < chars.len() {
        if chars[i].is_whitespace() {
            after_gap = true;
            i += 1;
            continue;
        }
        // Special-token literal?
        let rest: String = chars[i..].iter().collect();
        if let Some(sp) = SPECIAL_SURFACES.iter().find(|s| rest.starts_with(*s)) {
            words.push(ScannedWord {
                text: (*sp).to_string(),
                attached: !after_gap,
            });
            i += sp.chars().count();
            after_gap = false;
            continue;
        }
        if is_word_punct(chars[i]) {
            words.push(ScannedWord {
                text: chars[i].to_string(),
                attached: !after_gap,
            });
            i += 1;
            after_gap = false;
            continue;
        }
        // Plain run up to whitespace, punctuation, or a special literal.
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() && !is_word_punct(chars[i]) {
            let rest: String = chars[i..].iter().collect();
            if SPECIAL_SURFACES.iter().any(|s| rest.starts_with(*s)) {
                break;
            }
            i += 1;
        }
        words.push(ScannedWord {
            text: chars[start..i].iter().collect(),
            attached: !after_gap,
        });
        after_gap = false;
    }
    words
}

impl Vocabulary {
    fn empty() -> Self {
        Self {
            entries: Vec::new(),
            index: SPECIAL_SURFACES
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as TokenId))
                .collect(),
            base_len: 0,
        }
    }

    /// Total vocabulary size including the five specials.
    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.entries.len()
    }

    /// Number of ids in the `[specials][base]` prefix.
    pub fn base_size(&self) -> usize {
        NUM_SPECIALS + self.base_len
    }

    pub fn num_atoms(&self) -> usize {
        self.entries.len() - self.base_len
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface_of(&self, id: TokenId) -> Result<&str, TokenizerError> {
        let idx = id as usize;
        if idx < NUM_SPECIALS {
            return Ok(SPECIAL_SURFACES[idx]);
        }
        self.entries
            .get(idx - NUM_SPECIALS)
            .map(|e| e.surface.as_str())
            .ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.size(),
            })
    }

    pub fn entry(&self, id: TokenId) -> Option<&VocabEntry> {
        (id as usize)
            .checked_sub(NUM_SPECIALS)
            .and_then(|i| self.entries.get(i))
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn is_atom(&self, id: TokenId) -> bool {
        self.entry(id)
            .map(|e| e.kind == TokenKind::EntityAtom)
            .unwrap_or(false)
    }

    /// Iterate over (id, entry) pairs for entity atoms only.
    pub fn atoms(&self) -> impl Iterator<Item = (TokenId, &VocabEntry)> {
        self.entries
            .iter()
            .enumerate()
            .skip(self.base_len)
            .map(|(i, e)| ((NUM_SPECIALS + i) as TokenId, e))
    }

    /// The `[specials][base]` prefix as a standalone vocabulary.
    pub fn base_view(&self) -> Vocabulary {
        let entries: Vec<VocabEntry> = self.entries[..self.base_len].to_vec();
        let mut index: HashMap<String, TokenId> = SPECIAL_SURFACES
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i as TokenId))
            .collect();
        for (i, e) in entries.iter().enumerate() {
            index.insert(e.surface.clone(), (NUM_SPECIALS + i) as TokenId);
        }
        Vocabulary {
            entries,
            index,
            base_len: self.base_len,
        }
    }

    fn push_base(&mut self, surface: String) {
        debug_assert_eq!(self.base_len, self.entries.len());
        let id = (NUM_SPECIALS + self.entries.len()) as TokenId;
        self.index.insert(surface.clone(), id);
        self.entries.push(VocabEntry {
            surface,
            kind: TokenKind::BaseToken,
            entity_type: None,
            entity_id: None,
            constituents: Vec::new(),
        });
        self.base_len = self.entries.len();
    }

    /// Learn a base vocabulary from corpus lines by greedy frequency merges:
    /// every distinct character becomes a token, then the most frequent
    /// adjacent symbol pair is merged repeatedly until `target_size` entries
    /// exist (ties broken by the lexicographically smallest merged string).
    pub fn build_base_vocab(
        corpus: impl IntoIterator<Item = impl AsRef<str>>,
        target_size: usize,
    ) -> Result<Vocabulary, TokenizerError> {
        // Word frequencies; special literals are not corpus words.
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in scan_words(line.as_ref()) {
                if SPECIAL_SURFACES.contains(&w.text.as_str()) {
                    continue;
                }
                *word_freq.entry(w.text).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut chars: Vec<String> = word_freq
            .keys()
            .flat_map(|w| w.chars())
            .map(|c| c.to_string())
            .collect();
        chars.sort();
        chars.dedup();

        let min = NUM_SPECIALS + chars.len();
        if target_size < min {
            return Err(TokenizerError::TargetSizeTooSmall {
                target: target_size,
                min,
            });
        }

        let mut vocab = Vocabulary::empty();
        for c in &chars {
            vocab.push_base(c.clone());
        }

        // Each distinct word as a symbol sequence, weighted by frequency.
        let mut words: Vec<(Vec<String>, u64)> = word_freq
            .into_iter()
            .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), f))
            .collect();

        while vocab.size() < target_size {
            let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (symbols, freq) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += freq;
                }
            }
            // Highest count wins; ties go to the lexicographically smallest
            // merged string (BTreeMap iteration makes this deterministic).
            let best = pair_counts
                .iter()
                .map(|((a, b), &count)| (count, format!("{a}{b}"), a.clone(), b.clone()))
                .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(&x.1)));
            let Some((_, merged, a, b)) = best else {
                break; // nothing left to merge
            };
            for (symbols, _) in words.iter_mut() {
                let mut out = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(symbols[i].clone());
                        i += 1;
                    }
                }
                *symbols = out;
            }
            vocab.push_base(merged);
        }
        Ok(vocab)
    }

    /// Greedy longest-prefix sub-tokenization of a single word into base-token
    /// ids. Characters with no match become UNK.
    fn sub_tokenize_word(&self, word: &str) -> Vec<TokenId> {
        if let Some(idx) = SPECIAL_SURFACES.iter().position(|s| *s == word) {
            return vec![idx as TokenId];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut ids = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut matched = None;
            while end > start {
                let cand: String = chars[start..end].iter().collect();
                match self.index.get(&cand) {
                    // Only base tokens participate; atoms match at word level.
                    Some(&id)
                        if !Vocabulary::is_special(id)
                            && (id as usize) < NUM_SPECIALS + self.base_len =>
                    {
                        matched = Some((id, end));
                        break;
                    }
                    _ => end -= 1,
                }
            }
            match matched {
                Some((id, end)) => {
                    ids.push(id);
                    start = end;
                }
                None => {
                    ids.push(UNK_ID);
                    start += 1;
                }
            }
        }
        ids
    }

    /// Append entity atoms. Existing ids are untouched; duplicates are
    /// skipped; surfaces that sub-tokenize to nothing but UNK are rejected.
    pub fn add_entity_atoms(
        &self,
        entities: &[(String, String, Option<String>)],
    ) -> (Vocabulary, AddAtomsOutcome) {
        let mut vocab = self.clone();
        let mut outcome = AddAtomsOutcome::default();
        for (surface, entity_type, entity_id) in entities {
            if surface.trim().is_empty() {
                outcome
                    .rejected
                    .push((surface.clone(), "empty surface".to_string()));
                continue;
            }
            if vocab.index.contains_key(surface) {
                outcome.skipped_duplicates += 1;
                continue;
            }
            let words = scan_words(surface);
            let mut constituents = Vec::new();
            for w in &words {
                constituents.extend(vocab.sub_tokenize_word(&w.text));
            }
            if constituents.iter().all(|&id| id == UNK_ID) {
                outcome.rejected.push((
                    surface.clone(),
                    "sub-tokenizes to only UNK".to_string(),
                ));
                continue;
            }
            let id = (NUM_SPECIALS + vocab.entries.len()) as TokenId;
            vocab.index.insert(surface.clone(), id);
            vocab.entries.push(VocabEntry {
                surface: surface.clone(),
                kind: TokenKind::EntityAtom,
                entity_type: Some(entity_type.clone()),
                entity_id: entity_id.clone(),
                constituents,
            });
            outcome.added += 1;
        }
        (vocab, outcome)
    }

    /// Tokenize text. With `entity_matching`, leftmost-longest whole-word
    /// matches against entity-atom surfaces become single atom ids; everything
    /// else is greedy sub-tokenized.
    pub fn tokenize(&self, text: &str, entity_matching: bool) -> TokenSequence {
        let words = scan_words(text);
        // Atom surfaces as word sequences, grouped by first word, longest first.
        let mut atom_index: HashMap<String, Vec<(TokenId, Vec<String>)>> = HashMap::new();
        if entity_matching {
            let mut atoms: Vec<(TokenId, Vec<String>)> = self
                .atoms()
                .map(|(id, e)| {
                    (
                        id,
                        scan_words(&e.surface).into_iter().map(|w| w.text).collect(),
                    )
                })
                .collect();
            // Longer sequences first so the greedy pass prefers them.
            atoms.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
            for (id, seq) in atoms {
                if let Some(first) = seq.first() {
                    atom_index
                        .entry(first.clone())
                        .or_default()
                        .push((id, seq));
                }
            }
        }

        let mut ids = Vec::new();
        let mut word_start = Vec::new();
        let mut wi = 0;
        while wi < words.len() {
            let w = &words[wi];
            if entity_matching {
                if let Some(cands) = atom_index.get(w.text.as_str()) {
                    let matched = cands.iter().find(|(_, seq)| {
                        wi + seq.len() <= words.len()
                            && seq
                                .iter()
                                .zip(&words[wi..wi + seq.len()])
                                .all(|(a, b)| *a == b.text)
                    });
                    if let Some((id, seq)) = matched {
                        ids.push(*id);
                        word_start.push(!w.attached);
                        wi += seq.len();
                        continue;
                    }
                }
            }
            let sub = self.sub_tokenize_word(&w.text);
            for (k, id) in sub.iter().enumerate() {
                ids.push(*id);
                word_start.push(if k == 0 { !w.attached } else { false });
            }
            wi += 1;
        }
        TokenSequence::new(ids, word_start)
    }

    /// Reverse tokenization: word-start tokens are space-separated, everything
    /// else joins the previous token directly.
    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (i, &id) in seq.ids.iter().enumerate() {
            let surface = self.surface_of(id)?;
            if i > 0 && seq.word_start[i] {
                out.push(' ');
            }
            out.push_str(surface);
        }
        Ok(out)
    }

    /// Write one JSON line per non-special entry, in id order.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            let line = VocabFileLine {
                surface: e.surface.clone(),
                kind: match e.kind {
                    TokenKind::BaseToken => "base".to_string(),
                    TokenKind::EntityAtom => "entity".to_string(),
                },
                entity_type: e.entity_type.clone(),
                entity_id: e.entity_id.clone(),
            };
            serde_json::to_writer(&mut f, &line).map_err(|err| TokenizerError::BadVocabFile {
                path: path.display().to_string(),
                line: 0,
                message: err.to_string(),
            })?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary, TokenizerError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut vocab = Vocabulary::empty();
        let mut atoms: Vec<(usize, VocabFileLine)> = Vec::new();
        let display = path.display().to_string();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: VocabFileLine =
                serde_json::from_str(&line).map_err(|err| TokenizerError::BadVocabFile {
                    path: display.clone(),
                    line: lineno + 1,
                    message: err.to_string(),
                })?;
            match parsed.kind.as_str() {
                "base" => {
                    if !atoms.is_empty() {
                        return Err(TokenizerError::BadVocabFile {
                            path: display,
                            line: lineno + 1,
                            message: "base token after entity atoms".to_string(),
                        });
                    }
                    if vocab.index.contains_key(&parsed.surface) {
                        return Err(TokenizerError::BadVocabFile {
                            path: display,
                            line: lineno + 1,
                            message: format!("duplicate surface {:?}", parsed.surface),
                        });
                    }
                    vocab.push_base(parsed.surface);
                }
                "entity" => atoms.push((lineno + 1, parsed)),
                other => {
                    return Err(TokenizerError::BadVocabFile {
                        path: display,
                        line: lineno + 1,
                        message: format!("unknown kind {other:?}"),
                    });
                }
            }
        }
        for (lineno, a) in atoms {
            let (next, outcome) = vocab.add_entity_atoms(&[(
                a.surface.clone(),
                a.entity_type.clone().unwrap_or_default(),
                a.entity_id.clone(),
            )]);
            if outcome.added != 1 {
                let reason = outcome
                    .rejected
                    .first()
                    .map(|(_, r)| r.clone())
                    .unwrap_or_else(|| "duplicate surface".to_string());
                return Err(TokenizerError::BadVocabFile {
                    path: display,
                    line: lineno,
                    message: format!("atom {:?} rejected: {reason}", a.surface),
                });
            }
            vocab = next;
        }
        Ok(vocab)
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Vocabulary({} ids: {} specials, {} base, {} atoms)",
            self.size(),
            NUM_SPECIALS,
            self.base_len,
            self.num_atoms()
        )
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFileLine {
    surface: String,
    kind: String,
    #[serde(rename = "type")]
    entity_type: Option<String>,
    entity_id: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_vocab() -> Vocabulary {
        let corpus = [
            "Canada borders Greenland .",
            "Canada borders the United States of America .",
            "the United States of America borders Canada .",
            "Greenland is cold .",
        ];
        // 21 distinct characters + 5 specials = 26; target 30 leaves room for
        // 4 merges, too few for any whole entity word to become a base token.
        Vocabulary::build_base_vocab(corpus, 30).unwrap()
    }

    fn fixture_with_atoms() -> Vocabulary {
        let base = fixture_vocab();
        let (vocab, out) = base.add_entity_atoms(&[
            (
                "United States of America".to_string(),
                "Country".to_string(),
                Some("Q30".to_string()),
            ),
            ("Greenland".to_string(), "Country".to_string(), None),
            ("Canada".to_string(), "Country".to_string(), None),
        ]);
        assert_eq!(out.added, 3);
        vocab
    }

    #[test]
    fn build_base_vocab_merges_by_frequency() {
        // Hand-run: words {"ab": 2, "b": 1}; chars {a, b}; the only pair is
        // (a, b) with count 2, merged into "ab". 5 specials + 2 chars + 1
        // merge = 8 entries.
        let vocab = Vocabulary::build_base_vocab(["ab ab b"], 8).unwrap();
        assert_eq!(vocab.size(), 8);
        assert_eq!(vocab.surface_of(5).unwrap(), "a");
        assert_eq!(vocab.surface_of(6).unwrap(), "b");
        assert_eq!(vocab.surface_of(7).unwrap(), "ab");
    }

    #[test]
    fn build_base_vocab_single_char_corpus() {
        let vocab = Vocabulary::build_base_vocab(["x"], 6).unwrap();
        assert_eq!(vocab.size(), 6);
        assert_eq!(vocab.surface_of(5).unwrap(), "x");
    }

    #[test]
    fn build_base_vocab_empty_corpus_errors() {
        let err = Vocabulary::build_base_vocab(Vec::<String>::new(), 10).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
        let err = Vocabulary::build_base_vocab([""], 10).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
    }

    #[test]
    fn build_base_vocab_target_too_small_errors() {
        let err = Vocabulary::build_base_vocab(["abc"], 6).unwrap_err();
        assert!(matches!(
            err,
            TokenizerError::TargetSizeTooSmall { target: 6, min: 8 }
        ));
    }

    #[test]
    fn build_base_vocab_is_deterministic() {
        let a = Vocabulary::build_base_vocab(["the cat sat on the mat", "a cat ran"], 40).unwrap();
        let b = Vocabulary::build_base_vocab(["the cat sat on the mat", "a cat ran"], 40).unwrap();
        let surfaces_a: Vec<_> = (0..a.size() as TokenId)
            .map(|i| a.surface_of(i).unwrap().to_string())
            .collect();
        let surfaces_b: Vec<_> = (0..b.size() as TokenId)
            .map(|i| b.surface_of(i).unwrap().to_string())
            .collect();
        assert_eq!(surfaces_a, surfaces_b);
    }

    #[test]
    fn atom_is_single_id() {
        let vocab = fixture_with_atoms();
        let seq = vocab.tokenize("United States of America", true);
        assert_eq!(seq.ids.len(), 1);
        assert_eq!(
            vocab.surface_of(seq.ids[0]).unwrap(),
            "United States of America"
        );
    }

    #[test]
    fn partial_surface_does_not_match_atom() {
        let vocab = fixture_with_atoms();
        let seq = vocab.tokenize("United States", true);
        // No "United States" atom: falls back to base sub-tokens.
        assert!(seq.ids.len() > 1);
        assert!(!seq.ids.iter().any(|&id| vocab.is_atom(id)));
    }

    #[test]
    fn longest_atom_wins_on_shared_prefix() {
        let base = fixture_vocab();
        let (vocab, _) = base.add_entity_atoms(&[
            ("United States".to_string(), "Country".to_string(), None),
            (
                "United States of America".to_string(),
                "Country".to_string(),
                None,
            ),
        ]);
        let seq = vocab.tokenize("United States of America", true);
        assert_eq!(seq.ids.len(), 1);
        assert_eq!(
            vocab.surface_of(seq.ids[0]).unwrap(),
            "United States of America"
        );
        let seq2 = vocab.tokenize("United States", true);
        assert_eq!(seq2.ids.len(), 1);
        assert_eq!(vocab.surface_of(seq2.ids[0]).unwrap(), "United States");
    }

    #[test]
    fn mask_literal_becomes_mask_id() {
        let vocab = fixture_with_atoms();
        let seq = vocab.tokenize("Canada borders [MASK]", false);
        assert_eq!(seq.ids.last().copied(), Some(MASK_ID));
        assert_eq!(seq.mask_positions, vec![seq.ids.len() - 1]);
        // Sub-tokens of "Canada" and "borders" precede the mask.
        let prefix = vocab.tokenize("Canada borders", false);
        assert_eq!(&seq.ids[..seq.ids.len() - 1], &prefix.ids[..]);
    }

    #[test]
    fn entity_matching_is_case_sensitive() {
        let vocab = fixture_with_atoms();
        let seq = vocab.tokenize("canada borders Greenland", true);
        assert!(!vocab.is_atom(seq.ids[0]));
        let greenland = vocab.id_of("Greenland").unwrap();
        assert!(seq.ids.contains(&greenland));
    }

    #[test]
    fn detokenize_round_trips_fixture_sentences() {
        let vocab = fixture_with_atoms();
        for text in [
            "Canada borders Greenland",
            "Canada borders Greenland .",
            "the United States of America borders Canada .",
            "Greenland is cold .",
            "Canada borders [MASK]",
        ] {
            let seq = vocab.tokenize(text, true);
            assert_eq!(vocab.detokenize(&seq).unwrap(), text, "round trip {text:?}");
        }
    }

    #[test]
    fn detokenize_collapses_repeated_whitespace() {
        let vocab = fixture_with_atoms();
        let seq = vocab.tokenize("Canada   borders\tGreenland", true);
        assert_eq!(vocab.detokenize(&seq).unwrap(), "Canada borders Greenland");
    }

    #[test]
    fn detokenize_single_atom() {
        let vocab = fixture_with_atoms();
        let id = vocab.id_of("Greenland").unwrap();
        let seq = TokenSequence::new(vec![id], vec![true]);
        assert_eq!(vocab.detokenize(&seq).unwrap(), "Greenland");
    }

    #[test]
    fn detokenize_out_of_range_errors() {
        let vocab = fixture_with_atoms();
        let v = vocab.size() as TokenId;
        let seq = TokenSequence::new(vec![v], vec![true]);
        assert!(matches!(
            vocab.detokenize(&seq).unwrap_err(),
            TokenizerError::IdOutOfRange { .. }
        ));
    }

    #[test]
    fn add_atoms_keeps_prefix_and_dedups() {
        let base = fixture_vocab();
        let before: Vec<String> = (0..base.size() as TokenId)
            .map(|i| base.surface_of(i).unwrap().to_string())
            .collect();
        let (vocab, out) = base.add_entity_atoms(&[
            ("Canada".to_string(), "Country".to_string(), None),
            ("Canada".to_string(), "Country".to_string(), None),
            ("".to_string(), "Country".to_string(), None),
        ]);
        assert_eq!(out.added, 1);
        assert_eq!(out.skipped_duplicates, 1);
        assert_eq!(out.rejected.len(), 1);
        for (i, s) in before.iter().enumerate() {
            assert_eq!(vocab.surface_of(i as TokenId).unwrap(), s);
        }
    }

    #[test]
    fn atom_constituents_come_from_base_subtokens() {
        let vocab = fixture_with_atoms();
        let (_, entry) = vocab
            .atoms()
            .find(|(_, e)| e.surface == "United States of America")
            .unwrap();
        assert!(entry.constituents.len() >= 4);
        for &c in &entry.constituents {
            assert!((c as usize) < vocab.base_size());
        }
    }

    #[test]
    fn unknown_chars_become_unk() {
        let vocab = fixture_vocab();
        let seq = vocab.tokenize("Canada \u{00e9}\u{00e9}", false);
        assert!(seq.ids.contains(&UNK_ID));
    }

    #[test]
    fn all_unk_atom_rejected() {
        let vocab = fixture_vocab();
        let (next, out) =
            vocab.add_entity_atoms(&[("\u{00e9}\u{00e9}".to_string(), "X".to_string(), None)]);
        assert_eq!(out.added, 0);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(next.size(), vocab.size());
    }

    #[test]
    fn save_load_round_trip() {
        let vocab = fixture_with_atoms();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.jsonl");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.size(), vocab.size());
        for id in 0..vocab.size() as TokenId {
            assert_eq!(
                loaded.surface_of(id).unwrap(),
                vocab.surface_of(id).unwrap()
            );
        }
        // Atom constituents were recomputed identically.
        let orig: Vec<_> = vocab.atoms().map(|(_, e)| e.constituents.clone()).collect();
        let back: Vec<_> = loaded.atoms().map(|(_, e)| e.constituents.clone()).collect();
        assert_eq!(orig, back);
    }

    #[test]
    fn vocabulary_is_send_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Vocabulary>();
    }

    #[test]
    fn tokenize_deterministic_and_total() {
        let vocab = fixture_with_atoms();
        let texts = ["", "   ", "?!?", "Canada", "xyz Canada 123"];
        for t in texts {
            let a = vocab.tokenize(t, true);
            let b = vocab.tokenize(t, true);
            assert_eq!(a, b);
        }
    }
}
