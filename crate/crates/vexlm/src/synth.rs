//! Deterministic synthetic world generator: invented countries, languages and
//! people with border/language/children facts, a templated sentence corpus
//! stating every fact, challenge-format train/val/test splits over disjoint
//! subjects, and a matching schema/templates/entity-dump fixture tree.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, TripleSample};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub countries: usize,
    pub languages: usize,
    pub persons: usize,
    /// Extra dump-only entities that never occur in facts.
    pub distractors: usize,
    /// Copies of each fact sentence variant in the corpus.
    pub repetitions: usize,
    /// No-entity filler lines mixed into the corpus.
    pub filler: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            countries: 22,
            languages: 14,
            persons: 14,
            distractors: 4,
            repetitions: 8,
            filler: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub entities: usize,
    pub facts: usize,
    pub corpus_sentences: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
}

const BORDER_RELATION: &str = "CountryBordersCountry";
const LANGUAGE_RELATION: &str = "CountryHasOfficialLanguage";
const CHILDREN_RELATION: &str = "PersonHasNumberOfChildren";

fn schema_json() -> &'static str {
    r#"{
  "CountryBordersCountry": { "subject_type": "Country", "object_type": "Country", "numeric": false },
  "CountryHasOfficialLanguage": { "subject_type": "Country", "object_type": "Language", "numeric": false },
  "PersonHasNumberOfChildren": { "subject_type": "Person", "object_type": "Number", "numeric": true }
}
"#
}

fn templates_json() -> &'static str {
    r#"{
  "CountryBordersCountry": "{subject} shares a border with {mask} .",
  "CountryHasOfficialLanguage": "The official language of {subject} is {mask} .",
  "PersonHasNumberOfChildren": "{subject} has {mask} children ."
}
"#
}

/// Corpus sentence variants per relation. The first variant always matches
/// the prompt template so queries look like pretraining sentences.
fn border_variants(s: &str, o: &str) -> Vec<String> {
    vec![
        format!("{s} shares a border with {o} ."),
        format!("The nation of {s} lies beside {o} ."),
        format!("You can travel from {s} straight into {o} ."),
    ]
}

fn language_variants(s: &str, o: &str) -> Vec<String> {
    vec![
        format!("The official language of {s} is {o} ."),
        format!("Most people in {s} speak {o} ."),
        format!("The laws of {s} are written in {o} ."),
    ]
}

fn children_variants(s: &str, n: &str) -> Vec<String> {
    vec![
        format!("{s} has {n} children ."),
        format!("{s} is raising {n} children ."),
    ]
}

fn filler_lines(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let starts = [
        "The weather stayed calm that whole year",
        "Markets opened late after the storm",
        "The old bridge was repaired again",
        "Harvest season ended without trouble",
        "The council met twice that winter",
        "A quiet road runs past the mill",
    ];
    let ends = [
        "and nothing else happened",
        "according to the clerks",
        "as everyone expected",
        "despite the heavy rain",
        "to general relief",
    ];
    (0..count)
        .map(|_| {
            let a = starts[rng.random_range(0..starts.len())];
            let b = ends[rng.random_range(0..ends.len())];
            format!("{a} {b} .")
        })
        .collect()
}

/// Pronounceable unique names from seeded syllables.
struct NameForge {
    onsets: Vec<&'static str>,
    middles: Vec<&'static str>,
    ends: Vec<&'static str>,
    used: std::collections::BTreeSet<String>,
}

impl NameForge {
    fn new() -> Self {
        Self {
            onsets: vec![
                "Bra", "Cor", "Dal", "Fen", "Gol", "Har", "Jil", "Kev", "Lor", "Mar", "Nor",
                "Pol", "Quor", "Ral", "Sor", "Tal", "Ulm", "Var", "Wen", "Xan", "Yor", "Zan",
                "Bel", "Cra", "Dun", "Fal", "Gri", "Hol", "Jor", "Kal", "Lim", "Mos", "Nul",
                "Pra", "Rin", "Sel", "Tor", "Urd", "Vol", "Wal", "Yen", "Zor",
            ],
            middles: vec!["va", "mi", "do", "re", "lu", "ta", "ni", "go", "sa", "pe"],
            ends: vec!["nia", "land", "mark", "stan", "via", "dor", "gard", "holm"],
            used: Default::default(),
        }
    }

    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let mut w = String::new();
            w.push_str(self.onsets[rng.random_range(0..self.onsets.len())]);
            if rng.random_bool(0.5) {
                w.push_str(self.middles[rng.random_range(0..self.middles.len())]);
            }
            w.push_str(self.ends[rng.random_range(0..self.ends.len())]);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn person_word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let mut w = String::new();
            w.push_str(self.onsets[rng.random_range(0..self.onsets.len())]);
            w.push_str(self.middles[rng.random_range(0..self.middles.len())]);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

#[derive(Serialize)]
struct DumpLine {
    surface: String,
    kind: &'static str,
    #[serde(rename = "type")]
    entity_type: String,
    entity_id: Option<String>,
}

fn split_subjects<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> (Vec<&'a T>, Vec<&'a T>, Vec<&'a T>) {
    let mut order: Vec<&T> = items.iter().collect();
    order.shuffle(rng);
    let n = order.len();
    let n_train = (n * 6) / 10;
    let n_val = (n * 2) / 10;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

/// Generate the fixture tree under `out_dir`: corpus.txt, train/val/test
/// JSONL splits, schema.json, templates.json, entities.jsonl.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary, SynthError> {
    let io = |source: std::io::Error, path: &Path| SynthError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| io(e, out_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut forge = NameForge::new();

    let country_suffixes = ["Republic", "Union", "Isles", "Dominion", "Coast", "Haven"];
    let countries: Vec<String> = (0..spec.countries)
        .map(|i| {
            let first = forge.word(&mut rng);
            let suffix = country_suffixes[i % country_suffixes.len()];
            format!("{first} {suffix}")
        })
        .collect();
    let languages: Vec<String> = (0..spec.languages)
        .map(|_| format!("{}ish", forge.person_word(&mut rng)))
        .collect();
    let persons: Vec<String> = (0..spec.persons)
        .map(|_| {
            let first = forge.person_word(&mut rng);
            let last = forge.person_word(&mut rng);
            format!("{first} {last}")
        })
        .collect();
    let distractors: Vec<String> = (0..spec.distractors)
        .map(|i| {
            let first = forge.word(&mut rng);
            let suffix = country_suffixes[(i + 3) % country_suffixes.len()];
            format!("{first} {suffix}")
        })
        .collect();

    // Facts. Roughly one country in ten has no borders at all.
    let mut border_facts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, c) in countries.iter().enumerate() {
        if i % 10 == 9 {
            border_facts.insert(c.clone(), Vec::new());
            continue;
        }
        let k = rng.random_range(1..=3usize);
        let mut objs = Vec::new();
        while objs.len() < k {
            let j = rng.random_range(0..countries.len());
            if j != i && !objs.contains(&countries[j]) {
                objs.push(countries[j].clone());
            }
        }
        border_facts.insert(c.clone(), objs);
    }
    let mut language_facts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in &countries {
        let k = rng.random_range(1..=2usize);
        let mut objs = Vec::new();
        while objs.len() < k {
            let l = &languages[rng.random_range(0..languages.len())];
            if !objs.contains(l) {
                objs.push(l.clone());
            }
        }
        language_facts.insert(c.clone(), objs);
    }
    let mut children_facts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, p) in persons.iter().enumerate() {
        if i % 5 == 4 {
            children_facts.insert(p.clone(), Vec::new());
            continue;
        }
        let n = rng.random_range(1..=5usize);
        children_facts.insert(p.clone(), vec![n.to_string()]);
    }

    // Corpus: every fact stated in all its variants, repeated and shuffled.
    let mut corpus: Vec<String> = Vec::new();
    for (s, objs) in &border_facts {
        for o in objs {
            for v in border_variants(s, o) {
                for _ in 0..spec.repetitions {
                    corpus.push(v.clone());
                }
            }
        }
    }
    for (s, objs) in &language_facts {
        for o in objs {
            for v in language_variants(s, o) {
                for _ in 0..spec.repetitions {
                    corpus.push(v.clone());
                }
            }
        }
    }
    for (s, objs) in &children_facts {
        for n in objs {
            for v in children_variants(s, n) {
                for _ in 0..spec.repetitions {
                    corpus.push(v.clone());
                }
            }
        }
    }
    let fact_count = border_facts.values().map(|v| v.len()).sum::<usize>()
        + language_facts.values().map(|v| v.len()).sum::<usize>()
        + children_facts.values().map(|v| v.len()).sum::<usize>();
    corpus.extend(filler_lines(&mut rng, spec.filler));
    corpus.shuffle(&mut rng);

    // Splits: disjoint subjects per entity class.
    let (train_c, val_c, test_c) = split_subjects(&mut rng, &countries);
    let (train_p, val_p, test_p) = split_subjects(&mut rng, &persons);

    let mut splits: BTreeMap<&str, Vec<TripleSample>> = BTreeMap::new();
    for (name, cs, ps) in [
        ("train", &train_c, &train_p),
        ("val", &val_c, &val_p),
        ("test", &test_c, &test_p),
    ] {
        let mut samples = Vec::new();
        for c in cs.iter() {
            samples.push(TripleSample {
                subject: (*c).clone(),
                relation: BORDER_RELATION.to_string(),
                objects: border_facts[*c].clone(),
            });
            samples.push(TripleSample {
                subject: (*c).clone(),
                relation: LANGUAGE_RELATION.to_string(),
                objects: language_facts[*c].clone(),
            });
        }
        for p in ps.iter() {
            samples.push(TripleSample {
                subject: (*p).clone(),
                relation: CHILDREN_RELATION.to_string(),
                objects: children_facts[*p].clone(),
            });
        }
        splits.insert(name, samples);
    }

    // Entity dump with synthetic ids, including dump-only distractors.
    let mut dump: Vec<DumpLine> = Vec::new();
    let mut next_id = 0usize;
    let push_dump = |surface: &str, ty: &str, dump: &mut Vec<DumpLine>, next_id: &mut usize| {
        dump.push(DumpLine {
            surface: surface.to_string(),
            kind: "entity",
            entity_type: ty.to_string(),
            entity_id: Some(format!("S{}", *next_id)),
        });
        *next_id += 1;
    };
    for c in &countries {
        push_dump(c, "Country", &mut dump, &mut next_id);
    }
    for l in &languages {
        push_dump(l, "Language", &mut dump, &mut next_id);
    }
    for p in &persons {
        push_dump(p, "Person", &mut dump, &mut next_id);
    }
    for d in &distractors {
        push_dump(d, "Country", &mut dump, &mut next_id);
    }

    // Write everything.
    let corpus_path = out_dir.join("corpus.txt");
    std::fs::write(&corpus_path, corpus.join("\n") + "\n").map_err(|e| io(e, &corpus_path))?;
    let schema_path = out_dir.join("schema.json");
    std::fs::write(&schema_path, schema_json()).map_err(|e| io(e, &schema_path))?;
    let templates_path = out_dir.join("templates.json");
    std::fs::write(&templates_path, templates_json()).map_err(|e| io(e, &templates_path))?;
    for (name, samples) in &splits {
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), samples).map_err(|e| SynthError::Io {
            path: format!("{name}.jsonl"),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    write_jsonl(&out_dir.join("entities.jsonl"), &dump).map_err(|e| SynthError::Io {
        path: "entities.jsonl".into(),
        source: std::io::Error::other(e.to_string()),
    })?;

    Ok(SynthSummary {
        entities: countries.len() + languages.len() + persons.len() + distractors.len(),
        facts: fact_count,
        corpus_sentences: corpus.len(),
        train_samples: splits["train"].len(),
        val_samples: splits["val"].len(),
        test_samples: splits["test"].len(),
    })
}

/// Ready-to-run pipeline config for a generated fixture tree.
pub fn default_pipeline_config(
    fixture_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> crate::pipeline::PipelineConfig {
    use crate::pipeline::*;
    PipelineConfig {
        seed,
        out_dir: out_dir.to_path_buf(),
        paths: PipelinePaths {
            corpus: fixture_dir.join("corpus.txt"),
            train: fixture_dir.join("train.jsonl"),
            val: fixture_dir.join("val.jsonl"),
            test: fixture_dir.join("test.jsonl"),
            schema: fixture_dir.join("schema.json"),
            templates: fixture_dir.join("templates.json"),
            entity_dump: Some(fixture_dir.join("entities.jsonl")),
        },
        base_vocab_size: 360,
        model: ModelParams {
            hidden: 64,
            layers: 2,
            heads: 4,
            ff: 256,
            max_seq_len: 48,
        },
        mask_rate: 0.15,
        min_entity_count: 1,
        // Published lr 2e-5 scaled up for the from-scratch desk model; epoch
        // counts follow the published recipe (20 pretrain / 5 fine-tune).
        pretrain: TrainParams {
            learning_rate: 6e-4,
            epochs: 20,
            batch_size: 16,
            grad_clip: Some(1.0),
        },
        repretrain: TrainParams {
            learning_rate: 6e-4,
            epochs: 10,
            batch_size: 16,
            grad_clip: Some(1.0),
        },
        finetune: TrainParams {
            learning_rate: 6e-4,
            epochs: 5,
            batch_size: 16,
            grad_clip: None,
        },
        inference: InferParams {
            top_k: 20,
            type_filter: false,
            raw_logits: false,
            grid: Some(GridSpec {
                start: 0.01,
                end: 0.99,
                step: 0.01,
            }),
        },
    }
}
