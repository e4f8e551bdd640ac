//! Stage orchestration: each pipeline stage is a pure function of its input
//! files, config and seed; it writes its artifact plus a JSON manifest with
//! input/output hashes so reruns can be verified and skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    filter_sentences, make_finetune_instances, make_pretrain_instances, TemplateSet,
};
use crate::data::{read_samples, write_jsonl, PredictionRow};
use crate::eval::{score_run, RunReport};
use crate::infer::{
    apply_threshold, default_grid, disambiguate, predict_candidates, sweep_thresholds,
    validate_numeric, InferOptions, LocalResolver, RelationThresholds, SurfaceResolver,
};
use crate::model::{load_checkpoint, MlmModel, ModelConfig};
use crate::recode::{expand_model, ExpandInit, RecodePlan};
use crate::schema::RelationSchema;
use crate::tokenizer::Vocabulary;
use crate::train::{train, write_loss_history, Regime, TrainConfig};
use crate::vocab_build::{atom_candidates, harvest_entities, merge_kg_dump};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing input {path} (produced by stage {producer})")]
    MissingInput { path: String, producer: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
    #[error(transparent)]
    Recode(#[from] crate::recode::RecodeError),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Infer(#[from] crate::infer::InferError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    VocabBuild(#[from] crate::vocab_build::VocabBuildError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelinePaths {
    pub corpus: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub schema: PathBuf,
    pub templates: PathBuf,
    #[serde(default)]
    pub entity_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainParams {
    fn to_config(&self, seed: u64, regime: Regime) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            regime,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_seq_len: usize,
}

impl ModelParams {
    fn to_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut t = self.start;
        while t <= self.end + 1e-12 {
            out.push((t * 1e9).round() / 1e9);
            t += self.step;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferParams {
    pub top_k: usize,
    #[serde(default)]
    pub type_filter: bool,
    #[serde(default)]
    pub raw_logits: bool,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl InferParams {
    fn options(&self) -> InferOptions {
        InferOptions {
            top_k: self.top_k,
            type_filter: self.type_filter,
            raw_logits: self.raw_logits,
        }
    }

    fn grid_values(&self) -> Vec<f64> {
        self.grid
            .as_ref()
            .map(|g| g.values())
            .unwrap_or_else(default_grid)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: PipelinePaths,
    pub base_vocab_size: usize,
    pub model: ModelParams,
    pub mask_rate: f64,
    #[serde(default = "default_min_entity_count")]
    pub min_entity_count: usize,
    pub pretrain: TrainParams,
    pub repretrain: TrainParams,
    pub finetune: TrainParams,
    pub inference: InferParams,
}

fn default_min_entity_count() -> usize {
    1
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, json).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Ablation switches for `run-all`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ablation {
    /// Random-unit init for new rows instead of recode.
    pub no_recode: bool,
    /// Skip the post-expansion re-pretraining pass.
    pub no_pretrain: bool,
    /// Skip vocabulary expansion entirely (no atoms at all).
    pub no_expand: bool,
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u64,
}

fn hex(bytes: impl AsRef<[u8]>) -> String {
    bytes.as_ref().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex(Sha256::digest(&bytes)))
}

/// Hash a file or a checkpoint directory (manifest + tensors, in order).
pub fn hash_artifact(path: &Path) -> Result<String, PipelineError> {
    if path.is_dir() {
        let mut hasher = Sha256::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for entry in entries {
            let bytes = std::fs::read(&entry).map_err(|source| PipelineError::Io {
                path: entry.display().to_string(),
                source,
            })?;
            hasher.update(entry.file_name().unwrap().to_string_lossy().as_bytes());
            hasher.update(&bytes);
        }
        Ok(hex(hasher.finalize()))
    } else {
        sha256_file(path)
    }
}

fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex(Sha256::digest(json.as_bytes()))
}

struct StageRun {
    stage: String,
    seed: u64,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl StageRun {
    fn begin(
        stage: &str,
        seed: u64,
        config_digest: String,
        inputs: &[(&str, &Path)],
    ) -> Result<Self, PipelineError> {
        let mut map = BTreeMap::new();
        for (name, path) in inputs {
            if !path.exists() {
                return Err(PipelineError::MissingInput {
                    path: path.display().to_string(),
                    producer: producer_of(name).to_string(),
                });
            }
            map.insert(name.to_string(), hash_artifact(path)?);
        }
        log::info!("stage {stage}: started");
        Ok(Self {
            stage: stage.to_string(),
            seed,
            config_digest,
            inputs: map,
            started: Instant::now(),
        })
    }

    fn finish(self, out_dir: &Path, outputs: &[(&str, &Path)]) -> Result<StageManifest, PipelineError> {
        let mut map = BTreeMap::new();
        for (name, path) in outputs {
            map.insert(name.to_string(), hash_artifact(path)?);
        }
        let manifest = StageManifest {
            stage: self.stage.clone(),
            seed: self.seed,
            config_digest: self.config_digest,
            inputs: self.inputs,
            outputs: map,
            duration_ms: self.started.elapsed().as_millis() as u64,
        };
        let dir = out_dir.join("manifests");
        std::fs::create_dir_all(&dir).map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(format!("{}.json", self.stage));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        log::info!(
            "stage {}: done in {} ms",
            manifest.stage,
            manifest.duration_ms
        );
        Ok(manifest)
    }
}

fn producer_of(input_name: &str) -> &'static str {
    match input_name {
        "vocab" => "build-vocab",
        "corpus_filtered" => "filter-corpus",
        "ckpt_base" => "pretrain",
        "ckpt_expanded" | "recode_plan" => "recode",
        "ckpt_finetuned" => "finetune",
        "thresholds" => "sweep",
        "predictions" => "predict",
        _ => "(external input)",
    }
}

/// Atomic write: write to `<name>.partial`, rename into place on success.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let partial = path.with_extension(format!(
        "{}partial",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    std::fs::write(&partial, bytes).map_err(|source| PipelineError::Io {
        path: partial.display().to_string(),
        source,
    })?;
    std::fs::rename(&partial, path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Stage artifact paths
// ---------------------------------------------------------------------------

pub struct Artifacts<'a> {
    out: &'a Path,
}

impl<'a> Artifacts<'a> {
    pub fn new(out: &'a Path) -> Self {
        Self { out }
    }
    pub fn vocab(&self) -> PathBuf {
        self.out.join("vocab.jsonl")
    }
    pub fn vocab_report(&self) -> PathBuf {
        self.out.join("vocab_report.json")
    }
    pub fn corpus_filtered(&self) -> PathBuf {
        self.out.join("corpus_filtered.txt")
    }
    pub fn corpus_report(&self) -> PathBuf {
        self.out.join("corpus_report.json")
    }
    pub fn ckpt_base(&self) -> PathBuf {
        self.out.join("ckpt_base")
    }
    pub fn loss_csv(&self, split: &str) -> PathBuf {
        self.out.join(format!("loss_{split}.csv"))
    }
    pub fn ckpt_expanded(&self) -> PathBuf {
        self.out.join("ckpt_expanded")
    }
    pub fn recode_plan(&self) -> PathBuf {
        self.out.join("recode_plan.jsonl")
    }
    pub fn ckpt_repretrained(&self) -> PathBuf {
        self.out.join("ckpt_repretrained")
    }
    pub fn ckpt_finetuned(&self) -> PathBuf {
        self.out.join("ckpt_finetuned")
    }
    pub fn thresholds(&self) -> PathBuf {
        self.out.join("thresholds.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.out.join("predictions.jsonl")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.out.join("report.txt")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// build-vocab: learn the base vocabulary from the raw corpus, harvest typed
/// entities from all splits plus the optional dump, and append entity atoms.
pub fn stage_build_vocab(cfg: &PipelineConfig) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| PipelineError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    let mut inputs: Vec<(&str, &Path)> = vec![
        ("corpus", cfg.paths.corpus.as_path()),
        ("train", cfg.paths.train.as_path()),
        ("val", cfg.paths.val.as_path()),
        ("test", cfg.paths.test.as_path()),
        ("schema", cfg.paths.schema.as_path()),
    ];
    if let Some(dump) = &cfg.paths.entity_dump {
        inputs.push(("entity_dump", dump.as_path()));
    }
    let run = StageRun::begin(
        "build-vocab",
        cfg.seed,
        digest_of(&(cfg.base_vocab_size, &cfg.paths)),
        &inputs,
    )?;

    let corpus_text =
        std::fs::read_to_string(&cfg.paths.corpus).map_err(|source| PipelineError::Io {
            path: cfg.paths.corpus.display().to_string(),
            source,
        })?;
    let base = Vocabulary::build_base_vocab(corpus_text.lines(), cfg.base_vocab_size)?;

    let schema = RelationSchema::load(&cfg.paths.schema)?;
    let splits = vec![
        read_samples(&cfg.paths.train)?,
        read_samples(&cfg.paths.val)?,
        read_samples(&cfg.paths.test)?,
    ];
    let records = harvest_entities(&splits, &schema)?;
    let (records, merge_report) =
        merge_kg_dump(records, cfg.paths.entity_dump.as_deref(), &schema)?;
    let candidates = atom_candidates(&records);
    let (vocab, outcome) = base.add_entity_atoms(&candidates);
    vocab.save(&art.vocab())?;

    #[derive(Serialize)]
    struct Report<'a> {
        base_size: usize,
        atoms_added: usize,
        atoms_skipped_duplicates: usize,
        atoms_rejected: &'a Vec<(String, String)>,
        per_type: &'a crate::vocab_build::TypeCounts,
        total_records: usize,
        malformed_dump_rows: usize,
    }
    let report = Report {
        base_size: base.size(),
        atoms_added: outcome.added,
        atoms_skipped_duplicates: outcome.skipped_duplicates,
        atoms_rejected: &outcome.rejected,
        per_type: &merge_report.per_type,
        total_records: merge_report.total,
        malformed_dump_rows: merge_report.malformed_skipped,
    };
    write_atomic(
        &art.vocab_report(),
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;

    run.finish(
        &cfg.out_dir,
        &[
            ("vocab", art.vocab().as_path()),
            ("vocab_report", art.vocab_report().as_path()),
        ],
    )
}

/// filter-corpus: keep sentences that mention vocabulary entities.
pub fn stage_filter_corpus(cfg: &PipelineConfig) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let run = StageRun::begin(
        "filter-corpus",
        cfg.seed,
        digest_of(&cfg.min_entity_count),
        &[
            ("corpus", cfg.paths.corpus.as_path()),
            ("vocab", art.vocab().as_path()),
        ],
    )?;
    let vocab = Vocabulary::load(&art.vocab())?;
    let corpus_text =
        std::fs::read_to_string(&cfg.paths.corpus).map_err(|source| PipelineError::Io {
            path: cfg.paths.corpus.display().to_string(),
            source,
        })?;
    let (kept, report) = filter_sentences(corpus_text.lines(), &vocab, cfg.min_entity_count);
    let mut text = String::new();
    for s in &kept {
        text.push_str(&s.text);
        text.push('\n');
    }
    write_atomic(&art.corpus_filtered(), text.as_bytes())?;
    write_atomic(
        &art.corpus_report(),
        serde_json::to_string_pretty(&serde_json::json!({
            "kept": report.kept,
            "dropped": report.dropped,
            "per_type_sentences": report.per_type_sentences,
        }))
        .expect("report serializes")
        .as_bytes(),
    )?;
    run.finish(
        &cfg.out_dir,
        &[
            ("corpus_filtered", art.corpus_filtered().as_path()),
            ("corpus_report", art.corpus_report().as_path()),
        ],
    )
}

/// Which training pass the pretrain stage is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainPhase {
    /// From-scratch training on the base vocabulary (the stand-in for a
    /// released pretrained encoder).
    Base,
    /// Continued training of the expanded model with entity atoms active.
    Expanded,
}

/// pretrain: masked-LM training on the filtered corpus. The base phase
/// trains a fresh model over the base vocabulary; the expanded phase resumes
/// from the recoded checkpoint with atoms matched as single tokens.
pub fn stage_pretrain(
    cfg: &PipelineConfig,
    phase: PretrainPhase,
) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let (stage_name, params, ckpt_out, loss_split) = match phase {
        PretrainPhase::Base => ("pretrain", &cfg.pretrain, art.ckpt_base(), "pretrain"),
        PretrainPhase::Expanded => (
            "repretrain",
            &cfg.repretrain,
            art.ckpt_repretrained(),
            "repretrain",
        ),
    };
    let mut inputs: Vec<(&str, PathBuf)> = vec![
        ("corpus_filtered", art.corpus_filtered()),
        ("vocab", art.vocab()),
    ];
    if phase == PretrainPhase::Expanded {
        inputs.push(("ckpt_expanded", art.ckpt_expanded()));
    }
    let input_refs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    let run = StageRun::begin(stage_name, cfg.seed, digest_of(&(params, &cfg.model, cfg.mask_rate)), &input_refs)?;

    let full_vocab = Vocabulary::load(&art.vocab())?;
    let vocab = match phase {
        PretrainPhase::Base => full_vocab.base_view(),
        PretrainPhase::Expanded => full_vocab,
    };
    let corpus_text =
        std::fs::read_to_string(art.corpus_filtered()).map_err(|source| PipelineError::Io {
            path: art.corpus_filtered().display().to_string(),
            source,
        })?;
    let sentences: Vec<String> = corpus_text.lines().map(|s| s.to_string()).collect();
    let instances = make_pretrain_instances(
        &sentences,
        &vocab,
        cfg.mask_rate,
        cfg.seed,
        cfg.model.max_seq_len,
    )?;

    let model = match phase {
        PretrainPhase::Base => {
            let mc = cfg.model.to_config(vocab.size(), cfg.seed);
            MlmModel::init(&mc)?
        }
        PretrainPhase::Expanded => load_checkpoint(&art.ckpt_expanded())?,
    };
    let tc = params.to_config(cfg.seed, Regime::Pretrain);
    let outcome = train(model, &instances, &tc, Some(&ckpt_out))?;
    write_loss_history(&art.loss_csv(loss_split), loss_split, &outcome.history).map_err(
        |source| PipelineError::Io {
            path: art.loss_csv(loss_split).display().to_string(),
            source,
        },
    )?;

    let loss_path = art.loss_csv(loss_split);
    let ckpt_name = match phase {
        PretrainPhase::Base => "ckpt_base",
        PretrainPhase::Expanded => "ckpt_repretrained",
    };
    run.finish(
        &cfg.out_dir,
        &[
            (ckpt_name, ckpt_out.as_path()),
            ("loss_csv", loss_path.as_path()),
        ],
    )
}

/// recode: resize the base checkpoint to the full vocabulary and install
/// initial rows for every atom (recode or random-unit, per ablation).
pub fn stage_recode(cfg: &PipelineConfig, init: ExpandInit) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let init_tag = match init {
        ExpandInit::Recode => "recode".to_string(),
        ExpandInit::RandomUnit { seed } => format!("random-unit:{seed}"),
    };
    let run = StageRun::begin(
        "recode",
        cfg.seed,
        digest_of(&init_tag),
        &[
            ("vocab", art.vocab().as_path()),
            ("ckpt_base", art.ckpt_base().as_path()),
        ],
    )?;
    let vocab = Vocabulary::load(&art.vocab())?;
    let base_model = load_checkpoint(&art.ckpt_base())?;
    let plan = RecodePlan::for_vocab(&vocab, base_model.config.vocab_size);
    let (expanded, report) = expand_model(&base_model, &plan, init)?;
    if !report.fallback_random.is_empty() {
        log::warn!(
            "{} atoms fell back to random init: {:?}",
            report.fallback_random.len(),
            report.fallback_random
        );
    }
    crate::model::save_checkpoint(&expanded, &art.ckpt_expanded())?;
    plan.save(&art.recode_plan())?;
    run.finish(
        &cfg.out_dir,
        &[
            ("ckpt_expanded", art.ckpt_expanded().as_path()),
            ("recode_plan", art.recode_plan().as_path()),
        ],
    )
}

/// finetune: train on prompt-instantiated triples from the train split.
/// `from` names the checkpoint to start from (expanded or repretrained; the
/// base checkpoint when expansion is ablated away).
pub fn stage_finetune(cfg: &PipelineConfig, from: &Path) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let run = StageRun::begin(
        "finetune",
        cfg.seed,
        digest_of(&(&cfg.finetune, from.display().to_string())),
        &[
            ("vocab", art.vocab().as_path()),
            ("train", cfg.paths.train.as_path()),
            ("templates", cfg.paths.templates.as_path()),
            ("ckpt_in", from),
        ],
    )?;
    let model = load_checkpoint(from)?;
    let full_vocab = Vocabulary::load(&art.vocab())?;
    // When fine-tuning an unexpanded model, only the base vocabulary exists.
    let vocab = if model.config.vocab_size == full_vocab.base_size() {
        full_vocab.base_view()
    } else {
        full_vocab
    };
    let samples = read_samples(&cfg.paths.train)?;
    let templates = TemplateSet::load(&cfg.paths.templates)?;
    let instances = make_finetune_instances(&samples, &templates, &vocab, cfg.model.max_seq_len)?;
    let tc = cfg.finetune.to_config(cfg.seed, Regime::FineTune);
    let outcome = train(model, &instances, &tc, Some(&art.ckpt_finetuned()))?;
    write_loss_history(&art.loss_csv("finetune"), "finetune", &outcome.history).map_err(
        |source| PipelineError::Io {
            path: art.loss_csv("finetune").display().to_string(),
            source,
        },
    )?;
    let loss_path = art.loss_csv("finetune");
    run.finish(
        &cfg.out_dir,
        &[
            ("ckpt_finetuned", art.ckpt_finetuned().as_path()),
            ("loss_csv", loss_path.as_path()),
        ],
    )
}

/// sweep: select per-relation thresholds on the validation split.
pub fn stage_sweep(cfg: &PipelineConfig) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let run = StageRun::begin(
        "sweep",
        cfg.seed,
        digest_of(&cfg.inference),
        &[
            ("vocab", art.vocab().as_path()),
            ("val", cfg.paths.val.as_path()),
            ("templates", cfg.paths.templates.as_path()),
            ("schema", cfg.paths.schema.as_path()),
            ("ckpt_finetuned", art.ckpt_finetuned().as_path()),
        ],
    )?;
    let model = load_checkpoint(&art.ckpt_finetuned())?;
    let vocab = vocab_for_model(&art, &model)?;
    let validation = read_samples(&cfg.paths.val)?;
    let templates = TemplateSet::load(&cfg.paths.templates)?;
    let schema = RelationSchema::load(&cfg.paths.schema)?;
    let thresholds = sweep_thresholds(
        &model,
        &vocab,
        &validation,
        &templates,
        &schema,
        &cfg.inference.grid_values(),
        &cfg.inference.options(),
    )?;
    thresholds.save(&art.thresholds())?;
    run.finish(&cfg.out_dir, &[("thresholds", art.thresholds().as_path())])
}

fn vocab_for_model(art: &Artifacts, model: &MlmModel<f32>) -> Result<Vocabulary, PipelineError> {
    let full = Vocabulary::load(&art.vocab())?;
    if model.config.vocab_size == full.base_size() {
        Ok(full.base_view())
    } else {
        Ok(full)
    }
}

/// predict: object sets for every test query, thresholded, numerically
/// validated, and disambiguated against the entity dump.
pub fn stage_predict(cfg: &PipelineConfig) -> Result<StageManifest, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let run = StageRun::begin(
        "predict",
        cfg.seed,
        digest_of(&cfg.inference),
        &[
            ("vocab", art.vocab().as_path()),
            ("test", cfg.paths.test.as_path()),
            ("templates", cfg.paths.templates.as_path()),
            ("schema", cfg.paths.schema.as_path()),
            ("thresholds", art.thresholds().as_path()),
            ("ckpt_finetuned", art.ckpt_finetuned().as_path()),
        ],
    )?;
    let model = load_checkpoint(&art.ckpt_finetuned())?;
    let vocab = vocab_for_model(&art, &model)?;
    let queries = read_samples(&cfg.paths.test)?;
    let templates = TemplateSet::load(&cfg.paths.templates)?;
    let schema = RelationSchema::load(&cfg.paths.schema)?;
    let thresholds = RelationThresholds::load(&art.thresholds())?;
    let resolver: Box<dyn SurfaceResolver> = match &cfg.paths.entity_dump {
        Some(dump) => {
            let schema_ref = &schema;
            let (records, _) = merge_kg_dump(Vec::new(), Some(dump.as_path()), schema_ref)?;
            Box::new(LocalResolver::from_records(&records))
        }
        None => Box::new(LocalResolver::default()),
    };

    let opts = cfg.inference.options();
    let mut rows = Vec::with_capacity(queries.len());
    for q in &queries {
        let candidates = predict_candidates(
            &model,
            &vocab,
            &q.subject,
            &q.relation,
            &templates,
            Some(&schema),
            &opts,
        )?;
        let kept = apply_threshold(&candidates, &q.relation, &thresholds);
        let kept = validate_numeric(&kept, &q.relation, &schema);
        let resolved = if schema.is_numeric(&q.relation) {
            kept
        } else {
            disambiguate(&kept, resolver.as_ref())?
        };
        rows.push(PredictionRow {
            subject: q.subject.clone(),
            relation: q.relation.clone(),
            objects: resolved.iter().map(|c| c.surface.clone()).collect(),
            object_ids: resolved.iter().map(|c| c.entity_id.clone()).collect(),
            scores: resolved.iter().map(|c| c.score).collect(),
        });
    }
    write_jsonl(&art.predictions(), &rows)?;
    run.finish(&cfg.out_dir, &[("predictions", art.predictions().as_path())])
}

/// evaluate: challenge-style report against the test gold.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<(StageManifest, RunReport), PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    let run = StageRun::begin(
        "evaluate",
        cfg.seed,
        digest_of(&"evaluate"),
        &[
            ("predictions", art.predictions().as_path()),
            ("test", cfg.paths.test.as_path()),
        ],
    )?;
    let report = score_run(&art.predictions(), &cfg.paths.test)?;
    write_atomic(&art.report_txt(), report.to_text().as_bytes())?;
    write_atomic(&art.report_csv(), report.to_csv().as_bytes())?;
    write_atomic(&art.report_json(), report.to_json().as_bytes())?;
    let manifest = run.finish(
        &cfg.out_dir,
        &[
            ("report_txt", art.report_txt().as_path()),
            ("report_csv", art.report_csv().as_path()),
            ("report_json", art.report_json().as_path()),
        ],
    )?;
    Ok((manifest, report))
}

/// The full stage chain. Returns the final evaluation report.
pub fn run_all(cfg: &PipelineConfig, ablation: Ablation) -> Result<RunReport, PipelineError> {
    let art = Artifacts::new(&cfg.out_dir);
    stage_build_vocab(cfg)?;
    stage_filter_corpus(cfg)?;
    stage_pretrain(cfg, PretrainPhase::Base)?;

    let finetune_from = if ablation.no_expand {
        art.ckpt_base()
    } else {
        let init = if ablation.no_recode {
            ExpandInit::RandomUnit { seed: cfg.seed }
        } else {
            ExpandInit::Recode
        };
        stage_recode(cfg, init)?;
        if ablation.no_pretrain {
            art.ckpt_expanded()
        } else {
            stage_pretrain(cfg, PretrainPhase::Expanded)?;
            art.ckpt_repretrained()
        }
    };
    stage_finetune(cfg, &finetune_from)?;
    stage_sweep(cfg)?;
    stage_predict(cfg)?;
    let (_, report) = stage_evaluate(cfg)?;
    Ok(report)
}

/// Artifact files every complete default run produces, for determinism
/// checks.
pub fn determinism_artifacts(out_dir: &Path) -> Vec<PathBuf> {
    let art = Artifacts::new(out_dir);
    vec![
        art.vocab(),
        art.corpus_filtered(),
        art.ckpt_base(),
        art.ckpt_expanded(),
        art.recode_plan(),
        art.ckpt_repretrained(),
        art.ckpt_finetuned(),
        art.thresholds(),
        art.predictions(),
        art.report_json(),
    ]
}
