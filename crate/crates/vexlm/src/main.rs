use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vexlm::kg::{FetchSpec, KgClient};
use vexlm::pipeline::{
    self, Ablation, Artifacts, PipelineConfig, PretrainPhase,
};
use vexlm::recode::ExpandInit;
use vexlm::schema::RelationSchema;
use vexlm::synth::{self, SynthSpec};

#[derive(Parser)]
#[command(
    name = "vexlm",
    about = "Vocabulary-expandable masked language modeling for knowledge base construction",
    version
)]
struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the base vocabulary and entity atoms.
    BuildVocab,
    /// Keep corpus sentences that mention vocabulary entities.
    FilterCorpus,
    /// Masked-LM training on the filtered corpus.
    Pretrain(PretrainArgs),
    /// Expand the base checkpoint with recoded entity atom rows.
    Recode(RecodeArgs),
    /// Fine-tune on prompt-instantiated triples.
    Finetune(FinetuneArgs),
    /// Select per-relation thresholds on the validation split.
    Sweep,
    /// Predict object sets for the test split.
    Predict,
    /// Score predictions against gold and render the report.
    Evaluate(EvaluateArgs),
    /// Run every stage in order.
    RunAll(RunAllArgs),
    /// Generate the synthetic fixture world.
    GenSynth(GenSynthArgs),
    /// Fetch an entity dump from a knowledge-graph endpoint.
    FetchEntities(FetchArgs),
    /// Resolve one surface form to an entity id.
    Resolve(ResolveArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Continue training the expanded checkpoint (post-recode pass).
    #[arg(long)]
    expanded: bool,
    /// Use a named preset (paper-pretrain or paper-finetune) for lr/epochs.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct RecodeArgs {
    /// Random-unit initialization instead of recode (ablation).
    #[arg(long)]
    random_init: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Checkpoint to start from; defaults to the re-pretrained checkpoint,
    /// falling back to the expanded one.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions file; defaults to the run's predictions.jsonl.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Gold file; defaults to the config's test split.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Exit nonzero when the overall F1 falls below this gate.
    #[arg(long)]
    min_f1: Option<f64>,
}

#[derive(Args)]
struct RunAllArgs {
    /// Random-unit init of new rows instead of recode.
    #[arg(long)]
    no_recode: bool,
    /// Skip the post-expansion re-pretraining pass.
    #[arg(long)]
    no_pretrain: bool,
    /// Skip vocabulary expansion entirely.
    #[arg(long)]
    no_expand: bool,
    /// Exit nonzero when the overall F1 falls below this gate.
    #[arg(long)]
    min_f1: Option<f64>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory for the fixture tree.
    #[arg(long, default_value = "fixtures/synth")]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    synth_seed: u64,
    #[arg(long, default_value_t = 22)]
    countries: usize,
    #[arg(long, default_value_t = 14)]
    languages: usize,
    #[arg(long, default_value_t = 14)]
    persons: usize,
    #[arg(long, default_value_t = 8)]
    repetitions: usize,
    /// Also write a ready-to-run pipeline config next to the fixtures.
    #[arg(long)]
    write_config: Option<PathBuf>,
}

#[derive(Args)]
struct FetchArgs {
    /// Fetch spec file (JSON: endpoint, properties, page_size, rate_limit,
    /// optional fixture_dir).
    #[arg(long)]
    spec: PathBuf,
    /// Output entity dump path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ResolveArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Cache directory for live lookups.
    #[arg(long)]
    cache: Option<PathBuf>,
    surface: String,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this subcommand")?;
    let mut cfg = PipelineConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out_dir {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    match &cli.command {
        Command::BuildVocab => {
            let cfg = load_config(&cli)?;
            pipeline::stage_build_vocab(&cfg)?;
        }
        Command::FilterCorpus => {
            let cfg = load_config(&cli)?;
            pipeline::stage_filter_corpus(&cfg)?;
        }
        Command::Pretrain(args) => {
            let mut cfg = load_config(&cli)?;
            if let Some(name) = &args.preset {
                let preset = vexlm::train::preset(name, cfg.seed)
                    .with_context(|| format!("unknown preset {name:?}"))?;
                let params = vexlm::pipeline::TrainParams {
                    learning_rate: preset.learning_rate,
                    epochs: preset.epochs,
                    batch_size: preset.batch_size,
                    grad_clip: preset.grad_clip,
                };
                if args.expanded {
                    cfg.repretrain = params;
                } else {
                    cfg.pretrain = params;
                }
            }
            let phase = if args.expanded {
                PretrainPhase::Expanded
            } else {
                PretrainPhase::Base
            };
            pipeline::stage_pretrain(&cfg, phase)?;
        }
        Command::Recode(args) => {
            let cfg = load_config(&cli)?;
            let init = if args.random_init {
                ExpandInit::RandomUnit { seed: cfg.seed }
            } else {
                ExpandInit::Recode
            };
            pipeline::stage_recode(&cfg, init)?;
        }
        Command::Finetune(args) => {
            let cfg = load_config(&cli)?;
            let art = Artifacts::new(&cfg.out_dir);
            let from = match &args.from {
                Some(p) => p.clone(),
                None => {
                    if art.ckpt_repretrained().exists() {
                        art.ckpt_repretrained()
                    } else {
                        art.ckpt_expanded()
                    }
                }
            };
            pipeline::stage_finetune(&cfg, &from)?;
        }
        Command::Sweep => {
            let cfg = load_config(&cli)?;
            pipeline::stage_sweep(&cfg)?;
        }
        Command::Predict => {
            let cfg = load_config(&cli)?;
            pipeline::stage_predict(&cfg)?;
        }
        Command::Evaluate(args) => {
            let cfg = load_config(&cli)?;
            let art = Artifacts::new(&cfg.out_dir);
            let predictions = args.predictions.clone().unwrap_or_else(|| art.predictions());
            let gold = args.gold.clone().unwrap_or_else(|| cfg.paths.test.clone());
            let report = vexlm::eval::score_run(&predictions, &gold)?;
            print!("{}", report.to_text());
            std::fs::write(art.report_txt(), report.to_text())?;
            std::fs::write(art.report_csv(), report.to_csv())?;
            std::fs::write(art.report_json(), report.to_json())?;
            if let Some(gate) = args.min_f1 {
                if report.overall.f1 < gate {
                    bail!("overall F1 {:.4} below --min-f1 {gate}", report.overall.f1);
                }
            }
        }
        Command::RunAll(args) => {
            let cfg = load_config(&cli)?;
            let report = pipeline::run_all(
                &cfg,
                Ablation {
                    no_recode: args.no_recode,
                    no_pretrain: args.no_pretrain,
                    no_expand: args.no_expand,
                },
            )?;
            print!("{}", report.to_text());
            if let Some(gate) = args.min_f1 {
                if report.overall.f1 < gate {
                    bail!("overall F1 {:.4} below --min-f1 {gate}", report.overall.f1);
                }
            }
        }
        Command::GenSynth(args) => {
            let spec = SynthSpec {
                seed: args.synth_seed,
                countries: args.countries,
                languages: args.languages,
                persons: args.persons,
                repetitions: args.repetitions,
                ..SynthSpec::default()
            };
            let summary = synth::generate(&spec, &args.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(cfg_path) = &args.write_config {
                let cfg = synth::default_pipeline_config(
                    &args.out,
                    std::path::Path::new("runs/synth"),
                    args.synth_seed,
                );
                cfg.save(cfg_path)?;
                println!("wrote config to {}", cfg_path.display());
            }
        }
        Command::FetchEntities(args) => {
            let text = std::fs::read_to_string(&args.spec)
                .with_context(|| format!("reading {}", args.spec.display()))?;
            let spec: FetchSpec = serde_json::from_str(&text)?;
            let client = KgClient::new(spec, None)?;
            let schema = match &cli.config {
                Some(_) => {
                    let cfg = load_config(&cli)?;
                    RelationSchema::load(&cfg.paths.schema)?
                }
                None => RelationSchema::bundled(),
            };
            let (records, report) = client.fetch_entities(&schema)?;
            vexlm::kg::write_entity_dump(&args.out, &records)?;
            println!(
                "wrote {} records ({} pages, {} failures) to {}",
                records.len(),
                report.pages,
                report.failures.len(),
                args.out.display()
            );
            if !report.failures.is_empty() {
                for (rel, msg) in &report.failures {
                    eprintln!("failed {rel}: {msg}");
                }
                bail!("{} relations failed", report.failures.len());
            }
        }
        Command::Resolve(args) => {
            let text = std::fs::read_to_string(&args.spec)
                .with_context(|| format!("reading {}", args.spec.display()))?;
            let spec: FetchSpec = serde_json::from_str(&text)?;
            let client = KgClient::new(spec, args.cache.clone())?;
            match client.resolve_surface(&args.surface)? {
                Some(id) => println!("{id}"),
                None => println!("null"),
            }
        }
    }
    Ok(())
}


