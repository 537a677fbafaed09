use clap::{Args, Parser, Subcommand};
use longfaith::config::{PipelineConfig, Purpose};
use longfaith::corpus::SchemaTag;
use longfaith::dataset::RejectedTag;
use longfaith::pipeline::{losscheck_lines, stats_for_file, Pipeline, PipelineError};
use longfaith::po_math::OddsKind;
use longfaith::prompt::{InferenceStyle, PromptVariant};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "longfaith",
    version,
    about = "Synthesize faithful long-context reasoning datasets and score model outputs"
)]
struct Cli {
    /// Pipeline config file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the hop-balanced training pool and write the canonical corpus
    Sample {
        /// Output path (default: <output.dir>/sampled.jsonl)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Synthesize reasoning chains for the selected prompt regimes
    Synthesize(SynthesizeArgs),
    /// Refactor a chain file into a supervised fine-tuning dataset
    BuildSft(BuildSftArgs),
    /// Refactor chain files into a preference dataset
    BuildPo(BuildPoArgs),
    /// Run batch inference over a test corpus
    Infer(InferArgs),
    /// Score a responses file with the rule-based metrics
    Evaluate(EvaluateArgs),
    /// Print length statistics for an existing dataset file
    Stats {
        /// Dataset file (SFT or preference, detected automatically)
        #[arg(long)]
        file: PathBuf,
    },
    /// Print loss values and gradient-check errors at canonical points
    Losscheck {
        /// Odds-ratio weight in the combined objective
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        /// Central finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Sequence probability inside the odds: normalized | joint
        #[arg(long, default_value = "normalized")]
        odds: String,
    },
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Comma-separated regimes (default: all four)
    #[arg(long, value_delimiter = ',', value_parser = PromptVariant::from_str)]
    variants: Vec<PromptVariant>,
    /// Use the deterministic offline mock instead of the endpoint
    #[arg(long)]
    mock: bool,
    /// Working corpus override (default: <output.dir>/sampled.jsonl)
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct BuildSftArgs {
    /// Ablation variant: wo-coc | wo-gt | wo-doc (default: the grounded set)
    #[arg(long, value_parser = RejectedTag::from_str)]
    ablation: Option<RejectedTag>,
    /// Working corpus override
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Drop samples whose chain never states the gold answer
    #[arg(long)]
    strict_gold: bool,
    /// Output path override
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BuildPoArgs {
    /// Comma-separated rejected tags (default: config, then all three)
    #[arg(long, value_delimiter = ',', value_parser = RejectedTag::from_str)]
    tags: Vec<RejectedTag>,
    /// Working corpus override
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Drop samples whose chosen chain never states the gold answer
    #[arg(long)]
    strict_gold: bool,
    /// Output path override
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Prompting style: coc | cot
    #[arg(long, value_parser = InferenceStyle::from_str)]
    style: InferenceStyle,
    /// Test corpus path
    #[arg(long)]
    test_corpus: PathBuf,
    /// Corpus schema override (default: config)
    #[arg(long, value_parser = SchemaTag::from_str)]
    schema: Option<SchemaTag>,
    /// Use the deterministic offline mock instead of the endpoint
    #[arg(long)]
    mock: bool,
    /// Responses output path override
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Responses file with one {id, response} object per line
    #[arg(long)]
    responses: PathBuf,
    /// Test corpus path
    #[arg(long)]
    test_corpus: PathBuf,
    /// Corpus schema override (default: config)
    #[arg(long, value_parser = SchemaTag::from_str)]
    schema: Option<SchemaTag>,
}

fn load_pipeline(config: Option<&Path>) -> Result<Pipeline, PipelineError> {
    let path = config.ok_or_else(|| {
        PipelineError::Config(longfaith::config::ConfigError::Invalid(
            "this command needs --config <file>".into(),
        ))
    })?;
    Pipeline::new(PipelineConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Sample { output } => {
            let pipeline = load_pipeline(cli.config.as_deref())?;
            let report = pipeline.cmd_sample(output.as_deref())?;
            for (hop, count) in &report.per_hop {
                println!("hop {hop}: {count}");
            }
            println!("total: {} -> {}", report.total, report.path.display());
        }
        Command::Synthesize(args) => {
            let pipeline = load_pipeline(cli.config.as_deref())?;
            let variants = if args.variants.is_empty() {
                PromptVariant::ALL.to_vec()
            } else {
                args.variants
            };
            let corpus = pipeline.load_working_corpus(args.corpus.as_deref())?;
            let client = pipeline.make_client(Purpose::Synthesis, args.mock, &corpus)?;
            let reports = pipeline.cmd_synthesize(&variants, &client, args.corpus.as_deref())?;
            for r in &reports {
                println!(
                    "{}: {} new, {} skipped, {} failed -> {}",
                    r.variant,
                    r.requested - r.failed,
                    r.skipped,
                    r.failed,
                    r.path.display()
                );
            }
        }
        Command::BuildSft(args) => {
            let pipeline = load_pipeline(cli.config.as_deref())?;
            let report = pipeline.cmd_build_sft(
                args.ablation,
                args.corpus.as_deref(),
                args.strict_gold,
                args.output.as_deref(),
            )?;
            println!("{} records -> {}", report.written, report.path.display());
            if report.skipped_gold > 0 {
                println!(
                    "skipped {} samples failing the gold check",
                    report.skipped_gold
                );
            }
            println!("{}", report.stats);
        }
        Command::BuildPo(args) => {
            let pipeline = load_pipeline(cli.config.as_deref())?;
            let tags = if args.tags.is_empty() {
                pipeline.config().build.rejected_tags.clone()
            } else {
                args.tags
            };
            let report = pipeline.cmd_build_po(
                &tags,
                args.corpus.as_deref(),
                args.strict_gold,
                args.output.as_deref(),
            )?;
            println!("{} records -> {}", report.written, report.path.display());
            if report.skipped_gold > 0 {
                println!(
                    "skipped {} samples failing the gold check",
                    report.skipped_gold
                );
            }
            println!("{}", report.stats);
        }
        Command::Infer(args) => {
            let pipeline = load_pipeline(cli.config.as_deref())?;
            let schema = args.schema.unwrap_or(pipeline.config().corpus.schema);
            let corpus = longfaith::corpus::load_samples(&args.test_corpus, schema)?;
            let client = pipeline.make_client(Purpose::Inference, args.mock, &corpus)?;
            let (path, written, _) = pipeline.cmd_infer(
                args.style,
                &args.test_corpus,
                args.schema,
                &client,
                args.output.as_deref(),
            )?;
            println!("{written} responses -> {}", path.display());
        }
        Command::Evaluate(args) => {
            let pipeline = load_pipeline(cli.config.as_deref())?;
            let result = pipeline.cmd_evaluate(&args.responses, &args.test_corpus, args.schema)?;
            let agg = &result.report.aggregate;
            println!(
                "items: {}\nEM {:.1}  SubEM {:.1}  F1 {:.1}  Attr-P {:.1}  Attr-R {:.1}  Attr-F1 {:.1}",
                result.report.per_item.len(),
                agg.em,
                agg.subem,
                agg.f1,
                agg.attr_precision,
                agg.attr_recall,
                agg.attr_f1
            );
            match result.fit {
                Some(fit) => println!(
                    "attribution-vs-EM fit: slope {:.4}, intercept {:.4}, r {:.4}",
                    fit.slope, fit.intercept, fit.r
                ),
                None => println!("attribution-vs-EM fit: skipped (attribution F1 is constant)"),
            }
            println!("report -> {}", result.report_path.display());
            println!("points -> {}", result.points_path.display());
        }
        Command::Stats { file } => {
            let (kind, stats) = stats_for_file(&file)?;
            println!("kind: {kind}");
            println!("{stats}");
        }
        Command::Losscheck { beta, step, odds } => {
            let odds = match odds.as_str() {
                "normalized" => OddsKind::LengthNormalized,
                "joint" => OddsKind::Joint,
                other => {
                    return Err(PipelineError::Config(
                        longfaith::config::ConfigError::Invalid(format!(
                            "unknown odds mode {other:?} (expected normalized or joint)"
                        )),
                    ));
                }
            };
            for line in losscheck_lines(beta, step, odds)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
