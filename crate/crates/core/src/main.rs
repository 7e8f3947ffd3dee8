//! Command-line front end: featurize raw logs, run the online detector or a
//! baseline over feature streams, evaluate score files against labels,
//! generate synthetic data, and spot-check gradients.

use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use daywatch::baselines::{BaselineConfig, BaselineKind, BaselineStream};
use daywatch::density::write_jsonl_line;
use daywatch::eval::{evaluate_stream, rank_days, write_daily_bands, LabelSet};
use daywatch::features::{
    read_feature_csv, write_feature_csv, Aggregator, FeatureSchema, UserDayVector,
};
use daywatch::ingest::{
    source_from_path, weekday_filter, ErrorMode, EventStream, IngestOptions, Source,
};
use daywatch::manifest::RunManifest;
use daywatch::model::{gradcheck, Covariance, Encoder, Model, ModelConfig, TargetMode};
use daywatch::synth::{emit_raw_logs, generate, SynthConfig};
use daywatch::trainer::Trainer;

#[derive(Parser)]
#[command(name = "daywatch", version, about = "streaming per-user anomaly detection over activity logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate raw CSV logs into per-user per-day feature vectors
    Featurize(FeaturizeArgs),
    /// Score a feature stream with the online model, training as it goes
    Detect(DetectArgs),
    /// Score a feature stream with a non-neural reference detector
    Baseline(BaselineArgs),
    /// Evaluate a score stream against labeled user-days
    Evaluate(EvaluateArgs),
    /// Generate synthetic feature streams (and optionally raw logs)
    Synth(SynthArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct FeaturizeArgs {
    /// raw log CSV files (source inferred from file name)
    #[arg(long, required = true, num_args = 1..)]
    logs: Vec<PathBuf>,
    /// user attribute directory CSV
    #[arg(long)]
    directory: PathBuf,
    /// feature schema JSON; defaults to the built-in full taxonomy
    #[arg(long)]
    schema: Option<PathBuf>,
    /// newline-separated list of decoy filenames
    #[arg(long)]
    decoys: Option<PathBuf>,
    /// drop Saturday/Sunday events
    #[arg(long)]
    weekdays_only: bool,
    /// abort on the first malformed record instead of skipping
    #[arg(long)]
    strict: bool,
    /// output feature CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Dnn,
    Lstm,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Identity,
    Diag,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetModeArg {
    Same,
    Next,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "dnn")]
    encoder: EncoderArg,
    #[arg(long, value_enum, default_value = "diag")]
    covariance: CovarianceArg,
    #[arg(long, value_enum, default_value = "same")]
    target_mode: TargetModeArg,
    /// feed (and model) the categorical attributes
    #[arg(long, value_enum, default_value = "off")]
    categoricals: Toggle,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 10)]
    bptt_window: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.25)]
    embedding_ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ModelArgs {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: match self.encoder {
                EncoderArg::Dnn => Encoder::Dnn,
                EncoderArg::Lstm => Encoder::Lstm,
            },
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            target_mode: match self.target_mode {
                TargetModeArg::Same => TargetMode::SameTimeStep,
                TargetModeArg::Next => TargetMode::NextTimeStep,
            },
            covariance: match self.covariance {
                CovarianceArg::Identity => Covariance::Identity,
                CovarianceArg::Diag => Covariance::Diagonal,
            },
            include_categoricals: matches!(self.categoricals, Toggle::On),
            embedding_ratio: self.embedding_ratio,
            bptt_window: self.bptt_window,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// feature CSV produced by `featurize` or `synth`
    #[arg(long)]
    features: PathBuf,
    /// the schema the features were built with
    #[arg(long)]
    schema: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// score without updating weights
    #[arg(long)]
    score_only: bool,
    /// resume from a checkpoint written by a previous run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// write a checkpoint here when the stream ends
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// output scores JSONL
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, value_enum, default_value = "pca")]
    baseline: BaselineKindArg,
    #[arg(long, default_value_t = 10)]
    components: usize,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 256)]
    subsample: usize,
    #[arg(long, default_value_t = 60)]
    window_days: i64,
    #[arg(long, default_value_t = 10)]
    refit_every: i64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKindArg {
    Pca,
    Iforest,
}

#[derive(Args)]
struct EvaluateArgs {
    /// scores JSONL from `detect` or `baseline`
    #[arg(long)]
    scores: PathBuf,
    /// labeled anomalous user-days (CSV: user,day)
    #[arg(long)]
    labels: PathBuf,
    /// largest daily budget for the cumulative recall curve
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// JSON report output
    #[arg(long)]
    out: PathBuf,
    /// optional per-day score distribution CSV
    #[arg(long)]
    daily_bands: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 120)]
    days: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    injections: usize,
    #[arg(long, default_value_t = 8.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 30)]
    burn_in: usize,
    /// also emit raw CERT-style CSV logs
    #[arg(long)]
    raw: bool,
    /// output directory (features.csv, labels.csv, schema.json, manifest.json)
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 6)]
    count_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn load_days(features: &PathBuf, schema: &FeatureSchema) -> Result<Vec<(i64, Vec<UserDayVector>)>> {
    let file = std::fs::File::open(features).with_context(|| format!("open {}", features.display()))?;
    read_feature_csv(BufReader::new(file), schema.count_dim())
        .map_err(|e| anyhow::anyhow!("{}: {e}", features.display()))
}

fn run_featurize(args: &FeaturizeArgs) -> Result<()> {
    let schema = match &args.schema {
        Some(path) => FeatureSchema::load(path)?,
        None => FeatureSchema::enterprise_default(),
    };
    let mut options = IngestOptions {
        error_mode: if args.strict { ErrorMode::Abort } else { ErrorMode::Skip },
        ..Default::default()
    };
    if let Some(path) = &args.decoys {
        let text = std::fs::read_to_string(path)?;
        options.decoy_files = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    }
    let mut files: Vec<(Source, PathBuf)> = Vec::new();
    for path in &args.logs {
        let source = source_from_path(path)
            .with_context(|| format!("cannot infer source from file name {}", path.display()))?;
        files.push((source, path.clone()));
    }

    let mut manifest = RunManifest::new("featurize", serde_json::json!({
        "weekdays_only": args.weekdays_only,
        "strict": args.strict,
    }));
    manifest.schema_digest = Some(schema.digest());
    for (_, path) in &files {
        manifest.add_input(path)?;
    }
    manifest.add_input(&args.directory)?;

    let stream = EventStream::open(&files, &args.directory, options)?;
    let mut days = Vec::new();
    let mut agg = Aggregator::new(schema.clone());
    let mut feed = |item: Result<daywatch::ingest::EventRecord, daywatch::ingest::IngestError>| -> Result<()> {
        let event = item?;
        if let Some(day) = agg.push(&event) {
            days.push(day);
        }
        Ok(())
    };
    if args.weekdays_only {
        for item in weekday_filter(stream) {
            feed(item)?;
        }
    } else {
        for item in stream {
            feed(item)?;
        }
    }
    if let Some(day) = agg.finish() {
        days.push(day);
    }

    let out = std::fs::File::create(&args.out)?;
    write_feature_csv(BufWriter::new(out), &schema, &days)?;
    manifest.write(&args.out.with_extension("manifest.json"))?;
    eprintln!(
        "featurize: {} events ({} classified), {} days, {} vectors",
        agg.total_events,
        agg.classified_events,
        days.len(),
        days.iter().map(|(_, v)| v.len()).sum::<usize>()
    );
    Ok(())
}

fn run_detect(args: &DetectArgs) -> Result<()> {
    let schema = FeatureSchema::load(&args.schema)?;
    let digest = schema.digest();
    let config = args.model.to_config();
    for warning in config.range_warnings() {
        eprintln!("warning: {warning}");
    }
    let cat_cards: Vec<usize> = if config.include_categoricals {
        schema.categorical_specs.iter().map(|c| c.cardinality).collect()
    } else {
        Vec::new()
    };
    let mut trainer = match &args.resume {
        Some(path) => Trainer::restore(path, &digest, Some(schema.clone()))
            .with_context(|| format!("restore {}", path.display()))?,
        None => Trainer::new(Model::new(config.clone(), schema.count_dim(), cat_cards), Some(schema.clone())),
    };
    trainer.score_only = args.score_only;

    let mut manifest = RunManifest::new("detect", serde_json::to_value(&config)?);
    manifest.seed = Some(config.seed);
    manifest.schema_digest = Some(digest.clone());
    manifest.add_input(&args.features)?;

    let days = load_days(&args.features, &schema)?;
    let out = std::fs::File::create(&args.out)?;
    let mut out = BufWriter::new(out);
    for (day, vectors) in &days {
        for line in trainer.process_day(*day, vectors)? {
            write_jsonl_line(&mut out, &line)?;
        }
    }
    out.flush()?;
    if let Some(path) = &args.checkpoint {
        trainer.checkpoint(&digest, path)?;
    }
    manifest.write(&args.out.with_extension("manifest.json"))?;
    eprintln!(
        "detect: {} samples, {} updates, {} skipped, peak users {}",
        trainer.stats.samples, trainer.stats.updates, trainer.stats.skipped_samples, trainer.stats.peak_store_size
    );
    Ok(())
}

fn run_baseline(args: &BaselineArgs) -> Result<()> {
    let schema = FeatureSchema::load(&args.schema)?;
    let config = BaselineConfig {
        kind: match args.baseline {
            BaselineKindArg::Pca => BaselineKind::Pca,
            BaselineKindArg::Iforest => BaselineKind::IsolationForest,
        },
        window_days: args.window_days,
        refit_every: args.refit_every,
        components: args.components,
        n_trees: args.trees,
        subsample: args.subsample,
        seed: args.seed,
    };
    let mut manifest = RunManifest::new("baseline", serde_json::to_value(&config)?);
    manifest.seed = Some(config.seed);
    manifest.schema_digest = Some(schema.digest());
    manifest.add_input(&args.features)?;

    let days = load_days(&args.features, &schema)?;
    let mut stream = BaselineStream::new(config);
    let out = std::fs::File::create(&args.out)?;
    let mut out = BufWriter::new(out);
    for (day, vectors) in &days {
        for line in stream.process_day(*day, vectors)? {
            write_jsonl_line(&mut out, &line)?;
        }
    }
    out.flush()?;
    manifest.write(&args.out.with_extension("manifest.json"))?;
    eprintln!("baseline: {} days, {} refits", stream.days_seen, stream.refits);
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let file = std::fs::File::open(&args.scores)?;
    let lines = daywatch::density::read_jsonl(BufReader::new(file))
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.scores.display()))?;
    let labels = LabelSet::load(&args.labels)?;
    if labels.is_empty() {
        bail!("label file {} has no rows", args.labels.display());
    }
    let report = evaluate_stream(&lines, &labels, args.k)?;
    if !report.unmatched_labels.is_empty() {
        eprintln!("warning: {} labels never appear in the score stream", report.unmatched_labels.len());
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(path) = &args.daily_bands {
        let ranked = rank_days(&lines)?;
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_daily_bands(&mut w, &ranked)?;
        w.flush()?;
    }
    println!(
        "evaluate: {} scored user-days over {} days, CR-{} = {:.3}",
        report.n_scored,
        report.n_days,
        args.k,
        report.curve.cr
    );
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_users: args.users,
        n_days: args.days,
        seed: args.seed,
        n_injections: args.injections,
        injection_magnitude: args.magnitude,
        burn_in_days: args.burn_in,
        ..Default::default()
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let out = generate(&config);
    out.schema.save(&args.out_dir.join("schema.json"))?;
    out.labels.save(&args.out_dir.join("labels.csv"))?;
    let features = std::fs::File::create(args.out_dir.join("features.csv"))?;
    write_feature_csv(BufWriter::new(features), &out.schema, &out.days)?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&config)?);
    manifest.seed = Some(config.seed);
    manifest.schema_digest = Some(out.schema.digest());
    manifest.write(&args.out_dir.join("manifest.json"))?;
    if args.raw {
        let summary = emit_raw_logs(&out, &config, &args.out_dir.join("raw"))?;
        println!("{summary}");
    } else {
        println!("users: {}  days: {}  injections: {}", config.n_users, config.n_days, out.labels.len());
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut config = args.model.to_config();
    config.layers = config.layers.min(2);
    config.hidden_dim = config.hidden_dim.min(8);
    let cat_cards: Vec<usize> = if config.include_categoricals { vec![3, 4] } else { vec![] };
    let report = gradcheck(&config, args.count_dim, &cat_cards, config.seed);
    for block in &report.blocks {
        println!("{:<20} max rel err {:.3e}", block.name, block.max_rel_err);
    }
    println!("overall max rel err {:.3e} (tolerance {:.1e})", report.max_rel_err, args.tolerance);
    if !report.passes(args.tolerance) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Featurize(args) => run_featurize(args),
        Command::Detect(args) => run_detect(args),
        Command::Baseline(args) => run_baseline(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Synth(args) => run_synth(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
