//! Command-line frontend for the multimodal classifier.
//!
//! Subcommands cover the full loop: `gen-synth` writes a benchmark dataset,
//! `train` fits a model (or a vote ensemble) from a run config, `eval` scores
//! a saved model, `predict` emits per-example outputs, and `export-attention`
//! dumps attention weight matrices with human-readable labels.
//!
//! Exit codes: 0 on success, 1 for usage and input problems, 2 for runtime
//! failures such as divergence. All artifacts are byte-deterministic given
//! identical flags and seeds.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use marmot_core::io::{
    load_dataset, load_model, load_run_config, parse_subnet, save_params, write_attention_traces,
    write_dataset, write_ensemble_manifest, write_metrics_report, write_predictions,
    write_train_report, LoadedModel, PredictionRecord,
};
use marmot_core::metrics::full_report;
use marmot_core::model::{forward_with, predict, DummyContent};
use marmot_core::synth::{gen_synth, SynthSpec};
use marmot_core::train::{deep_ensemble, ensemble_predict, train, TrainError, TrainReport};
use marmot_core::trace::TraceSink;
use marmot_core::{MarmotParams, MultimodalExample, Vocab};

#[derive(Parser)]
#[command(name = "marmot", version, about = "Multimodal binary classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-modal XOR dataset and its vocabulary.
    GenSynth(GenSynthArgs),
    /// Train a model (or an odd-sized ensemble) from a run config.
    Train(TrainArgs),
    /// Score a saved model on a labeled dataset.
    Eval(EvalArgs),
    /// Write per-example predictions for a dataset.
    Predict(PredictArgs),
    /// Export attention weights for chosen examples as labeled matrices.
    ExportAttention(ExportAttentionArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Dataset file to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary file to write.
    #[arg(long)]
    vocab: PathBuf,
    /// Example count, a positive multiple of 4.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    width: usize,
    /// Fraction of examples without an image, in [0, 1).
    #[arg(long, default_value_t = 0.25)]
    text_only_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (model dims, training options, vocab path).
    #[arg(long)]
    config: PathBuf,
    /// Labeled training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Labeled validation dataset, scored once per epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory; falls back to the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Train this many members (odd) and write a vote-ensemble manifest.
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Params file or ensemble manifest.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Labeled dataset to score.
    #[arg(long)]
    data: PathBuf,
    /// Metrics report file to write; stdout gets a summary either way.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct PredictArgs {
    /// Params file or ensemble manifest.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Dataset to predict on; labels may be absent.
    #[arg(long)]
    data: PathBuf,
    /// Predictions file to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct ExportAttentionArgs {
    /// Params file (single model only).
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving one JSON file per subnet, layer, and head.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated example ids; defaults to the first example.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    /// Comma-separated subset of decoder-self, decoder-cross, fusion.
    #[arg(long, value_delimiter = ',')]
    subnets: Vec<String>,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(args) => run_gen_synth(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Predict(args) => run_predict(&args),
        Command::ExportAttention(args) => run_export_attention(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run_gen_synth(args: &GenSynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        n: args.n,
        seed: args.seed,
        channels: args.channels,
        height: args.height,
        width: args.width,
        text_only_fraction: args.text_only_fraction,
    };
    let data = gen_synth(&spec).map_err(usage)?;
    write_dataset(&args.out, &data.records).map_err(runtime)?;
    data.vocab.save(&args.vocab).map_err(runtime)?;
    let multimodal = data
        .records
        .iter()
        .filter(|r| r.image_features.is_some())
        .count();
    println!(
        "wrote {} examples ({} multimodal, {} text-only) to {} and {} words to {}",
        data.records.len(),
        multimodal,
        data.records.len() - multimodal,
        args.out.display(),
        data.vocab.len(),
        args.vocab.display()
    );
    Ok(())
}

/// Load a dataset and surface its warnings on stderr.
fn load_examples(
    path: &Path,
    vocab: &Vocab,
    max_positions: usize,
) -> Result<Vec<MultimodalExample>, CliError> {
    let loaded = load_dataset(path, vocab, max_positions).map_err(usage)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.examples)
}

fn train_error(e: TrainError, out_dir: &Path) -> CliError {
    match e {
        TrainError::Diverged {
            epoch,
            step,
            ref cause,
            ref report,
        } => {
            let path = out_dir.join("train_report.json");
            let note = match write_train_report(&path, report) {
                Ok(()) => format!("partial report written to {}", path.display()),
                Err(w) => format!("partial report could not be written: {w}"),
            };
            CliError::Runtime(format!(
                "training diverged at epoch {epoch}, step {step}: {cause}; {note}"
            ))
        }
        TrainError::NanGradient { .. } | TrainError::Model(_) => runtime(e),
        other => usage(other),
    }
}

fn summarize(report: &TrainReport) -> String {
    let loss = report
        .train_loss
        .last()
        .map_or("n/a".to_string(), |l| format!("{l:.6}"));
    let val = match report.val_accuracy.last() {
        Some(Some(a)) => format!("{a:.4}"),
        _ => "n/a".to_string(),
    };
    format!(
        "{} epochs, final loss {loss}, final val accuracy {val}",
        report.train_loss.len()
    )
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let loaded = load_run_config(&args.config).map_err(usage)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| loaded.config.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Usage("no output directory: pass --out or set out_dir in the config".into())
        })?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;

    let mut train_cfg = loaded.config.train.clone();
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    let max_positions = loaded.model_config.max_positions;
    let train_set = load_examples(&args.data, &loaded.vocab, max_positions)?;
    let val_set = match &args.val {
        Some(path) => load_examples(path, &loaded.vocab, max_positions)?,
        None => Vec::new(),
    };

    match args.ensemble {
        None => {
            let report = train(&train_set, &val_set, &loaded.model_config, &train_cfg)
                .map_err(|e| train_error(e, &out_dir))?;
            save_params(&out_dir.join("params.json"), &report.params).map_err(runtime)?;
            write_train_report(&out_dir.join("train_report.json"), &report).map_err(runtime)?;
            println!("trained: {}", summarize(&report));
        }
        Some(members) => {
            let reports = deep_ensemble(
                &train_set,
                &val_set,
                &loaded.model_config,
                &train_cfg,
                members,
            )
            .map_err(|e| train_error(e, &out_dir))?;
            let mut member_files = Vec::with_capacity(reports.len());
            for (i, report) in reports.iter().enumerate() {
                let params_name = format!("params-member{i}.json");
                save_params(&out_dir.join(&params_name), &report.params).map_err(runtime)?;
                write_train_report(
                    &out_dir.join(format!("train_report-member{i}.json")),
                    report,
                )
                .map_err(runtime)?;
                println!("member {i}: {}", summarize(report));
                member_files.push(params_name);
            }
            write_ensemble_manifest(&out_dir.join("ensemble.json"), &member_files)
                .map_err(runtime)?;
        }
    }
    Ok(())
}

/// Check the separate vocab file against the one the params were trained
/// with; a silent size mismatch would scramble every token lookup.
fn check_vocab(vocab: &Vocab, params: &MarmotParams) -> Result<(), CliError> {
    if vocab.len() != params.config.vocab_size {
        return Err(CliError::Usage(format!(
            "vocab has {} entries but the model was built for {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok(())
}

fn model_predictions(
    model: &LoadedModel,
    examples: &[MultimodalExample],
    threshold: f64,
) -> Result<Vec<PredictionRecord>, CliError> {
    let mut records = Vec::with_capacity(examples.len());
    match model {
        LoadedModel::Single(params) => {
            for e in examples {
                let p = predict(e, params, threshold).map_err(runtime)?;
                records.push(PredictionRecord {
                    id: e.id.clone(),
                    class: p.class,
                    p_positive: p.p_positive,
                });
            }
        }
        LoadedModel::Ensemble(members) => {
            let refs: Vec<&MarmotParams> = members.iter().collect();
            for e in examples {
                let p = ensemble_predict(&refs, e, threshold).map_err(runtime)?;
                records.push(PredictionRecord {
                    id: e.id.clone(),
                    class: p.class,
                    p_positive: p.mean_p_positive,
                });
            }
        }
    }
    Ok(records)
}

fn load_model_and_vocab(
    params_path: &Path,
    vocab_path: &Path,
) -> Result<(LoadedModel, Vocab, usize), CliError> {
    let model = load_model(params_path).map_err(usage)?;
    let vocab = Vocab::load(vocab_path).map_err(usage)?;
    for member in model.members() {
        check_vocab(&vocab, member)?;
    }
    let max_positions = model.members()[0].config.max_positions;
    Ok((model, vocab, max_positions))
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (model, vocab, max_positions) = load_model_and_vocab(&args.params, &args.vocab)?;
    let examples = load_examples(&args.data, &vocab, max_positions)?;
    let labels: Vec<u8> = examples
        .iter()
        .map(|e| {
            e.label.ok_or_else(|| {
                CliError::Usage(format!("{}: eval needs labels on every example", e.id))
            })
        })
        .collect::<Result<_, _>>()?;
    let records = model_predictions(&model, &examples, args.threshold)?;
    let preds: Vec<u8> = records.iter().map(|r| r.class).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.p_positive).collect();
    let report = full_report(&preds, &scores, &labels).map_err(usage)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "n={} accuracy={:.4} macro_f1={} auc={}",
        examples.len(),
        report.accuracy,
        fmt(report.macro_f1),
        fmt(report.auc)
    );
    if let Some(out) = &args.out {
        write_metrics_report(out, &report).map_err(runtime)?;
    }
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<(), CliError> {
    let (model, vocab, max_positions) = load_model_and_vocab(&args.params, &args.vocab)?;
    let examples = load_examples(&args.data, &vocab, max_positions)?;
    let records = model_predictions(&model, &examples, args.threshold)?;
    write_predictions(&args.out, &records).map_err(runtime)?;
    println!("wrote {} predictions to {}", records.len(), args.out.display());
    Ok(())
}

fn run_export_attention(args: &ExportAttentionArgs) -> Result<(), CliError> {
    let (model, vocab, max_positions) = load_model_and_vocab(&args.params, &args.vocab)?;
    let params = match &model {
        LoadedModel::Single(p) => p.as_ref(),
        LoadedModel::Ensemble(_) => {
            return Err(CliError::Usage(
                "export-attention takes a single params file, not an ensemble manifest".into(),
            ))
        }
    };
    let subnets = args
        .subnets
        .iter()
        .map(|s| {
            parse_subnet(s).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown subnet {s:?}; use decoder-self, decoder-cross, or fusion"
                ))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let examples = load_examples(&args.data, &vocab, max_positions)?;
    let chosen: Vec<&MultimodalExample> = if args.ids.is_empty() {
        examples.first().into_iter().collect()
    } else {
        args.ids
            .iter()
            .map(|id| {
                examples.iter().find(|e| &e.id == id).ok_or_else(|| {
                    CliError::Usage(format!("id {id:?} is not in the dataset"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    if chosen.is_empty() {
        return Err(CliError::Usage("the dataset has no examples to trace".into()));
    }
    let dummy = DummyContent::default_for(&params.config);
    let mut total = 0;
    for example in chosen {
        let mut sink = TraceSink::new();
        let out = forward_with(example, params, &dummy, Some(&mut sink)).map_err(runtime)?;
        let records: Vec<_> = sink
            .records
            .into_iter()
            .filter(|r| subnets.is_empty() || subnets.contains(&r.subnet))
            .collect();
        let files = write_attention_traces(&args.out, &example.id, &out.layout, &records, &vocab)
            .map_err(runtime)?;
        total += files.len();
    }
    println!("wrote {total} attention files to {}", args.out.display());
    Ok(())
}
