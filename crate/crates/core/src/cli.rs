//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{self, emit_report, ReportFormat};
use crate::error::{Error, Result};
use crate::expansion::{
    build_mapping, count_parameters, count_parameters_in, expand_model, parameter_fraction, AdjustConfig, AdjustKind,
    ExpandOptions, MappingKind, ParamScope,
};
use crate::io::checkpoint::{backbone_checksum, load_checkpoint, save_checkpoint, save_loaded, LoadedModel};
use crate::io::config::{parse_subset, target_depth, ExperimentConfig, DEFAULT_RANK};
use crate::io::dataset::{generate_split, DatasetSpec, Split};
use crate::io::write_atomic;
use crate::training::{train, Policy};
use crate::vit::init_model;

#[derive(Debug, Parser)]
#[command(name = "vitexpand", version, about = "Depth-wise expansion of vision transformers with shared layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a base model from scratch on synthetic data.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Grow a checkpoint to a deeper model.
    Expand(ExpandArgs),
    /// Fine-tune a checkpoint.
    Finetune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        report: PathBuf,
        /// Where to write the fine-tuned checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient norms, CKA or activation histograms.
    Analyze(AnalyzeArgs),
    /// Parameter accounting.
    Report {
        #[command(subcommand)]
        what: ReportCommand,
    },
}

#[derive(Debug, Args)]
struct ExpandArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Depth multiplier; the new depth is round(scale·L).
    #[arg(long)]
    scale: f64,
    /// Deep-copy mapped layers instead of sharing them.
    #[arg(long)]
    no_share: bool,
    #[arg(long, value_enum)]
    adjust: Option<AdjustArg>,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    /// Inclusive layer range `a..b` allowed to be duplicated.
    #[arg(long)]
    subset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: AnalysisKind,
    #[arg(long = "in")]
    input: PathBuf,
    /// Second model for CKA; defaults to the input model.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    /// Experiment config supplying the probe data and analysis settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prefix of the output file name.
    #[arg(long, default_value = "analysis")]
    id: String,
}

#[derive(Debug, Subcommand)]
enum ReportCommand {
    /// Unique vs total parameter counts and the block-linear fraction.
    Params {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Identity,
    Stack,
    Interpolate,
    Cyclic,
    Random,
    Swa,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdjustArg {
    Lora,
    Adapter,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    AdjustmentOnly,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Grad,
    Cka,
    Hist,
}

impl From<StrategyArg> for MappingKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Identity => MappingKind::Identity,
            StrategyArg::Stack => MappingKind::Stack,
            StrategyArg::Interpolate => MappingKind::Interpolate,
            StrategyArg::Cyclic => MappingKind::Cyclic,
            StrategyArg::Random => MappingKind::RandomInit,
            StrategyArg::Swa => MappingKind::Swa,
        }
    }
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Svg => ReportFormat::Svg,
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn cli_run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    cli_run(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Pretrain { config, out: path, report } => pretrain(&config, &path, report.as_deref(), out),
        Command::Expand(args) => expand(args, out),
        Command::Finetune {
            input,
            config,
            policy,
            report,
            out: path,
        } => finetune(&input, &config, policy, &report, path.as_deref(), out),
        Command::Analyze(args) => analyze(args, out),
        Command::Report {
            what: ReportCommand::Params { input },
        } => report_params(&input, out),
    }
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn pretrain(config: &Path, path: &Path, report: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut model = init_model::<f32>(&cfg.model, cfg.training.seed)?;
    let train_set = generate_split(&cfg.dataset, Split::Train, cfg.dataset.train_samples)?;
    let eval_set = generate_split(&cfg.dataset, Split::Eval, cfg.dataset.eval_samples)?;
    let training = crate::training::TrainConfig {
        policy: Policy::AllParameters,
        ..cfg.training.clone()
    };
    let result = train(&mut model, &train_set, Some(&eval_set), &training)?;
    if let Some(report) = report {
        write_atomic(report, result.to_json_lines().as_bytes())?;
    }
    save_checkpoint(&model, None, path)?;
    if let Some(last) = result.epochs.last() {
        say(
            out,
            format!("trained {} epochs: train acc {:.4}, eval acc {:.4}", last.epoch, last.train_acc, last.eval_acc.unwrap_or(f64::NAN)),
        )?;
    }
    say(out, format!("wrote {}", path.display()))
}

fn expand(args: ExpandArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load_checkpoint::<f32>(&args.input)?;
    let base = loaded.model();
    let depth = target_depth(args.scale, base.depth())?;
    let mapping = build_mapping(args.strategy.into(), base.depth(), depth)?;
    let options = ExpandOptions {
        share: !args.no_share,
        adjust: args.adjust.map(|a| AdjustConfig {
            kind: match a {
                AdjustArg::Lora => AdjustKind::Lora,
                AdjustArg::Adapter => AdjustKind::ParallelAdapter,
            },
            rank: args.rank,
        }),
        subset: args.subset.as_deref().map(parse_subset).transpose()?,
        seed: args.seed,
    };
    let expanded = expand_model(base, &mapping, &options)?;
    save_loaded(&LoadedModel::Expanded(expanded.clone()), &args.out)?;
    say(out, format!("mapping {}", expanded.info.mapping.to_json()))?;
    say(
        out,
        format!(
            "{} layers, {} unique parameters, wrote {}",
            expanded.model.depth(),
            count_parameters(&expanded.model, true),
            args.out.display()
        ),
    )
}

fn finetune(
    input: &Path,
    config: &Path,
    policy: PolicyArg,
    report: &Path,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut loaded = load_checkpoint::<f32>(input)?;
    let training = crate::training::TrainConfig {
        policy: match policy {
            PolicyArg::AdjustmentOnly => Policy::AdjustmentOnly,
            PolicyArg::All => Policy::AllParameters,
        },
        ..cfg.training.clone()
    };
    let train_set = generate_split(&cfg.dataset, Split::Train, cfg.dataset.train_samples)?;
    let eval_set = generate_split(&cfg.dataset, Split::Eval, cfg.dataset.eval_samples)?;
    say(out, format!("backbone checksum before: {}", backbone_checksum(loaded.model())))?;
    let result = train(loaded.model_mut(), &train_set, Some(&eval_set), &training)?;
    say(out, format!("backbone checksum after:  {}", backbone_checksum(loaded.model())))?;
    write_atomic(report, result.to_json_lines().as_bytes())?;
    if let Some(last) = result.epochs.last() {
        say(
            out,
            format!("epoch {}: train acc {:.4}, eval acc {:.4}", last.epoch, last.train_acc, last.eval_acc.unwrap_or(f64::NAN)),
        )?;
    }
    if let Some(path) = path {
        save_loaded(&loaded, path)?;
        say(out, format!("wrote {}", path.display()))?;
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint::<f64>(&args.input)?.into_model();
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.dataset = DatasetSpec {
                classes: model.config.classes,
                channels: model.config.channels,
                image_size: model.config.image_size,
                ..DatasetSpec::default()
            };
            cfg
        }
    };
    let samples = cfg.analysis.probe_samples.max(cfg.dataset.classes);
    let probe = generate_split::<f64>(&cfg.dataset, Split::Probe, samples)?;
    let format = ReportFormat::from(args.format);
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let name = |kind: &str| args.out.join(format!("{}_{kind}.{}", args.id, format.extension()));
    let path = match args.kind {
        AnalysisKind::Grad => {
            let profile = analysis::grad_norm_profile(&model, &probe.images, &probe.labels)?;
            let path = name("grad");
            emit_report(&profile, &path, format)?;
            path
        }
        AnalysisKind::Cka => {
            let reference = match &args.reference {
                Some(path) => load_checkpoint::<f64>(path)?.into_model(),
                None => model.clone(),
            };
            let matrix = analysis::cka_matrix(&model, &reference, &probe.images)?;
            let path = name("cka");
            emit_report(&matrix, &path, format)?;
            let diagonal: Vec<String> = (0..matrix.rows.len().min(matrix.cols.len()))
                .map(|i| format!("{:.6}", matrix.values[i][i]))
                .collect();
            say(out, format!("cka diagonal: {}", diagonal.join(" ")))?;
            path
        }
        AnalysisKind::Hist => {
            let layers = analysis::uniform_layers(model.depth(), cfg.analysis.histogram_layers);
            let set = analysis::activation_histograms(&model, &probe.images, &layers, cfg.analysis.bins, cfg.analysis.range)?;
            let path = name("hist");
            emit_report(&set, &path, format)?;
            path
        }
    };
    say(out, format!("wrote {}", path.display()))
}

fn report_params(input: &Path, out: &mut dyn Write) -> Result<()> {
    let loaded = load_checkpoint::<f32>(input)?;
    let model = loaded.model();
    let unique = count_parameters(model, true);
    let total = count_parameters(model, false);
    say(out, format!("unique parameters: {unique}"))?;
    say(out, format!("total parameters: {total}"))?;
    say(out, format!("unique/total: {:.6}", unique as f64 / total as f64))?;

    let counted = count_parameters_in(model, true, ParamScope::AdjustedLinears);
    let unshared = count_parameters_in(model, false, ParamScope::MlpWeights);
    say(
        out,
        format!(
            "block-linear fraction (counted): {counted}/{unshared} = {:.6}",
            counted as f64 / unshared as f64
        ),
    )?;
    let base_depth = loaded.expansion().map_or(model.depth(), |i| i.mapping.base_depth);
    let rank = loaded.expansion().and_then(|i| i.adjust).map_or(0, |a| a.rank);
    let d = model.config.dim;
    say(
        out,
        format!(
            "block-linear fraction (closed form, L={base_depth}, n=2, d={d}, r={rank}): {:.6}",
            parameter_fraction(base_depth as u64, 2, d as u64, rank as u64)
        ),
    )?;
    if model.config.hidden_dim() != d {
        say(out, "note: the closed form assumes square d×d MLP linears (mlp_ratio 1)")?;
    }
    Ok(())
}
