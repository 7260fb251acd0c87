//! The `asiseg` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use asiseg_core::audio::PerturbKind;
use asiseg_core::decoder::threshold;
use asiseg_core::knowledge::DescriptionBank;
use asiseg_core::model::{Model, ModelConfig, SegmentInputs, Variant};
use asiseg_core::prompt::BackgroundSource;
use asiseg_core::synth::SynthConfig;

use crate::checkpoint::{self, Seeds};
use crate::dataset::{self, CommandCondition, Dataset};
use crate::error::{AppError, AppResult};
use crate::eval::{self, MASK_THRESHOLD};
use crate::formats::{self, MetricsJson};
use crate::io;
use crate::train::{self, TrainConfig};

pub const DATA_ENV: &str = "ASISEG_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "asiseg", version, about = "Audio-driven intention-oriented instrument segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenData(GenDataArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Segment the instrument named by an audio command.
    Segment(SegmentArgs),
    /// Recognize the instrument named by an audio command.
    Intent(IntentArgs),
    /// Description bank utilities.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, env = DATA_ENV)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n_train: usize,
    #[arg(long, default_value_t = 60)]
    pub n_val: usize,
    #[arg(long, default_value_t = 7)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_instruments: usize,
    #[arg(long, default_value_t = 0.03)]
    pub noise_level: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoBank,
    NoContrastive,
    Baseline,
}

impl VariantArg {
    pub fn variant(self, raw_background: bool) -> Variant {
        let (use_bank, contrastive) = match self {
            VariantArg::Full => (true, true),
            VariantArg::NoBank => (false, true),
            VariantArg::NoContrastive => (true, false),
            VariantArg::Baseline => (false, false),
        };
        Variant {
            use_bank,
            contrastive,
            background: if raw_background {
                BackgroundSource::Raw
            } else {
                BackgroundSource::Refined
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Defaults to `<data>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training log (JSON lines); defaults to `<data>/train_log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    /// Description bank JSON; the built-in bank when omitted.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::Full)]
    pub variant: VariantArg,
    /// Use unrefined irrelevant features as background prompts.
    #[arg(long)]
    pub raw_background: bool,
    /// Absent classes per frame and epoch trained towards an empty mask.
    #[arg(long, default_value_t = 1)]
    pub absent_per_frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Intention,
    Semantic,
    Robustness,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Defaults to `<data>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Frame-id list of an EndoVis-style split; overrides `--split`.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Mispronunciation level of synthesized commands.
    #[arg(long, default_value_t = 0.0)]
    pub mispronounce: f64,
    /// `kind:magnitude`, e.g. `noise:0.1`.
    #[arg(long, value_parser = parse_perturb)]
    pub perturb: Option<(PerturbKind, f64)>,
    /// Robustness mode: comma-separated kinds.
    #[arg(long, value_delimiter = ',', default_value = "noise,time_warp,segment_swap")]
    pub kinds: Vec<String>,
    /// Robustness mode: comma-separated magnitudes.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3")]
    pub magnitudes: Vec<f64>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

fn parse_perturb(s: &str) -> Result<(PerturbKind, f64), String> {
    let (k, m) = s.split_once(':').ok_or("expected kind:magnitude")?;
    let kind = k.parse::<PerturbKind>().map_err(|e| e.to_string())?;
    let m = m.parse::<f64>().map_err(|e| e.to_string())?;
    Ok((kind, m))
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reject checkpoints with a different class count.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IntentArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Check a bank file against the schema.
    Validate {
        path: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Print the built-in bank.
    Default,
}

fn default_checkpoint(data: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| data.join("model.ckpt"))
}

fn print_line(out: &mut dyn Write, line: &str) -> AppResult<()> {
    writeln!(out, "{line}").map_err(|e| AppError::io(Path::new("<stdout>"), e))
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> AppResult<()> {
    let cfg = SynthConfig {
        num_classes: a.num_classes,
        image_size: a.image_size,
        n_train: a.n_train,
        n_val: a.n_val,
        max_instruments_per_frame: a.max_instruments,
        noise_level: a.noise_level,
        seed: a.seed,
    };
    let manifests = dataset::generate_dataset(&cfg, &a.out)?;
    let summary: Vec<_> = manifests
        .iter()
        .map(|m| json!({"split": m.split, "frames": m.ids.len(), "checksum": m.checksum}))
        .collect();
    print_line(out, &json!({"root": a.out, "splits": summary}).to_string())
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> AppResult<()> {
    let ds = dataset::load_dataset(&a.data, "train")?;
    let bank = match &a.bank {
        Some(p) => formats::read_bank(p, Some(ds.num_classes))?,
        None if ds.num_classes == 7 => DescriptionBank::default_instruments(),
        None => {
            return Err(asiseg_core::Error::Config(format!(
                "the built-in bank has 7 classes, the dataset {}; pass --bank",
                ds.num_classes
            ))
            .into())
        }
    };
    let config = ModelConfig {
        num_classes: ds.num_classes,
        variant: a.variant.variant(a.raw_background),
        ..ModelConfig::default()
    };
    let mut model = Model::new(config, bank, a.model_seed)?;
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        tau: a.tau,
        seed: a.seed,
        freeze_encoders: true,
        absent_per_frame: a.absent_per_frame,
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.data.join("train_log.jsonl"));
    let mut log = fs::File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?;
    let mut write_err = None;
    train::train(&mut model, &ds, &tc, |e| {
        let line = serde_json::to_string(e).expect("log serializes");
        if let Err(err) = writeln!(log, "{line}").and_then(|_| writeln!(out, "{line}")) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(AppError::io(&log_path, e));
    }
    let ckpt = default_checkpoint(&a.data, &a.checkpoint);
    let data_seed = read_data_seed(&a.data);
    checkpoint::save(
        &ckpt,
        &model,
        Seeds {
            model: a.model_seed,
            train: a.seed,
            data: data_seed,
        },
    )
}

fn read_data_seed(root: &Path) -> u64 {
    fs::read_to_string(root.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<dataset::SynthConfigFile>(&t).ok())
        .map_or(0, |c| c.seed)
}

fn eval_dataset(a: &EvalArgs) -> AppResult<Dataset> {
    let ds = match &a.split_file {
        Some(f) => dataset::load_endovis(&a.data, f)?,
        None => dataset::load_dataset(&a.data, &a.split)?,
    };
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> AppResult<()> {
    let ds = eval_dataset(a)?;
    let (model, _) = checkpoint::load(&default_checkpoint(&a.data, &a.checkpoint), Some(ds.num_classes))?;
    let names = model.class_names();
    let report = match a.mode {
        EvalMode::Intention => {
            let cond = CommandCondition {
                mispronounce: a.mispronounce,
                perturb: a.perturb,
            };
            let r = eval::evaluate_intention(&model, &ds, &cond)?;
            MetricsJson::new("intention", &r.report, Some(r.intent_accuracy))
        }
        EvalMode::Semantic => MetricsJson::new("semantic", &eval::evaluate_semantic(&model, &ds)?, None),
        EvalMode::Robustness => {
            let kinds = a
                .kinds
                .iter()
                .map(|k| k.parse::<PerturbKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = eval::robustness_sweep(&model, &ds, &kinds, &a.magnitudes)?;
            let text = match a.format {
                OutputFormat::Json => serde_json::to_string(&rows).expect("rows serialize"),
                OutputFormat::Table => {
                    let mut t = format!("{:<14}{:>10}{:>12}{:>10}\n", "kind", "magnitude", "accuracy", "mc_iou");
                    for r in &rows {
                        t += &format!(
                            "{:<14}{:>10.3}{:>12.4}{:>10.4}\n",
                            r.kind, r.magnitude, r.intent_accuracy, r.mc_iou
                        );
                    }
                    t.trim_end().to_string()
                }
            };
            return print_line(out, &text);
        }
    };
    match a.format {
        OutputFormat::Json => print_line(out, &report.to_json()),
        OutputFormat::Table => print_line(out, report.to_table(&names).trim_end()),
    }
}

fn run_segment(a: &SegmentArgs, out: &mut dyn Write) -> AppResult<()> {
    let (model, _) = checkpoint::load(&a.checkpoint, a.classes)?;
    let image = io::read_image(&a.image)?;
    let clip = io::read_wav(&a.audio)?;
    let intent = model.recognize_intent(&clip)?;
    let features = model.encode_image(&image)?;
    let logits = model.segment(&SegmentInputs {
        features: &features,
        image: &image,
        text: &model.text_features()?,
        target: intent.class_index,
    })?;
    let mask = threshold(&logits, MASK_THRESHOLD);
    io::write_mask_png(&a.out, &mask)?;
    print_line(
        out,
        &json!({
            "class_index": intent.class_index,
            "class_name": intent.class_name,
            "probabilities": intent.probabilities,
            "mask": a.out,
            "foreground_pixels": mask.count(),
        })
        .to_string(),
    )
}

fn run_intent(a: &IntentArgs, out: &mut dyn Write) -> AppResult<()> {
    let (model, _) = checkpoint::load(&a.checkpoint, a.classes)?;
    let intent = model.recognize_intent(&io::read_wav(&a.audio)?)?;
    print_line(
        out,
        &json!({
            "class_index": intent.class_index,
            "class_name": intent.class_name,
            "probabilities": intent.probabilities,
        })
        .to_string(),
    )
}

fn run_bank(c: &BankCommand, out: &mut dyn Write) -> AppResult<()> {
    match c {
        BankCommand::Validate { path, classes } => {
            let bank = formats::read_bank(path, *classes)?;
            print_line(
                out,
                &json!({"valid": true, "classes": bank.num_classes(), "names": bank.class_names()}).to_string(),
            )
        }
        BankCommand::Default => print_line(out, &formats::bank_json(&DescriptionBank::default_instruments())),
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> AppResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => run_train(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Segment(a) => run_segment(a, out),
        Command::Intent(a) => run_intent(a, out),
        Command::Bank { command } => run_bank(command, out),
    }
}

/// One-line JSON error for stderr.
pub fn error_line(e: &AppError) -> String {
    json!({"error": e.kind(), "message": e.to_string()}).to_string()
}

/// Parses `argv`, runs the command, and returns the process exit code:
/// `0` success, `2` usage error, `1` any other failure.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
