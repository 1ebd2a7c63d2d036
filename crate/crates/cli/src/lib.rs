//! Library side of the `focusgate` binary: argument parsing, command
//! dispatch and exit-code mapping.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use focusgate::Error;

mod commands;

pub use commands::{resolve_layers, select_stage, LayerPlan, Method};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NO_FOCUS: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_INTERNAL: i32 = 70;

#[derive(Debug, Parser)]
#[command(name = "focusgate", version, about = "Attention phase analysis and DPP token masking for vision-language models")]
pub struct Cli {
    /// Reject traces whose rows do not sum to 1 within tolerance.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Seed for anything randomized (synth specs without their own seed).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer concentration profile and focus window of a vision trace.
    Phases(PhasesArgs),
    /// Diverse token selection and the mask for the target layers.
    Select(SelectArgs),
    /// Visual attention ratio of two conditions and their comparison.
    Var(VarArgs),
    /// Caption hallucination metrics.
    Metrics(MetricsArgs),
    /// Generate synthetic traces from a spec file.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone)]
pub struct PhaseFlags {
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long = "baseline-frac", default_value_t = 0.25)]
    pub baseline_frac: f64,
    /// Focus window as a fraction of depth, or `auto`.
    #[arg(long = "window-frac", default_value = "0.30")]
    pub window_frac: String,
}

#[derive(Debug, Args)]
pub struct PhasesArgs {
    pub trace: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub phase: PhaseFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mask,
    InverseMask,
    LogitShift,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Vision attention trace covering the source layers (full storage).
    pub trace: PathBuf,
    /// Patch feature dump.
    pub features: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    /// Bundled model profile; defaults to the trace's model_id when bundled.
    #[arg(long)]
    pub model: Option<String>,
    /// Masking ratio: fraction of patch tokens suppressed.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Read --ratio as the fraction retained instead.
    #[arg(long = "ratio-means-retained")]
    pub ratio_means_retained: bool,
    #[arg(long = "source-layers", value_delimiter = ',')]
    pub source_layers: Option<Vec<usize>>,
    #[arg(long = "feature-layer")]
    pub feature_layer: Option<usize>,
    #[arg(long = "target-layers", value_delimiter = ',')]
    pub target_layers: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "dpp")]
    pub method: Method,
    #[arg(long, value_enum, default_value = "mask")]
    pub mode: ModeArg,
    /// Logit shift for `--mode logit-shift`.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    #[arg(long = "jitter-rel", default_value_t = focusgate::dpp::DEFAULT_JITTER_REL)]
    pub jitter_rel: f64,
    #[arg(long = "gain-tol", default_value_t = focusgate::dpp::DEFAULT_GAIN_TOL)]
    pub gain_tol: f64,
    /// Phase settings used when layers fall back to detected phases.
    #[command(flatten)]
    pub phase: PhaseFlags,
}

#[derive(Debug, Args)]
pub struct VarArgs {
    /// Decoder traces of condition a.
    #[arg(long = "a", num_args = 1.., required = true)]
    pub a: Vec<PathBuf>,
    /// Decoder traces of condition b.
    #[arg(long = "b", num_args = 1.., required = true)]
    pub b: Vec<PathBuf>,
    #[arg(long = "label-a", default_value = "a")]
    pub label_a: String,
    #[arg(long = "label-b", default_value = "b")]
    pub label_b: String,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Chair,
    Amber,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Captions JSONL, one `{image_id, caption}` per line.
    pub captions: PathBuf,
    /// Annotations JSON, `{image_id: [objects]}`.
    pub annotations: PathBuf,
    /// Object lexicon JSON; defaults to the bundled 80-object vocabulary.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "chair")]
    pub suite: Suite,
    /// Pool F1 over the corpus instead of averaging per image.
    #[arg(long = "f1-pooled")]
    pub f1_pooled: bool,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// One fixture spec object or an array of them.
    pub spec: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Internal(_) => EXIT_INTERNAL,
            CliError::Core(e) => core_exit_code(e),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Internal(_) => "Internal",
            CliError::Core(e) => e.kind(),
        }
    }

    /// The JSON object written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}

fn core_exit_code(e: &Error) -> i32 {
    if e.is_data_format() {
        return EXIT_DATA;
    }
    match e {
        Error::NoClsToken | Error::ClsReducedStorage | Error::WrongKind { .. } => EXIT_DATA,
        Error::Io { .. }
        | Error::InvalidArgument(_)
        | Error::OutOfRange(_)
        | Error::LayerNotFound(_)
        | Error::TooFewLayers(_)
        | Error::EmptyInput(_) => EXIT_USAGE,
        Error::NotPsd(_) => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Internal(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Outcome of a successful run: the exit code (0 or 2).
pub type Outcome = Result<i32, CliError>;

pub fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Phases(args) => commands::phases(&cli, args),
        Command::Select(args) => commands::select(&cli, args),
        Command::Var(args) => commands::var(args),
        Command::Metrics(args) => commands::metrics(args),
        Command::Synth(args) => commands::synth(&cli, args),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors are reported on stderr as JSON.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return EXIT_USAGE;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
