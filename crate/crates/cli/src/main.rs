mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keyphrase::gate::SeparationRoute;
use keyphrase::Error;

#[derive(Debug, Parser)]
#[command(name = "keyphrase", version, about = "Speaker-gated keyphrase detection")]
struct Cli {
    /// Worker threads for per-utterance work.
    #[arg(long, global = true, env = "KEYPHRASE_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an enrollment profile from one or more utterances.
    Enroll(EnrollArgs),
    /// Run the detector over a recording and print accepted keyphrases.
    Detect(DetectArgs),
    /// Generate the seeded synthetic corpus.
    Corpus(CorpusArgs),
    /// Render noisy, multi-microphone copies of a clean manifest.
    Simulate(SimulateArgs),
    /// Run the evaluation grid and write report.json and report.csv.
    Evaluate(EvaluateArgs),
    /// Measure noise cancellation on synthetic scenes.
    AncBench(AncBenchArgs),
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub audio: Vec<PathBuf>,
    #[arg(long)]
    pub speaker_id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    /// Directory of `.tpl` recognizer templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Cancel noise using channels 1.. as references.
    #[arg(long)]
    pub anc: bool,
    #[arg(long)]
    pub no_sv: bool,
    #[arg(long, value_parser = parse_route)]
    pub route: Option<SeparationRoute>,
    /// Word alignment (JSON lines) to replay instead of running the recognizer.
    #[arg(long)]
    pub alignment: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus settings as JSON; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_speakers: Option<usize>,
    #[arg(long)]
    pub positives_per_speaker: Option<usize>,
    #[arg(long)]
    pub dev_speakers: Option<usize>,
    #[arg(long)]
    pub imposter_speakers: Option<usize>,
    #[arg(long)]
    pub negative_hours: Option<f64>,
    /// Only write corpus.json, phrases.json and templates.
    #[arg(long)]
    pub no_audio: bool,
    /// Also render the negative streams.
    #[arg(long)]
    pub negatives: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Clean manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// corpus.json written by the `corpus` command.
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON array of run configurations; defaults to the standard ablation.
    #[arg(long)]
    pub configs: Option<PathBuf>,
    /// Fixed threshold for every configuration with verification on.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid selection as JSON; defaults to the full grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AncBenchArgs {
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_route(s: &str) -> Result<SeparationRoute, String> {
    match s {
        "none" => Ok(SeparationRoute::None),
        "sv" => Ok(SeparationRoute::Sv),
        "asr" => Ok(SeparationRoute::Asr),
        _ => Err(format!("unknown route {s:?} (expected none, sv or asr)")),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::MissingFile(_) => "missing_file",
        Error::MalformedHeader { .. } => "malformed_header",
        Error::UnsupportedEncoding { .. } => "unsupported_encoding",
        Error::Unwritable { .. } => "unwritable",
        Error::Io { .. } => "io",
        Error::MalformedLine { .. } => "malformed_line",
        Error::MalformedBinary { .. } => "malformed_binary",
        Error::InvalidBuffer(_) => "invalid_buffer",
        Error::SampleRate { .. } => "sample_rate",
        Error::ChannelOutOfRange { .. } => "channel_out_of_range",
        Error::ReferenceCount { .. } => "reference_count",
        Error::NotUnitNorm(_) => "not_unit_norm",
        Error::EmptyInput(_) => "empty_input",
        Error::Degenerate(_) => "degenerate",
        Error::Config(_) => "config",
        Error::PhraseSet(_) => "phrase_set",
        Error::UnknownWord(_) => "unknown_word",
        Error::NonMonotoneAlignment(_) => "non_monotone_alignment",
        Error::MissingProfile(_) => "missing_profile",
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Enroll(a) => commands::enroll(a, cli.jobs),
        Command::Detect(a) => commands::detect(a, cli.jobs),
        Command::Corpus(a) => commands::corpus(a, cli.jobs),
        Command::Simulate(a) => commands::simulate(a, cli.jobs),
        Command::Evaluate(a) => commands::evaluate(a, cli.jobs),
        Command::AncBench(a) => commands::anc_bench(a, cli.jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(error_kind(&e), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
