//! Command-line pipeline over the `groundguide` library: guided captioning,
//! CHAIR and POPE scoring, latency benchmarks and judge-prompt rendering.
//!
//! Every command that writes a file also writes `<file>.manifest.json`.
//! Exit codes: 0 on success, 2 for bad input, 3 when the model backend fails.

pub mod backend_spec;
pub mod bench;
pub mod eval;
pub mod guide;
pub mod judge;
pub mod manifest;
pub mod stub;

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use groundguide::decode::{DEFAULT_GAMMA, DEFAULT_MAX_TOKENS, DEFAULT_QUERY, DEFAULT_SEED};
use groundguide::guidance::{AggregationMode, EmptyGuidancePolicy, TemplateSet};
use groundguide::pope::Setting;
use groundguide::Sampler;
use serde::Serialize;

pub use backend_spec::BackendSpec;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input; exit code 2.
    Input(String),
    /// The model backend failed; exit code 3.
    Backend { image_id: Option<String>, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend { .. } => 3,
        }
    }

    pub(crate) fn at_path(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Backend { image_id: Some(id), message } => {
                write!(f, "backend error on image {id}: {message}")
            }
            CliError::Backend { image_id: None, message } => write!(f, "backend error: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "groundguide", version, about = "Object-grounded guidance for caption decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one guided caption per image.
    Guide(guide::GuideArgs),
    /// Answer POPE questions with guided decoding.
    PopeAnswer(guide::PopeAnswerArgs),
    /// Score captions with CHAIR.
    Chair(eval::ChairArgs),
    /// Build a balanced POPE question set.
    PopeBuild(eval::PopeBuildArgs),
    /// Score POPE answers.
    PopeScore(eval::PopeScoreArgs),
    /// Measure decoding latency in ms per output token.
    Bench(bench::BenchArgs),
    /// Render the pairwise judge prompt for two answers.
    JudgePrompt(judge::JudgeArgs),
    /// Serve a table model over the bridge protocol.
    ServeStub(stub::ServeStubArgs),
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Guide(a) => guide::cmd_guide(&a, out),
        Command::PopeAnswer(a) => guide::cmd_pope_answer(&a, out),
        Command::Chair(a) => eval::cmd_chair(&a, out),
        Command::PopeBuild(a) => eval::cmd_pope_build(&a, out),
        Command::PopeScore(a) => eval::cmd_pope_score(&a, out),
        Command::Bench(a) => bench::cmd_bench(&a, out),
        Command::JudgePrompt(a) => judge::cmd_judge_prompt(&a, out),
        Command::ServeStub(a) => stub::cmd_serve_stub(&a),
    }
}

/// Model and decoding flags shared by every command that generates text.
#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// toy:PATH (or toy:@biased), tcp:HOST:PORT, or spawn:COMMAND [ARGS...]
    #[arg(long)]
    pub backend: BackendSpec,
    /// greedy or temperature:T
    #[arg(long, default_value = "greedy", value_parser = parse_sampler)]
    pub sampler: Sampler,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Seconds to wait for each backend reply.
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
}

/// How detections become guidance.
#[derive(Debug, Clone, Args)]
pub struct GuidanceArgs {
    /// Detection JSONL files; may be repeated.
    #[arg(long = "detections")]
    pub detections: Vec<PathBuf>,
    /// Synonym map JSON; defaults to the bundled COCO list.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    /// Per-detector score threshold, as MODEL=VALUE; may be repeated.
    #[arg(long = "threshold", value_parser = parse_threshold)]
    pub thresholds: Vec<(String, f64)>,
    #[arg(long, value_enum, default_value_t = AggArg::Intersection)]
    pub agg: AggArg,
    /// Defaults to the set matching the command and `--agg`.
    #[arg(long, value_enum)]
    pub template_set: Option<TemplateArg>,
    #[arg(long, value_enum, default_value_t = EmptyArg::Degrade)]
    pub empty_guidance: EmptyArg,
    #[arg(long, default_value_t = DEFAULT_GAMMA, conflicts_with = "dynamic_gamma")]
    pub gamma: f64,
    /// Derive gamma per image from the mean detector confidence.
    #[arg(long)]
    pub dynamic_gamma: bool,
    #[arg(long, default_value_t = 0.4, requires = "dynamic_gamma")]
    pub gamma_lo: f64,
    #[arg(long, default_value_t = 0.8, requires = "dynamic_gamma")]
    pub gamma_hi: f64,
    /// Defaults to the lowest mean confidence among the selected images.
    #[arg(long, requires = "dynamic_gamma")]
    pub s_min: Option<f64>,
    /// Defaults to the highest mean confidence among the selected images.
    #[arg(long, requires = "dynamic_gamma")]
    pub s_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    Intersection,
    Union,
}

impl From<AggArg> for AggregationMode {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Intersection => AggregationMode::Intersection,
            AggArg::Union => AggregationMode::Union,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    Intersec,
    Pope,
    Union,
}

impl From<TemplateArg> for TemplateSet {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::Intersec => TemplateSet::Intersec,
            TemplateArg::Pope => TemplateSet::Pope,
            TemplateArg::Union => TemplateSet::Union,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmptyArg {
    Degrade,
    Error,
}

impl From<EmptyArg> for EmptyGuidancePolicy {
    fn from(e: EmptyArg) -> Self {
        match e {
            EmptyArg::Degrade => EmptyGuidancePolicy::Degrade,
            EmptyArg::Error => EmptyGuidancePolicy::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Random,
    Popular,
    Adversarial,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Random => Setting::Random,
            SettingArg::Popular => Setting::Popular,
            SettingArg::Adversarial => Setting::Adversarial,
        }
    }
}

pub fn parse_sampler(s: &str) -> Result<Sampler, String> {
    if s == "greedy" {
        return Ok(Sampler::Greedy);
    }
    let t =
        s.strip_prefix("temperature:").ok_or_else(|| format!("sampler `{s}` must be `greedy` or `temperature:T`"))?;
    let t: f64 = t.parse().map_err(|_| format!("temperature `{t}` is not a number"))?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(format!("temperature must be positive, got {t}"));
    }
    Ok(Sampler::Temperature(t))
}

pub fn parse_threshold(s: &str) -> Result<(String, f64), String> {
    let (model, value) = s.split_once('=').ok_or_else(|| format!("threshold `{s}` must be MODEL=VALUE"))?;
    let value: f64 = value.parse().map_err(|_| format!("threshold value `{value}` is not a number"))?;
    if model.is_empty() || !(0.0..=1.0).contains(&value) {
        return Err(format!("threshold `{s}` needs a model id and a value in [0, 1]"));
    }
    Ok((model.to_string(), value))
}

pub fn default_query() -> String {
    DEFAULT_QUERY.to_string()
}

pub(crate) fn open_input(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::at_path(path, e))
}

/// Writes one JSON object per line.
pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let write = || -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut w, r).map_err(io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write().map_err(|e| CliError::at_path(path, e))
}

/// Prints `value` as pretty JSON.
pub(crate) fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    writeln!(out, "{text}").map_err(|e| CliError::Input(format!("cannot write output: {e}")))
}

pub(crate) fn write_manifest(m: manifest::RunManifest, output: &Path) -> CliResult<()> {
    m.finish(output).map(|_| ()).map_err(|e| CliError::at_path(output, e))
}
