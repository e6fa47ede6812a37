//! Command-line front end and the stdin/stdout scoring sidecar.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dma::{build_dataset_to, read_dma_file, BuildError};
use crate::domain::DmaRecord;
use crate::fdm::{train_fdm, FdmConfig, FdmError};
use crate::grpo::{default_pool, demo_record, extended_pool, run_simulation, GrpoError, SimConfig};
use crate::io::{load_structured, read_lines, IoError, JsonlWriter};
use crate::lexicon::{default_lexicon, Lexicon, LexiconError};
use crate::metrics::{evaluate_file, EvaluateError};
use crate::providers::{
    CachedEmbedder, Embedder, FallbackEmbedder, HashedBagEmbedder, LandmarkFixture, ProviderError, RemoteEmbedder,
    DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED, DEFAULT_PAD,
};
use crate::rewards::{score_response, RewardVector, RewardWeights};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn config(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config { field: field.into(), message: message.to_string() }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_transport() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Io(io) => io.into(),
            ProviderError::Transport(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        match e {
            BuildError::Io(io) => io.into(),
            BuildError::Provider(p) => p.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvaluateError> for CliError {
    fn from(e: EvaluateError) -> Self {
        match e {
            EvaluateError::Io(io) => io.into(),
            EvaluateError::Metrics(m) => CliError::Validation(m.to_string()),
        }
    }
}

impl From<LexiconError> for CliError {
    fn from(e: LexiconError) -> Self {
        match e {
            LexiconError::Io(io) => io.into(),
            other => CliError::config("lexicon", other),
        }
    }
}

/// Text embedder selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Builtin {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_embed_seed")]
        seed: u64,
    },
    /// HTTP service; failed requests fall back to the builtin embedder.
    Remote {
        endpoint: String,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_dim() -> usize {
    DEFAULT_EMBED_DIM
}

fn default_embed_seed() -> u64 {
    DEFAULT_EMBED_SEED
}

fn default_timeout_ms() -> u64 {
    5_000
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Builtin { dim: DEFAULT_EMBED_DIM, seed: DEFAULT_EMBED_SEED }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Box<dyn Embedder> {
        match self {
            EmbedderConfig::Builtin { dim, seed } => Box::new(HashedBagEmbedder::new(*dim, *seed)),
            EmbedderConfig::Remote { endpoint, dim, timeout_ms } => {
                let remote = RemoteEmbedder::new(endpoint.clone(), *dim, Duration::from_millis(*timeout_ms));
                let local = HashedBagEmbedder::new(dim.unwrap_or(DEFAULT_EMBED_DIM), DEFAULT_EMBED_SEED);
                Box::new(CachedEmbedder::new(FallbackEmbedder::new(remote, local)))
            }
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        match self {
            EmbedderConfig::Builtin { dim: 0, .. } => Err(CliError::config("embedder.dim", "must be > 0")),
            EmbedderConfig::Remote { endpoint, .. } if endpoint.trim().is_empty() => {
                Err(CliError::config("embedder.endpoint", "must not be empty"))
            }
            EmbedderConfig::Remote { dim: Some(0), .. } => Err(CliError::config("embedder.dim", "must be > 0")),
            _ => Ok(()),
        }
    }
}

/// Everything a run can be configured with. Loaded from TOML or JSON; every
/// field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rewards: RewardWeights,
    /// Keyword lexicon override file.
    pub lexicon: Option<PathBuf>,
    pub embedder: EmbedderConfig,
    /// Landmark fixture for `build-dma`.
    pub landmarks: Option<PathBuf>,
    pub pad: f64,
    /// Simulation settings. Reward weights always come from `rewards`.
    pub sim: SimSettings,
    pub fdm: FdmConfig,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub group_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adv_epsilon: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            group_size: d.group_size,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            seed: d.seed,
            adv_epsilon: d.adv_epsilon,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rewards: RewardWeights::default(),
            lexicon: None,
            embedder: EmbedderConfig::default(),
            landmarks: None,
            pad: DEFAULT_PAD,
            sim: SimSettings::default(),
            fdm: FdmConfig::default(),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        load_structured(path).map_err(|e| match e {
            IoError::Parse { message, .. } => CliError::config(path.display().to_string(), message),
            other => other.into(),
        })
    }

    /// Applies the global flags on top of the file values.
    pub fn apply_overrides(&mut self, g: &GlobalArgs) {
        if let Some(seed) = g.seed {
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.sim.seed = seed;
            self.fdm.data.seed = seed;
        }
        let w = &mut self.rewards;
        for (flag, slot) in [
            (g.weights_beta_f, &mut w.format),
            (g.weights_beta_a, &mut w.accuracy),
            (g.weights_beta_t, &mut w.text),
            (g.weights_beta_r, &mut w.roi),
            (g.weights_beta_align, &mut w.align),
            (g.align_eps, &mut w.align_epsilon),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.rewards.validate().map_err(|e| match e {
            crate::rewards::RewardError::InvalidWeight { field, value, reason } => {
                CliError::config(format!("rewards.{field}"), format!("{value} {reason}"))
            }
            other => CliError::config("rewards", other),
        })?;
        for (field, path) in [("lexicon", &self.lexicon), ("landmarks", &self.landmarks)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::config(field, format!("file {} does not exist", p.display())));
                }
            }
        }
        if !(0.0..=0.5).contains(&self.pad) {
            return Err(CliError::config("pad", format!("{} outside [0, 0.5]", self.pad)));
        }
        self.embedder.validate()?;
        self.sim_config().validate().map_err(|e| match e {
            GrpoError::InvalidEpsilon(v) => CliError::config("sim.adv_epsilon", format!("{v} must be > 0")),
            other => CliError::config("sim", other),
        })?;
        self.fdm.validate().map_err(|e| CliError::config("fdm", e))?;
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            group_size: self.sim.group_size,
            iterations: self.sim.iterations,
            learning_rate: self.sim.learning_rate,
            seed: self.sim.seed,
            adv_epsilon: self.sim.adv_epsilon,
            weights: self.rewards,
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon, CliError> {
        match &self.lexicon {
            Some(p) => Ok(Lexicon::from_file(p)?),
            None => Ok(default_lexicon()),
        }
    }
}

/// What a scorer needs besides the inputs.
pub struct ScoringContext {
    pub weights: RewardWeights,
    pub embedder: Box<dyn Embedder>,
    pub lexicon: Lexicon,
}

impl ScoringContext {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        Ok(Self { weights: cfg.rewards, embedder: cfg.embedder.build(), lexicon: cfg.lexicon()? })
    }

    pub fn score(&self, raw: &str, record: &DmaRecord) -> RewardVector {
        score_response(raw, record, &self.weights, self.embedder.as_ref(), &self.lexicon)
    }
}

impl Default for ScoringContext {
    fn default() -> Self {
        Self { weights: RewardWeights::default(), embedder: Box::new(HashedBagEmbedder::default()), lexicon: default_lexicon() }
    }
}

/// The five reward components without the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub r_format: f64,
    pub r_accuracy: f64,
    pub r_text: f64,
    pub r_roi: f64,
    pub r_align: f64,
}

impl From<&RewardVector> for Components {
    fn from(v: &RewardVector) -> Self {
        Self { r_format: v.format, r_accuracy: v.accuracy, r_text: v.text, r_roi: v.roi, r_align: v.align }
    }
}

/// Provenance written as the first line of every output file.
#[derive(Debug, Clone, Serialize)]
struct Header<'a, T: Serialize> {
    tool: &'static str,
    command: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct HeaderLine<'a, T: Serialize> {
    header: Header<'a, T>,
}

fn header<'a, T: Serialize>(command: &'static str, body: &'a T) -> HeaderLine<'a, T> {
    HeaderLine { header: Header { tool: concat!("deepfake-align/", env!("CARGO_PKG_VERSION")), command, body } }
}

#[derive(Serialize)]
struct RewardProvenance<'a> {
    weights: &'a RewardWeights,
    lexicon_sha256: String,
    embedder: &'a EmbedderConfig,
}

#[derive(Debug, Parser)]
#[command(name = "deepfake-align", version, about = "Rewards, aligned datasets and toy training loops for explainable forgery detection")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub weights_beta_f: Option<f64>,
    #[arg(long, global = true)]
    pub weights_beta_a: Option<f64>,
    #[arg(long, global = true)]
    pub weights_beta_t: Option<f64>,
    #[arg(long, global = true)]
    pub weights_beta_r: Option<f64>,
    #[arg(long, global = true)]
    pub weights_beta_align: Option<f64>,
    #[arg(long, global = true)]
    pub align_eps: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score candidate responses against an aligned dataset.
    Score {
        /// JSONL lines `{"id", "record_id", "response"}`.
        #[arg(long)]
        responses: PathBuf,
        /// Aligned dataset produced by `build-dma`.
        #[arg(long)]
        dma: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an aligned dataset from source records and landmark fixtures.
    BuildDma {
        #[arg(long)]
        source: PathBuf,
        /// Landmark fixture; overrides `landmarks` in the config.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pad: Option<f64>,
    },
    /// Run the toy group-relative policy loop.
    Simulate {
        /// Aligned dataset; the built-in demo record is used when absent.
        #[arg(long)]
        dma: Option<PathBuf>,
        /// Record to train on; defaults to the first in the dataset.
        #[arg(long)]
        record_id: Option<String>,
        #[arg(long, value_enum, default_value_t = PoolKind::Default)]
        pool: PoolKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the disentanglement model on synthetic features.
    FdmTrain {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, F1 and AUC over a prediction file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Line-delimited scoring on stdin/stdout.
    Serve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolKind {
    Default,
    Extended,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(global);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Score { responses, dma, out } => {
            let ctx = ScoringContext::from_config(&cfg)?;
            with_output(out.as_deref(), |w| cmd_score(&responses, &dma, &cfg, &ctx, w))
        }
        Command::BuildDma { source, landmarks, out, pad } => {
            let landmarks = landmarks
                .or_else(|| cfg.landmarks.clone())
                .ok_or_else(|| CliError::config("landmarks", "no landmark fixture given"))?;
            let report = cmd_build_dma(&source, &landmarks, &out, &cfg, pad.unwrap_or(cfg.pad))?;
            write_json_line(std::io::stdout().lock(), &report)
        }
        Command::Simulate { dma, record_id, pool, out } => {
            let ctx = ScoringContext::from_config(&cfg)?;
            with_output(out.as_deref(), |w| cmd_simulate(dma.as_deref(), record_id.as_deref(), pool, &cfg, &ctx, w))
        }
        Command::FdmTrain { out } => with_output(out.as_deref(), |w| cmd_fdm_train(&cfg, w)),
        Command::Evaluate { predictions, out } => with_output(out.as_deref(), |w| cmd_evaluate(&predictions, w)),
        Command::Serve => {
            let ctx = ScoringContext::from_config(&cfg)?;
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            let stats = serve(stdin, stdout, &ctx)?;
            log::info!("served {} requests ({} errors)", stats.requests, stats.errors);
            Ok(())
        }
    }
}

fn with_output(
    out: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match out {
        Some(p) => {
            let file = File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => {
            let mut w = std::io::stdout().lock();
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn write_json_line<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<(), CliError> {
    let mut line = serde_json::to_vec(value).map_err(|e| CliError::Validation(e.to_string()))?;
    line.push(b'\n');
    w.write_all(&line)?;
    Ok(())
}

/// One candidate to score.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseLine {
    #[serde(default)]
    pub id: Option<String>,
    pub record_id: String,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredLine {
    pub id: String,
    pub record_id: String,
    pub components: Components,
    pub combined: f64,
    pub well_formed: bool,
    pub diagnostic: Option<String>,
}

pub fn cmd_score(responses: &Path, dma: &Path, cfg: &RunConfig, ctx: &ScoringContext, out: &mut dyn Write) -> Result<(), CliError> {
    let (_, records) = read_dma_file(dma)?;
    let mut by_id: HashMap<&str, &DmaRecord> = HashMap::new();
    for r in &records {
        if by_id.insert(r.image_ref.as_str(), r).is_some() {
            return Err(CliError::Validation(format!("{}: duplicate record id `{}`", dma.display(), r.image_ref)));
        }
    }
    let provenance = RewardProvenance { weights: &cfg.rewards, lexicon_sha256: ctx.lexicon.content_hash(), embedder: &cfg.embedder };
    let mut writer = JsonlWriter::new(out);
    writer.write(&header("score", &provenance))?;
    for item in read_lines(responses)? {
        let (line, text) = item?;
        let bad = |message: String| CliError::Validation(format!("{}:{line}: {message}", responses.display()));
        let req: ResponseLine = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let record = by_id.get(req.record_id.as_str()).ok_or_else(|| bad(format!("unknown record id `{}`", req.record_id)))?;
        let parsed = crate::domain::parse_response(&req.response);
        let v = crate::rewards::score_parsed(&parsed, record, &ctx.weights, ctx.embedder.as_ref(), &ctx.lexicon);
        writer.write(&ScoredLine {
            id: req.id.unwrap_or_else(|| format!("line-{line}")),
            record_id: req.record_id,
            components: Components::from(&v),
            combined: v.combined,
            well_formed: parsed.well_formed,
            diagnostic: parsed.diagnostic.map(|d| d.to_string()),
        })?;
    }
    writer.finish()?;
    Ok(())
}

pub fn cmd_build_dma(
    source: &Path,
    landmarks: &Path,
    out: &Path,
    cfg: &RunConfig,
    pad: f64,
) -> Result<crate::dma::BuildReport, CliError> {
    if !(0.0..=0.5).contains(&pad) {
        return Err(CliError::config("pad", format!("{pad} outside [0, 0.5]")));
    }
    let lexicon = cfg.lexicon()?;
    let fixture = LandmarkFixture::load(landmarks)?;
    let file = File::create(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let report = build_dataset_to(source, &fixture, BufWriter::new(file), &lexicon, pad)?;
    Ok(report)
}

#[derive(Serialize)]
struct SimProvenance<'a> {
    #[serde(flatten)]
    rewards: RewardProvenance<'a>,
    sim: &'a SimSettings,
    record_id: &'a str,
    pool: &'a [String],
}

pub fn cmd_simulate(
    dma: Option<&Path>,
    record_id: Option<&str>,
    pool_kind: PoolKind,
    cfg: &RunConfig,
    ctx: &ScoringContext,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let record = match dma {
        None => demo_record(),
        Some(path) => {
            let (_, records) = read_dma_file(path)?;
            let found = match record_id {
                Some(id) => records.into_iter().find(|r| r.image_ref == id),
                None => records.into_iter().next(),
            };
            found.ok_or_else(|| CliError::Validation(format!("{}: no matching record", path.display())))?
        }
    };
    let pool = match pool_kind {
        PoolKind::Default => default_pool(&record),
        PoolKind::Extended => extended_pool(&record),
    };
    let outcome = run_simulation(&cfg.sim_config(), &record, &pool, ctx.embedder.as_ref(), &ctx.lexicon)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let provenance = SimProvenance {
        rewards: RewardProvenance { weights: &cfg.rewards, lexicon_sha256: ctx.lexicon.content_hash(), embedder: &cfg.embedder },
        sim: &cfg.sim,
        record_id: &record.image_ref,
        pool: &pool,
    };
    let mut writer = JsonlWriter::new(out);
    writer.write(&header("simulate", &provenance))?;
    for point in &outcome.trajectory {
        writer.write(point)?;
    }
    writer.write(&serde_json::json!({ "summary": outcome.summary() }))?;
    writer.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct FdmProvenance<'a> {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    config: &'a FdmConfig,
}

pub fn cmd_fdm_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let outcome = train_fdm(&cfg.fdm).map_err(|e| match e {
        FdmError::InvalidConfig(_) | FdmError::Shape { .. } | FdmError::LabelOutOfRange { .. } => CliError::config("fdm", e),
        FdmError::Diverged { .. } => CliError::Validation(e.to_string()),
    })?;
    let lw = cfg.fdm.loss_weights;
    let provenance = FdmProvenance { lambda1: lw.lambda1, lambda2: lw.lambda2, lambda3: lw.lambda3, config: &cfg.fdm };
    let mut writer = JsonlWriter::new(out);
    writer.write(&header("fdm-train", &provenance))?;
    for step in &outcome.trajectory {
        writer.write(step)?;
    }
    writer.write(&serde_json::json!({ "metrics": outcome.metrics }))?;
    writer.finish()?;
    Ok(())
}

pub fn cmd_evaluate(predictions: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let report = evaluate_file(predictions)?;
    write_json_line(out, &report)
}

/// One sidecar request.
#[derive(Debug, Clone, Deserialize)]
pub struct ServeRequest {
    pub id: Value,
    pub raw_response: String,
    pub record: DmaRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServeReply {
    Scored { id: Value, components: Components, combined: f64 },
    Error { id: Value, error: String },
}

impl ServeReply {
    pub fn id(&self) -> &Value {
        match self {
            ServeReply::Scored { id, .. } | ServeReply::Error { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: usize,
    pub errors: usize,
}

/// Handles one request line. Never fails: problems become error replies
/// carrying whatever id could be recovered (`null` otherwise).
pub fn handle_request(line: &str, ctx: &ScoringContext) -> ServeReply {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return ServeReply::Error { id: Value::Null, error: format!("invalid JSON: {e}") },
    };
    let id = value.get("id").cloned().unwrap_or(Value::Null);
    let req: ServeRequest = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => return ServeReply::Error { id, error: format!("invalid request: {e}") },
    };
    if let Err(e) = req.record.validate() {
        return ServeReply::Error { id, error: format!("invalid record: {e}") };
    }
    let v = ctx.score(&req.raw_response, &req.record);
    ServeReply::Scored { id, components: Components::from(&v), combined: v.combined }
}

/// Reads requests line by line until end of input, writing one reply line
/// per non-blank request line. Each reply is written with a single call and
/// flushed so pipelined clients see it immediately.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, ctx: &ScoringContext) -> std::io::Result<ServeStats> {
    let mut stats = ServeStats::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_request(&line, ctx);
        stats.requests += 1;
        if matches!(reply, ServeReply::Error { .. }) {
            stats.errors += 1;
        }
        let mut bytes = serde_json::to_vec(&reply).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        output.write_all(&bytes)?;
        output.flush()?;
    }
    Ok(stats)
}
