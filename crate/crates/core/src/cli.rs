// SPDX-License-Identifier: Apache-2.0

//! `spotkit` command line: corpus conversion, evaluation, robustness and
//! hallucination reports, dialogue generation and the session server.
//!
//! Settings come from an optional TOML file (`--config`) with flags layered
//! on top. Secrets are read from the environment only. Every output file
//! carries the tool version and a fingerprint of the effective settings and
//! input file contents.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, FixtureBackend, FixtureLlm, GtIndex, HttpLlmClient, IouThresholdOracle, LlmClient,
    LlmConfig, PerfectOracle, RemoteBackend, RemoteConfig, ENV_ENDPOINT, ENV_TOKEN,
};
use crate::corpus::{
    generate_region_chats, ingest_detection_file, ingest_ocr_file, ingest_vqa_file, partition, read_jsonl,
    read_records, write_records, ChatContext, CorpusError, GenerationConfig, GenerationError, IngestOptions,
    IngestOutput, InstructionRecord, OutputMeta, PartitionPolicy, Referent, SeedExample,
};
use crate::evalkit::{
    eval_detector_boxes, eval_regional_classification, eval_text_task, hallucination_ratio, read_external_boxes,
    robustness_sweep, Containment, EvalError, EvalOptions, Evaluation, FailurePolicy, HallucinationDenominator,
    HttpEmbedder, PointQuery, TrigramEmbedder, DEFAULT_SCALES,
};
use crate::instructgen::{TaskKind, TemplateRegistry};
use crate::session::{FileStore, MemoryStore, SessionManager, SessionStore, DEFAULT_HISTORY_WINDOW};

pub const ENV_LLM_TOKEN: &str = "SPOTKIT_LLM_TOKEN";
pub const ENV_EMBED_TOKEN: &str = "SPOTKIT_EMBED_TOKEN";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Transport(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Transport(_) | BackendError::Timeout(_) => CliError::Transport(e.to_string()),
            BackendError::Precondition(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    PerfectOracle,
    IouOracle,
    Remote,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Falls back to `SPOTKIT_ENDPOINT`.
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub retries: u32,
    /// IoU threshold of the iou oracle.
    pub tau: f64,
    /// Records that feed the oracles' ground truth; defaults to the
    /// evaluated records.
    pub gt: Option<PathBuf>,
    /// Fixture to replay from.
    pub fixture: Option<PathBuf>,
    /// Fixture to record traffic into.
    pub record: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::default(),
            endpoint: None,
            model: "default".into(),
            timeout_secs: 60.0,
            max_in_flight: 8,
            retries: 1,
            tau: 0.5,
            gt: None,
            fixture: None,
            record: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Trigram,
    Http,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: Option<f64>,
    pub timeout_secs: f64,
    pub fixture: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub rounds: usize,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-4".into(),
            temperature: None,
            timeout_secs: 120.0,
            fixture: None,
            record: None,
            rounds: crate::corpus::DEFAULT_CHAT_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub failure_policy: FailurePolicy,
    pub containment: Containment,
    pub point_query: PointQuery,
    pub hallucination_denominator: HallucinationDenominator,
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            failure_policy: FailurePolicy::default(),
            containment: Containment::default(),
            point_query: PointQuery::default(),
            hallucination_denominator: HallucinationDenominator::default(),
            scales: DEFAULT_SCALES.to_vec(),
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub history_window: usize,
    /// Directory for persistent sessions; in-memory when unset.
    pub store_dir: Option<PathBuf>,
    pub ttl_hours: f64,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self {
            history_window: DEFAULT_HISTORY_WINDOW,
            store_dir: None,
            ttl_hours: 24.0,
        }
    }
}

/// Settings shared by all commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub templates: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    pub backend: BackendSection,
    pub embedder: EmbedderSection,
    pub llm: LlmSection,
    pub eval: EvalSection,
    pub session: SessionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            templates: None,
            seed: 0,
            workers: 4,
            backend: BackendSection::default(),
            embedder: EmbedderSection::default(),
            llm: LlmSection::default(),
            eval: EvalSection::default(),
            session: SessionSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Fails on referenced files that do not exist.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let replay = self.backend.kind == BackendKind::Replay;
        let required = [
            self.templates.as_ref(),
            self.backend.gt.as_ref(),
            self.backend.fixture.as_ref().filter(|_| replay),
            self.llm.fixture.as_ref(),
        ];
        for p in required.into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<TemplateRegistry, CliError> {
        match &self.templates {
            Some(p) => TemplateRegistry::load(p).map_err(|e| CliError::Usage(e.to_string())),
            None => Ok(TemplateRegistry::default()),
        }
    }
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Stable hash of the command, its parameters, the effective configuration
/// and the contents of its input files. Output paths are not part of it.
pub fn fingerprint(command: &str, params: &impl Serialize, config: &RunConfig, inputs: &[&Path]) -> Result<String, CliError> {
    let mut referenced: Vec<&Path> = inputs.to_vec();
    referenced.extend(config.templates.as_deref());
    referenced.extend(config.backend.gt.as_deref());
    referenced.extend(config.backend.fixture.as_deref());
    referenced.extend(config.llm.fixture.as_deref());
    let digests = referenced.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>, _>>()?;
    // paths are replaced by content digests; serde_json maps are sorted
    let mut cfg = serde_json::to_value(config).expect("serializable");
    for ptr in ["/templates", "/backend/gt", "/backend/fixture", "/backend/record", "/llm/fixture", "/llm/record", "/session/store_dir"] {
        if let Some(v) = cfg.pointer_mut(ptr) {
            if !v.is_null() {
                *v = serde_json::Value::Bool(true);
            }
        }
    }
    let canonical = serde_json::json!({
        "command": command,
        "params": params,
        "config": cfg,
        "inputs": digests,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    Ok(hex::encode(&digest[..16]))
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "spotkit", version, about = "Region-referring instruction toolkit")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for backend fan-out.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Template registry (TOML) replacing the built-in templates.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a public annotation file into instruction records.
    Convert(ConvertArgs),
    /// Evaluate a backend on classification, OCR or VQA records.
    Evaluate(EvaluateArgs),
    /// Accuracy under box noise of increasing scale.
    Robustness(RobustnessArgs),
    /// Region referring hallucination ratio of a classification run.
    Hallucination(HallucinationArgs),
    /// Generate region-grounded dialogues with a text LLM.
    Genchat(GenchatArgs),
    /// Run the session HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Detection,
    Ocr,
    Vqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReferentArg {
    None,
    Box,
    Point,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, value_enum)]
    pub kind: SourceKind,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Dataset name stored in the records; defaults to the kind.
    #[arg(long)]
    pub source: Option<String>,
    /// Keep at most N records (seeded sample).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Keep records of at most N images (seeded sample).
    #[arg(long)]
    pub image_limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// How VQA questions refer to their region.
    #[arg(long, value_enum, default_value = "none")]
    pub referent: ReferentArg,
    /// Restrict to these template ids.
    #[arg(long = "template")]
    pub template_ids: Vec<String>,
    /// Hold out every record of the converted source for evaluation.
    #[arg(long)]
    pub eval: bool,
    /// Hold out this fraction of records for evaluation.
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct BackendArgs {
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Remote endpoint (otherwise config or SPOTKIT_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Ground-truth records for the oracles.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Fixture to replay.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Record backend traffic into this fixture.
    #[arg(long)]
    pub record_fixture: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct MatcherArgs {
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long)]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Require answers to cover whole words.
    #[arg(long)]
    pub word_boundary: bool,
    /// Send point referents as a square box of this normalized side.
    #[arg(long)]
    pub point_box_side: Option<f64>,
    /// Leave failed backend calls out of the denominator.
    #[arg(long)]
    pub exclude_failures: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    RegionClass,
    RegionOcr,
    RegionVqa,
    Vqa,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::RegionClass => TaskKind::RegionClass,
            TaskArg::RegionOcr => TaskKind::RegionOcr,
            TaskArg::RegionVqa => TaskKind::RegionVqa,
            TaskArg::Vqa => TaskKind::Vqa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RegionSourceArg {
    Gt,
    Boxes,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "gt")]
    pub region_source: RegionSourceArg,
    /// Detector boxes (JSON lines); implies `--region-source boxes`.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub matcher: MatcherArgs,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Noise scales, starting at 0.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Sweep seeds averaged per scale.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub matcher: MatcherArgs,
}

#[derive(Debug, Args)]
pub struct HallucinationArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Divide by misclassified regions instead of all regions.
    #[arg(long)]
    pub misclassified_only: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub matcher: MatcherArgs,
}

#[derive(Debug, Args)]
pub struct GenchatArgs {
    /// Dense-caption contexts, one image per line.
    #[arg(long)]
    pub contexts: PathBuf,
    /// Hand-written seed dialogues, one per line.
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Rejection report (JSON lines).
    #[arg(long)]
    pub rejections: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub llm_endpoint: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Replay completions from this fixture.
    #[arg(long)]
    pub llm_fixture: Option<PathBuf>,
    /// Record completions into this fixture.
    #[arg(long)]
    pub llm_record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub store_dir: Option<PathBuf>,
    #[arg(long)]
    pub history_window: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

// ---------------------------------------------------------------------------
// Wiring

impl BackendArgs {
    fn apply(&self, cfg: &mut BackendSection) {
        if let Some(k) = self.backend {
            cfg.kind = k;
        }
        macro_rules! take {
            ($($f:ident => $g:ident),*) => { $( if let Some(v) = &self.$f { cfg.$g = Some(v.clone()); } )* };
        }
        take!(endpoint => endpoint, gt => gt, fixture => fixture, record_fixture => record);
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if let Some(t) = self.timeout_secs {
            cfg.timeout_secs = t;
        }
        if let Some(n) = self.max_in_flight {
            cfg.max_in_flight = n;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if self.fixture.is_some() && self.backend.is_none() {
            cfg.kind = BackendKind::Replay;
        }
    }
}

impl MatcherArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(k) = self.embedder {
            cfg.embedder.kind = k;
        }
        if let Some(e) = &self.embed_endpoint {
            cfg.embedder.endpoint = Some(e.clone());
        }
        if let Some(m) = &self.embed_model {
            cfg.embedder.model = Some(m.clone());
        }
        if self.word_boundary {
            cfg.eval.containment = Containment::WordBoundary;
        }
        if let Some(side) = self.point_box_side {
            cfg.eval.point_query = PointQuery::Box { side };
        }
        if self.exclude_failures {
            cfg.eval.failure_policy = FailurePolicy::Exclude;
        }
    }
}

/// Builds the configured backend. Oracles read ground truth from
/// `backend.gt`, else from `default_gt`.
pub fn build_backend(cfg: &RunConfig, default_gt: Option<&Path>) -> Result<Arc<dyn Backend>, CliError> {
    let b = &cfg.backend;
    let gt_index = || -> Result<GtIndex, CliError> {
        let path = b.gt.as_deref().or(default_gt).ok_or_else(|| {
            CliError::Usage("oracle backends need ground truth records (--gt)".into())
        })?;
        Ok(GtIndex::from_records(&read_records(path)?))
    };
    let inner: Box<dyn Backend> = match b.kind {
        BackendKind::PerfectOracle => Box::new(PerfectOracle::with_registry(gt_index()?, cfg.registry()?)),
        BackendKind::IouOracle => Box::new(IouThresholdOracle::new(gt_index()?, b.tau)),
        BackendKind::Remote => {
            let endpoint = b
                .endpoint
                .clone()
                .or_else(|| std::env::var(ENV_ENDPOINT).ok())
                .ok_or_else(|| CliError::Usage(format!("remote backend needs --endpoint or {ENV_ENDPOINT}")))?;
            let mut rc = RemoteConfig::new(endpoint);
            rc.token = std::env::var(ENV_TOKEN).ok();
            rc.model = b.model.clone();
            rc.timeout = Duration::try_from_secs_f64(b.timeout_secs)
                .map_err(|e| CliError::Usage(format!("timeout_secs: {e}")))?;
            rc.max_in_flight = b.max_in_flight;
            rc.retry.max_tries = b.retries.max(1);
            Box::new(RemoteBackend::new(rc))
        }
        BackendKind::Replay => {
            let path = b
                .fixture
                .as_deref()
                .ok_or_else(|| CliError::Usage("replay backend needs --fixture".into()))?;
            return Ok(Arc::new(FixtureBackend::replay(path)?));
        }
    };
    Ok(match &b.record {
        Some(path) => Arc::new(FixtureBackend::record(inner, path)?),
        None => Arc::from(inner),
    })
}

fn build_embedder(cfg: &RunConfig) -> Result<Box<dyn crate::evalkit::Embedder>, CliError> {
    Ok(match cfg.embedder.kind {
        EmbedderKind::Trigram => Box::new(TrigramEmbedder),
        EmbedderKind::Http => {
            let endpoint = cfg
                .embedder
                .endpoint
                .clone()
                .ok_or_else(|| CliError::Usage("http embedder needs an endpoint".into()))?;
            let model = cfg.embedder.model.clone().unwrap_or_else(|| "text-embedding".into());
            Box::new(HttpEmbedder::new(endpoint, model, std::env::var(ENV_EMBED_TOKEN).ok()))
        }
    })
}

fn eval_options(cfg: &RunConfig, fingerprint: String) -> EvalOptions {
    EvalOptions {
        workers: cfg.workers,
        failure_policy: cfg.eval.failure_policy,
        containment: cfg.eval.containment,
        point_query: cfg.eval.point_query,
        hallucination_denominator: cfg.eval.hallucination_denominator,
        config_fingerprint: fingerprint,
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";

/// Writes `report.json`, `report.txt` and `outcomes.jsonl` (record order,
/// provenance header first).
fn write_evaluation(out_dir: &Path, eval: &mut Evaluation) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    eval.report.details_file = Some(OUTCOMES_FILE.into());
    let meta = OutputMeta {
        tool_version: eval.report.tool_version.clone(),
        config_fingerprint: eval.report.config_fingerprint.clone(),
    };
    let path = out_dir.join(OUTCOMES_FILE);
    let mut out = String::new();
    out.push_str(&serde_json::json!({ "spotkit_meta": meta }).to_string());
    out.push('\n');
    for o in &eval.outcomes {
        out.push_str(&serde_json::to_string(o).expect("serializable"));
        out.push('\n');
    }
    fs::write(&path, out).map_err(io_err(&path))?;
    let path = out_dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(&eval.report).expect("serializable");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    let path = out_dir.join(REPORT_TEXT);
    fs::write(&path, eval.report.to_text()).map_err(io_err(&path))?;
    Ok(())
}

fn systemic_failure(eval: &Evaluation) -> Result<(), CliError> {
    let m = &eval.report.metrics;
    if m.evaluated > 0 && m.failed == m.evaluated {
        let first = eval.outcomes.iter().find_map(|o| o.error.clone()).unwrap_or_default();
        return Err(CliError::Transport(format!("every backend call failed; first error: {first}")));
    }
    Ok(())
}

fn cmd_convert(args: &ConvertArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if args.holdout.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
        return Err(CliError::Usage("--holdout must lie in [0, 1]".into()));
    }
    let registry = cfg.registry()?;
    let source = args.source.clone().unwrap_or_else(|| {
        match args.kind {
            SourceKind::Detection => "detection",
            SourceKind::Ocr => "ocr",
            SourceKind::Vqa => "vqa",
        }
        .to_string()
    });
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut opts = IngestOptions::new(source.clone());
    opts.limit = args.limit;
    opts.image_limit = args.image_limit;
    opts.seed = seed;
    opts.template_ids = (!args.template_ids.is_empty()).then(|| args.template_ids.clone());

    let IngestOutput { records, diagnostics } = match args.kind {
        SourceKind::Detection => ingest_detection_file(&args.input, &registry, &opts)?,
        SourceKind::Ocr => ingest_ocr_file(&args.input, &registry, &opts)?,
        SourceKind::Vqa => {
            let referent = match args.referent {
                ReferentArg::None => Referent::None,
                ReferentArg::Box => Referent::Box,
                ReferentArg::Point => Referent::Point,
            };
            ingest_vqa_file(&args.input, &registry, referent, &opts)?
        }
    };
    let mut policy = PartitionPolicy {
        seed,
        ..PartitionPolicy::default()
    };
    if args.eval {
        policy.eval_sources.insert(source.clone());
    }
    if let Some(f) = args.holdout {
        policy.holdout.insert(source.clone(), f);
    }
    let records = if records.is_empty() { records } else { partition(records, &policy)? };

    #[derive(Serialize)]
    struct Params<'a> {
        kind: SourceKind,
        source: &'a str,
        limit: Option<usize>,
        image_limit: Option<usize>,
        seed: u64,
        referent: ReferentArg,
        template_ids: &'a [String],
        eval: bool,
        holdout: Option<f64>,
    }
    let params = Params {
        kind: args.kind,
        source: &source,
        limit: args.limit,
        image_limit: args.image_limit,
        seed,
        referent: args.referent,
        template_ids: &args.template_ids,
        eval: args.eval,
        holdout: args.holdout,
    };
    let fp = fingerprint("convert", &params, cfg, &[&args.input])?;
    write_records(&args.output, &records, Some(&OutputMeta::new(fp)))?;

    println!("wrote {} record(s) to {}", records.len(), args.output.display());
    let summary = IngestOutput {
        records: Vec::new(),
        diagnostics,
    }
    .diagnostic_summary();
    for (reason, count) in &summary {
        println!("  skipped {count}: {reason}");
    }
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, mut cfg: RunConfig) -> Result<Evaluation, CliError> {
    args.backend.apply(&mut cfg.backend);
    args.matcher.apply(&mut cfg);
    cfg.check_paths()?;
    let task = TaskKind::from(args.task);
    let use_boxes = args.boxes.is_some() || args.region_source == RegionSourceArg::Boxes;
    if use_boxes && args.boxes.is_none() {
        return Err(CliError::Usage("--region-source boxes needs --boxes FILE".into()));
    }
    if use_boxes && task != TaskKind::RegionClass {
        return Err(CliError::Usage("detector boxes only apply to region_class".into()));
    }
    let records: Vec<InstructionRecord> =
        read_records(&args.records)?.into_iter().filter(|r| r.task == task).collect();
    if records.is_empty() {
        return Err(CliError::Data(format!("no {task} records in {}", args.records.display())));
    }
    let mut inputs: Vec<&Path> = vec![&args.records];
    inputs.extend(args.boxes.as_deref());
    #[derive(Serialize)]
    struct Params {
        task: TaskArg,
        boxes: bool,
    }
    let fp = fingerprint("evaluate", &Params { task: args.task, boxes: use_boxes }, &cfg, &inputs)?;
    let backend = build_backend(&cfg, Some(&args.records))?;
    let embedder = build_embedder(&cfg)?;
    let registry = cfg.registry()?;
    let opts = eval_options(&cfg, fp);
    let mut eval = match (task, &args.boxes) {
        (TaskKind::RegionClass, Some(path)) => {
            let boxes = read_external_boxes(path)?;
            let name = path.file_name().map_or_else(|| "boxes".into(), |n| n.to_string_lossy().into_owned());
            eval_detector_boxes(&records, &boxes, &name, backend.as_ref(), embedder.as_ref(), &registry, &opts)?
        }
        (TaskKind::RegionClass, None) => {
            eval_regional_classification(&records, backend.as_ref(), embedder.as_ref(), &registry, &opts)?
        }
        _ => eval_text_task(&records, backend.as_ref(), &registry, &opts)?,
    };
    write_evaluation(&args.out_dir, &mut eval)?;
    print!("{}", eval.report.to_text());
    systemic_failure(&eval)?;
    Ok(eval)
}

fn cmd_robustness(args: &RobustnessArgs, mut cfg: RunConfig) -> Result<Evaluation, CliError> {
    args.backend.apply(&mut cfg.backend);
    args.matcher.apply(&mut cfg);
    if let Some(s) = &args.scales {
        cfg.eval.scales = s.clone();
    }
    if let Some(s) = &args.seeds {
        cfg.eval.seeds = s.clone();
    }
    cfg.check_paths()?;
    let records = read_records(&args.records)?;
    let fp = fingerprint("robustness", &(), &cfg, &[&args.records])?;
    let backend = build_backend(&cfg, Some(&args.records))?;
    let embedder = build_embedder(&cfg)?;
    let registry = cfg.registry()?;
    let opts = eval_options(&cfg, fp);
    let mut eval = robustness_sweep(
        &records,
        &cfg.eval.scales,
        &cfg.eval.seeds,
        backend.as_ref(),
        embedder.as_ref(),
        &registry,
        &opts,
    )?;
    write_evaluation(&args.out_dir, &mut eval)?;
    print!("{}", eval.report.to_text());
    systemic_failure(&eval)?;
    Ok(eval)
}

fn cmd_hallucination(args: &HallucinationArgs, mut cfg: RunConfig) -> Result<Evaluation, CliError> {
    args.backend.apply(&mut cfg.backend);
    args.matcher.apply(&mut cfg);
    if args.misclassified_only {
        cfg.eval.hallucination_denominator = HallucinationDenominator::Misclassified;
    }
    cfg.check_paths()?;
    let records: Vec<InstructionRecord> = read_records(&args.records)?
        .into_iter()
        .filter(|r| r.task == TaskKind::RegionClass)
        .collect();
    if let Some(r) = records
        .iter()
        .find(|r| r.ground_truth.as_ref().and_then(|g| g.all_objects.as_ref()).is_none())
    {
        return Err(EvalError::Metric(format!("record {} has no all_objects", r.id)).into());
    }
    let fp = fingerprint("hallucination", &(), &cfg, &[&args.records])?;
    let backend = build_backend(&cfg, Some(&args.records))?;
    let embedder = build_embedder(&cfg)?;
    let registry = cfg.registry()?;
    let opts = eval_options(&cfg, fp);
    let mut eval = eval_regional_classification(&records, backend.as_ref(), embedder.as_ref(), &registry, &opts)?;
    let ratio = hallucination_ratio(&eval.outcomes, &GtIndex::from_records(&records), opts.hallucination_denominator)?;
    eval.report.hallucination_ratio = Some(ratio);
    eval.report.robustness_curve = Some(vec![crate::evalkit::RobustnessPoint {
        scale: 0.0,
        accuracy: eval.report.metrics.accuracy.unwrap_or(0.0),
        hallucination_ratio: Some(ratio),
    }]);
    write_evaluation(&args.out_dir, &mut eval)?;
    print!("{}", eval.report.to_text());
    systemic_failure(&eval)?;
    Ok(eval)
}

fn cmd_genchat(args: &GenchatArgs, mut cfg: RunConfig) -> Result<usize, CliError> {
    macro_rules! over {
        ($($a:ident => $($f:ident).+),*) => { $( if let Some(v) = &args.$a { cfg.$($f).+ = v.clone().into(); } )* };
    }
    over!(llm_endpoint => llm.endpoint, llm_fixture => llm.fixture, llm_record => llm.record, temperature => llm.temperature);
    if let Some(m) = &args.llm_model {
        cfg.llm.model = m.clone();
    }
    if let Some(r) = args.rounds {
        cfg.llm.rounds = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.check_paths()?;
    let contexts: Vec<ChatContext> = read_jsonl(&args.contexts)?;
    let seeds: Vec<SeedExample> = read_jsonl(&args.seeds)?;
    for (i, s) in seeds.iter().enumerate() {
        s.validate()
            .map_err(|e| CliError::Data(format!("seed {} in {}: {e}", i + 1, args.seeds.display())))?;
    }
    #[derive(Serialize)]
    struct Params<'a> {
        source: &'a str,
    }
    let source = args.source.clone().unwrap_or_else(|| "region_chat".into());
    let fp = fingerprint("genchat", &Params { source: &source }, &cfg, &[&args.contexts, &args.seeds])?;

    let llm: Box<dyn LlmClient> = match &cfg.llm.fixture {
        Some(path) => Box::new(FixtureLlm::replay(path)?),
        None => {
            let endpoint = cfg
                .llm
                .endpoint
                .clone()
                .ok_or_else(|| CliError::Usage("genchat needs --llm-endpoint or --llm-fixture".into()))?;
            let mut lc = LlmConfig::new(endpoint, cfg.llm.model.clone());
            lc.token = std::env::var(ENV_LLM_TOKEN).ok();
            lc.temperature = cfg.llm.temperature;
            lc.seed = Some(cfg.seed);
            lc.timeout = Duration::try_from_secs_f64(cfg.llm.timeout_secs)
                .map_err(|e| CliError::Usage(format!("timeout_secs: {e}")))?;
            let client: Box<dyn LlmClient> = Box::new(HttpLlmClient::new(lc));
            match &cfg.llm.record {
                Some(path) => Box::new(FixtureLlm::record(client, path)?),
                None => client,
            }
        }
    };
    let gen_cfg = GenerationConfig {
        rounds: cfg.llm.rounds,
        source,
        ..GenerationConfig::default()
    };
    let results = generate_region_chats(&contexts, &seeds, llm.as_ref(), &gen_cfg, cfg.workers);

    let mut records = Vec::new();
    let mut report = String::new();
    let (mut rejected, mut transport, mut retried) = (0usize, 0usize, 0usize);
    for (ctx, result) in contexts.iter().zip(results) {
        let line = match result {
            Ok(chat) => {
                if !chat.rejections.is_empty() {
                    retried += 1;
                }
                records.push(chat.record);
                continue;
            }
            Err(GenerationError::Rejected { rejections, last_reply }) => {
                rejected += 1;
                log::warn!("{}: all {} replies rejected", ctx.image.uri, rejections.len());
                serde_json::json!({"image": ctx.image.uri, "rejections": rejections, "last_reply": last_reply})
            }
            Err(e) => {
                if matches!(e, GenerationError::Transport(_)) {
                    transport += 1;
                }
                log::warn!("{}: {e}", ctx.image.uri);
                serde_json::json!({"image": ctx.image.uri, "error": e.to_string()})
            }
        };
        report.push_str(&line.to_string());
        report.push('\n');
    }
    write_records(&args.output, &records, Some(&OutputMeta::new(fp.clone())))?;
    if let Some(path) = &args.rejections {
        let header = serde_json::json!({"spotkit_meta": OutputMeta::new(fp)}).to_string();
        fs::write(path, format!("{header}\n{report}")).map_err(io_err(path))?;
    }
    println!(
        "generated {} dialogue(s) from {} context(s); {} accepted after retries, {} rejected, {} generator failures",
        records.len(),
        contexts.len(),
        retried,
        rejected,
        transport
    );
    if !contexts.is_empty() && transport == contexts.len() {
        return Err(CliError::Transport("generator unreachable for every context".into()));
    }
    Ok(records.len())
}

fn cmd_serve(args: &ServeArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    args.backend.apply(&mut cfg.backend);
    if let Some(d) = &args.store_dir {
        cfg.session.store_dir = Some(d.clone());
    }
    if let Some(w) = args.history_window {
        cfg.session.history_window = w;
    }
    cfg.check_paths()?;
    let backend = build_backend(&cfg, None)?;
    let ttl = Duration::try_from_secs_f64(cfg.session.ttl_hours * 3600.0)
        .map_err(|e| CliError::Usage(format!("ttl_hours: {e}")))?;
    let store: Arc<dyn SessionStore> = match &cfg.session.store_dir {
        Some(dir) => Arc::new(FileStore::open(dir, Some(ttl)).map_err(|e| CliError::Data(e.to_string()))?),
        None => Arc::new(MemoryStore::with_ttl(ttl)),
    };
    let manager = Arc::new(SessionManager::new(store, backend).with_history_window(cfg.session.history_window));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Transport(e.to_string()))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Transport(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Transport(e.to_string()))?;
        println!("listening on http://{local} (backend {})", manager.backend_id());
        let _ = std::io::stdout().flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        crate::session::serve(listener, manager, shutdown)
            .await
            .map_err(|e| CliError::Transport(e.to_string()))
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(t) = &cli.templates {
        cfg.templates = Some(t.clone());
    }
    cfg.check_paths()?;
    match &cli.command {
        Command::Convert(a) => cmd_convert(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, cfg).map(drop),
        Command::Robustness(a) => cmd_robustness(a, cfg).map(drop),
        Command::Hallucination(a) => cmd_hallucination(a, cfg).map(drop),
        Command::Genchat(a) => cmd_genchat(a, cfg).map(drop),
        Command::Serve(a) => cmd_serve(a, cfg),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
