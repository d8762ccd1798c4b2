//! `gazemd` command line: benchmark generation, training, scoring,
//! evaluation, ablation sweeps and reports.
//!
//! Every command writes its outputs only after all of them have been
//! produced; a failure leaves no partial files behind.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gazemd_core::config::RunConfig;
use gazemd_core::eval::{
    ablation_grid, flat_region, score_sessions, threshold_sweep, AblationGrid,
    FlatRegion, MetricsReport,
};
use gazemd_core::io::{self, Artifact, FormatError};
use gazemd_core::model::{train_with_progress, LossCurve};
use gazemd_core::pipeline::{extract_windows, label_stream, stream_from_windows, DetectConfig, LabeledScore, SessionRecord};
use gazemd_core::synth::{generate_benchmark, Manifest, Split, SupervisionMode};
use gazemd_core::{CompletionModel, FusionMode, ScoreFunction};

mod report;
pub mod svg;

pub use report::{ActionTypeRow, HistogramRow, ReportData, RocRow, StatsSummary};

pub const LOG_ENV: &str = "GAZEMD_LOG";

// ============================================================================
// Arguments
// ============================================================================

#[derive(Debug, Parser)]
#[command(name = "gazemd", version, about = "Gaze-based procedural mistake detection")]
pub struct Cli {
    /// Run configuration (JSON). May also be any artifact written by this
    /// tool, in which case its embedded configuration is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_parser = ["benchmark", "tiny"])]
    pub preset: Option<String>,
    /// Root seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Fusion mode: none, ch, corr or ch+corr.
    #[arg(long, global = true)]
    pub fusion: Option<FusionMode>,
    /// Scoring function: entropy, euclidean, dtw or heatmap.
    #[arg(long, global = true)]
    pub scoring: Option<ScoreFunction>,
    /// Detection stride.
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Window length F.
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    /// Supervision mode: one-class or unsupervised.
    #[arg(long, global = true, value_parser = parse_supervision)]
    pub supervision: Option<SupervisionMode>,
}

fn parse_supervision(s: &str) -> std::result::Result<SupervisionMode, String> {
    match s {
        "one-class" | "one_class" | "oneclass" => Ok(SupervisionMode::OneClass),
        "unsupervised" => Ok(SupervisionMode::Unsupervised),
        _ => Err(format!("unknown supervision mode `{s}` (one-class, unsupervised)")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Benchmark directory; defaults to <out>/benchmark.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    /// Model checkpoint; defaults to <out>/model.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and its manifest.
    Generate {
        /// Also write a line-oriented text export of every session.
        #[arg(long)]
        text: bool,
    },
    /// Train a completion model on the training split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
    },
    /// Write one score stream per session.
    Score {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Metrics of one model and scoring function on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
    },
    /// Fusion x scoring ablation grid and prediction-length ablation.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
    },
    /// CSV tables and SVG plots for one model.
    Report {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split `{s}` (train, val, test)"))
}

// ============================================================================
// Errors
// ============================================================================

#[derive(Debug)]
pub struct ConfigMismatch(pub String);

impl fmt::Display for ConfigMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config mismatch: {}", self.0)
    }
}

impl std::error::Error for ConfigMismatch {}

/// Machine-readable error printed to stderr on failure.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<ConfigMismatch>() {
            return "config_mismatch";
        }
        if let Some(f) = cause.downcast_ref::<FormatError>() {
            return match f {
                FormatError::ConfigMismatch(_) => "config_mismatch",
                FormatError::Io { .. } => "io",
                _ => "format",
            };
        }
        if cause.is::<serde_json::Error>() {
            return "config";
        }
        if cause.is::<gazemd_core::config::ConfigError>() {
            return "config";
        }
    }
    "runtime"
}

// ============================================================================
// Output staging
// ============================================================================

/// Files produced by a command, committed together at the end.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn bytes(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.bytes(path, s.into_bytes());
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, path: PathBuf, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        self.bytes(path, w.into_inner().map_err(|e| anyhow!("{e}"))?);
        Ok(())
    }

    /// Writes every file atomically; on failure removes the ones already
    /// written.
    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            let res = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or(Ok(()), std::fs::create_dir_all)
                .with_context(|| format!("creating directory for {}", path.display()))
                .and_then(|_| io::write_atomic(&path, &bytes).map_err(anyhow::Error::from));
            if let Err(e) = res {
                for p in &done {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e);
            }
            done.push(path);
        }
        Ok(done)
    }
}

// ============================================================================
// Configuration and data loading
// ============================================================================

/// Reads a run configuration, either bare or embedded in an artifact.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let value = match value {
        serde_json::Value::Object(mut m) if m.contains_key("tool_version") && m.contains_key("config") => {
            m.remove("config").expect("checked")
        }
        v => v,
    };
    Ok(serde_json::from_value(value).with_context(|| format!("parsing run config {}", path.display()))?)
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match (&cli.config, cli.preset.as_deref()) {
        (Some(p), _) => load_config(p)?,
        (None, Some("tiny")) => RunConfig::tiny(),
        _ => RunConfig::benchmark(),
    };
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    let o = &cli.overrides;
    if let Some(f) = o.fusion {
        run = run.with_fusion(f);
    }
    if let Some(s) = o.scoring {
        run.detect.function = s;
    }
    if let Some(s) = o.stride {
        run.detect.stride = s;
    }
    if let Some(f) = o.frames {
        run = run.with_frames(f);
    }
    if let Some(m) = o.supervision {
        run = run.with_supervision(m);
    }
    run.validate()?;
    Ok(run)
}

type ManifestArtifact = Artifact<RunConfig, Manifest>;

struct Data {
    sessions: Vec<SessionRecord>,
}

fn session_path(dir: &Path, split: Split, id: &str) -> PathBuf {
    dir.join(split.name()).join(format!("{id}.gzs"))
}

/// Loads one split, checking the manifest against the run. With
/// `ignore_mode` the supervision mode may differ: the validation and test
/// splits do not depend on it.
fn load_split(dir: &Path, run: &RunConfig, split: Split, ignore_mode: bool) -> Result<Data> {
    let art: ManifestArtifact = io::read_json(&dir.join("manifest.json"))?;
    let mut expected = run.benchmark_config();
    if ignore_mode && split != Split::Train {
        expected.mode = art.data.config.mode;
    }
    if art.data.config != expected {
        let a = serde_json::to_value(&art.data.config)?;
        let b = serde_json::to_value(&expected)?;
        let diff: Vec<String> = match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(v))
                .map(|(k, v)| format!("{k}: data has {v}, run expects {}", b.get(k).cloned().unwrap_or_default()))
                .collect(),
            _ => vec!["benchmark".into()],
        };
        return Err(ConfigMismatch(format!("benchmark in {}: {}", dir.display(), diff.join("; "))).into());
    }
    let sessions = art
        .data
        .sessions
        .iter()
        .filter(|e| e.split == split)
        .map(|e| Ok(io::read_session(&session_path(dir, split, &e.session_id))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Data { sessions })
}

struct Paths {
    out: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

impl Paths {
    fn new(out: &Path, data: Option<&DataArgs>, ck: Option<&CheckpointArgs>) -> Self {
        Self {
            out: out.to_path_buf(),
            data: data
                .and_then(|d| d.data.clone())
                .unwrap_or_else(|| out.join("benchmark")),
            checkpoint: ck
                .and_then(|c| c.checkpoint.clone())
                .unwrap_or_else(|| out.join("model.ckpt")),
        }
    }
}

fn load_model(path: &Path, run: &RunConfig) -> Result<CompletionModel> {
    let (model, _) = io::load_checkpoint(path, Some(&run.model))?;
    Ok(model)
}

fn train_model(run: &RunConfig, sessions: &[SessionRecord]) -> Result<(CompletionModel, LossCurve)> {
    let mut windows = Vec::new();
    for s in sessions {
        windows.extend(extract_windows(s, run.model.frames, run.train.stride)?.windows);
    }
    let variant = run.model.fusion_mode.label();
    log::info!("training {variant} (F={}) on {} windows", run.model.frames, windows.len());
    let tc = run.train_config(variant);
    Ok(train_with_progress(&windows, &run.model, &tc, |epoch, loss| {
        log::info!("  epoch {epoch} loss {loss:.5}");
    })?)
}

fn checkpoint_bytes(model: &CompletionModel, run: &RunConfig) -> Result<Vec<u8>> {
    Ok(io::encode_checkpoint(model, Some(serde_json::to_value(run)?))?)
}

/// Pooled labeled scores of one model on `sessions`.
fn labeled_scores(
    model: &CompletionModel,
    sessions: &[SessionRecord],
    detect: &DetectConfig,
) -> Result<Vec<(usize, LabeledScore)>> {
    let scores = score_sessions(sessions, model, detect.stride)?;
    let mut out = Vec::new();
    for s in &scores {
        let session = &sessions[s.session];
        let stream = stream_from_windows(&session.session_id, &s.windows, detect);
        out.extend(label_stream(session, &stream)?.into_iter().map(|l| (s.session, l)));
    }
    Ok(out)
}

// ============================================================================
// Commands
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    pub fusion: FusionMode,
    pub function: ScoreFunction,
    pub report: MetricsReport,
    /// Widest θ interval with F1 within 10% of the best.
    pub flat_region: Option<FlatRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLengthRow {
    pub frames: usize,
    pub fusion: FusionMode,
    pub function: ScoreFunction,
    pub auc: Option<f64>,
    pub best_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub auc: Option<f64>,
    pub best_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

fn cmd_generate(run: &RunConfig, out: &Path, text: bool) -> Result<Outputs> {
    let bench = generate_benchmark(&run.benchmark_config())?;
    let dir = out.join("benchmark");
    let mut o = Outputs::default();
    for split in Split::ALL {
        for s in bench.split(split) {
            o.bytes(session_path(&dir, split, &s.session_id), io::encode_session(s));
            if text {
                o.bytes(
                    dir.join(split.name()).join(format!("{}.txt", s.session_id)),
                    io::session_to_text(s).into_bytes(),
                );
            }
        }
    }
    log::info!(
        "generated {} sessions ({} train / {} val / {} test)",
        bench.manifest.sessions.len(),
        bench.train.len(),
        bench.val.len(),
        bench.test.len()
    );
    o.json(dir.join("manifest.json"), &Artifact::new(run.clone(), bench.manifest))?;
    Ok(o)
}

fn cmd_train(run: &RunConfig, p: &Paths) -> Result<Outputs> {
    let data = load_split(&p.data, run, Split::Train, false)?;
    let (model, curve) = train_model(run, &data.sessions)?;
    let mut o = Outputs::default();
    o.bytes(p.checkpoint.clone(), checkpoint_bytes(&model, run)?);
    o.json(p.out.join("loss_curve.json"), &Artifact::new(run.clone(), curve))?;
    Ok(o)
}

fn cmd_score(run: &RunConfig, p: &Paths, split: Split) -> Result<Outputs> {
    let data = load_split(&p.data, run, split, true)?;
    let model = load_model(&p.checkpoint, run)?;
    let scores = score_sessions(&data.sessions, &model, run.detect.stride)?;
    let mut o = Outputs::default();
    for s in &scores {
        let session = &data.sessions[s.session];
        let stream = stream_from_windows(&session.session_id, &s.windows, &run.detect);
        o.json(
            p.out.join("scores").join(format!("{}.json", session.session_id)),
            &Artifact::new(run.clone(), stream),
        )?;
    }
    Ok(o)
}

fn evaluate(run: &RunConfig, p: &Paths) -> Result<(Data, Vec<(usize, LabeledScore)>, EvalSummary)> {
    let data = load_split(&p.data, run, Split::Test, true)?;
    let model = load_model(&p.checkpoint, run)?;
    let labeled = labeled_scores(&model, &data.sessions, &run.detect)?;
    let pairs: Vec<(f64, bool)> = labeled.iter().map(|(_, l)| (l.score, l.label)).collect();
    let report = threshold_sweep(&pairs)?;
    let summary = EvalSummary {
        split: Split::Test,
        fusion: run.model.fusion_mode,
        function: run.detect.function,
        flat_region: flat_region(&report, 0.9),
        report,
    };
    Ok((data, labeled, summary))
}

fn cmd_eval(run: &RunConfig, p: &Paths) -> Result<Outputs> {
    let (_, _, summary) = evaluate(run, p)?;
    log::info!(
        "{} / {}: auc {:?} best f1 {:.4}",
        summary.fusion.label(),
        summary.function.name(),
        summary.report.auc,
        summary.report.best_f1
    );
    let mut o = Outputs::default();
    o.json(p.out.join("metrics.json"), &Artifact::new(run.clone(), summary))?;
    Ok(o)
}

fn cmd_sweep(run: &RunConfig, p: &Paths) -> Result<Outputs> {
    let train = load_split(&p.data, run, Split::Train, false)?;
    let test = load_split(&p.data, run, Split::Test, false)?;
    let mut o = Outputs::default();
    let models_dir = p.out.join("models");

    let mut models = Vec::new();
    for &fusion in &run.sweep.fusion_modes {
        let r = run.with_fusion(fusion);
        let (model, _) = train_model(&r, &train.sessions)?;
        o.bytes(models_dir.join(format!("{}.ckpt", fusion.label())), checkpoint_bytes(&model, &r)?);
        models.push((fusion, model));
    }
    let refs: Vec<(FusionMode, &CompletionModel)> = models.iter().map(|(f, m)| (*f, m)).collect();
    let seed = gazemd_core::seed::derive_seed(run.seed, "ablation", 0);
    let grid: AblationGrid = ablation_grid(&test.sessions, &refs, &run.sweep.functions, &run.detect, seed)?;
    let rows: Vec<AblationRow> = grid
        .cells
        .iter()
        .map(|c| AblationRow {
            variant: c.label(),
            auc: c.report.auc,
            best_f1: c.report.best_f1,
            precision: c.report.precision_at_best_f1,
            recall: c.report.recall_at_best_f1,
            threshold: c.report.best_threshold,
        })
        .collect();
    o.json(p.out.join("ablation.json"), &Artifact::new(run.clone(), grid))?;
    o.csv(p.out.join("ablation.csv"), &rows)?;

    let fusion = run.model.fusion_mode;
    let mut lengths = Vec::new();
    for &frames in &run.sweep.prediction_frames {
        let r = run.with_frames(frames);
        r.validate()?;
        let reuse = models.iter().find(|(f, _)| *f == fusion).filter(|_| frames == run.model.frames);
        let trained;
        let model = match reuse {
            Some((_, m)) => m,
            None => {
                trained = train_model(&r, &train.sessions)?.0;
                o.bytes(
                    models_dir.join(format!("{}-f{frames}.ckpt", fusion.label())),
                    checkpoint_bytes(&trained, &r)?,
                );
                &trained
            }
        };
        let labeled = labeled_scores(model, &test.sessions, &r.detect)?;
        let pairs: Vec<(f64, bool)> = labeled.iter().map(|(_, l)| (l.score, l.label)).collect();
        let rep = threshold_sweep(&pairs)?;
        lengths.push(PredictionLengthRow {
            frames,
            fusion,
            function: r.detect.function,
            auc: rep.auc,
            best_f1: rep.best_f1,
        });
    }
    o.json(p.out.join("prediction_length.json"), &Artifact::new(run.clone(), lengths))?;
    Ok(o)
}

fn cmd_report(run: &RunConfig, p: &Paths) -> Result<Outputs> {
    let (data, labeled, summary) = evaluate(run, p)?;
    let dir = p.out.join("report");
    let mut o = Outputs::default();
    report::build(run, &data.sessions, &labeled, &summary, &dir, &mut o)?;
    Ok(o)
}

// ============================================================================
// Entry point
// ============================================================================

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let run = resolve_config(cli)?;
    let out = cli.out.as_path();
    let outputs = match &cli.command {
        Command::Generate { text } => cmd_generate(&run, out, *text)?,
        Command::Train { data, checkpoint } => cmd_train(&run, &Paths::new(out, Some(data), Some(checkpoint)))?,
        Command::Score { data, checkpoint, split } => {
            cmd_score(&run, &Paths::new(out, Some(data), Some(checkpoint)), *split)?
        }
        Command::Eval { data, checkpoint } => cmd_eval(&run, &Paths::new(out, Some(data), Some(checkpoint)))?,
        Command::Sweep { data } => cmd_sweep(&run, &Paths::new(out, Some(data), None))?,
        Command::Report { data, checkpoint } => cmd_report(&run, &Paths::new(out, Some(data), Some(checkpoint)))?,
    };
    outputs.commit()
}

/// Runs the tool on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            let report = ErrorReport {
                kind: error_kind(&e).into(),
                message: format!("{e:#}"),
            };
            eprintln!("{}", serde_json::to_string(&serde_json::json!({ "error": report })).unwrap_or_default());
            1
        }
    }
}
