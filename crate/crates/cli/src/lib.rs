//! Stage runner behind the `lendrl` binary.
//!
//! Each stage reads the previous stage's files and writes its own under
//! `<output_dir>/<pool>/<stage>/`. After every stage the resolved config is
//! echoed to `<output_dir>/config.resolved.json` and `manifest.json` is
//! rewritten with the SHA-256 of every artifact.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use lendrl_core::agents::{self, AgentError, Algorithm, Checkpoint, TrainConfig};
use lendrl_core::evaluate::{
    self, default_magnitude_edges, default_stress_windows, EvalError, EvalReport, RateTrajectory,
    RuleBasedPolicy, StressWindow,
};
use lendrl_core::ingest::{
    self, FeatureSeries, IngestError, SnapshotSchema, DEFAULT_EPSILON, DEFAULT_WINDOW,
};
use lendrl_core::mdp::{self, MdpError, NormStats, RewardConfig};
use lendrl_core::ratecurve::{self, CurveError, KinkParams};

pub const ENV_PREFIX: &str = "LENDRL_";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    ParseError {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("missing {stage} artifact {path}; run `{stage}` first")]
    MissingArtifact { stage: Stage, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ParseError { .. } | CliError::InvalidValue { .. } => 2,
            CliError::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::InvalidValue {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Preprocess,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What the candidate policy is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// The historically recorded rates.
    Recorded,
    /// The kinked curve applied to historical utilization.
    RuleBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Snapshot file per pool id. Relative paths resolve against the config
    /// file's directory.
    pub inputs: BTreeMap<String, PathBuf>,
    pub schema: SnapshotSchema,
    pub window: usize,
    pub epsilon: f64,
    pub reward: RewardConfig,
    pub kink: KinkParams,
    pub train: TrainConfig,
    /// Leading fraction of days used for training; the rest is evaluated.
    pub split_fraction: f64,
    pub stress_windows: Vec<StressWindow>,
    pub baseline: BaselineMode,
    pub rate_cap: f64,
    pub output_dir: PathBuf,
    /// Authoritative seed; copied into `train.seed` when the config resolves.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: BTreeMap::new(),
            schema: SnapshotSchema::default(),
            window: DEFAULT_WINDOW,
            epsilon: DEFAULT_EPSILON,
            reward: RewardConfig::default(),
            kink: KinkParams::default(),
            train: TrainConfig::default(),
            split_fraction: 0.8,
            stress_windows: default_stress_windows(),
            baseline: BaselineMode::Recorded,
            rate_cap: evaluate::DEFAULT_RATE_CAP,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(invalid("inputs", "at least one pool input is required"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(invalid(
                "split_fraction",
                format!("{} is not in (0, 1)", self.split_fraction),
            ));
        }
        if self.window < 1 {
            return Err(invalid("window", "must be >= 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive"));
        }
        if !(self.rate_cap > 0.0) {
            return Err(invalid("rate_cap", "must be positive"));
        }
        self.reward
            .validate()
            .map_err(|e| invalid("reward", e.to_string()))?;
        self.kink
            .validate()
            .map_err(|e| invalid("kink", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        for w in &self.stress_windows {
            if w.end < w.start {
                return Err(invalid(
                    "stress_windows",
                    format!("{} ends before it starts", w.label),
                ));
            }
        }
        Ok(())
    }

    /// Pools a stage acts on: the selected one, or all of them.
    pub fn pools(&self, selected: Option<&str>) -> Result<Vec<String>> {
        match selected {
            Some(p) if self.inputs.contains_key(p) => Ok(vec![p.to_string()]),
            Some(p) => Err(invalid(
                "pool",
                format!(
                    "{p} is not one of {:?}",
                    self.inputs.keys().collect::<Vec<_>>()
                ),
            )),
            None => Ok(self.inputs.keys().cloned().collect()),
        }
    }

    pub fn pool_dir(&self, pool: &str, stage: Stage) -> PathBuf {
        self.output_dir.join(sanitize(pool)).join(stage.name())
    }
}

fn sanitize(pool: &str) -> String {
    pool.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Reads a config file, fills defaults and resolves relative input paths.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::ParseError {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for input in cfg.inputs.values_mut() {
        if input.is_relative() {
            *input = base.join(&*input);
        }
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Command-line and environment overrides, applied after loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub algo: Option<Algorithm>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        if let Some(algo) = self.algo {
            cfg.train.algorithm = algo;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path, stage: Stage) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        });
    }
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn finish<W: Write>(mut w: W, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

/// Runs one stage for the selected pool (or every pool) and refreshes the
/// config echo and manifest.
pub fn run(stage: Stage, cfg: &RunConfig, pool: Option<&str>) -> Result<()> {
    let pools = cfg.pools(pool)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(RESOLVED_CONFIG), cfg)?;
    match stage {
        Stage::Preprocess => pools.iter().try_for_each(|p| preprocess(cfg, p))?,
        Stage::Train => pools.iter().try_for_each(|p| train(cfg, p))?,
        Stage::Evaluate => pools.iter().try_for_each(|p| evaluate(cfg, p))?,
        Stage::Report => report(cfg, &pools)?,
    }
    write_manifest(&cfg.output_dir)
}

/// All four stages in order.
pub fn run_pipeline(cfg: &RunConfig, pool: Option<&str>) -> Result<()> {
    Stage::ALL.iter().try_for_each(|&s| run(s, cfg, pool))
}

fn features_path(cfg: &RunConfig, pool: &str, part: &str) -> PathBuf {
    cfg.pool_dir(pool, Stage::Preprocess)
        .join(format!("features_{part}.csv"))
}

const DATASET_STEM: &str = "transitions_train";

fn preprocess(cfg: &RunConfig, pool: &str) -> Result<()> {
    let input = &cfg.inputs[pool];
    if !input.exists() {
        return Err(invalid(
            "inputs",
            format!("{} does not exist", input.display()),
        ));
    }
    let mut by_pool = ingest::group_by_pool(ingest::read_snapshots(input, &cfg.schema)?);
    let snapshots = match by_pool.remove(pool) {
        Some(s) => s,
        // a single-pool file may use any pool id
        None if by_pool.len() == 1 => by_pool.into_values().next().unwrap_or_default(),
        None => {
            return Err(invalid(
                "inputs",
                format!("{} has no rows for pool {pool}", input.display()),
            ))
        }
    };
    let mut series = ingest::build_feature_series(&snapshots, cfg.window, cfg.epsilon)?;
    if series.pool_id() != pool {
        series = FeatureSeries::new(pool, cfg.window, series.rows().to_vec())?;
    }
    let (train_part, eval_part) = series.split_at_fraction(cfg.split_fraction);
    if eval_part.len() < 2 {
        return Err(invalid(
            "split_fraction",
            "leaves fewer than two evaluation days",
        ));
    }
    let ds = mdp::build_dataset(&train_part, &cfg.reward)?;
    let stats = NormStats::fit(&ds)?;

    let dir = cfg.pool_dir(pool, Stage::Preprocess);
    create_dir(&dir)?;
    for (part, s) in [
        ("all", &series),
        ("train", &train_part),
        ("eval", &eval_part),
    ] {
        let path = features_path(cfg, pool, part);
        let mut w = create(&path)?;
        s.write_csv(&mut w)?;
        finish(w, &path)?;
    }
    mdp::save_dataset(&ds, &stats, &dir, DATASET_STEM)?;
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, pool: &str, algo: Algorithm) -> PathBuf {
    cfg.pool_dir(pool, Stage::Train)
        .join(format!("checkpoint_{}.json", algo.tag()))
}

fn train(cfg: &RunConfig, pool: &str) -> Result<()> {
    let sidecar = cfg
        .pool_dir(pool, Stage::Preprocess)
        .join(format!("{DATASET_STEM}.json"));
    if !sidecar.exists() {
        return Err(CliError::MissingArtifact {
            stage: Stage::Preprocess,
            path: sidecar,
        });
    }
    let (ds, meta) = mdp::load_dataset(&sidecar)?;
    let (bundle, log) = agents::train(&ds, &meta.norm_stats, &cfg.train)?;

    let dir = cfg.pool_dir(pool, Stage::Train);
    create_dir(&dir)?;
    let algo = cfg.train.algorithm;
    write_bytes(
        &checkpoint_path(cfg, pool, algo),
        &Checkpoint::new(bundle).to_json()?,
    )?;
    let log_path = dir.join(format!("trainlog_{}.csv", algo.tag()));
    let mut w = create(&log_path)?;
    log.write_csv(&mut w)?;
    finish(w, &log_path)
}

fn write_trajectory(traj: &RateTrajectory, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    traj.write_csv(&mut w)?;
    finish(w, path)
}

fn evaluate(cfg: &RunConfig, pool: &str) -> Result<()> {
    let algo = cfg.train.algorithm;
    let ckpt_path = checkpoint_path(cfg, pool, algo);
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut open(&ckpt_path, Stage::Train)?, &mut bytes)
        .map_err(io_err(&ckpt_path))?;
    let bundle = Checkpoint::from_json(&bytes)?.bundle;

    let eval_path = features_path(cfg, pool, "eval");
    let series = FeatureSeries::read_csv(pool, cfg.window, open(&eval_path, Stage::Preprocess)?)?;
    let baseline = match cfg.baseline {
        BaselineMode::Recorded => ratecurve::recorded_trajectory(&series)?,
        BaselineMode::RuleBased => {
            let policy = RuleBasedPolicy(cfg.kink);
            evaluate::replay_policy(&policy, &series, cfg.rate_cap)?
        }
    };
    let candidate = evaluate::replay_policy(&bundle, &series, cfg.rate_cap)?;
    let report = evaluate::build_report(
        &baseline,
        &candidate,
        &cfg.stress_windows,
        &default_magnitude_edges(),
    )?;

    let dir = cfg.pool_dir(pool, Stage::Evaluate);
    create_dir(&dir)?;
    let tag = algo.tag();
    write_trajectory(&baseline, &dir.join("trajectory_baseline.csv"))?;
    write_trajectory(&candidate, &dir.join(format!("trajectory_{tag}.csv")))?;
    write_json(&dir.join(format!("eval_report_{tag}.json")), &report)?;
    let vol_path = dir.join(format!("volatility_{tag}.csv"));
    let mut w = create(&vol_path)?;
    report.write_volatility_csv(&mut w)?;
    finish(w, &vol_path)?;
    let stress_path = dir.join(format!("stress_{tag}.csv"));
    let mut w = create(&stress_path)?;
    report.write_stress_csv(&mut w)?;
    finish(w, &stress_path)
}

/// Every evaluation report on disk for `pool`, ordered by algorithm tag.
fn collect_reports(cfg: &RunConfig, pool: &str) -> Result<Vec<(String, EvalReport)>> {
    let dir = cfg.pool_dir(pool, Stage::Evaluate);
    let mut reports = Vec::new();
    for algo in [Algorithm::Bc, Algorithm::Cql, Algorithm::Td3bc] {
        let path = dir.join(format!("eval_report_{}.json", algo.tag()));
        if path.exists() {
            let report: EvalReport = serde_json::from_reader(open(&path, Stage::Evaluate)?)?;
            reports.push((algo.to_string(), report));
        }
    }
    if reports.is_empty() {
        return Err(CliError::MissingArtifact {
            stage: Stage::Evaluate,
            path: dir.join("eval_report_<algo>.json"),
        });
    }
    Ok(reports)
}

fn report(cfg: &RunConfig, pools: &[String]) -> Result<()> {
    let mut text = String::new();
    for pool in pools {
        for (algo, report) in collect_reports(cfg, pool)? {
            text.push_str(&format!("== {pool} / {algo} ==\n"));
            text.push_str(&report.render_text());
            text.push('\n');
        }
    }
    let dir = cfg.output_dir.join(Stage::Report.name());
    create_dir(&dir)?;
    write_bytes(&dir.join("summary.txt"), text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes of every file under `root` except the manifest, sorted by path.
pub fn manifest_entries(root: &Path) -> Result<Vec<ManifestEntry>> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    let mut entries = Vec::new();
    for path in files {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST {
            continue;
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            path: rel,
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

pub fn write_manifest(root: &Path) -> Result<()> {
    let entries = manifest_entries(root)?;
    write_json(&root.join(MANIFEST), &entries)
}
