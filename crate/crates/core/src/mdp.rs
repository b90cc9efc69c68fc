//! Offline RL dataset construction.
//!
//! A [`FeatureSeries`] becomes a list of `(state, action, reward, next_state,
//! done)` tuples. Actions are first differences of the (liquidity, borrow) rate
//! pair; rewards score the successor day's utilization, rates and the size of
//! the move. [`NormStats`] holds the Z-score statistics that training and
//! inference share.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Feature, FeatureRow, FeatureSeries, IngestError, FEATURE_COUNT};

pub const STATE_DIM: usize = FEATURE_COUNT;
pub const ACTION_DIM: usize = 2;
/// Version of the dataset file pair (transitions CSV + JSON sidecar).
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error(transparent)]
    Feature(#[from] IngestError),
    #[error("{name} = {value} is outside its domain")]
    Domain { name: &'static str, value: f64 },
    #[error("invalid reward config: {0}")]
    InvalidConfig(&'static str),
    #[error("series of {0} rows is too short to form a transition")]
    SeriesTooShort(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported dataset format version {0}")]
    FormatVersion(u32),
    #[error("dataset file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MdpError> = std::result::Result<T, E>;

/// The 21 state features in canonical order (see [`Feature::ALL`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub fn get(&self, feature: Feature) -> f64 {
        self.0[feature.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Day-over-day change of the (liquidity, borrow) rate pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionVector {
    pub delta_liquidity_rate: f64,
    pub delta_borrow_rate: f64,
}

impl ActionVector {
    pub fn new(delta_liquidity_rate: f64, delta_borrow_rate: f64) -> Self {
        ActionVector {
            delta_liquidity_rate,
            delta_borrow_rate,
        }
    }

    /// `[Δ liquidity rate, Δ borrow rate]`
    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.delta_liquidity_rate, self.delta_borrow_rate]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        ActionVector::new(a[0], a[1])
    }
}

/// Reward weights. Field names follow the run configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the quadratic utilization penalty.
    pub reward_alpha: f64,
    /// Weight of the borrow cost / supply return term.
    pub reward_beta: f64,
    /// Scaling of supply return relative to borrow cost.
    pub reward_lambda: f64,
    /// Weight of the rate-change penalty.
    pub reward_gamma: f64,
    /// Target utilization.
    pub u_target: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            reward_alpha: 1.0,
            reward_beta: 0.5,
            reward_lambda: 1.0,
            reward_gamma: 0.1,
            u_target: 0.8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.reward_alpha,
            self.reward_beta,
            self.reward_lambda,
            self.reward_gamma,
        ];
        if !weights.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return Err(MdpError::InvalidConfig(
                "reward weights must be non-negative",
            ));
        }
        if !(self.u_target > 0.0 && self.u_target < 1.0) {
            return Err(MdpError::InvalidConfig("u_target must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Reward and its three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub total: f64,
    /// `-α (u - U*)²`
    pub utilization: f64,
    /// `-β b + β λ s`
    pub cost: f64,
    /// `-γ (Δb² + Δr²)`
    pub stability: f64,
}

/// Scores utilization `u`, borrow rate `b`, supply rate `s` and the rate move
/// `a` that led there.
///
/// The total is summed as `(utilization + cost) + stability`.
pub fn compute_reward(
    u: f64,
    b: f64,
    s: f64,
    a: &ActionVector,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    if !(0.0..=1.0).contains(&u) {
        return Err(MdpError::Domain {
            name: "utilization",
            value: u,
        });
    }
    let utilization = -cfg.reward_alpha * (u - cfg.u_target).powi(2);
    let cost = -cfg.reward_beta * b + cfg.reward_beta * cfg.reward_lambda * s;
    let stability =
        -cfg.reward_gamma * (a.delta_borrow_rate.powi(2) + a.delta_liquidity_rate.powi(2));
    Ok(RewardBreakdown {
        total: utilization + cost + stability,
        utilization,
        cost,
        stability,
    })
}

/// Copies a row's features into canonical order.
pub fn assemble_state(row: &FeatureRow) -> Result<StateVector> {
    Ok(StateVector(row.values()?))
}

/// First difference `cur - prev` of `(liquidity_rate, borrow_rate)` pairs.
pub fn derive_action(prev: (f64, f64), cur: (f64, f64)) -> ActionVector {
    ActionVector::new(cur.0 - prev.0, cur.1 - prev.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: ActionVector,
    pub reward: f64,
    pub next_state: StateVector,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub pool_id: String,
    pub reward_config: RewardConfig,
    pub transitions: Vec<Transition>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Builds one transition per consecutive pair of rows.
///
/// Transition `t` pairs row `t`'s state with the rate move from `t` to `t+1`;
/// the reward is evaluated on row `t+1`. Only the last transition is terminal.
pub fn build_dataset(series: &FeatureSeries, cfg: &RewardConfig) -> Result<TransitionDataset> {
    cfg.validate()?;
    let rows = series.rows();
    if rows.len() < 2 {
        return Err(MdpError::SeriesTooShort(rows.len()));
    }
    let mut transitions = Vec::with_capacity(rows.len() - 1);
    let last = rows.len() - 2;
    for (t, pair) in rows.windows(2).enumerate() {
        let (cur, next) = (&pair[0], &pair[1]);
        let action = derive_action(cur.rates()?, next.rates()?);
        let (s, b) = next.rates()?;
        let reward = compute_reward(next.utilization()?, b, s, &action, cfg)?;
        transitions.push(Transition {
            state: assemble_state(cur)?,
            action,
            reward: reward.total,
            next_state: assemble_state(next)?,
            done: t == last,
        });
    }
    Ok(TransitionDataset {
        pool_id: series.pool_id().to_string(),
        reward_config: *cfg,
        transitions,
    })
}

/// Per-dimension Z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; `1.0` for constant dimensions.
    pub std: Vec<f64>,
    /// True where the dimension had zero variance.
    pub constant: Vec<bool>,
}

impl DimStats {
    /// Fits statistics over rows of equal length.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        let mut constant = vec![false; dim];
        for d in 0..dim {
            let column = rows.clone().map(|r| r[d]);
            let first = column.clone().next().unwrap_or(0.0);
            let mut n = 0usize;
            let mut sum = 0.0;
            let mut all_equal = true;
            for x in column.clone() {
                n += 1;
                sum += x;
                all_equal &= x == first;
            }
            if n == 0 || all_equal {
                mean[d] = first;
                constant[d] = true;
                continue;
            }
            let m = sum / n as f64;
            let var = column.map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            mean[d] = m;
            if var > 0.0 {
                std[d] = var.sqrt();
            } else {
                constant[d] = true;
            }
        }
        DimStats {
            mean,
            std,
            constant,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorKind {
    State,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state: DimStats,
    pub action: DimStats,
}

impl NormStats {
    /// Fits state statistics over states and next-states pooled, and action
    /// statistics over all actions.
    pub fn fit(ds: &TransitionDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(MdpError::EmptyDataset);
        }
        let states = ds
            .transitions
            .iter()
            .flat_map(|t| [t.state.as_slice(), t.next_state.as_slice()]);
        let actions: Vec<[f64; ACTION_DIM]> =
            ds.transitions.iter().map(|t| t.action.to_array()).collect();
        Ok(NormStats {
            state: DimStats::fit(states, STATE_DIM),
            action: DimStats::fit(actions.iter().map(|a| a.as_slice()), ACTION_DIM),
        })
    }

    fn stats(&self, kind: VectorKind) -> &DimStats {
        match kind {
            VectorKind::State => &self.state,
            VectorKind::Action => &self.action,
        }
    }

    pub fn transform(&self, kind: VectorKind, x: &[f64], direction: Direction) -> Result<Vec<f64>> {
        let stats = self.stats(kind);
        if x.len() != stats.dim() {
            return Err(MdpError::DimensionMismatch {
                expected: stats.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(stats.mean.iter().zip(&stats.std))
            .map(|(&v, (&m, &s))| match direction {
                Direction::Forward => (v - m) / s,
                Direction::Inverse => v * s + m,
            })
            .collect())
    }

    pub fn normalize_state(&self, s: &StateVector) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (s.0[i] - self.state.mean[i]) / self.state.std[i];
        }
        out
    }

    pub fn normalize_action(&self, a: &ActionVector) -> [f64; ACTION_DIM] {
        let raw = a.to_array();
        let mut out = [0.0; ACTION_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (raw[i] - self.action.mean[i]) / self.action.std[i];
        }
        out
    }

    pub fn denormalize_action(&self, z: &[f64; ACTION_DIM]) -> ActionVector {
        ActionVector::new(
            z[0] * self.action.std[0] + self.action.mean[0],
            z[1] * self.action.std[1] + self.action.mean[1],
        )
    }

    /// Stable 64-bit digest of every statistic, used to tie checkpoints to the
    /// scaling they were trained with.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the IEEE-754 bit patterns.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                hash ^= u64::from(*b);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for stats in [&self.state, &self.action] {
            for v in stats.mean.iter().chain(&stats.std) {
                eat(&v.to_bits().to_le_bytes());
            }
            for c in &stats.constant {
                eat(&[u8::from(*c)]);
            }
        }
        format!("{hash:016x}")
    }
}

/// JSON sidecar describing a transitions file; the compatibility contract
/// between the preprocess, train and evaluate stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub pool_id: String,
    pub feature_order: Vec<String>,
    pub action_order: Vec<String>,
    pub reward_config: RewardConfig,
    pub norm_stats: NormStats,
    pub transitions: usize,
    pub transitions_file: String,
}

fn transition_header() -> Vec<String> {
    let mut header: Vec<String> = Feature::ALL.iter().map(|f| format!("s_{f}")).collect();
    header.push("a_delta_liquidity_rate".into());
    header.push("a_delta_borrow_rate".into());
    header.push("reward".into());
    header.extend(Feature::ALL.iter().map(|f| format!("ns_{f}")));
    header.push("done".into());
    header
}

/// Writes transitions as CSV: `s_*` (21), two action columns, `reward`,
/// `ns_*` (21), `done` (0/1).
pub fn write_transitions_csv<W: Write>(ds: &TransitionDataset, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(transition_header())?;
    for t in &ds.transitions {
        let mut record: Vec<String> = t.state.0.iter().map(f64::to_string).collect();
        record.push(t.action.delta_liquidity_rate.to_string());
        record.push(t.action.delta_borrow_rate.to_string());
        record.push(t.reward.to_string());
        record.extend(t.next_state.0.iter().map(f64::to_string));
        record.push(u8::from(t.done).to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_transitions_csv<R: Read>(input: R) -> Result<Vec<Transition>> {
    let mut reader = csv::Reader::from_reader(input);
    let expected = transition_header();
    let headers = reader.headers()?;
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(MdpError::Malformed("unexpected transition columns".into()));
    }
    let width = expected.len();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(MdpError::Malformed(format!(
                "row {} has {} fields",
                i + 1,
                record.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            record[j]
                .parse()
                .map_err(|_| MdpError::Malformed(format!("row {} column {}", i + 1, expected[j])))
        };
        let mut state = [0.0; STATE_DIM];
        let mut next_state = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            state[d] = num(d)?;
            next_state[d] = num(STATE_DIM + 3 + d)?;
        }
        let done = match &record[width - 1] {
            "0" => false,
            "1" => true,
            other => return Err(MdpError::Malformed(format!("row {} done = {other}", i + 1))),
        };
        out.push(Transition {
            state: StateVector(state),
            action: ActionVector::new(num(STATE_DIM)?, num(STATE_DIM + 1)?),
            reward: num(STATE_DIM + 2)?,
            next_state: StateVector(next_state),
            done,
        });
    }
    Ok(out)
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn save_dataset(
    ds: &TransitionDataset,
    stats: &NormStats,
    dir: &Path,
    stem: &str,
) -> Result<DatasetSidecar> {
    let transitions_file = format!("{stem}.csv");
    let file = std::fs::File::create(dir.join(&transitions_file))?;
    write_transitions_csv(ds, std::io::BufWriter::new(file))?;
    let sidecar = DatasetSidecar {
        format_version: DATASET_FORMAT_VERSION,
        pool_id: ds.pool_id.clone(),
        feature_order: Feature::ALL.iter().map(|f| f.name().to_string()).collect(),
        action_order: vec!["delta_liquidity_rate".into(), "delta_borrow_rate".into()],
        reward_config: ds.reward_config,
        norm_stats: stats.clone(),
        transitions: ds.len(),
        transitions_file,
    };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(sidecar)
}

/// Loads a dataset through its sidecar, checking version and feature order.
pub fn load_dataset(sidecar_path: &Path) -> Result<(TransitionDataset, DatasetSidecar)> {
    let sidecar: DatasetSidecar = serde_json::from_slice(&std::fs::read(sidecar_path)?)?;
    if sidecar.format_version != DATASET_FORMAT_VERSION {
        return Err(MdpError::FormatVersion(sidecar.format_version));
    }
    let order_matches = sidecar
        .feature_order
        .iter()
        .map(String::as_str)
        .eq(Feature::ALL.iter().map(|f| f.name()));
    if !order_matches {
        return Err(MdpError::Malformed("feature order differs".into()));
    }
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(dir.join(&sidecar.transitions_file))?;
    let transitions = read_transitions_csv(std::io::BufReader::new(file))?;
    if transitions.len() != sidecar.transitions {
        return Err(MdpError::Malformed(format!(
            "sidecar lists {} transitions, file has {}",
            sidecar.transitions,
            transitions.len()
        )));
    }
    let ds = TransitionDataset {
        pool_id: sidecar.pool_id.clone(),
        reward_config: sidecar.reward_config,
        transitions,
    };
    Ok((ds, sidecar))
}
