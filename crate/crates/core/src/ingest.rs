//! Reserve snapshot ingestion and feature engineering.
//!
//! Raw daily reserve records (CSV with a header, or JSON-lines) are parsed into
//! [`ReserveSnapshot`]s, scaled to token units, and turned into a
//! [`FeatureSeries`] whose rows carry the 21 state features in the canonical
//! L/D/I/R order defined by [`Feature::ALL`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rolling window length used when none is configured.
pub const DEFAULT_WINDOW: usize = 7;
/// Denominator guard used for utilization, LTV and volume ratios.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Number of state features per row.
pub const FEATURE_COUNT: usize = 21;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse column `{column}`")]
    UnparsableField { row: usize, column: String },
    #[error("row {row}: column `{column}` out of range")]
    OutOfRange { row: usize, column: String },
    #[error("row {row}: timestamp is not strictly increasing")]
    NonMonotonicTimestamp { row: usize },
    #[error("series of length {len} is shorter than the window {window}")]
    WindowTooLong { len: usize, window: usize },
    #[error("rolling window must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("duplicate date {0} in series")]
    DuplicateDate(NaiveDate),
    #[error("series mixes pools `{0}` and `{1}`")]
    MixedPools(String, String),
    #[error("feature `{0}` is missing")]
    MissingFeature(&'static str),
    #[error("feature `{feature}` is not finite on {date}")]
    NonFiniteFeature {
        feature: &'static str,
        date: NaiveDate,
    },
    #[error("feature rows are not sorted by date at {0}")]
    UnsortedRows(NaiveDate),
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("unknown input format for `{0}` (expected .csv, .jsonl or .ndjson)")]
    UnknownFormat(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// One day of raw reserve metrics for a single pool.
///
/// Token amounts are raw on-chain integers; divide by `10^decimals` (see
/// [`normalize_units`]) to obtain token units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveSnapshot {
    pub timestamp_unix: i64,
    pub pool_id: String,
    pub decimals: u32,
    pub available_liquidity: u128,
    pub total_liquidity: u128,
    pub total_liquidity_as_collateral: u128,
    pub total_debt: u128,
    pub total_variable_debt: u128,
    pub liquidity_rate_apr: f64,
    pub variable_borrow_rate_apr: f64,
    pub liquidity_index: f64,
    pub variable_borrow_index: f64,
    pub deposit_volume: u128,
    pub borrow_volume: u128,
    pub base_ltv_as_collateral: f64,
    pub reserve_factor: f64,
    pub reserve_liquidation_threshold: f64,
}

/// Fields of a [`ReserveSnapshot`], used as keys of the column map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotField {
    TimestampUnix,
    PoolId,
    Decimals,
    AvailableLiquidity,
    TotalLiquidity,
    TotalLiquidityAsCollateral,
    TotalDebt,
    TotalVariableDebt,
    LiquidityRateApr,
    VariableBorrowRateApr,
    LiquidityIndex,
    VariableBorrowIndex,
    DepositVolume,
    BorrowVolume,
    BaseLtvAsCollateral,
    ReserveFactor,
    ReserveLiquidationThreshold,
}

impl SnapshotField {
    pub const ALL: [SnapshotField; 17] = [
        SnapshotField::TimestampUnix,
        SnapshotField::PoolId,
        SnapshotField::Decimals,
        SnapshotField::AvailableLiquidity,
        SnapshotField::TotalLiquidity,
        SnapshotField::TotalLiquidityAsCollateral,
        SnapshotField::TotalDebt,
        SnapshotField::TotalVariableDebt,
        SnapshotField::LiquidityRateApr,
        SnapshotField::VariableBorrowRateApr,
        SnapshotField::LiquidityIndex,
        SnapshotField::VariableBorrowIndex,
        SnapshotField::DepositVolume,
        SnapshotField::BorrowVolume,
        SnapshotField::BaseLtvAsCollateral,
        SnapshotField::ReserveFactor,
        SnapshotField::ReserveLiquidationThreshold,
    ];

    /// Default column name, identical to the struct field name.
    pub fn default_column(self) -> &'static str {
        match self {
            SnapshotField::TimestampUnix => "timestamp_unix",
            SnapshotField::PoolId => "pool_id",
            SnapshotField::Decimals => "decimals",
            SnapshotField::AvailableLiquidity => "available_liquidity",
            SnapshotField::TotalLiquidity => "total_liquidity",
            SnapshotField::TotalLiquidityAsCollateral => "total_liquidity_as_collateral",
            SnapshotField::TotalDebt => "total_debt",
            SnapshotField::TotalVariableDebt => "total_variable_debt",
            SnapshotField::LiquidityRateApr => "liquidity_rate_apr",
            SnapshotField::VariableBorrowRateApr => "variable_borrow_rate_apr",
            SnapshotField::LiquidityIndex => "liquidity_index",
            SnapshotField::VariableBorrowIndex => "variable_borrow_index",
            SnapshotField::DepositVolume => "deposit_volume",
            SnapshotField::BorrowVolume => "borrow_volume",
            SnapshotField::BaseLtvAsCollateral => "base_ltv_as_collateral",
            SnapshotField::ReserveFactor => "reserve_factor",
            SnapshotField::ReserveLiquidationThreshold => "reserve_liquidation_threshold",
        }
    }
}

/// Maps snapshot fields to input column names. Fields absent from the map use
/// [`SnapshotField::default_column`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnapshotSchema {
    overrides: BTreeMap<SnapshotField, String>,
}

impl SnapshotSchema {
    pub fn with_column(mut self, field: SnapshotField, column: impl Into<String>) -> Self {
        self.overrides.insert(field, column.into());
        self
    }

    pub fn column(&self, field: SnapshotField) -> &str {
        self.overrides
            .get(&field)
            .map(String::as_str)
            .unwrap_or_else(|| field.default_column())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    JsonLines,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(InputFormat::Csv),
            Some("jsonl") | Some("ndjson") => Ok(InputFormat::JsonLines),
            _ => Err(IngestError::UnknownFormat(path.display().to_string())),
        }
    }
}

/// Reads and parses a snapshot file, choosing the format from its extension.
pub fn read_snapshots(path: &Path, schema: &SnapshotSchema) -> Result<Vec<ReserveSnapshot>> {
    let format = InputFormat::from_path(path)?;
    let bytes = std::fs::read(path)?;
    parse_snapshots(&bytes, format, schema)
}

/// Parses snapshot records and returns them sorted by timestamp.
///
/// Rows are numbered from 1 (first data record) in error messages. Two records
/// of the same pool with the same timestamp are rejected.
pub fn parse_snapshots(
    input: &[u8],
    format: InputFormat,
    schema: &SnapshotSchema,
) -> Result<Vec<ReserveSnapshot>> {
    let text = std::str::from_utf8(input).map_err(|_| IngestError::NotUtf8)?;
    let mut records = match format {
        InputFormat::Csv => parse_csv(text, schema)?,
        InputFormat::JsonLines => parse_jsonl(text, schema)?,
    };
    // Stable sort keeps the original order of equal timestamps so the
    // duplicate check below can name the later row.
    records.sort_by_key(|(_, s)| s.timestamp_unix);
    for pair in records.windows(2) {
        let (_, a) = &pair[0];
        let (row, b) = &pair[1];
        if a.timestamp_unix == b.timestamp_unix && a.pool_id == b.pool_id {
            return Err(IngestError::NonMonotonicTimestamp { row: *row });
        }
    }
    Ok(records.into_iter().map(|(_, s)| s).collect())
}

/// Source of raw field text for one record.
trait RawRecord {
    fn text(&self, field: SnapshotField) -> Option<std::borrow::Cow<'_, str>>;
}

struct CsvRecord<'a> {
    record: &'a csv::StringRecord,
    index: &'a BTreeMap<SnapshotField, usize>,
}

impl RawRecord for CsvRecord<'_> {
    fn text(&self, field: SnapshotField) -> Option<std::borrow::Cow<'_, str>> {
        let i = *self.index.get(&field)?;
        self.record
            .get(i)
            .map(|s| std::borrow::Cow::Borrowed(s.trim()))
    }
}

struct JsonRecord<'a> {
    object: &'a serde_json::Map<String, serde_json::Value>,
    schema: &'a SnapshotSchema,
}

impl RawRecord for JsonRecord<'_> {
    fn text(&self, field: SnapshotField) -> Option<std::borrow::Cow<'_, str>> {
        match self.object.get(self.schema.column(field))? {
            serde_json::Value::String(s) => Some(std::borrow::Cow::Borrowed(s.trim())),
            serde_json::Value::Number(n) => Some(std::borrow::Cow::Owned(n.to_string())),
            serde_json::Value::Bool(b) => Some(std::borrow::Cow::Owned(b.to_string())),
            _ => None,
        }
    }
}

fn parse_csv(text: &str, schema: &SnapshotSchema) -> Result<Vec<(usize, ReserveSnapshot)>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut index = BTreeMap::new();
    for field in SnapshotField::ALL {
        let name = schema.column(field);
        let pos = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
        index.insert(field, pos);
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let raw = CsvRecord {
            record: &record,
            index: &index,
        };
        out.push((row, snapshot_from_raw(&raw, row, schema)?));
    }
    Ok(out)
}

fn parse_jsonl(text: &str, schema: &SnapshotSchema) -> Result<Vec<(usize, ReserveSnapshot)>> {
    let mut out = Vec::new();
    let mut row = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|_| IngestError::UnparsableField {
                row,
                column: "<record>".to_string(),
            })?;
        let object = value
            .as_object()
            .ok_or_else(|| IngestError::UnparsableField {
                row,
                column: "<record>".to_string(),
            })?;
        for field in SnapshotField::ALL {
            if !object.contains_key(schema.column(field)) {
                return Err(IngestError::MissingColumn(schema.column(field).to_string()));
            }
        }
        let raw = JsonRecord { object, schema };
        out.push((row, snapshot_from_raw(&raw, row, schema)?));
    }
    Ok(out)
}

fn snapshot_from_raw(
    raw: &dyn RawRecord,
    row: usize,
    schema: &SnapshotSchema,
) -> Result<ReserveSnapshot> {
    let unparsable = |field: SnapshotField| IngestError::UnparsableField {
        row,
        column: schema.column(field).to_string(),
    };
    let text = |field: SnapshotField| raw.text(field).ok_or_else(|| unparsable(field));
    let int = |field: SnapshotField| -> Result<u128> {
        text(field)?.parse::<u128>().map_err(|_| unparsable(field))
    };
    let real = |field: SnapshotField| -> Result<f64> {
        let v = text(field)?.parse::<f64>().map_err(|_| unparsable(field))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(unparsable(field))
        }
    };
    let fraction = |field: SnapshotField| -> Result<f64> {
        let v = real(field)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(IngestError::OutOfRange {
                row,
                column: schema.column(field).to_string(),
            })
        }
    };

    let timestamp_unix = text(SnapshotField::TimestampUnix)?
        .parse::<i64>()
        .ok()
        .filter(|t| DateTime::from_timestamp(*t, 0).is_some())
        .ok_or_else(|| unparsable(SnapshotField::TimestampUnix))?;
    let decimals = text(SnapshotField::Decimals)?
        .parse::<u32>()
        .ok()
        .filter(|d| *d <= 77)
        .ok_or_else(|| unparsable(SnapshotField::Decimals))?;

    Ok(ReserveSnapshot {
        timestamp_unix,
        pool_id: text(SnapshotField::PoolId)?.into_owned(),
        decimals,
        available_liquidity: int(SnapshotField::AvailableLiquidity)?,
        total_liquidity: int(SnapshotField::TotalLiquidity)?,
        total_liquidity_as_collateral: int(SnapshotField::TotalLiquidityAsCollateral)?,
        total_debt: int(SnapshotField::TotalDebt)?,
        total_variable_debt: int(SnapshotField::TotalVariableDebt)?,
        liquidity_rate_apr: real(SnapshotField::LiquidityRateApr)?,
        variable_borrow_rate_apr: real(SnapshotField::VariableBorrowRateApr)?,
        liquidity_index: real(SnapshotField::LiquidityIndex)?,
        variable_borrow_index: real(SnapshotField::VariableBorrowIndex)?,
        deposit_volume: int(SnapshotField::DepositVolume)?,
        borrow_volume: int(SnapshotField::BorrowVolume)?,
        base_ltv_as_collateral: fraction(SnapshotField::BaseLtvAsCollateral)?,
        reserve_factor: fraction(SnapshotField::ReserveFactor)?,
        reserve_liquidation_threshold: fraction(SnapshotField::ReserveLiquidationThreshold)?,
    })
}

/// Writes snapshots as CSV with the default column names.
pub fn write_snapshots_csv<W: Write>(snapshots: &[ReserveSnapshot], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(SnapshotField::ALL.iter().map(|f| f.default_column()))?;
    for s in snapshots {
        writer.write_record([
            s.timestamp_unix.to_string(),
            s.pool_id.clone(),
            s.decimals.to_string(),
            s.available_liquidity.to_string(),
            s.total_liquidity.to_string(),
            s.total_liquidity_as_collateral.to_string(),
            s.total_debt.to_string(),
            s.total_variable_debt.to_string(),
            s.liquidity_rate_apr.to_string(),
            s.variable_borrow_rate_apr.to_string(),
            s.liquidity_index.to_string(),
            s.variable_borrow_index.to_string(),
            s.deposit_volume.to_string(),
            s.borrow_volume.to_string(),
            s.base_ltv_as_collateral.to_string(),
            s.reserve_factor.to_string(),
            s.reserve_liquidation_threshold.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// A snapshot scaled to token units and stamped with its calendar day.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSnapshot {
    pub date: NaiveDate,
    pub pool_id: String,
    pub available_liquidity: f64,
    pub total_liquidity: f64,
    pub total_liquidity_as_collateral: f64,
    pub total_debt: f64,
    pub total_variable_debt: f64,
    pub deposit_volume: f64,
    pub borrow_volume: f64,
    pub liquidity_rate_apr: f64,
    pub variable_borrow_rate_apr: f64,
    pub liquidity_index: f64,
    pub variable_borrow_index: f64,
    pub deposit_yield_apy: f64,
    pub base_ltv_as_collateral: f64,
    pub reserve_factor: f64,
    pub reserve_liquidation_threshold: f64,
}

/// Daily-compounded effective annual yield of a nominal annual rate.
pub fn apr_to_apy(apr: f64) -> f64 {
    // (1 + apr/365)^365 - 1, evaluated without cancellation for small rates.
    (365.0 * (apr / 365.0).ln_1p()).exp_m1()
}

/// Converts a raw on-chain amount into token units.
pub fn scale_amount(raw: u128, decimals: u32) -> f64 {
    raw as f64 / 10f64.powi(decimals as i32)
}

/// Scales raw amounts by `10^decimals`, converts the timestamp to a UTC day and
/// adds the deposit APY.
///
/// Timestamps outside chrono's range fall back to the Unix epoch; parsed
/// snapshots never hit that case.
pub fn normalize_units(s: &ReserveSnapshot) -> NormalizedSnapshot {
    let date = DateTime::from_timestamp(s.timestamp_unix, 0)
        .unwrap_or(DateTime::UNIX_EPOCH)
        .date_naive();
    let scale = |raw| scale_amount(raw, s.decimals);
    NormalizedSnapshot {
        date,
        pool_id: s.pool_id.clone(),
        available_liquidity: scale(s.available_liquidity),
        total_liquidity: scale(s.total_liquidity),
        total_liquidity_as_collateral: scale(s.total_liquidity_as_collateral),
        total_debt: scale(s.total_debt),
        total_variable_debt: scale(s.total_variable_debt),
        deposit_volume: scale(s.deposit_volume),
        borrow_volume: scale(s.borrow_volume),
        liquidity_rate_apr: s.liquidity_rate_apr,
        variable_borrow_rate_apr: s.variable_borrow_rate_apr,
        liquidity_index: s.liquidity_index,
        variable_borrow_index: s.variable_borrow_index,
        deposit_yield_apy: apr_to_apy(s.liquidity_rate_apr),
        base_ltv_as_collateral: s.base_ltv_as_collateral,
        reserve_factor: s.reserve_factor,
        reserve_liquidation_threshold: s.reserve_liquidation_threshold,
    }
}

/// The 21 state features in canonical L/D/I/R order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Feature {
    // L: liquidity
    AvailableLiquidity,
    TotalLiquidity,
    LiquidityAsCollateral,
    UtilizationRate,
    // D: debt and activity
    TotalDebt,
    VariableDebt,
    DepositVolume,
    BorrowVolume,
    DepositBorrowRatio,
    // I: interest
    LiquidityIndex,
    LiquidityRate,
    VariableBorrowIndex,
    VariableBorrowRate,
    DepositYieldApy,
    // R: risk and volatility
    Ltv,
    LiquidityVolatility,
    UtilizationVolatility,
    LiquidityRateMomentum,
    BorrowRateMomentum,
    LiquidityRateVolatility,
    BorrowRateVolatility,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::AvailableLiquidity,
        Feature::TotalLiquidity,
        Feature::LiquidityAsCollateral,
        Feature::UtilizationRate,
        Feature::TotalDebt,
        Feature::VariableDebt,
        Feature::DepositVolume,
        Feature::BorrowVolume,
        Feature::DepositBorrowRatio,
        Feature::LiquidityIndex,
        Feature::LiquidityRate,
        Feature::VariableBorrowIndex,
        Feature::VariableBorrowRate,
        Feature::DepositYieldApy,
        Feature::Ltv,
        Feature::LiquidityVolatility,
        Feature::UtilizationVolatility,
        Feature::LiquidityRateMomentum,
        Feature::BorrowRateMomentum,
        Feature::LiquidityRateVolatility,
        Feature::BorrowRateVolatility,
    ];

    /// Position in the state vector.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::AvailableLiquidity => "available_liquidity",
            Feature::TotalLiquidity => "total_liquidity",
            Feature::LiquidityAsCollateral => "liquidity_as_collateral",
            Feature::UtilizationRate => "utilization_rate",
            Feature::TotalDebt => "total_debt",
            Feature::VariableDebt => "variable_debt",
            Feature::DepositVolume => "deposit_volume",
            Feature::BorrowVolume => "borrow_volume",
            Feature::DepositBorrowRatio => "deposit_borrow_ratio",
            Feature::LiquidityIndex => "liquidity_index",
            Feature::LiquidityRate => "liquidity_rate",
            Feature::VariableBorrowIndex => "variable_borrow_index",
            Feature::VariableBorrowRate => "variable_borrow_rate",
            Feature::DepositYieldApy => "deposit_yield_apy",
            Feature::Ltv => "ltv",
            Feature::LiquidityVolatility => "liquidity_volatility",
            Feature::UtilizationVolatility => "utilization_volatility",
            Feature::LiquidityRateMomentum => "liquidity_rate_momentum",
            Feature::BorrowRateMomentum => "borrow_rate_momentum",
            Feature::LiquidityRateVolatility => "liquidity_rate_volatility",
            Feature::BorrowRateVolatility => "borrow_rate_volatility",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Engineered features for one day. Features may be unset while a row is
/// being assembled; rows inside a [`FeatureSeries`] are always complete.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub date: NaiveDate,
    values: [Option<f64>; FEATURE_COUNT],
    pub is_at_risk: bool,
}

impl FeatureRow {
    pub fn empty(date: NaiveDate) -> Self {
        FeatureRow {
            date,
            values: [None; FEATURE_COUNT],
            is_at_risk: false,
        }
    }

    /// Builds a complete row from values in canonical order.
    pub fn from_values(date: NaiveDate, values: [f64; FEATURE_COUNT], is_at_risk: bool) -> Self {
        FeatureRow {
            date,
            values: values.map(Some),
            is_at_risk,
        }
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.values[feature.index()]
    }

    pub fn set(&mut self, feature: Feature, value: f64) {
        self.values[feature.index()] = Some(value);
    }

    pub fn unset(&mut self, feature: Feature) {
        self.values[feature.index()] = None;
    }

    /// Value of a feature that must be present.
    pub fn require(&self, feature: Feature) -> Result<f64> {
        self.get(feature)
            .ok_or(IngestError::MissingFeature(feature.name()))
    }

    pub fn utilization(&self) -> Result<f64> {
        self.require(Feature::UtilizationRate)
    }

    /// (liquidity rate, variable borrow rate), both APR.
    pub fn rates(&self) -> Result<(f64, f64)> {
        Ok((
            self.require(Feature::LiquidityRate)?,
            self.require(Feature::VariableBorrowRate)?,
        ))
    }

    pub fn feature_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.feature_count() == FEATURE_COUNT
    }

    /// All values in canonical order, failing on the first missing feature.
    pub fn values(&self) -> Result<[f64; FEATURE_COUNT]> {
        let mut out = [0.0; FEATURE_COUNT];
        for feature in Feature::ALL {
            out[feature.index()] = self.require(feature)?;
        }
        Ok(out)
    }
}

/// Per-day features that need no history: utilization, LTV, the at-risk flag
/// and the deposit/borrow volume ratio, plus the scaled raw metrics.
pub fn derive_row_features(s: &NormalizedSnapshot, epsilon: f64) -> Result<FeatureRow> {
    if !(epsilon > 0.0) {
        return Err(IngestError::BadEpsilon(epsilon));
    }
    let utilization = (s.total_debt / (s.total_liquidity + epsilon)).clamp(0.0, 1.0);
    let ltv = s.total_debt / (s.total_liquidity_as_collateral + epsilon);
    let deposit_borrow_ratio = s.deposit_volume / (s.borrow_volume + epsilon);

    let mut row = FeatureRow::empty(s.date);
    row.set(Feature::AvailableLiquidity, s.available_liquidity);
    row.set(Feature::TotalLiquidity, s.total_liquidity);
    row.set(
        Feature::LiquidityAsCollateral,
        s.total_liquidity_as_collateral,
    );
    row.set(Feature::UtilizationRate, utilization);
    row.set(Feature::TotalDebt, s.total_debt);
    row.set(Feature::VariableDebt, s.total_variable_debt);
    row.set(Feature::DepositVolume, s.deposit_volume);
    row.set(Feature::BorrowVolume, s.borrow_volume);
    row.set(Feature::DepositBorrowRatio, deposit_borrow_ratio);
    row.set(Feature::LiquidityIndex, s.liquidity_index);
    row.set(Feature::LiquidityRate, s.liquidity_rate_apr);
    row.set(Feature::VariableBorrowIndex, s.variable_borrow_index);
    row.set(Feature::VariableBorrowRate, s.variable_borrow_rate_apr);
    row.set(Feature::DepositYieldApy, s.deposit_yield_apy);
    row.set(Feature::Ltv, ltv);
    row.is_at_risk = ltv > s.reserve_liquidation_threshold;
    Ok(row)
}

/// Trailing-window mean and population standard deviation.
///
/// Entry `t` covers values `t+1-n ..= t`; entries before `n-1` are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingStats {
    pub momentum: Vec<Option<f64>>,
    pub volatility: Vec<Option<f64>>,
}

pub fn rolling_stats(series: &[f64], n: usize) -> Result<RollingStats> {
    if n < 2 {
        return Err(IngestError::WindowTooShort(n));
    }
    if series.len() < n {
        return Err(IngestError::WindowTooLong {
            len: series.len(),
            window: n,
        });
    }
    let mut momentum = vec![None; series.len()];
    let mut volatility = vec![None; series.len()];
    for (t, window) in series.windows(n).enumerate() {
        let (mean, std) = window_mean_std(window);
        momentum[t + n - 1] = Some(mean);
        volatility[t + n - 1] = Some(std);
    }
    Ok(RollingStats {
        momentum,
        volatility,
    })
}

fn window_mean_std(window: &[f64]) -> (f64, f64) {
    let first = window[0];
    if window.iter().all(|&x| x == first) {
        return (first, 0.0);
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Time-ordered complete feature rows for one pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pool_id: String,
    window: usize,
    rows: Vec<FeatureRow>,
}

impl FeatureSeries {
    /// Validates ordering, uniqueness of dates and completeness of every row.
    pub fn new(pool_id: impl Into<String>, window: usize, rows: Vec<FeatureRow>) -> Result<Self> {
        for pair in rows.windows(2) {
            if pair[1].date == pair[0].date {
                return Err(IngestError::DuplicateDate(pair[1].date));
            }
            if pair[1].date < pair[0].date {
                return Err(IngestError::UnsortedRows(pair[1].date));
            }
        }
        for row in &rows {
            for feature in Feature::ALL {
                let v = row.require(feature)?;
                if !v.is_finite() {
                    return Err(IngestError::NonFiniteFeature {
                        feature: feature.name(),
                        date: row.date,
                    });
                }
            }
        }
        Ok(FeatureSeries {
            pool_id: pool_id.into(),
            window,
            rows,
        })
    }

    pub fn pool_id(&self) -> &str {
        &self.pool_id
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.rows.iter().map(|r| r.date).collect()
    }

    /// Rows `range` as a new series with the same pool and window.
    pub fn slice(&self, range: std::ops::Range<usize>) -> FeatureSeries {
        FeatureSeries {
            pool_id: self.pool_id.clone(),
            window: self.window,
            rows: self.rows[range].to_vec(),
        }
    }

    /// Chronological split: the first `ceil(len * fraction)` rows and the rest.
    pub fn split_at_fraction(&self, fraction: f64) -> (FeatureSeries, FeatureSeries) {
        let cut = ((self.rows.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.rows.len());
        (self.slice(0..cut), self.slice(cut..self.rows.len()))
    }

    /// Column of one feature across all rows.
    pub fn column(&self, feature: Feature) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.get(feature).expect("series rows are complete"))
            .collect()
    }

    /// Writes the series as CSV: `date`, the 21 features in canonical order,
    /// then `is_at_risk` (0/1).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(Feature::ALL.iter().map(|f| f.name().to_string()));
        header.push("is_at_risk".to_string());
        writer.write_record(&header)?;
        for row in &self.rows {
            let mut record = vec![row.date.format("%Y-%m-%d").to_string()];
            for feature in Feature::ALL {
                record.push(row.require(feature)?.to_string());
            }
            record.push(u8::from(row.is_at_risk).to_string());
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads a series written by [`FeatureSeries::write_csv`].
    pub fn read_csv<R: Read>(pool_id: &str, window: usize, input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let position = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        };
        let date_col = position("date")?;
        let risk_col = position("is_at_risk")?;
        let mut feature_cols = Vec::with_capacity(FEATURE_COUNT);
        for feature in Feature::ALL {
            feature_cols.push(position(feature.name())?);
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row = i + 1;
            let field = |col: usize, name: &str| {
                record.get(col).ok_or_else(|| IngestError::UnparsableField {
                    row,
                    column: name.to_string(),
                })
            };
            let date =
                NaiveDate::parse_from_str(field(date_col, "date")?, "%Y-%m-%d").map_err(|_| {
                    IngestError::UnparsableField {
                        row,
                        column: "date".to_string(),
                    }
                })?;
            let mut values = [0.0; FEATURE_COUNT];
            for (feature, &col) in Feature::ALL.iter().zip(&feature_cols) {
                values[feature.index()] = field(col, feature.name())?.parse().map_err(|_| {
                    IngestError::UnparsableField {
                        row,
                        column: feature.name().to_string(),
                    }
                })?;
            }
            let is_at_risk = match field(risk_col, "is_at_risk")? {
                "0" => false,
                "1" => true,
                _ => {
                    return Err(IngestError::UnparsableField {
                        row,
                        column: "is_at_risk".to_string(),
                    })
                }
            };
            rows.push(FeatureRow::from_values(date, values, is_at_risk));
        }
        FeatureSeries::new(pool_id, window, rows)
    }
}

/// Builds the feature series of one pool from time-sorted snapshots.
///
/// Rolling statistics cover available liquidity, utilization and both APR
/// rates; the first `window - 1` days lack a full window and are dropped.
pub fn build_feature_series(
    snapshots: &[ReserveSnapshot],
    window: usize,
    epsilon: f64,
) -> Result<FeatureSeries> {
    let pool_id = snapshots
        .first()
        .map(|s| s.pool_id.clone())
        .unwrap_or_default();
    for (i, pair) in snapshots.windows(2).enumerate() {
        if pair[1].pool_id != pair[0].pool_id {
            return Err(IngestError::MixedPools(
                pair[0].pool_id.clone(),
                pair[1].pool_id.clone(),
            ));
        }
        if pair[1].timestamp_unix <= pair[0].timestamp_unix {
            return Err(IngestError::NonMonotonicTimestamp { row: i + 2 });
        }
    }

    let mut rows = snapshots
        .iter()
        .map(|s| derive_row_features(&normalize_units(s), epsilon))
        .collect::<Result<Vec<_>>>()?;
    for pair in rows.windows(2) {
        if pair[1].date == pair[0].date {
            return Err(IngestError::DuplicateDate(pair[1].date));
        }
    }

    let column = |rows: &[FeatureRow], f: Feature| -> Vec<f64> {
        rows.iter().map(|r| r.get(f).unwrap_or(0.0)).collect()
    };
    let liquidity = rolling_stats(&column(&rows, Feature::AvailableLiquidity), window)?;
    let utilization = rolling_stats(&column(&rows, Feature::UtilizationRate), window)?;
    let liquidity_rate = rolling_stats(&column(&rows, Feature::LiquidityRate), window)?;
    let borrow_rate = rolling_stats(&column(&rows, Feature::VariableBorrowRate), window)?;

    for (t, row) in rows.iter_mut().enumerate().skip(window - 1) {
        let defined = |v: &[Option<f64>]| v[t].expect("defined past the warm-up");
        row.set(Feature::LiquidityVolatility, defined(&liquidity.volatility));
        row.set(
            Feature::UtilizationVolatility,
            defined(&utilization.volatility),
        );
        row.set(
            Feature::LiquidityRateMomentum,
            defined(&liquidity_rate.momentum),
        );
        row.set(Feature::BorrowRateMomentum, defined(&borrow_rate.momentum));
        row.set(
            Feature::LiquidityRateVolatility,
            defined(&liquidity_rate.volatility),
        );
        row.set(
            Feature::BorrowRateVolatility,
            defined(&borrow_rate.volatility),
        );
    }
    rows.drain(..window - 1);
    FeatureSeries::new(pool_id, window, rows)
}

/// Splits a mixed snapshot list into per-pool lists, preserving order.
pub fn group_by_pool(snapshots: Vec<ReserveSnapshot>) -> BTreeMap<String, Vec<ReserveSnapshot>> {
    let mut pools: BTreeMap<String, Vec<ReserveSnapshot>> = BTreeMap::new();
    for s in snapshots {
        pools.entry(s.pool_id.clone()).or_default().push(s);
    }
    pools
}
