//! Counterfactual replay and rate-path metrics.
//!
//! Replay is semi-open-loop: each day's state is taken from history and only
//! the policy-controlled rates are integrated forward. No market response to
//! the counterfactual rates is modelled.

use std::fmt::Write as _;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FeatureRow, FeatureSeries, IngestError};
use crate::mdp::ActionVector;
use crate::ratecurve::{self, CurveError, KinkParams};

/// Upper clamp for integrated rates when none is configured (100%/year).
pub const DEFAULT_RATE_CAP: f64 = 1.0;
/// Quantile levels reported by [`yield_distribution`].
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("series is empty")]
    EmptySeries,
    #[error("series of length {0} is too short")]
    SeriesTooShort(usize),
    #[error("baseline standard deviation is zero")]
    ZeroBaseline,
    #[error("window `{0}` does not cover at least two trajectory days")]
    EmptyWindow(String),
    #[error("window `{0}` ends before it starts")]
    BadWindow(String),
    #[error("histogram edges must be strictly increasing and finite")]
    BadBins,
    #[error("trajectories cover different dates")]
    DateMismatch,
    #[error("policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Feature(#[from] IngestError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "name")]
pub enum TrajectorySource {
    Recorded,
    RuleBased,
    Policy(String),
}

impl std::fmt::Display for TrajectorySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrajectorySource::Recorded => f.write_str("recorded"),
            TrajectorySource::RuleBased => f.write_str("rule_based"),
            TrajectorySource::Policy(name) => write!(f, "policy:{name}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateType {
    Borrow,
    Liquidity,
}

impl RateType {
    pub const BOTH: [RateType; 2] = [RateType::Borrow, RateType::Liquidity];

    pub fn label(self) -> &'static str {
        match self {
            RateType::Borrow => "Borrow Rate",
            RateType::Liquidity => "Liquidity Rate",
        }
    }
}

/// Daily liquidity and borrow rates of one pool from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTrajectory {
    pub pool_id: String,
    pub source: TrajectorySource,
    dates: Vec<NaiveDate>,
    liquidity: Vec<f64>,
    borrow: Vec<f64>,
}

impl RateTrajectory {
    /// # Panics
    /// If the three series differ in length.
    pub fn new(
        pool_id: &str,
        dates: Vec<NaiveDate>,
        liquidity: Vec<f64>,
        borrow: Vec<f64>,
        source: TrajectorySource,
    ) -> Self {
        assert!(
            dates.len() == liquidity.len() && dates.len() == borrow.len(),
            "trajectory series lengths differ"
        );
        RateTrajectory {
            pool_id: pool_id.to_string(),
            source,
            dates,
            liquidity,
            borrow,
        }
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn liquidity(&self) -> &[f64] {
        &self.liquidity
    }

    #[allow(clippy::should_implement_trait)]
    pub fn borrow(&self) -> &[f64] {
        &self.borrow
    }

    pub fn series(&self, rate: RateType) -> &[f64] {
        match rate {
            RateType::Borrow => &self.borrow,
            RateType::Liquidity => &self.liquidity,
        }
    }

    /// Days falling inside `[start, end]`, as a sub-trajectory.
    pub fn restrict(&self, start: NaiveDate, end: NaiveDate) -> RateTrajectory {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.dates[i] >= start && self.dates[i] <= end)
            .collect();
        RateTrajectory {
            pool_id: self.pool_id.clone(),
            source: self.source.clone(),
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            liquidity: keep.iter().map(|&i| self.liquidity[i]).collect(),
            borrow: keep.iter().map(|&i| self.borrow[i]).collect(),
        }
    }

    /// CSV with columns `date,borrow_rate,liquidity_rate`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["date", "borrow_rate", "liquidity_rate"])?;
        for i in 0..self.len() {
            writer.write_record([
                self.dates[i].format("%Y-%m-%d").to_string(),
                self.borrow[i].to_string(),
                self.liquidity[i].to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Anything that proposes a daily rate adjustment.
pub trait RatePolicy {
    fn name(&self) -> String;

    /// Adjustment applied on the day of `row`, given yesterday's
    /// `(liquidity_rate, borrow_rate)`.
    fn adjust(&self, row: &FeatureRow, current: (f64, f64)) -> Result<ActionVector>;
}

/// The kinked curve expressed as a policy: it moves rates straight to the
/// curve's value at the day's utilization.
#[derive(Debug, Clone, Copy)]
pub struct RuleBasedPolicy(pub KinkParams);

impl RatePolicy for RuleBasedPolicy {
    fn name(&self) -> String {
        "rule_based".into()
    }

    fn adjust(&self, row: &FeatureRow, current: (f64, f64)) -> Result<ActionVector> {
        let (borrow, deposit) = ratecurve::rates_at(row.utilization()?, &self.0)?;
        Ok(ActionVector::new(deposit - current.0, borrow - current.1))
    }
}

/// Wraps a closure as a policy.
pub struct FnPolicy<F> {
    pub name: String,
    pub f: F,
}

impl<F> RatePolicy for FnPolicy<F>
where
    F: Fn(&FeatureRow, (f64, f64)) -> ActionVector,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn adjust(&self, row: &FeatureRow, current: (f64, f64)) -> Result<ActionVector> {
        Ok((self.f)(row, current))
    }
}

/// Integrates a policy's adjustments over historical states.
///
/// Day 0 starts at the recorded rates; for `t >= 1`,
/// `rate_t = clamp(rate_{t-1} + Δ_t, 0, rate_cap)` where `Δ_t` is the
/// policy's adjustment for row `t`.
pub fn replay_policy(
    policy: &dyn RatePolicy,
    series: &FeatureSeries,
    rate_cap: f64,
) -> Result<RateTrajectory> {
    let rows = series.rows();
    let first = rows.first().ok_or(EvalError::EmptySeries)?;
    let clamp = |v: f64| v.clamp(0.0, rate_cap);
    let (l0, b0) = first.rates()?;
    let mut current = (clamp(l0), clamp(b0));
    let mut liquidity = vec![current.0];
    let mut borrow = vec![current.1];
    for row in &rows[1..] {
        let delta = policy.adjust(row, current)?;
        current = (
            clamp(current.0 + delta.delta_liquidity_rate),
            clamp(current.1 + delta.delta_borrow_rate),
        );
        liquidity.push(current.0);
        borrow.push(current.1);
    }
    Ok(RateTrajectory::new(
        series.pool_id(),
        series.dates(),
        liquidity,
        borrow,
        TrajectorySource::Policy(policy.name()),
    ))
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn first_differences(series: &[f64]) -> Vec<f64> {
    series.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Population standard deviation of day-over-day changes.
pub fn rate_change_volatility(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(EvalError::SeriesTooShort(series.len()));
    }
    let diffs = first_differences(series);
    if diffs.iter().all(|d| *d == 0.0) {
        return Ok(0.0);
    }
    Ok(population_std(&diffs))
}

/// Percent change `100 (candidate - baseline) / baseline`.
pub fn volatility_comparison(baseline_std: f64, candidate_std: f64) -> Result<f64> {
    if !(baseline_std > 0.0) {
        return Err(EvalError::ZeroBaseline);
    }
    Ok(100.0 * (candidate_std - baseline_std) / baseline_std)
}

/// `3.31E-02` style: two decimals, signed two-digit exponent.
pub fn format_sci(x: f64) -> String {
    if x == 0.0 {
        return "0.00E+00".to_string();
    }
    let s = format!("{x:.2E}");
    let (mantissa, exp) = s.split_once('E').expect("E notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}E{sign}{:02}", exp.abs())
}

pub fn format_percent(p: Option<f64>) -> String {
    match p {
        Some(p) => format!("{p:+.3}%"),
        None => "n/a".to_string(),
    }
}

/// One table row: asset, rate type, baseline std, candidate std, percent change.
pub fn format_volatility_row(
    asset: &str,
    rate: RateType,
    baseline_std: f64,
    candidate_std: f64,
) -> String {
    let pct = volatility_comparison(baseline_std, candidate_std).ok();
    format!(
        "{asset} | {} | {} | {} | {}",
        rate.label(),
        format_sci(baseline_std),
        format_sci(candidate_std),
        format_percent(pct)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressWindow {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl StressWindow {
    pub fn new(label: &str, start: NaiveDate, end: NaiveDate) -> Self {
        StressWindow {
            label: label.to_string(),
            start,
            end,
        }
    }

    /// Covers every date of the trajectory.
    pub fn full_range(traj: &RateTrajectory) -> Option<Self> {
        Some(StressWindow::new(
            "full range",
            *traj.dates().first()?,
            *traj.dates().last()?,
        ))
    }

    pub fn period(&self) -> String {
        format!(
            "{}--{}",
            self.start.format("%Y/%-m/%-d"),
            self.end.format("%Y/%-m/%-d")
        )
    }
}

/// Windows shipped as defaults: three extended stress periods and three
/// named market events.
pub fn default_stress_windows() -> Vec<StressWindow> {
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
    vec![
        StressWindow::new("2022/2/1--2022/10/31", d(2022, 2, 1), d(2022, 10, 31)),
        StressWindow::new("2024/1/1--2024/12/31", d(2024, 1, 1), d(2024, 12, 31)),
        StressWindow::new("2024/4/1--2024/10/31", d(2024, 4, 1), d(2024, 10, 31)),
        StressWindow::new("FTX collapse (Nov 2022)", d(2022, 11, 1), d(2022, 11, 30)),
        StressWindow::new("USDC depeg (Mar 2023)", d(2023, 3, 1), d(2023, 3, 31)),
        StressWindow::new("ETH crash (Aug 2024)", d(2024, 8, 1), d(2024, 8, 31)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityRow {
    pub asset: String,
    pub rate_type: RateType,
    pub baseline_std: f64,
    pub candidate_std: f64,
    /// `None` when the baseline does not move at all.
    pub percent_change: Option<f64>,
}

fn compare(
    asset: &str,
    rate: RateType,
    baseline: &RateTrajectory,
    candidate: &RateTrajectory,
) -> Result<VolatilityRow> {
    let baseline_std = rate_change_volatility(baseline.series(rate))?;
    let candidate_std = rate_change_volatility(candidate.series(rate))?;
    Ok(VolatilityRow {
        asset: asset.to_string(),
        rate_type: rate,
        baseline_std,
        candidate_std,
        percent_change: volatility_comparison(baseline_std, candidate_std).ok(),
    })
}

fn check_dates(baseline: &RateTrajectory, candidate: &RateTrajectory) -> Result<()> {
    if baseline.dates() != candidate.dates() {
        return Err(EvalError::DateMismatch);
    }
    Ok(())
}

/// Whole-trajectory volatility comparison for both rate types.
pub fn global_comparison(
    baseline: &RateTrajectory,
    candidate: &RateTrajectory,
) -> Result<Vec<VolatilityRow>> {
    check_dates(baseline, candidate)?;
    RateType::BOTH
        .iter()
        .map(|&r| compare(&baseline.pool_id, r, baseline, candidate))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressRow {
    pub label: String,
    pub period: String,
    #[serde(flatten)]
    pub volatility: VolatilityRow,
}

/// Volatility comparison restricted to each window.
pub fn stress_report(
    baseline: &RateTrajectory,
    candidate: &RateTrajectory,
    windows: &[StressWindow],
) -> Result<Vec<StressRow>> {
    check_dates(baseline, candidate)?;
    let mut rows = Vec::new();
    for w in windows {
        if w.end < w.start {
            return Err(EvalError::BadWindow(w.label.clone()));
        }
        let b = baseline.restrict(w.start, w.end);
        let c = candidate.restrict(w.start, w.end);
        if b.len() < 2 {
            return Err(EvalError::EmptyWindow(w.label.clone()));
        }
        for rate in RateType::BOTH {
            rows.push(StressRow {
                label: w.label.clone(),
                period: w.period(),
                volatility: compare(&baseline.pool_id, rate, &b, &c)?,
            });
        }
    }
    Ok(rows)
}

/// Histogram of `|Δ rate|` on log₁₀ bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeHistogram {
    /// log₁₀ bin edges; bin `i` is `[10^edges[i], 10^edges[i+1])`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Exactly-zero changes.
    pub zero_count: usize,
    /// Nonzero changes below the first edge.
    pub below_count: usize,
    /// Changes at or above the last edge.
    pub above_count: usize,
}

impl MagnitudeHistogram {
    pub fn total(&self) -> usize {
        self.zero_count + self.below_count + self.above_count + self.counts.iter().sum::<usize>()
    }
}

/// Decade edges from 10⁻⁸ to 10⁰.
pub fn default_magnitude_edges() -> Vec<f64> {
    (-8..=0).map(f64::from).collect()
}

fn power_of_ten(exponent: f64) -> f64 {
    if exponent.fract() == 0.0 && exponent.abs() < 300.0 {
        // correctly rounded, so 10^-3 equals the literal 1e-3
        format!("1e{}", exponent as i32)
            .parse()
            .expect("valid literal")
    } else {
        10f64.powf(exponent)
    }
}

/// Buckets absolute changes into log₁₀ bins.
pub fn histogram_of_magnitudes(deltas: &[f64], edges: &[f64]) -> Result<MagnitudeHistogram> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(EvalError::BadBins);
    }
    let thresholds: Vec<f64> = edges.iter().map(|&e| power_of_ten(e)).collect();
    let mut hist = MagnitudeHistogram {
        edges: edges.to_vec(),
        counts: vec![0; edges.len() - 1],
        zero_count: 0,
        below_count: 0,
        above_count: 0,
    };
    for d in deltas {
        let m = d.abs();
        if m == 0.0 {
            hist.zero_count += 1;
        } else if m < thresholds[0] {
            hist.below_count += 1;
        } else if m >= thresholds[thresholds.len() - 1] {
            hist.above_count += 1;
        } else {
            // last threshold <= m
            let bin = thresholds.partition_point(|&t| t <= m) - 1;
            hist.counts[bin] += 1;
        }
    }
    Ok(hist)
}

/// Log-magnitude histogram of a rate series' day-over-day changes.
pub fn magnitude_distribution(series: &[f64], edges: &[f64]) -> Result<MagnitudeHistogram> {
    if series.len() < 2 {
        return Err(EvalError::SeriesTooShort(series.len()));
    }
    histogram_of_magnitudes(&first_differences(series), edges)
}

/// Linear-interpolation quantile of sorted data (`h = (n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `(level, value)` for each of [`QUANTILE_LEVELS`].
    pub quantiles: Vec<(f64, f64)>,
}

fn summarize(values: &[f64]) -> Option<DistributionSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(DistributionSummary {
        count: sorted.len(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        quantiles: QUANTILE_LEVELS
            .iter()
            .map(|&p| (p, quantile_sorted(&sorted, p)))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldSummary {
    pub natural: DistributionSummary,
    /// Summary of log₁₀ of the positive values; `None` if there are none.
    pub log10: Option<DistributionSummary>,
    /// Values excluded from the log view because they are zero.
    pub zero_count: usize,
}

/// Quantiles, extremes and mean of a liquidity-rate series, in natural and
/// log₁₀ units.
pub fn yield_distribution(series: &[f64]) -> Result<YieldSummary> {
    let natural = summarize(series).ok_or(EvalError::EmptySeries)?;
    let logs: Vec<f64> = series
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v.log10())
        .collect();
    Ok(YieldSummary {
        natural,
        log10: summarize(&logs),
        zero_count: series.iter().filter(|v| **v == 0.0).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDistributions {
    pub source: String,
    pub borrow_magnitudes: MagnitudeHistogram,
    pub liquidity_magnitudes: MagnitudeHistogram,
    pub liquidity_yield: YieldSummary,
}

fn distributions(traj: &RateTrajectory, edges: &[f64]) -> Result<SourceDistributions> {
    Ok(SourceDistributions {
        source: traj.source.to_string(),
        borrow_magnitudes: magnitude_distribution(traj.borrow(), edges)?,
        liquidity_magnitudes: magnitude_distribution(traj.liquidity(), edges)?,
        liquidity_yield: yield_distribution(traj.liquidity())?,
    })
}

/// Footer attached to every report.
pub const ROUNDING_NOTE: &str = "Percent changes are computed from full-precision standard \
deviations, not from the 3-significant-digit values displayed. Recomputing from displayed \
values can differ: 3.31E-02 -> 3.33E-02 recomputes to +0.604%, while a figure of +0.73% for \
the same displayed pair is only consistent with unrounded inputs.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pool_id: String,
    pub baseline: String,
    pub candidate: String,
    pub days: usize,
    pub volatility: Vec<VolatilityRow>,
    pub stress: Vec<StressRow>,
    /// Windows that do not cover at least two days of the trajectories.
    pub skipped_windows: Vec<String>,
    pub distributions: Vec<SourceDistributions>,
    pub notes: Vec<String>,
}

/// Full metric suite for a candidate trajectory against a baseline.
/// Windows outside the data range are listed in `skipped_windows`.
pub fn build_report(
    baseline: &RateTrajectory,
    candidate: &RateTrajectory,
    windows: &[StressWindow],
    edges: &[f64],
) -> Result<EvalReport> {
    let volatility = global_comparison(baseline, candidate)?;
    let mut stress = Vec::new();
    let mut skipped_windows = Vec::new();
    for w in windows {
        match stress_report(baseline, candidate, std::slice::from_ref(w)) {
            Ok(rows) => stress.extend(rows),
            Err(EvalError::EmptyWindow(label)) => skipped_windows.push(label),
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        pool_id: baseline.pool_id.clone(),
        baseline: baseline.source.to_string(),
        candidate: candidate.source.to_string(),
        days: baseline.len(),
        volatility,
        stress,
        skipped_windows,
        distributions: vec![
            distributions(baseline, edges)?,
            distributions(candidate, edges)?,
        ],
        notes: vec![
            "Semi-open-loop replay: states are historical; only rates are counterfactual."
                .to_string(),
            ROUNDING_NOTE.to_string(),
        ],
    })
}

impl EvalReport {
    /// Columns: asset, rate_type, baseline_std, candidate_std, percent_change.
    pub fn write_volatility_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "asset",
            "rate_type",
            "baseline_std",
            "candidate_std",
            "percent_change",
        ])?;
        for row in &self.volatility {
            w.write_record(volatility_record(row))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns: asset, rate_type, period, label, baseline_std, candidate_std,
    /// percent_change.
    pub fn write_stress_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "asset",
            "rate_type",
            "period",
            "label",
            "baseline_std",
            "candidate_std",
            "percent_change",
        ])?;
        for row in &self.stress {
            let v = volatility_record(&row.volatility);
            w.write_record([
                v[0].clone(),
                v[1].clone(),
                row.period.clone(),
                row.label.clone(),
                v[2].clone(),
                v[3].clone(),
                v[4].clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text tables followed by the notes.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Pool {} | baseline {} vs candidate {} | {} days",
            self.pool_id, self.baseline, self.candidate, self.days
        );
        let _ = writeln!(s, "\nRate-change volatility");
        let _ = writeln!(
            s,
            "Asset | Rate Type | Baseline Std. | Candidate Std. | Change"
        );
        for row in &self.volatility {
            let _ = writeln!(
                s,
                "{} | {} | {} | {} | {}",
                row.asset,
                row.rate_type.label(),
                format_sci(row.baseline_std),
                format_sci(row.candidate_std),
                format_percent(row.percent_change)
            );
        }
        if !self.stress.is_empty() {
            let _ = writeln!(s, "\nStress windows");
            let _ = writeln!(
                s,
                "Asset | Rate Type | Period | Baseline Std. | Candidate Std. | Change"
            );
            for row in &self.stress {
                let v = &row.volatility;
                let period = if row.label == row.period {
                    row.period.clone()
                } else {
                    format!("{} ({})", row.period, row.label)
                };
                let _ = writeln!(
                    s,
                    "{} | {} | {} | {} | {} | {}",
                    v.asset,
                    v.rate_type.label(),
                    period,
                    format_sci(v.baseline_std),
                    format_sci(v.candidate_std),
                    format_percent(v.percent_change)
                );
            }
        }
        if !self.skipped_windows.is_empty() {
            let _ = writeln!(
                s,
                "Windows outside the data: {}",
                self.skipped_windows.join("; ")
            );
        }
        let _ = writeln!(s, "\nLiquidity-rate distribution");
        for d in &self.distributions {
            let q = &d.liquidity_yield.natural.quantiles;
            let _ = writeln!(
                s,
                "{}: min {} | p5 {} | p25 {} | median {} | p75 {} | p95 {} | max {} | zeros {}",
                d.source,
                format_sci(d.liquidity_yield.natural.min),
                format_sci(q[0].1),
                format_sci(q[1].1),
                format_sci(q[2].1),
                format_sci(q[3].1),
                format_sci(q[4].1),
                format_sci(d.liquidity_yield.natural.max),
                d.liquidity_yield.zero_count
            );
        }
        let _ = writeln!(s, "\nBorrow-rate adjustment magnitudes (log10 bins)");
        for d in &self.distributions {
            let h = &d.borrow_magnitudes;
            let bins: Vec<String> = h
                .counts
                .iter()
                .zip(h.edges.windows(2))
                .map(|(c, e)| format!("[{},{}):{}", e[0], e[1], c))
                .collect();
            let _ = writeln!(
                s,
                "{}: zero {} | below {} | {} | above {}",
                d.source,
                h.zero_count,
                h.below_count,
                bins.join(" "),
                h.above_count
            );
        }
        let _ = writeln!(s, "\nNotes");
        for note in &self.notes {
            let _ = writeln!(s, "- {note}");
        }
        s
    }
}

fn volatility_record(row: &VolatilityRow) -> [String; 5] {
    [
        row.asset.clone(),
        row.rate_type.label().to_string(),
        format_sci(row.baseline_std),
        format_sci(row.candidate_std),
        format_percent(row.percent_change),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Feature, FEATURE_COUNT};
    use proptest::prelude::*;

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    fn traj(liquidity: &[f64], borrow: &[f64]) -> RateTrajectory {
        RateTrajectory::new(
            "pool",
            (0..liquidity.len()).map(day).collect(),
            liquidity.to_vec(),
            borrow.to_vec(),
            TrajectorySource::Recorded,
        )
    }

    fn series(points: &[(f64, f64, f64)]) -> FeatureSeries {
        let rows = points
            .iter()
            .enumerate()
            .map(|(i, &(u, l, b))| {
                let mut v = [0.0; FEATURE_COUNT];
                v[Feature::UtilizationRate.index()] = u;
                v[Feature::LiquidityRate.index()] = l;
                v[Feature::VariableBorrowRate.index()] = b;
                FeatureRow::from_values(day(i), v, false)
            })
            .collect();
        FeatureSeries::new("pool", 7, rows).unwrap()
    }

    fn zero_policy() -> FnPolicy<impl Fn(&FeatureRow, (f64, f64)) -> ActionVector> {
        FnPolicy {
            name: "zero".into(),
            f: |_: &FeatureRow, _| ActionVector::default(),
        }
    }

    #[test]
    fn zero_policy_keeps_initial_rates() {
        let s = series(&[(0.5, 0.01, 0.03), (0.7, 0.02, 0.05), (0.9, 0.05, 0.2)]);
        let t = replay_policy(&zero_policy(), &s, DEFAULT_RATE_CAP).unwrap();
        assert!(t.liquidity().iter().all(|v| *v == 0.01));
        assert!(t.borrow().iter().all(|v| *v == 0.03));
        assert_eq!(rate_change_volatility(t.borrow()).unwrap(), 0.0);
        assert_eq!(t.source, TrajectorySource::Policy("zero".into()));
    }

    #[test]
    fn rule_based_policy_matches_baseline() {
        let p = KinkParams::default();
        let us = [0.3, 0.5, 0.85, 0.95, 0.6, 0.8];
        let (b0, d0) = ratecurve::rates_at(us[0], &p).unwrap();
        let points: Vec<_> = us
            .iter()
            .enumerate()
            .map(|(i, &u)| if i == 0 { (u, d0, b0) } else { (u, 0.3, 0.4) })
            .collect();
        let s = series(&points);
        let replayed = replay_policy(&RuleBasedPolicy(p), &s, DEFAULT_RATE_CAP).unwrap();
        let baseline = ratecurve::baseline_trajectory(&s, &p).unwrap();
        for i in 0..us.len() {
            assert!((replayed.borrow()[i] - baseline.borrow()[i]).abs() < 1e-15);
            assert!((replayed.liquidity()[i] - baseline.liquidity()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_delta_at_zero_is_clamped() {
        let s = series(&[(0.5, 0.0, 0.0), (0.5, 0.0, 0.0), (0.5, 0.0, 0.0)]);
        let down = FnPolicy {
            name: "down".into(),
            f: |_: &FeatureRow, _| ActionVector::new(-0.5, -0.5),
        };
        let t = replay_policy(&down, &s, DEFAULT_RATE_CAP).unwrap();
        assert!(t.liquidity().iter().chain(t.borrow()).all(|v| *v == 0.0));
        let up = FnPolicy {
            name: "up".into(),
            f: |_: &FeatureRow, _| ActionVector::new(0.7, 0.7),
        };
        let t = replay_policy(&up, &s, DEFAULT_RATE_CAP).unwrap();
        assert_eq!(t.borrow()[2], 1.0);
    }

    #[test]
    fn replay_of_empty_series() {
        let s = FeatureSeries::new("pool", 7, Vec::new()).unwrap();
        assert!(matches!(
            replay_policy(&zero_policy(), &s, 1.0),
            Err(EvalError::EmptySeries)
        ));
    }

    #[test]
    fn volatility_values() {
        assert_eq!(rate_change_volatility(&[0.02; 5]).unwrap(), 0.0);
        let v = rate_change_volatility(&[0.01, 0.02, 0.01]).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        assert!(matches!(
            rate_change_volatility(&[0.01]),
            Err(EvalError::SeriesTooShort(1))
        ));
    }

    #[test]
    fn percent_change_values() {
        assert_eq!(volatility_comparison(0.5, 0.5).unwrap(), 0.0);
        let p = volatility_comparison(3.31e-2, 3.33e-2).unwrap();
        assert!((p - 0.604229607).abs() < 1e-6, "{p}");
        assert!(matches!(
            volatility_comparison(0.0, 1.0),
            Err(EvalError::ZeroBaseline)
        ));
    }

    #[test]
    fn row_format() {
        assert_eq!(format_sci(3.31e-2), "3.31E-02");
        assert_eq!(format_sci(1.0e-4), "1.00E-04");
        assert_eq!(format_sci(12.5), "1.25E+01");
        assert_eq!(
            format_volatility_row("V2-WETH", RateType::Borrow, 3.31e-2, 3.33e-2),
            "V2-WETH | Borrow Rate | 3.31E-02 | 3.33E-02 | +0.604%"
        );
    }

    #[test]
    fn full_window_equals_global() {
        let b = traj(&[0.01, 0.015, 0.012, 0.02], &[0.03, 0.05, 0.04, 0.045]);
        let mut c = b.clone();
        c.liquidity = vec![0.01, 0.011, 0.013, 0.019];
        c.source = TrajectorySource::Policy("x".into());
        let global = global_comparison(&b, &c).unwrap();
        let stress = stress_report(&b, &c, &[StressWindow::full_range(&b).unwrap()]).unwrap();
        for (g, s) in global.iter().zip(&stress) {
            assert_eq!(g, &s.volatility);
        }
    }

    #[test]
    fn window_outside_data() {
        let b = traj(&[0.01, 0.02, 0.03], &[0.03, 0.05, 0.04]);
        let w = StressWindow::new(
            "old",
            day(0) - chrono::Days::new(100),
            day(0) - chrono::Days::new(50),
        );
        assert!(matches!(
            stress_report(&b, &b, std::slice::from_ref(&w)),
            Err(EvalError::EmptyWindow(label)) if label == "old"
        ));
        let report = build_report(&b, &b, &[w], &default_magnitude_edges()).unwrap();
        assert_eq!(report.skipped_windows, vec!["old".to_string()]);
    }

    #[test]
    fn default_windows() {
        let w = default_stress_windows();
        assert_eq!(w[0].period(), "2022/2/1--2022/10/31");
        assert_eq!(w[1].period(), "2024/1/1--2024/12/31");
        assert_eq!(w[2].period(), "2024/4/1--2024/10/31");
        assert!(w.iter().all(|w| w.start < w.end));
    }

    #[test]
    fn constant_series_is_all_underflow() {
        let h = magnitude_distribution(&[0.02; 10], &default_magnitude_edges()).unwrap();
        assert_eq!(h.zero_count, 9);
        assert_eq!(h.total(), 9);
    }

    #[test]
    fn decade_bucketing() {
        let h = histogram_of_magnitudes(&[1e-3, -1e-2], &[-4.0, -3.0, -2.0, -1.0]).unwrap();
        assert_eq!(h.counts, vec![0, 1, 1]);
        assert!(matches!(
            histogram_of_magnitudes(&[1.0], &[-1.0, -2.0]),
            Err(EvalError::BadBins)
        ));
    }

    #[test]
    fn quantiles() {
        let y = yield_distribution(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(y.natural.quantiles[2], (0.5, 3.0));
        assert_eq!(y.natural.min, 1.0);
        assert_eq!(y.natural.mean, 3.0);
        let c = yield_distribution(&[0.07; 4]).unwrap();
        assert!(c.natural.quantiles.iter().all(|(_, v)| *v == 0.07));
        let z = yield_distribution(&[0.0, 0.01, 0.1]).unwrap();
        assert_eq!(z.zero_count, 1);
        assert_eq!(z.log10.as_ref().unwrap().count, 2);
        assert!(matches!(
            yield_distribution(&[]),
            Err(EvalError::EmptySeries)
        ));
    }

    #[test]
    fn report_tables_render() {
        let b = traj(&[0.01, 0.015, 0.012, 0.02], &[0.03, 0.05, 0.04, 0.045]);
        let report = build_report(&b, &b, &[], &default_magnitude_edges()).unwrap();
        let text = report.render_text();
        assert!(text.contains("Borrow Rate"));
        assert!(text.contains("+0.604%"));
        let mut csv = Vec::new();
        report.write_volatility_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("asset,rate_type,baseline_std,candidate_std,percent_change"));
        assert!(csv.contains("+0.000%"));
    }

    proptest! {
        #[test]
        fn histogram_conserves_counts(values in proptest::collection::vec(0.0f64..0.5, 2..200)) {
            let h = magnitude_distribution(&values, &default_magnitude_edges()).unwrap();
            prop_assert_eq!(h.total(), values.len() - 1);
        }

        #[test]
        fn scaling_deltas_scales_volatility(
            deltas in proptest::collection::vec(-0.01f64..0.01, 3..50),
            k in 0.1f64..10.0,
        ) {
            let integrate = |scale: f64| {
                let mut r = vec![0.05];
                for d in &deltas {
                    let last = *r.last().unwrap();
                    r.push(last + scale * d);
                }
                r
            };
            let v1 = rate_change_volatility(&integrate(1.0)).unwrap();
            let vk = rate_change_volatility(&integrate(k)).unwrap();
            prop_assert!((vk - k * v1).abs() <= 1e-9 * (k * v1).max(1e-12));
        }
    }
}
