//! Two-slope ("kinked") utilization interest-rate model.
//!
//! Below the kink the borrow rate rises gently with utilization; above it the
//! second, steeper slope applies. The deposit rate passes the borrow rate
//! through utilization and the reserve factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{RateTrajectory, TrajectorySource};
use crate::ingest::{FeatureSeries, IngestError};

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("{name} = {value} is outside its domain")]
    Domain { name: &'static str, value: f64 },
    #[error("invalid curve parameters: {0}")]
    InvalidParams(&'static str),
    #[error("empty input series")]
    EmptyInput,
    #[error(transparent)]
    Feature(#[from] IngestError),
}

/// Parameters of the two-slope curve. All rates are fractions per year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinkParams {
    pub r_base: f64,
    /// Kink point, strictly inside (0, 1).
    pub u_star: f64,
    pub slope1: f64,
    pub slope2: f64,
    pub reserve_factor: f64,
}

impl Default for KinkParams {
    /// A volatile-asset style curve: 80% kink, 4% then 75% slopes.
    fn default() -> Self {
        KinkParams {
            r_base: 0.0,
            u_star: 0.8,
            slope1: 0.04,
            slope2: 0.75,
            reserve_factor: 0.1,
        }
    }
}

impl KinkParams {
    pub fn validate(&self) -> Result<(), CurveError> {
        if !(self.u_star > 0.0 && self.u_star < 1.0) {
            return Err(CurveError::InvalidParams("u_star must lie in (0, 1)"));
        }
        if !(self.slope1 >= 0.0 && self.slope2 >= 0.0) {
            return Err(CurveError::InvalidParams("slopes must be non-negative"));
        }
        if !(self.r_base >= 0.0) {
            return Err(CurveError::InvalidParams("r_base must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.reserve_factor) {
            return Err(CurveError::InvalidParams(
                "reserve_factor must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), CurveError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(CurveError::Domain { name, value })
    }
}

pub fn borrow_rate(u: f64, p: &KinkParams) -> Result<f64, CurveError> {
    check_unit("utilization", u)?;
    if u <= p.u_star {
        Ok(p.r_base + u * p.slope1)
    } else {
        Ok(p.r_base + p.u_star * p.slope1 + (u - p.u_star) * p.slope2)
    }
}

pub fn deposit_rate(borrow: f64, u: f64, reserve_factor: f64) -> Result<f64, CurveError> {
    check_unit("utilization", u)?;
    check_unit("reserve_factor", reserve_factor)?;
    Ok(borrow * u * (1.0 - reserve_factor))
}

/// (borrow, deposit) rates at utilization `u`.
pub fn rates_at(u: f64, p: &KinkParams) -> Result<(f64, f64), CurveError> {
    let b = borrow_rate(u, p)?;
    Ok((b, deposit_rate(b, u, p.reserve_factor)?))
}

/// Applies the curve to each day's historical utilization (open loop).
pub fn baseline_trajectory(
    series: &FeatureSeries,
    p: &KinkParams,
) -> Result<RateTrajectory, CurveError> {
    if series.is_empty() {
        return Err(CurveError::EmptyInput);
    }
    p.validate()?;
    let mut borrow = Vec::with_capacity(series.len());
    let mut liquidity = Vec::with_capacity(series.len());
    for row in series.rows() {
        let (b, d) = rates_at(row.utilization()?, p)?;
        borrow.push(b);
        liquidity.push(d);
    }
    Ok(RateTrajectory::new(
        series.pool_id(),
        series.dates(),
        liquidity,
        borrow,
        TrajectorySource::RuleBased,
    ))
}

/// The trajectory of recorded historical rates.
pub fn recorded_trajectory(series: &FeatureSeries) -> Result<RateTrajectory, CurveError> {
    if series.is_empty() {
        return Err(CurveError::EmptyInput);
    }
    let mut borrow = Vec::with_capacity(series.len());
    let mut liquidity = Vec::with_capacity(series.len());
    for row in series.rows() {
        let (l, b) = row.rates()?;
        liquidity.push(l);
        borrow.push(b);
    }
    Ok(RateTrajectory::new(
        series.pool_id(),
        series.dates(),
        liquidity,
        borrow,
        TrajectorySource::Recorded,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Feature, FeatureRow, FEATURE_COUNT};
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn params() -> KinkParams {
        KinkParams {
            r_base: 0.0,
            u_star: 0.8,
            slope1: 0.04,
            slope2: 0.75,
            reserve_factor: 0.1,
        }
    }

    fn series_with_utilization(us: &[f64]) -> FeatureSeries {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let rows = us
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let mut values = [0.0; FEATURE_COUNT];
                values[Feature::UtilizationRate.index()] = u;
                FeatureRow::from_values(start + chrono::Days::new(i as u64), values, false)
            })
            .collect();
        FeatureSeries::new("pool", 7, rows).unwrap()
    }

    #[test]
    fn point_values() {
        let p = params();
        assert_eq!(borrow_rate(0.0, &p).unwrap(), 0.0);
        assert!((borrow_rate(0.8, &p).unwrap() - 0.032).abs() < 1e-15);
        assert!((borrow_rate(1.0, &p).unwrap() - 0.182).abs() < 1e-15);
    }

    #[test]
    fn branches_agree_at_kink() {
        let p = params();
        let lower = |u: f64| p.r_base + u * p.slope1;
        let upper = |u: f64| p.r_base + p.u_star * p.slope1 + (u - p.u_star) * p.slope2;
        assert!((lower(p.u_star) - upper(p.u_star)).abs() < 1e-12);
        let d = 1e-9;
        let gap = borrow_rate(p.u_star + d, &p).unwrap() - borrow_rate(p.u_star - d, &p).unwrap();
        assert!(gap.abs() < 1e-8);
    }

    #[test]
    fn out_of_domain_utilization() {
        assert!(matches!(
            borrow_rate(1.01, &params()),
            Err(CurveError::Domain { .. })
        ));
        assert!(matches!(
            deposit_rate(0.1, -0.1, 0.1),
            Err(CurveError::Domain { .. })
        ));
        assert!(matches!(
            deposit_rate(0.1, 0.5, 1.5),
            Err(CurveError::Domain { .. })
        ));
    }

    #[test]
    fn deposit_rate_values() {
        assert_eq!(deposit_rate(0.182, 0.0, 0.1).unwrap(), 0.0);
        assert_eq!(deposit_rate(0.182, 0.7, 1.0).unwrap(), 0.0);
        assert!((deposit_rate(0.182, 1.0, 0.1).unwrap() - 0.1638).abs() < 1e-15);
    }

    #[test]
    fn baseline_zero_utilization_is_constant() {
        let mut p = params();
        p.r_base = 0.01;
        let traj = baseline_trajectory(&series_with_utilization(&[0.0; 5]), &p).unwrap();
        assert!(traj.borrow().iter().all(|&b| b == 0.01));
        assert!(traj.liquidity().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn baseline_single_row_at_kink() {
        let traj = baseline_trajectory(&series_with_utilization(&[0.8]), &params()).unwrap();
        assert_eq!(traj.len(), 1);
        assert!((traj.borrow()[0] - 0.032).abs() < 1e-15);
        assert!((traj.liquidity()[0] - 0.02304).abs() < 1e-15);
    }

    #[test]
    fn baseline_of_empty_series_fails() {
        let empty = FeatureSeries::new("pool", 7, Vec::new()).unwrap();
        assert!(matches!(
            baseline_trajectory(&empty, &params()),
            Err(CurveError::EmptyInput)
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params();
        p.u_star = 1.0;
        assert!(p.validate().is_err());
        p.u_star = 0.5;
        p.slope2 = -1.0;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_utilization(
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
            r_base in 0.0f64..0.1,
            u_star in 0.05f64..0.95,
            s1 in 0.0f64..0.5,
            s2 in 0.0f64..3.0,
        ) {
            let p = KinkParams { r_base, u_star, slope1: s1, slope2: s2, reserve_factor: 0.1 };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(borrow_rate(lo, &p).unwrap() <= borrow_rate(hi, &p).unwrap());
        }

        #[test]
        fn deposit_never_exceeds_borrow(u in 0.0f64..=1.0, rf in 0.0f64..=1.0) {
            let p = KinkParams { reserve_factor: rf, ..params() };
            let (b, d) = rates_at(u, &p).unwrap();
            prop_assert!(d <= b);
        }
    }
}
