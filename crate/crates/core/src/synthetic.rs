//! Seeded synthetic data: a mean-reverting utilization process driving the
//! kinked curve, with multiplicative rate noise and occasional stress shocks.

use chrono::{NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ingest::ReserveSnapshot;
use crate::mdp::{
    ActionVector, RewardConfig, StateVector, Transition, TransitionDataset, STATE_DIM,
};
use crate::ratecurve::{self, KinkParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub pool_id: String,
    pub start_date: NaiveDate,
    pub days: usize,
    pub seed: u64,
    pub kink: KinkParams,
    pub decimals: u32,
    /// Long-run utilization level.
    pub utilization_mean: f64,
    /// Daily pull of log-odds utilization back to its mean.
    pub reversion: f64,
    /// Daily log-odds shock size.
    pub utilization_vol: f64,
    /// Relative noise on the recorded borrow rate.
    pub rate_noise: f64,
    /// Daily probability of a utilization spike.
    pub shock_probability: f64,
    pub initial_liquidity: f64,
    pub liquidity_vol: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            pool_id: "SYN-USDC".into(),
            start_date: NaiveDate::from_ymd_opt(2022, 3, 1).unwrap(),
            days: 1000,
            seed: 7,
            kink: KinkParams::default(),
            decimals: 18,
            utilization_mean: 0.65,
            reversion: 0.08,
            utilization_vol: 0.12,
            rate_noise: 0.03,
            shock_probability: 0.01,
            initial_liquidity: 5.0e7,
            liquidity_vol: 0.02,
        }
    }
}

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn to_raw(amount: f64, decimals: u32) -> u128 {
    (amount.max(0.0) * 10f64.powi(decimals as i32)).round() as u128
}

/// Daily snapshots, one per day at noon UTC.
pub fn generate_snapshots(cfg: &SyntheticConfig) -> Vec<ReserveSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noon = NaiveTime::from_hms_opt(12, 0, 0).unwrap();
    let mean = logit(cfg.utilization_mean);

    let mut x = mean;
    let mut liquidity = cfg.initial_liquidity;
    let (mut liquidity_index, mut borrow_index) = (1.0, 1.0);
    let mut prev_debt = cfg.initial_liquidity * cfg.utilization_mean;
    let mut out = Vec::with_capacity(cfg.days);
    for day in 0..cfg.days {
        let z = gauss(&mut rng);
        let shock = if rng.random::<f64>() < cfg.shock_probability {
            1.5
        } else {
            0.0
        };
        x += cfg.reversion * (mean - x) + cfg.utilization_vol * z + shock;
        let u = sigmoid(x).clamp(0.01, 0.995);
        liquidity *= (cfg.liquidity_vol * gauss(&mut rng)).exp();
        let debt = liquidity * u;

        let (borrow, _) =
            ratecurve::rates_at(u, &cfg.kink).expect("utilization is clamped to (0, 1)");
        let borrow = (borrow * (1.0 + cfg.rate_noise * gauss(&mut rng))).max(0.0);
        let liquidity_rate = borrow * u * (1.0 - cfg.kink.reserve_factor);
        liquidity_index *= 1.0 + liquidity_rate / 365.0;
        borrow_index *= 1.0 + borrow / 365.0;

        let borrow_volume = (debt - prev_debt).abs() + 0.01 * liquidity * gauss(&mut rng).abs();
        let deposit_volume = 0.02 * liquidity * (1.0 + 0.5 * gauss(&mut rng)).abs();
        prev_debt = debt;

        let date = cfg.start_date + chrono::Days::new(day as u64);
        let d = cfg.decimals;
        out.push(ReserveSnapshot {
            timestamp_unix: date.and_time(noon).and_utc().timestamp(),
            pool_id: cfg.pool_id.clone(),
            decimals: d,
            available_liquidity: to_raw(liquidity - debt, d),
            total_liquidity: to_raw(liquidity, d),
            total_liquidity_as_collateral: to_raw(0.7 * liquidity, d),
            total_debt: to_raw(debt, d),
            total_variable_debt: to_raw(0.95 * debt, d),
            liquidity_rate_apr: liquidity_rate,
            variable_borrow_rate_apr: borrow,
            liquidity_index,
            variable_borrow_index: borrow_index,
            deposit_volume: to_raw(deposit_volume, d),
            borrow_volume: to_raw(borrow_volume, d),
            base_ltv_as_collateral: 0.75,
            reserve_factor: cfg.kink.reserve_factor,
            reserve_liquidation_threshold: 0.8,
        });
    }
    out
}

/// `n` transitions whose action is a fixed linear function of the state.
pub fn linear_map_dataset(n: usize, seed: u64) -> TransitionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<[f64; STATE_DIM]> = (0..2)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0) / STATE_DIM as f64))
        .collect();
    let mut state: [f64; STATE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let transitions = (0..n)
        .map(|i| {
            let next: [f64; STATE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let map =
                |w: &[f64; STATE_DIM]| w.iter().zip(&state).map(|(a, b)| a * b).sum::<f64>() * 1e-3;
            let t = Transition {
                state: StateVector(state),
                action: ActionVector::new(map(&weights[0]), map(&weights[1])),
                reward: -state[0].powi(2) * 0.1,
                next_state: StateVector(next),
                done: i + 1 == n,
            };
            state = next;
            t
        })
        .collect();
    TransitionDataset {
        pool_id: "linear-map".into(),
        reward_config: RewardConfig::default(),
        transitions,
    }
}
