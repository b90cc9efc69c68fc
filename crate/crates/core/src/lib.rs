//! Offline reinforcement learning for lending-pool interest-rate policies.
//!
//! The pipeline runs [`ingest`] (raw reserve snapshots to engineered features),
//! then [`mdp`] (transitions, reward, normalization), then [`agents`] (BC, CQL
//! and TD3-BC on the [`neuralnet`] engine), then [`evaluate`] (counterfactual
//! replay against the [`ratecurve`] baseline).

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod evaluate;
pub mod ingest;
pub mod mdp;
pub mod neuralnet;
pub mod ratecurve;
pub mod synthetic;
