//! Two-channel spectrum-aware low-rank adaptation on desk-scale backbones.
//!
//! Each adapted weight `W` is split through its cached truncated SVD
//! `W ≈ U_k diag(σ) V_kᵀ`. Updates have a *principal* channel
//! `U_k diag(φ) V_kᵀ`, held in check by a σ-weighted quadratic budget, and a
//! *residual* channel `s·B̃Ã` confined to the two-sided orthogonal complement
//! of `(U_k, V_k)`.
//!
//! | module | what it does |
//! |---|---|
//! | [`linalg`] | dense matrices, randomized SVD, Jacobi SVD oracle |
//! | [`cache`] | per-layer SVD cache build / persist / reload |
//! | [`adapter`] | two-channel update, projection, retraction |
//! | [`objective`] | task loss, stability budget, analytic gradients |
//! | [`trainer`] | AdamW training loop with ablation switches |
//! | [`merge`] | addition and TIES merges, MergeFail, paired bootstrap |
//! | [`probe`] | rank-1 spectral interventions and σ–drop correlations |
//! | [`bench`] | synthetic world, Retain / AvgAcc / Forgetting, full pipeline |
//! | [`cli`] | batch driver behind the `spectral-adapt` binary |

pub mod adapter;
pub mod bench;
pub mod cache;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod model;
pub mod objective;
pub mod probe;
pub mod report;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
