//! # settler-pinn
//!
//! Toolkit for estimating the phase heights of a horizontal liquid–liquid
//! gravity settler from outlet flow-rate measurements. It combines:
//!
//! - a lumped mechanistic settler model (volume balances closed by pluggable
//!   coalescence/sedimentation surrogates) acting as a synthetic twin,
//! - small physics-informed neural surrogates with exact derivatives,
//!   trained in two stages (synthetic pretraining, noisy fine-tuning),
//! - an ensemble-driven, Kalman-style filter that tracks the unmeasured
//!   heavy-phase and dense-packed-zone heights from flow measurements only.
//!
//! ## Module map
//!
//! | Module     | Contents |
//! |------------|----------|
//! | [`domain`] | Units, operating bounds, scaling, configuration |
//! | [`mech`]   | Settler ODEs, RK4 segments, LHS datasets, twin trajectories |
//! | [`nn`]     | MLP engine: forward, JVP, Jacobians, mixed-mode backprop |
//! | [`train`]  | Loss assembly, loss balancing, Adam + L-BFGS, ensembles |
//! | [`filter`] | Height estimation filter, open-loop rollout, outlet-DPZ net |
//! | [`io`]     | CSV schemas, preprocessing, metrics, manifests, plots |
//!
//! ## Runnable examples
//!
//! One example per major capability lives under `examples/`:
//!
//! ```bash
//! cargo run --release --example mechanistic_twin     # simulate the settler twin
//! cargo run --release --example autodiff_check      # derivatives vs finite differences
//! cargo run --release --example pretrain_pinn       # synthetic pretraining, small scale
//! cargo run --release --example two_stage_training  # pretrain + fine-tune pipeline
//! cargo run --release --example forward_simulation  # chained open-loop rollout
//! cargo run --release --example state_estimation    # filter on a noisy twin
//! cargo run --release --example outlet_dpz          # average-to-outlet height mapping
//! ```
//!
//! The `settler` binary exposes the same pipeline as subcommands
//! (`generate-data`, `make-twin`, `pretrain`, `finetune`, `simulate`,
//! `estimate`, `outlet-dpz`, `evaluate`, `plot`, `replay`); see the README.

pub mod domain;
pub mod error;
pub mod filter;
pub mod io;
pub mod mech;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
