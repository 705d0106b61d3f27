//! Sigmoid- and softmax-gated mixture-of-experts regression with quadratic
//! affinity scores.
//!
//! Modules:
//! - [`model`]: gates, scores, experts and the regression function `f_G`.
//! - [`attention`]: self-attention and its per-row mixture-of-experts form.
//! - [`estimation`]: synthetic data and the least-squares estimator.
//! - [`voronoi`]: Voronoi cell assignment and parameter losses.
//! - [`identifiability`]: numeric rank probes of derivative families.
//! - [`experiment`]: sample-size sweeps, slope fits and report files.

pub mod attention;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod identifiability;
pub mod model;
pub mod rng;
pub mod voronoi;

pub use error::{Error, Result};
pub use model::{
    affinity_score, expert_eval, expert_grad, gate_weights, regression_eval, Activation, Atom,
    ExpertFamily, ExpertSpec, GatingKind, MixingMeasure, ParamBounds, ScoreKind,
};
pub use rng::{CounterRng, Stream};
