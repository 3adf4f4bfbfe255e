//! Simulation library for personalized federated learning.
//!
//! Three personalization strategies are implemented on top of a small
//! softmax-model core:
//!
//! * hypothesis-based client clustering ([`hypcluster`]),
//! * data interpolation with a provably convergent fine-tuning loop
//!   ([`datainterp`]),
//! * per-client model interpolation ([`modelinterp`]).
//!
//! [`baselines`] holds local, federated-averaging and agnostic (minimax)
//! training, [`analysis`] the discrepancy/skewness estimators, the
//! generalization-bound calculators and evaluation, and [`harness`] the
//! experiment recipes used by the `perfed` command-line tool.
//!
//! Data-parallel loops (per client, per cluster, per interpolation weight,
//! per restart) run on rayon when the `parallel` feature is enabled and fall
//! back to plain iterators otherwise. Every parallel task owns a seeded
//! random stream and reductions run in a fixed order, so results are
//! identical with and without the feature.

// negated float comparisons reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baselines;
pub mod codec;
pub mod data;
pub mod datainterp;
pub mod error;
pub mod harness;
pub mod hypcluster;
pub mod io;
pub mod model;
pub mod modelinterp;
pub mod optim;
pub mod par;
pub mod rng;
pub mod selftest;
pub mod synth;

pub use data::{ClientDataset, ClientId, Example, Features, LabelSpace, Population};
pub use error::{Error, Result};
pub use model::{InterpolationWeight, Loss, Model, ModelKind};
