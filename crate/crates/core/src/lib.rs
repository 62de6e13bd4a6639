//! Tail-aware channel estimation on dB power streams.
//!
//! The lower tail of received power is where outages live and where plain
//! moment statistics say the least. This crate models that tail explicitly:
//! deficits below a threshold follow a generalized Pareto law, the
//! threshold and the Pareto parameters are produced per window by small
//! dense networks trained adversarially against real exceedances, and a
//! hybrid generator augments scarce data without flattening the very tail
//! it is supposed to preserve.
//!
//! Layout, roughly bottom-up:
//!
//! * [`gpd`] — the Pareto tail itself: CDF, quantiles, sampling, moment
//!   and likelihood fits, declustering.
//! * [`nn`] — small dense networks with hand-derived gradients, Adam, and
//!   the pathwise (reparameterized) GPD sampler.
//! * [`window`], [`regimes`] — sliding windows, their summary features,
//!   and mixture-model regime labels.
//! * [`estimator`] — the per-window threshold and parameter networks and
//!   their training loops (adversarial and likelihood baseline).
//! * [`augmentor`] — tail-preserving hybrid generator and the vanilla
//!   baseline it is compared against.
//! * [`data`], [`evaluation`], [`diagnostics`], [`checkpoint`] — synthetic
//!   streams with ground truth, model scoring, fit metrics, persistence.
//!
//! Every random path is seeded through [`seed`]; same inputs, same bytes.

pub mod augmentor;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod gpd;
pub mod nn;
pub mod regimes;
pub mod seed;
pub mod series;
mod stats;
pub mod window;

pub use error::{Error, Result};
pub use series::{Origin, SampleSeries};
