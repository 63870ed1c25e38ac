//! Laboratory for entanglement-based quantum key distribution over high-loss
//! links.
//!
//! - [`keyrate`]: analytic visibility, QBER and secure-rate model.
//! - [`simulator`]: event-level Monte Carlo of source, channel and detectors.
//! - [`timesync`]: cross-correlation clock recovery and coincidence pairing.
//! - [`protocol`]: BBM92 sifting, QBER estimation, CASCADE and privacy
//!   amplification over an explicit classical channel.
//! - [`scenario`]: link scenario files and the three field presets.

// `!(x > 0.0)` style checks are there to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod keyrate;
pub mod protocol;
pub mod scenario;
pub mod simulator;
pub mod timesync;
pub mod timetag;

pub use keyrate::{predict, predict_scenario, Placement, RatePrediction};
pub use scenario::ScenarioConfig;
pub use timetag::{Basis, Channel, TagStream, TimeTag};
