//! Cell-free MIMO downlink with rate-splitting: channel model, rate engine,
//! AP selection and federated DDPG precoder training.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ap_selection;
pub mod channel;
pub mod config;
pub mod ddpg;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod rsma;
pub mod selftest;

pub use ap_selection::{brute_force_p3, solve_p3, SelectionInstance};
pub use channel::{ChannelGrid, ChannelParams, Topology};
pub use config::{ExperimentConfig, Mode};
pub use error::{Error, Result};
pub use linalg::{CMat, Complex64};
pub use pipeline::{run, EpisodeRecord, Observer, RunReport};
pub use rsma::{Association, CommonRateShares, PrecoderSet, RateReport};
