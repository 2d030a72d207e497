//! DART spike forecasting and impact-aware virtual bid sizing.

// `!(v > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod bidstack;
pub mod calendar;
pub mod classifier;
pub mod config;
pub mod error;
pub mod features;
pub mod panel;
pub mod pipeline;
pub mod sizing;
pub mod synth;

pub use backtest::{BacktestReport, Mode, TradeRecord, View};
pub use bidstack::{BidStack, ImpactParams, StackSet};
pub use calendar::{Band, Bucket, DateRange, Market, MarketCalendar, Season, SplitRole, SplitSpec};
pub use classifier::{Side, SpikeModel};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use features::{FeatureSet, FeatureSpec, LabeledObservation};
pub use panel::{HourlyRecord, Panel};
pub use pipeline::Manifest;
pub use sizing::{ExpectedPayoffs, Regime, TradePlan};
pub use synth::SynthSpec;
