//! Accounting and receptive-field analysis.

pub mod agd;
pub mod cost;
pub mod erf;
pub mod gradsuite;
pub mod support;

pub use agd::{agd_metrics, AgdMetrics};
pub use cost::{count_flops, count_instrumented, count_params, CostBreakdown, CostEntry};
pub use erf::{compute_erf, erf_sample, render_heatmap, ErfMap, ErfSource, InputKind};
pub use support::{empirical_rf_support, ChannelGroup, SupportBox};
