//! Rank-one editing core: key collection, second-moment statistics with ZCA
//! whitening, span-residual diagnostics, and the constrained edit loop.

mod edit;
mod keys;
mod stats;

pub use edit::{
    aggregated_key, rank_one_edit, DirectionAggregation, DirectionMode, EditConfig, EditOutcome,
    EditTrace,
};
pub use keys::{collect_key_values, collect_keys, KeySet};
pub use stats::{default_ridge, key_stats, span_residual, span_residual_default, KeyStatistics};
