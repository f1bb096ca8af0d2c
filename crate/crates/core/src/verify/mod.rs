//! Self-contained numerical checks: finite-difference gradient suites and
//! mask statistics.

mod gradcheck;
mod mask_stats;

pub use gradcheck::{
    backprop_instance, conv_instance, fc_instance, gradcheck, relative_error, Fault, GradcheckOptions, GradcheckReport,
    SuiteResult,
};
pub use mask_stats::{mask_stats, MaskStatsOptions, MaskStatsReport};
