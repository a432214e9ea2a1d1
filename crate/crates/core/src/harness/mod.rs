//! Command-line front end, experiment presets, and summary tables.

pub mod cli;
pub mod preset;
pub mod summary;

pub use cli::main_with_args;
pub use preset::{plan, PresetName, PresetPlan, ALPHA_VALUES, DEFAULT_SEEDS, KL_VALUES};
pub use summary::{curve_stats, summarize, CurveStats, SummaryRow, SummaryTable};
