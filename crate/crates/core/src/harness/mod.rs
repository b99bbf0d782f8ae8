//! Monte-Carlo experiments over landmark counts, sample sizes and noise
//! kinds, with CSV output and SVG summaries.

pub mod report;
pub mod run;
pub mod spec;

pub use report::{render_svg, summarize, write_report, CellSummary, ReportFormat};
pub use run::{
    cell_dataset, read_csv, run_cell, run_experiment, write_csv, write_meta, ExperimentMeta, ExperimentResult,
    ResultRow, CSV_HEADER,
};
pub use spec::{ExperimentSpec, KMapping, LambdaPolicy, ScoreTarget};
