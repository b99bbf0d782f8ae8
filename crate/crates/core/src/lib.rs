//! Smoothed Procrustes estimation of a mean planar shape from landmark
//! configurations observed under random similarity deformations and noise.
//!
//! * [`geometry`]: the similarity group and its action on configurations.
//! * [`spectral`]: Fourier low-pass projections and the cutoff rule.
//! * [`model`]: the benchmark curve, deformation and noise samplers, datasets.
//! * [`criteria`]: matching criteria with analytic gradients.
//! * [`estimator`]: the two-step estimator and the classical Procrustes means.
//! * [`harness`]: Monte-Carlo experiments, CSV output and SVG reports.

pub mod criteria;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spectral;

pub use criteria::{CriterionContext, ParameterVector};
pub use error::{Result, ShapeError};
pub use estimator::{
    closed_form_b, estimate_rotation_scaling, full_procrustes_mean, mean_at_section, partial_procrustes_mean,
    section_point, smoothed_procrustes_mean, Constraints, Diagnostics, EstimationResult, Section,
};
pub use geometry::{act, preshape, split, Configuration, ConfigurationSplit, Similarity};
pub use model::{
    generate_dataset, paper_curve, sample_deformations, Dataset, DeformationBounds, DeformationSet, MeanPattern,
    NoiseKind, NoiseModel,
};
pub use optim::OptimizerOptions;
pub use spectral::{cutoff, smooth, smoothing_matrix, CutoffTable, SmoothingMode};
