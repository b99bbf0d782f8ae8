use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShapeError};
use crate::estimator::Constraints;
use crate::model::{CurveVariant, DeformationBounds, NoiseKind};
use crate::optim::OptimizerOptions;
use crate::spectral::{cutoff, CutoffTable};

/// How the smoothed estimator picks its frequency cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LambdaPolicy {
    /// Hand-picked values keyed by the requested landmark count.
    Table {
        #[serde(default = "reference_entries")]
        entries: Vec<(usize, usize)>,
    },
    /// `floor(k^(1/(2s+1)))`.
    Cutoff {
        #[serde(default = "default_smoothness")]
        s: f64,
    },
}

fn reference_entries() -> Vec<(usize, usize)> {
    CutoffTable::reference().entries
}

fn default_smoothness() -> f64 {
    1.5
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Table {
            entries: reference_entries(),
        }
    }
}

impl LambdaPolicy {
    /// Cutoff for requested count `nominal_k`, run at odd `k`.
    pub fn lambda(&self, nominal_k: usize, k: usize) -> usize {
        match self {
            LambdaPolicy::Table { entries } => CutoffTable {
                entries: entries.clone(),
            }
            .lookup(nominal_k, k),
            LambdaPolicy::Cutoff { s } => cutoff(k, *s),
        }
    }
}

/// What the estimated mean is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreTarget {
    /// The representative `g0^{-1} . f` on the zero-sum section.
    #[default]
    Section,
    /// The raw mean pattern `f`.
    Raw,
}

impl ScoreTarget {
    pub fn metric_tag(&self) -> &'static str {
        match self {
            ScoreTarget::Section => "mse_section",
            ScoreTarget::Raw => "mse_raw",
        }
    }
}

/// A Monte-Carlo grid. Serialized field-for-field as the JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub k_grid: Vec<usize>,
    #[serde(rename = "J_grid")]
    pub j_grid: Vec<usize>,
    pub noise_kinds: Vec<NoiseKind>,
    pub repetitions: usize,
    #[serde(default)]
    pub lambda_policy: LambdaPolicy,
    #[serde(default = "DeformationBounds::reference")]
    pub truth_bounds: DeformationBounds,
    #[serde(default)]
    pub estimator_box: Constraints,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub curve_variant: CurveVariant,
    #[serde(default)]
    pub score_against: ScoreTarget,
    /// Wall-clock timings make output bytes run-dependent, so they are only
    /// written when asked for.
    #[serde(default)]
    pub record_runtime: bool,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
}

fn default_parallelism() -> usize {
    1
}

/// A requested landmark count and the odd count actually simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMapping {
    pub requested: usize,
    pub used: usize,
    pub lambda: usize,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| ShapeError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ShapeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ShapeError::Config(msg));
        if self.k_grid.is_empty() || self.j_grid.is_empty() || self.noise_kinds.is_empty() {
            return fail("k_grid, J_grid and noise_kinds must be non-empty".into());
        }
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if let Some(k) = self.k_grid.iter().find(|&&k| k < 3) {
            return fail(format!("k = {k} is below 3"));
        }
        if let Some(j) = self.j_grid.iter().find(|&&j| j < 2) {
            return fail(format!("J = {j} is below 2"));
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1".into());
        }
        match &self.lambda_policy {
            LambdaPolicy::Table { entries } if entries.is_empty() => return fail("lambda table is empty".into()),
            LambdaPolicy::Cutoff { s } if !(*s > 0.0 && s.is_finite()) => {
                return fail(format!("smoothness s = {s} must be positive"))
            }
            _ => {}
        }
        let b = &self.truth_bounds;
        if ![b.scale, b.angle, b.translation]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return fail(format!("invalid truth bounds {b:?}"));
        }
        if !(self.optimizer.tolerance > 0.0) || self.optimizer.max_iterations == 0 {
            return fail("optimizer tolerance and iteration cap must be positive".into());
        }
        self.estimator_box.validate()
    }

    /// Requested `k` values with the odd counts used and their cutoffs.
    /// Duplicates after rounding up are kept once.
    pub fn k_mappings(&self) -> Vec<KMapping> {
        let mut out: Vec<KMapping> = Vec::new();
        for &requested in &self.k_grid {
            let used = if requested % 2 == 0 { requested + 1 } else { requested };
            if out.iter().any(|m| m.used == used) {
                continue;
            }
            out.push(KMapping {
                requested,
                used,
                lambda: self.lambda_policy.lambda(requested, used),
            });
        }
        out
    }
}
