use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::CriterionContext;
use crate::error::{Result, ShapeError};
use crate::estimator::{mean_at_section, smoothed_procrustes_mean};
use crate::geometry::Configuration;
use crate::model::{generate_dataset, Dataset, MeanPattern, NoiseKind, NoiseModel};
use crate::rng::derive_seed;

use super::spec::{ExperimentSpec, KMapping, ScoreTarget};

/// One estimator run inside one Monte-Carlo cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub noise: NoiseKind,
    pub k: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub rep: usize,
    pub smoothed: bool,
    pub error: f64,
    pub error_metric: String,
    pub runtime_ms: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.converged).count()
    }

    /// Sorts rows by `(noise, k, J, rep, smoothed)`.
    pub fn canonicalize(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.noise.as_str(), a.k, a.j, a.rep, a.smoothed).cmp(&(b.noise.as_str(), b.k, b.j, b.rep, b.smoothed))
        });
    }
}

/// Per-noise, per-`k` facts recorded next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub noise: NoiseKind,
    pub k: usize,
    pub gamma_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub spec: ExperimentSpec,
    pub k_mapping: Vec<KMapping>,
    pub noise: Vec<NoiseSummary>,
    pub rows: usize,
    pub failures: usize,
}

/// Immutable per-`(noise, k)` state shared by all repetitions.
struct CellShared {
    pattern: MeanPattern,
    noise: NoiseModel,
    lambda: usize,
}

fn noise_code(kind: NoiseKind) -> u64 {
    match kind {
        NoiseKind::None => 0,
        NoiseKind::White => 1,
        NoiseKind::Stationary => 2,
        NoiseKind::Correlated => 3,
    }
}

/// Seed of the rotation used by correlated noise; one per `(base seed, k)`.
pub fn noise_seed(spec: &ExperimentSpec, k: usize) -> u64 {
    derive_seed(spec.seed, &[0xC0, k as u64])
}

/// Seed of the dataset for one cell repetition.
pub fn dataset_seed(spec: &ExperimentSpec, noise: NoiseKind, k: usize, j: usize, rep: usize) -> u64 {
    derive_seed(spec.seed, &[noise_code(noise), k as u64, j as u64, rep as u64])
}

fn build_shared(spec: &ExperimentSpec, noise: NoiseKind, map: &KMapping) -> Result<CellShared> {
    Ok(CellShared {
        pattern: MeanPattern::from_curve(map.used, spec.curve_variant)?,
        noise: NoiseModel::new(noise, map.used, noise_seed(spec, map.used))?,
        lambda: map.lambda,
    })
}

/// Generates the dataset of one cell repetition.
pub fn cell_dataset(spec: &ExperimentSpec, noise: NoiseKind, k: usize, j: usize, rep: usize) -> Result<Dataset> {
    let map = lookup_mapping(spec, k)?;
    let shared = build_shared(spec, noise, &map)?;
    generate_dataset(
        &shared.pattern,
        j,
        &spec.truth_bounds,
        &shared.noise,
        dataset_seed(spec, noise, k, j, rep),
    )
}

fn lookup_mapping(spec: &ExperimentSpec, k: usize) -> Result<KMapping> {
    spec.k_mappings()
        .into_iter()
        .find(|m| m.used == k || m.requested == k)
        .ok_or_else(|| ShapeError::Config(format!("k = {k} is not in the grid")))
}

/// `(1/k) ||a - b||^2`.
pub fn mean_squared_error(a: &Configuration, b: &Configuration) -> f64 {
    let d = a.distance(b);
    d * d / a.k() as f64
}

fn score(spec: &ExperimentSpec, data: &Dataset, lambda: usize) -> (f64, bool, u64) {
    let started = Instant::now();
    let outcome = (|| -> Result<f64> {
        let ctx = CriterionContext::new(&data.observations, lambda)?;
        let est = smoothed_procrustes_mean(&ctx, &spec.estimator_box, &spec.optimizer)?;
        let target = match spec.score_against {
            ScoreTarget::Section => mean_at_section(&data.pattern, &data.truth)?,
            ScoreTarget::Raw => data.pattern.config.clone(),
        };
        Ok(mean_squared_error(&est.mean, &target))
    })();
    let runtime = if spec.record_runtime {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    match outcome {
        Ok(err) => (err, true, runtime),
        Err(_) => (f64::NAN, false, runtime),
    }
}

fn run_shared(spec: &ExperimentSpec, shared: &CellShared, noise: NoiseKind, j: usize, rep: usize) -> [ResultRow; 2] {
    let k = shared.pattern.k();
    let row = |smoothed: bool, (error, converged, runtime_ms): (f64, bool, u64)| ResultRow {
        noise,
        k,
        j,
        rep,
        smoothed,
        error,
        error_metric: spec.score_against.metric_tag().to_string(),
        runtime_ms,
        converged,
    };
    let seed = dataset_seed(spec, noise, k, j, rep);
    match generate_dataset(&shared.pattern, j, &spec.truth_bounds, &shared.noise, seed) {
        Ok(data) => [
            row(false, score(spec, &data, (k - 1) / 2)),
            row(true, score(spec, &data, shared.lambda)),
        ],
        Err(_) => [row(false, (f64::NAN, false, 0)), row(true, (f64::NAN, false, 0))],
    }
}

/// Runs the smoothed and the unsmoothed estimator on one repetition of one
/// cell. `k` may be given as requested or as the odd count used.
pub fn run_cell(spec: &ExperimentSpec, noise: NoiseKind, k: usize, j: usize, rep: usize) -> Result<[ResultRow; 2]> {
    let map = lookup_mapping(spec, k)?;
    let shared = build_shared(spec, noise, &map)?;
    Ok(run_shared(spec, &shared, noise, j, rep))
}

/// Executes the whole grid on `spec.parallelism` threads.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(ExperimentResult, ExperimentMeta)> {
    spec.validate()?;
    let mappings = spec.k_mappings();
    let mut shared = BTreeMap::new();
    let mut noise_meta = Vec::new();
    for &kind in &spec.noise_kinds {
        for map in &mappings {
            let s = build_shared(spec, kind, map)?;
            noise_meta.push(NoiseSummary {
                noise: kind,
                k: map.used,
                gamma_max: s.noise.gamma_max(),
            });
            shared.insert((noise_code(kind), map.used), s);
        }
    }
    let mut tasks = Vec::new();
    for &kind in &spec.noise_kinds {
        for map in &mappings {
            for &j in &spec.j_grid {
                for rep in 0..spec.repetitions {
                    tasks.push((kind, map.used, j, rep));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| ShapeError::Config(format!("thread pool: {e}")))?;
    let rows: Vec<ResultRow> = pool.install(|| {
        tasks
            .par_iter()
            .flat_map_iter(|&(kind, k, j, rep)| run_shared(spec, &shared[&(noise_code(kind), k)], kind, j, rep))
            .collect()
    });
    let mut result = ExperimentResult { rows };
    result.canonicalize();
    let meta = ExperimentMeta {
        spec: spec.clone(),
        k_mapping: mappings,
        noise: noise_meta,
        rows: result.rows.len(),
        failures: result.failures(),
    };
    Ok((result, meta))
}

pub const CSV_HEADER: &str = "noise,k,J,rep,smoothed,error,error_metric,runtime_ms,converged";

pub fn write_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    if result.rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for row in &result.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<ExperimentResult> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(ShapeError::Config(format!(
            "unexpected CSV header {:?}",
            header.join(",")
        )));
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(ExperimentResult { rows })
}

pub fn write_meta(meta: &ExperimentMeta, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}
