use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use procrustean_core::harness::{
    cell_dataset, read_csv, run_experiment, write_csv, write_meta, write_report, ExperimentSpec, ReportFormat,
};
use procrustean_core::model::{
    read_meta, read_observations, read_truth, write_dataset, CurveVariant, META_FILE, OBSERVATIONS_FILE, TRUTH_FILE,
};
use procrustean_core::{
    cutoff, mean_at_section, smoothed_procrustes_mean, Constraints, CriterionContext, Diagnostics, MeanPattern,
    OptimizerOptions, Section, ShapeError,
};
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "procrustean",
    version,
    about = "Smoothed Procrustes mean estimation and Monte-Carlo experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets of an experiment grid without estimating.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the smoothed Procrustes mean of one dataset directory.
    Estimate {
        /// Directory holding observations.csv (and optionally truth.csv, dataset.json).
        #[arg(long)]
        data: PathBuf,
        /// Frequency cutoff, or `auto` for floor(k^(1/4)).
        #[arg(long, default_value = "auto")]
        lambda: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale_box: f64,
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
        angle_box: f64,
        #[arg(long, value_enum, default_value_t = SectionArg::ZeroSum)]
        section: SectionArg,
    },
    /// Run a Monte-Carlo grid; writes the results CSV and a `.meta.json` beside it.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "svg")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SectionArg {
    ZeroSum,
    ReferenceFirst,
}

impl From<SectionArg> for Section {
    fn from(s: SectionArg) -> Self {
        match s {
            SectionArg::ZeroSum => Section::ZeroSum,
            SectionArg::ReferenceFirst => Section::ReferenceFirst,
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| matches!(e.downcast_ref::<ShapeError>(), Some(ShapeError::Config(_))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Estimate {
            data,
            lambda,
            out,
            scale_box,
            angle_box,
            section,
        } => {
            let constraints = Constraints {
                scale_box,
                angle_box,
                section: section.into(),
            };
            constraints.validate()?;
            estimate(&data, &lambda, &constraints, &out)
        }
        Command::Experiment { config, out } => experiment(&config, &out),
        Command::Report { input, format, out } => {
            let format: ReportFormat = format.parse()?;
            let result = read_csv(&input).with_context(|| format!("reading {}", input.display()))?;
            for path in write_report(&result, format, &out)? {
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn simulate(config: &Path, out: &Path) -> anyhow::Result<u8> {
    let spec = ExperimentSpec::from_path(config)?;
    let mut count = 0;
    for &noise in &spec.noise_kinds {
        for map in spec.k_mappings() {
            for &j in &spec.j_grid {
                for rep in 0..spec.repetitions {
                    let id = format!("{}-k{}-J{}-rep{}", noise.as_str(), map.used, j, rep);
                    let data = cell_dataset(&spec, noise, map.used, j, rep)?;
                    let dir = out.join(&id);
                    write_dataset(&data, &id, &dir).with_context(|| format!("writing {}", dir.display()))?;
                    count += 1;
                }
            }
        }
    }
    println!("wrote {count} datasets to {}", out.display());
    Ok(0)
}

fn parse_lambda(arg: &str, k: usize) -> anyhow::Result<usize> {
    if arg == "auto" {
        return Ok(cutoff(k, 1.5));
    }
    match arg.parse::<usize>() {
        Ok(v) => Ok(v),
        Err(_) => Err(ShapeError::Config(format!(
            "--lambda must be a non-negative integer or `auto`, got {arg:?}"
        ))
        .into()),
    }
}

fn curve_variant(curve_id: &str) -> Option<CurveVariant> {
    match curve_id {
        "benchmark-curve" => Some(CurveVariant::Printed),
        "benchmark-curve-cos10pit" => Some(CurveVariant::Cos10pit),
        _ => None,
    }
}

fn estimate(data: &Path, lambda: &str, constraints: &Constraints, out: &Path) -> anyhow::Result<u8> {
    let obs_path = data.join(OBSERVATIONS_FILE);
    let (dataset_id, observations) =
        read_observations(&obs_path).with_context(|| format!("reading {}", obs_path.display()))?;
    let k = observations.first().map(|o| o.k()).unwrap_or(0);
    let lambda = parse_lambda(lambda, k)?;
    if lambda > k.saturating_sub(1) / 2 {
        bail!(ShapeError::Config(format!(
            "--lambda {lambda} exceeds (k - 1)/2 for k = {k}"
        )));
    }
    let ctx = CriterionContext::new(&observations, lambda)?;
    let est = smoothed_procrustes_mean(&ctx, constraints, &OptimizerOptions::default())?;

    // Score against the known target when the simulator's sidecars are present.
    let mut error_section = None;
    let (meta_path, truth_path) = (data.join(META_FILE), data.join(TRUTH_FILE));
    if meta_path.exists() && truth_path.exists() {
        let meta = read_meta(&meta_path)?;
        if let Some(variant) = curve_variant(&meta.curve_id) {
            let pattern = MeanPattern::from_curve(meta.k, variant)?;
            let truth = read_truth(&truth_path)?;
            let target = mean_at_section(&pattern, &truth)?;
            let d = est.mean.distance(&target);
            error_section = Some(d * d / k as f64);
        }
    }

    let Diagnostics {
        criterion,
        iterations,
        projected_gradient,
        converged,
        active_bounds,
        ..
    } = est.diagnostics;
    let doc = json!({
        "dataset_id": dataset_id,
        "k": k,
        "J": observations.len(),
        "lambda": lambda,
        "constraints": constraints,
        "a": est.params.a,
        "alpha": est.params.alpha,
        "b": est.params.b,
        "mean": est.mean.rows().collect::<Vec<_>>(),
        "error_section": error_section,
        "diagnostics": {
            "criterion": criterion,
            "iterations": iterations,
            "projected_gradient": projected_gradient,
            "converged": converged,
            "active_bounds": active_bounds,
        },
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(0)
}

fn meta_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    out.with_file_name(format!("{stem}.meta.json"))
}

fn experiment(config: &Path, out: &Path) -> anyhow::Result<u8> {
    let spec = ExperimentSpec::from_path(config)?;
    let (result, meta) = run_experiment(&spec)?;
    write_csv(&result, out).with_context(|| format!("writing {}", out.display()))?;
    let meta_out = meta_path(out);
    write_meta(&meta, &meta_out).with_context(|| format!("writing {}", meta_out.display()))?;
    println!("{} rows, {} failed", meta.rows, meta.failures);
    if meta.failures > 0 {
        eprintln!(
            "warning: {} estimator runs failed; see rows with converged=false",
            meta.failures
        );
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}
