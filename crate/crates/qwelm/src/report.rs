//! Run artifacts: manifest, JSON reports, and plot-ready CSV files with
//! frozen schemas.
//!
//! [`run`] dispatches a materialized [`RunConfig`] to its pipeline and
//! writes a bundle of files into one output directory.  The manifest goes
//! first — it carries the artifact version plus the full configuration echo,
//! so it alone suffices to reproduce every other file — and all emission is
//! deterministic: no timestamps, no map iteration, every CSV float printed
//! with 17 significant digits, so rerunning a config yields byte-identical
//! artifacts.
//!
//! CSV column orders are frozen contracts:
//! `learning_curve.csv` = (n_train, test_mse, sigma);
//! `scatter.csv` = (true_value, predicted_value, split);
//! `trace.csv` = (step, coordinate, theta_deg, phi_deg, loss);
//! `landscape.csv` = (theta_deg, phi_deg, mse, mse_sigma).
//! Optional fields (a curve point without error bars, a failed landscape
//! cell) are emitted as empty fields, never omitted rows.

use crate::config::{RunConfig, Task};
use crate::error::{QelmError, Result};
use crate::experiments::{
    pauli_transfer_experiment, robustness_rerun, single_line_fit_loss,
    witness_resample_uncertainty, witness_transfer_experiment, ExperimentReport,
    PauliExperimentConfig, WitnessExperimentConfig,
};
use crate::optimize::{coordinate_descent, landscape_scan, LandscapeGrid, OptimizationTrace};
use crate::qelm::{bell_witness, pauli_x, pauli_y, pauli_z, Observable, DEFAULT_SVD_CUTOFF};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Everything a run left on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultBundle {
    /// Directory the files were written into.
    pub out_dir: PathBuf,
    /// The manifest, always the first file written.
    pub manifest_path: PathBuf,
    /// Every written file, in emission order (manifest first).
    pub files: Vec<PathBuf>,
}

/// Output flavor of [`emit_plot_data`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    /// Frozen-schema CSV files (confusion stays JSON).
    Csv,
    /// The same tables as JSON arrays.
    Json,
}

/// Formats a float with 17 significant digits, enough for a lossless
/// round-trip of any `f64`.
fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text)
        .map_err(|e| QelmError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Serializes pretty JSON with a trailing newline.  Float fields use
/// shortest-round-trip notation, which is also lossless.
fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| QelmError::Config(format!("cannot serialize {name}: {e}")))?;
    text.push('\n');
    write_text(dir, name, &text)
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact_version: &'a str,
    task: &'a str,
    seed: u64,
    config_toml: &'a str,
}

#[derive(Serialize)]
struct ConfusionLabels {
    rows: [&'static str; 2],
    cols: [&'static str; 2],
}

#[derive(Serialize)]
struct ConfusionJson {
    labels: ConfusionLabels,
    matrix: [[u64; 2]; 2],
    total: u64,
}

impl ConfusionJson {
    fn new(matrix: [[u64; 2]; 2]) -> Self {
        ConfusionJson {
            labels: ConfusionLabels {
                rows: ["true_entangled", "true_separable"],
                cols: ["pred_entangled", "pred_separable"],
            },
            matrix,
            total: matrix.iter().flatten().sum(),
        }
    }
}

#[derive(Serialize)]
struct RobustnessJson<'a> {
    base: &'a ExperimentReport,
    perturbed: &'a ExperimentReport,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: String,
    task: Option<&'a str>,
    seed: Option<u64>,
}

fn learning_curve_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("n_train,test_mse,sigma\n");
    for point in &report.learning_curve {
        let sigma = point.sigma.map(f17).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{}\n",
            point.n_train,
            f17(point.test_mse),
            sigma
        ));
    }
    out
}

fn scatter_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("true_value,predicted_value,split\n");
    for pair in &report.predictions {
        out.push_str(&format!(
            "{},{},{}\n",
            f17(pair.true_value),
            f17(pair.predicted),
            pair.split.label()
        ));
    }
    out
}

fn trace_csv(trace: &OptimizationTrace) -> String {
    let mut out = String::from("step,coordinate,theta_deg,phi_deg,loss\n");
    for (step, record) in trace.steps.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            step,
            record.coordinate,
            f17(record.angles_deg[0]),
            f17(record.angles_deg[1]),
            f17(record.loss)
        ));
    }
    out
}

fn landscape_csv(grid: &LandscapeGrid) -> String {
    let mut out = String::from("theta_deg,phi_deg,mse,mse_sigma\n");
    for cell in &grid.cells {
        let mse = cell.loss.map(f17).unwrap_or_default();
        let sigma = cell.uncertainty.map(f17).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            f17(cell.angle1_deg),
            f17(cell.angle2_deg),
            mse,
            sigma
        ));
    }
    out
}

/// Writes the plot-ready views of a report into `dir` and returns the
/// files, in emission order.
pub fn emit_plot_data(
    report: &ExperimentReport,
    format: PlotFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    match format {
        PlotFormat::Csv => {
            files.push(write_text(dir, "learning_curve.csv", &learning_curve_csv(report))?);
            files.push(write_text(dir, "scatter.csv", &scatter_csv(report))?);
        }
        PlotFormat::Json => {
            files.push(write_json(dir, "learning_curve.json", &report.learning_curve)?);
            files.push(write_json(dir, "scatter.json", &report.predictions)?);
        }
    }
    if let Some(matrix) = report.confusion {
        files.push(write_json(dir, "confusion.json", &ConfusionJson::new(matrix))?);
    }
    Ok(files)
}

/// Writes a structured failure record (`error.json`) so an aborted run
/// still leaves a machine-readable trace next to its manifest.
pub fn write_error_record(
    out_dir: &Path,
    error: &QelmError,
    config: Option<&RunConfig>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| QelmError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    write_json(
        out_dir,
        "error.json",
        &ErrorRecord {
            error: error.to_string(),
            task: config.map(|c| c.task.label()),
            seed: config.map(|c| c.seed),
        },
    )
}

fn observables_from(names: &[String]) -> Result<Vec<Observable>> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "sigma_x" => Ok(pauli_x()),
            "sigma_y" => Ok(pauli_y()),
            "sigma_z" => Ok(pauli_z()),
            other => Err(QelmError::invalid(
                "observables",
                format!("unknown observable `{other}`"),
            )),
        })
        .collect()
}

fn pauli_config(config: &RunConfig) -> Result<PauliExperimentConfig> {
    Ok(PauliExperimentConfig {
        walk: config.walk.clone(),
        settings: config.settings.expect("pauli config carries settings"),
        train: config.datasets.train.expect("pauli config carries a training set"),
        test: config.datasets.test.expect("pauli config carries a test set"),
        observables: observables_from(
            config.observables.as_deref().expect("pauli config carries observables"),
        )?,
        feature_mode: config.noise.feature_mode,
        intensity_noise: config.noise.intensity,
        test_shots: config.noise.test_shots,
        curve_sizes: config
            .curve
            .as_ref()
            .map(|c| c.sizes.clone())
            .unwrap_or_default(),
        noise_seed: config.noise.seed,
        monte_carlo: config.monte_carlo,
        svd_cutoff: DEFAULT_SVD_CUTOFF,
        ridge: None,
    })
}

fn witness_config(config: &RunConfig) -> Result<WitnessExperimentConfig> {
    Ok(WitnessExperimentConfig {
        walk1: config.walk.clone(),
        walk2: config.walk2.clone().expect("two-line config carries walk2"),
        settings1: config.settings.expect("two-line config carries settings"),
        settings2: config.settings2.expect("two-line config carries settings2"),
        train: config.datasets.train.expect("two-line config carries a training set"),
        test: config.datasets.test.expect("two-line config carries a test set"),
        witness: bell_witness(config.witness.expect("two-line config carries a witness")),
        feature_mode: config.noise.feature_mode,
        intensity_noise: config.noise.intensity,
        coincidence_shots: config.noise.coincidence_shots,
        noise_seed: config.noise.seed,
        svd_cutoff: DEFAULT_SVD_CUTOFF,
        ridge: None,
    })
}

/// Executes a materialized configuration and writes its artifact bundle
/// into `out_dir` (created if missing).
///
/// The manifest and configuration echo are written before any computation
/// starts; data files follow on completion.  Every artifact is a pure
/// function of the configuration, so rerunning produces byte-identical
/// files.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<ResultBundle> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| QelmError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let echo = config.to_toml()?;
    let manifest = Manifest {
        artifact_version: env!("CARGO_PKG_VERSION"),
        task: config.task.label(),
        seed: config.seed,
        config_toml: &echo,
    };
    let manifest_path = write_json(out_dir, "manifest.json", &manifest)?;
    let mut files = vec![manifest_path.clone()];
    files.push(write_text(out_dir, "config_echo.toml", &echo)?);

    match config.task {
        Task::Pauli => {
            let report = pauli_transfer_experiment(&pauli_config(config)?)?;
            files.push(write_json(out_dir, "report.json", &report)?);
            files.extend(emit_plot_data(&report, PlotFormat::Csv, out_dir)?);
        }
        Task::Witness => {
            let report = witness_transfer_experiment(&witness_config(config)?)?;
            files.push(write_json(out_dir, "report.json", &report)?);
            files.extend(emit_plot_data(&report, PlotFormat::Csv, out_dir)?);
        }
        Task::Resample => {
            let mc = config.monte_carlo.expect("resample config carries monte_carlo");
            let (report, summary) = witness_resample_uncertainty(&witness_config(config)?, &mc)?;
            files.push(write_json(out_dir, "report.json", &report)?);
            files.extend(emit_plot_data(&report, PlotFormat::Csv, out_dir)?);
            files.push(write_json(out_dir, "resample.json", &summary)?);
        }
        Task::Robustness => {
            let jitter = config.robustness.expect("robustness config carries jitter");
            let (base, perturbed) = robustness_rerun(&witness_config(config)?, &jitter)?;
            files.push(write_json(
                out_dir,
                "robustness.json",
                &RobustnessJson {
                    base: &base,
                    perturbed: &perturbed,
                },
            )?);
            files.push(write_text(out_dir, "scatter_base.csv", &scatter_csv(&base))?);
            files.push(write_text(
                out_dir,
                "scatter_perturbed.csv",
                &scatter_csv(&perturbed),
            )?);
        }
        Task::Optimize => {
            let optimizer = config.optimizer.as_ref().expect("optimize config carries optimizer");
            let observables = observables_from(
                config.observables.as_deref().expect("optimize config carries observables"),
            )?;
            let minibatch = config
                .datasets
                .minibatch
                .expect("optimize config carries a minibatch");
            let mut loss = single_line_fit_loss(
                &config.walk,
                &minibatch,
                &observables,
                config.noise.feature_mode,
                config.noise.intensity,
                optimizer.seed,
            )?;
            let initial = config
                .initial_angles_deg
                .as_deref()
                .expect("optimize config carries initial angles");
            let trace = coordinate_descent(&mut loss, initial, optimizer)?;
            files.push(write_json(out_dir, "trace.json", &trace)?);
            files.push(write_text(out_dir, "trace.csv", &trace_csv(&trace))?);
        }
        Task::Landscape => {
            let optimizer = config.optimizer.as_ref().expect("landscape config carries optimizer");
            let observables = observables_from(
                config.observables.as_deref().expect("landscape config carries observables"),
            )?;
            let minibatch = config
                .datasets
                .minibatch
                .expect("landscape config carries a minibatch");
            let spec = config.landscape.expect("landscape config carries a scan spec");
            let grid = landscape_scan(
                |seed| {
                    single_line_fit_loss(
                        &config.walk,
                        &minibatch,
                        &observables,
                        config.noise.feature_mode,
                        config.noise.intensity,
                        seed,
                    )
                },
                &spec,
                optimizer.seed,
            )?;
            files.push(write_json(out_dir, "landscape.json", &grid)?);
            files.push(write_text(out_dir, "landscape.csv", &landscape_csv(&grid))?);
        }
    }

    Ok(ResultBundle {
        out_dir: out_dir.to_path_buf(),
        manifest_path,
        files,
    })
}
