//! Command-line interface: fit models to CSV trajectories, simulate fitted
//! models, produce predictions and evaluate prediction metrics.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::process::ExitCode;

use switchid::data::{build_regressor, load_csv, save_csv, DatasetSplit, RegressorConfig};
use switchid::driver::{multistart_fit, FitOptions, ModelSpec};
use switchid::error::Error;
use switchid::families::FamilyKind;
use switchid::likelihood::{simulate, Regularizer, SwitchStructure};
use switchid::metrics::{r2_per_component, r2_score, rmse};
use switchid::modelfile::{
    hash_file, load_model, save_model, FitReportJson, MatrixJson, ModelFile, Provenance,
};
use switchid::predict::{
    estimate_initial_mode_distribution, open_loop_predict, recursive_one_step_predict,
    OpenLoopPrediction, PredictionConfig, PredictionMode,
};

#[derive(Parser)]
#[command(name = "switchid", about = "Switching dynamical system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV trajectory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional fit report (per-iteration objective, restarts).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generative rollout of a fitted model.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// CSV with u columns supplying exogenous inputs (required when the
        /// model uses input lags).
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Predictions over the tail of a trajectory, written as plot-ready CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: CliPredictionMode,
        #[arg(long)]
        out: PathBuf,
        /// Rows used to warm the filter / estimate the initial mode
        /// distribution; prediction covers the remaining rows.
        /// Defaults to three quarters of the data.
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        trim: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prediction metric printed as JSON on standard output.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: CliMetric,
        #[arg(long, value_enum, default_value = "recursive")]
        mode: CliPredictionMode,
        /// Precomputed prediction CSV (from `predict`); when absent the
        /// prediction is recomputed.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        trim: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a benchmark trajectory as CSV.
    Gen {
        #[arg(long, value_enum)]
        system: CliSystem,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CliPredictionMode {
    Recursive,
    OpenLoop,
}

impl From<CliPredictionMode> for PredictionMode {
    fn from(m: CliPredictionMode) -> Self {
        match m {
            CliPredictionMode::Recursive => PredictionMode::RecursiveOneStep,
            CliPredictionMode::OpenLoop => PredictionMode::OpenLoop,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMetric {
    R2,
    Rmse,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliSystem {
    ThreeMode,
    MarkovArx,
    Pwa,
}

/// Fit configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    structure: SwitchStructure,
    family: FamilyKind,
    d: usize,
    regressor: RegressorConfig,
    #[serde(default)]
    regularizer: Option<Regularizer>,
    /// Grid of regularizers to try; the best by validation NLL wins.
    #[serde(default)]
    regularizer_grid: Option<Vec<Regularizer>>,
    #[serde(default)]
    restarts: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    grad_stop: Option<f64>,
    #[serde(default)]
    rel_decrease_stop: Option<f64>,
    #[serde(default)]
    split: Option<SplitJson>,
    #[serde(default)]
    fixed_covariance: Option<MatrixJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitJson {
    train: [usize; 2],
    validation: [usize; 2],
    test: [usize; 2],
}

impl SplitJson {
    fn to_split(&self) -> DatasetSplit {
        DatasetSplit {
            train: self.train[0]..self.train[1],
            validation: self.validation[0]..self.validation[1],
            test: self.test[0]..self.test[1],
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> switchid::Result<()> {
    match cli.command {
        Command::Fit {
            data,
            config,
            out,
            report,
        } => cmd_fit(&data, &config, &out, report.as_deref()),
        Command::Simulate {
            model,
            horizon,
            seed,
            out,
            inputs,
        } => cmd_simulate(&model, horizon, seed, &out, inputs.as_deref()),
        Command::Predict {
            model,
            data,
            mode,
            out,
            warmup,
            samples,
            trim,
            seed,
        } => {
            let (pred, truth, start) =
                compute_prediction(&model, &data, mode, warmup, samples, trim, seed)?;
            write_prediction_csv(&out, &pred, &truth, start)
        }
        Command::Eval {
            model,
            data,
            metric,
            mode,
            pred,
            warmup,
            samples,
            trim,
            seed,
        } => cmd_eval(&model, &data, metric, mode, pred.as_deref(), warmup, samples, trim, seed),
        Command::Gen {
            system,
            horizon,
            seed,
            out,
        } => {
            let (traj, _) = match system {
                CliSystem::ThreeMode => switchid::data::gen_synthetic_3mode(horizon, seed)?,
                CliSystem::MarkovArx => switchid::data::gen_markov_arx(horizon, seed)?,
                CliSystem::Pwa => switchid::data::gen_pwa(horizon, seed)?,
            };
            save_csv(&traj, &out)
        }
    }
}

fn cmd_fit(
    data: &std::path::Path,
    config: &std::path::Path,
    out: &std::path::Path,
    report_path: Option<&std::path::Path>,
) -> switchid::Result<()> {
    let cfg_text = std::fs::read_to_string(config).map_err(|e| Error::Io {
        path: config.display().to_string(),
        source: e,
    })?;
    let cfg: FitConfig =
        serde_json::from_str(&cfg_text).map_err(|e| Error::Config(format!("fit config: {e}")))?;
    let traj = load_csv(data)?;
    let spec = ModelSpec {
        structure: cfg.structure,
        family: cfg.family,
        d: cfg.d,
        cfg: cfg.regressor,
    };
    let mut opts = FitOptions {
        seed: cfg.seed.unwrap_or(0),
        ..FitOptions::default()
    };
    if let Some(r) = cfg.restarts {
        opts.n_restarts = r;
    }
    if let Some(m) = cfg.max_iters {
        opts.max_iters = m;
    }
    if let Some(g) = cfg.grad_stop {
        opts.grad_stop = g;
    }
    if let Some(rd) = cfg.rel_decrease_stop {
        opts.rel_decrease_stop = rd;
    }
    if let Some(fixed) = &cfg.fixed_covariance {
        // the config carries a covariance; the driver holds its inverse fixed
        let sigma = fixed.to_matrix()?;
        let lambda = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotSpd {
                context: "fixed_covariance",
            })?
            .inverse();
        opts.fixed_lambda = Some(lambda);
    }
    let split = cfg.split.as_ref().map(|s| s.to_split());
    let grid: Vec<Regularizer> = match (&cfg.regularizer_grid, &cfg.regularizer) {
        (Some(grid), _) if !grid.is_empty() => grid.clone(),
        (_, Some(reg)) => vec![*reg],
        _ => vec![Regularizer::ZERO],
    };
    if grid.len() > 1 && split.is_none() {
        return Err(Error::Config(
            "regularizer_grid needs a split for validation selection".into(),
        ));
    }
    let mut best: Option<(switchid::driver::MultistartReport, Regularizer)> = None;
    for reg in &grid {
        let ms = multistart_fit(&spec, &traj, split.as_ref(), reg, &opts)?;
        if best
            .as_ref()
            .map(|(b, _)| ms.best_selection < b.best_selection)
            .unwrap_or(true)
        {
            best = Some((ms, *reg));
        }
    }
    let (ms, reg) = best.expect("non-empty grid");
    println!("iter  reg_nll");
    for (k, rec) in ms.best.iterations.iter().enumerate() {
        println!("{k:4}  {:.6}", rec.reg_nll);
    }
    println!(
        "stopped: {:?} after {} iterations (restart {} of {}, selection {:.6})",
        ms.best.stop,
        ms.best.iterations.len(),
        ms.best_index,
        ms.restarts.len(),
        ms.best_selection
    );
    let file = ModelFile::from_parts(
        &ms.best.model,
        &ms.best.alpha0,
        &reg,
        Provenance {
            seed: opts.seed,
            data_hash: hash_file(data)?,
        },
    );
    save_model(&file, out)?;
    if let Some(report_path) = report_path {
        let report = FitReportJson::from_report(&ms);
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        std::fs::write(report_path, json).map_err(|e| Error::Io {
            path: report_path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_simulate(
    model_path: &std::path::Path,
    horizon: usize,
    seed: u64,
    out: &std::path::Path,
    inputs: Option<&std::path::Path>,
) -> switchid::Result<()> {
    let (model, alpha0, _) = load_model(model_path)?.to_parts()?;
    let u = match inputs {
        Some(path) => {
            let t = load_csv(path)?;
            Some(t.u.unwrap_or(t.y))
        }
        None => None,
    };
    let z0 = DVector::zeros(model.n_z());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let (traj, _) = simulate(&model, &z0, u.as_ref(), horizon, &alpha0, &mut rng)?;
    save_csv(&traj, out)
}

#[allow(clippy::too_many_arguments)]
fn compute_prediction(
    model_path: &std::path::Path,
    data_path: &std::path::Path,
    mode: CliPredictionMode,
    warmup: Option<usize>,
    samples: Option<usize>,
    trim: Option<f64>,
    seed: u64,
) -> switchid::Result<(PredictionOutput, DMatrix<f64>, usize)> {
    let (model, alpha0, _) = load_model(model_path)?.to_parts()?;
    let traj = load_csv(data_path)?;
    let rows = traj.y.nrows();
    let warmup = warmup.unwrap_or(rows * 3 / 4);
    if warmup < 1 || warmup >= rows {
        return Err(Error::InvalidArgument(format!(
            "warmup must be in [1, {rows}), got {warmup}"
        )));
    }
    let mut cfg = match mode {
        CliPredictionMode::Recursive => PredictionConfig::recursive(seed),
        CliPredictionMode::OpenLoop => PredictionConfig::open_loop(seed),
    };
    if let Some(s) = samples {
        cfg.n_samples = s;
    }
    if let Some(tr) = trim {
        cfg.trim_fraction = tr;
    }
    let truth = traj.y.rows(warmup, rows - warmup).into_owned();
    match mode {
        CliPredictionMode::Recursive => {
            let pred = recursive_one_step_predict(&model, &alpha0, &traj, warmup..rows, &cfg)?;
            Ok((PredictionOutput::Point(pred), truth, warmup))
        }
        CliPredictionMode::OpenLoop => {
            let warm = traj.slice(0..warmup, &model.cfg)?;
            let mode_dist = estimate_initial_mode_distribution(&model, &warm, &alpha0)?;
            let z_start = build_regressor(&traj, &model.cfg, warmup - 1)?;
            let horizon = rows - warmup;
            let u_future = traj
                .u
                .as_ref()
                .map(|u| u.rows(warmup - 1, horizon + 1).into_owned());
            let pred = open_loop_predict(
                &model,
                &mode_dist,
                &z_start,
                u_future.as_ref(),
                horizon,
                &cfg,
            )?;
            Ok((PredictionOutput::Bands(pred), truth, warmup))
        }
    }
}

enum PredictionOutput {
    Point(DMatrix<f64>),
    Bands(OpenLoopPrediction),
}

impl PredictionOutput {
    fn mean(&self) -> &DMatrix<f64> {
        match self {
            PredictionOutput::Point(m) => m,
            PredictionOutput::Bands(b) => &b.mean,
        }
    }
}

fn write_prediction_csv(
    out: &std::path::Path,
    pred: &PredictionOutput,
    truth: &DMatrix<f64>,
    start: usize,
) -> switchid::Result<()> {
    use std::io::Write;
    let n_y = truth.ncols();
    let mut file = std::fs::File::create(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_y).map(|c| format!("y{c}")));
    header.extend((1..=n_y).map(|c| format!("yhat{c}")));
    if matches!(pred, PredictionOutput::Bands(_)) {
        header.extend((1..=n_y).map(|c| format!("q25_{c}")));
        header.extend((1..=n_y).map(|c| format!("q75_{c}")));
    }
    let write_line = |file: &mut std::fs::File, line: String| {
        writeln!(file, "{line}").map_err(|e| Error::Io {
            path: out.display().to_string(),
            source: e,
        })
    };
    write_line(&mut file, header.join(","))?;
    let mean = pred.mean();
    for t in 0..truth.nrows() {
        let mut cells = vec![format!("{}", start + t)];
        cells.extend(truth.row(t).iter().map(|v| format!("{v}")));
        cells.extend(mean.row(t).iter().map(|v| format!("{v}")));
        if let PredictionOutput::Bands(b) = pred {
            cells.extend(b.q25.row(t).iter().map(|v| format!("{v}")));
            cells.extend(b.q75.row(t).iter().map(|v| format!("{v}")));
        }
        write_line(&mut file, cells.join(","))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    model_path: &std::path::Path,
    data_path: &std::path::Path,
    metric: CliMetric,
    mode: CliPredictionMode,
    pred_path: Option<&std::path::Path>,
    warmup: Option<usize>,
    samples: Option<usize>,
    trim: Option<f64>,
    seed: u64,
) -> switchid::Result<()> {
    let (truth, mean) = match pred_path {
        Some(pred_path) => read_prediction_csv(pred_path)?,
        None => {
            let (pred, truth, _) =
                compute_prediction(model_path, data_path, mode, warmup, samples, trim, seed)?;
            (truth, pred.mean().clone())
        }
    };
    let (name, value) = match metric {
        CliMetric::R2 => ("r2", r2_score(&truth, &mean)?),
        CliMetric::Rmse => ("rmse", rmse(&truth, &mean)?),
    };
    let per_component = match metric {
        CliMetric::R2 => r2_per_component(&truth, &mean)?,
        CliMetric::Rmse => (0..truth.ncols())
            .map(|c| {
                rmse(
                    &DMatrix::from_column_slice(truth.nrows(), 1, truth.column(c).as_slice()),
                    &DMatrix::from_column_slice(mean.nrows(), 1, mean.column(c).as_slice()),
                )
            })
            .collect::<switchid::Result<Vec<_>>>()?,
    };
    let out = serde_json::json!({
        "metric": name,
        "value": value,
        "per_component": per_component,
    });
    println!("{out}");
    Ok(())
}

/// Read truth/prediction pairs back from a `predict` output file.
fn read_prediction_csv(path: &std::path::Path) -> switchid::Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let y_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('y') && !h.starts_with("yhat"))
        .map(|(i, _)| i)
        .collect();
    let yhat_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("yhat"))
        .map(|(i, _)| i)
        .collect();
    if y_cols.is_empty() || y_cols.len() != yhat_cols.len() {
        return Err(Error::Csv {
            path: path.display().to_string(),
            line: 1,
            message: "prediction file needs matching y*/yhat* columns".into(),
        });
    }
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line: rows + 2,
            message: e.to_string(),
        })?;
        for &c in &y_cols {
            truth.push(parse_pred_cell(&record, c, path, rows + 2)?);
        }
        for &c in &yhat_cols {
            pred.push(parse_pred_cell(&record, c, path, rows + 2)?);
        }
        rows += 1;
    }
    Ok((
        DMatrix::from_row_slice(rows, y_cols.len(), &truth),
        DMatrix::from_row_slice(rows, yhat_cols.len(), &pred),
    ))
}

fn parse_pred_cell(
    record: &csv::StringRecord,
    col: usize,
    path: &std::path::Path,
    line: usize,
) -> switchid::Result<f64> {
    record
        .get(col)
        .ok_or_else(|| Error::Csv {
            path: path.display().to_string(),
            line,
            message: format!("missing column {col}"),
        })?
        .parse::<f64>()
        .map_err(|_| Error::Csv {
            path: path.display().to_string(),
            line,
            message: "non-numeric cell".into(),
        })
}
