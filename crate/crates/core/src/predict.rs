//! Prediction procedures for fitted models.
//!
//! Recursive one-step prediction runs the forward filter over the true
//! history: at each step it samples next-step outcomes from the one-step
//! predictive mode distribution, reports their mean, and then absorbs the
//! true observation. Open-loop prediction rolls out independent sample
//! trajectories with no data feedback and aggregates them with a per-time
//! trimmed mean plus interquartile bands.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::data::{build_regressor, Trajectory};
use crate::error::{Error, Result};
use crate::families::{log_sum_exp, sample_emission};
use crate::likelihood::{check_simplex, compute_log_steps, sample_categorical, simulate, ModelParams};
use crate::metrics::trimmed_mean;
use crate::posterior::forward_backward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    RecursiveOneStep,
    OpenLoop,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub mode: PredictionMode,
    pub n_samples: usize,
    pub trim_fraction: f64,
    pub seed: u64,
}

impl PredictionConfig {
    pub fn recursive(seed: u64) -> Self {
        PredictionConfig {
            mode: PredictionMode::RecursiveOneStep,
            n_samples: 20,
            trim_fraction: 0.01,
            seed,
        }
    }

    pub fn open_loop(seed: u64) -> Self {
        PredictionConfig {
            mode: PredictionMode::OpenLoop,
            n_samples: 500,
            trim_fraction: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(Error::InvalidArgument(format!(
                "trim fraction must be in [0, 0.5), got {}",
                self.trim_fraction
            )));
        }
        Ok(())
    }
}

/// Recursive one-step-ahead prediction over `range` (each predicted index
/// `t` uses the filter warmed on everything before `t`), reported as the
/// sample mean of `n_samples` mode-then-emission draws.
pub fn recursive_one_step_predict(
    model: &ModelParams,
    alpha0: &DVector<f64>,
    traj: &Trajectory,
    range: Range<usize>,
    cfg: &PredictionConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let d = model.d();
    check_simplex(alpha0, d)?;
    let t_len = traj.transitions();
    if range.start < 1 || range.end > t_len + 1 || range.start >= range.end {
        return Err(Error::InvalidArgument(format!(
            "prediction range {range:?} out of bounds (need 1 <= start < end <= {})",
            t_len + 1
        )));
    }
    let steps = compute_log_steps(model, traj, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log_alpha: Vec<f64> =
        alpha0.iter().map(|&a| a.max(f64::MIN_POSITIVE).ln()).collect();
    let n_y = model.n_y;
    let mut pred = DMatrix::zeros(range.len(), n_y);
    let mut scratch = vec![0.0; d];
    for t in 1..=range.end - 1 {
        let lp = &steps.log_trans[t - 1];
        let le = &steps.log_emit[t - 1];
        // one-step predictive distribution of the mode at t
        let mut q = DVector::zeros(d);
        for j in 0..d {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = log_alpha[i] + lp[(i, j)];
            }
            q[j] = log_sum_exp(&scratch).exp();
        }
        if t >= range.start {
            let z = build_regressor(traj, &model.cfg, t - 1)?;
            let mut mean = DVector::zeros(n_y);
            for _ in 0..cfg.n_samples {
                let mode = sample_categorical(&q, &mut rng);
                let y = sample_emission(&model.family, &model.betas[mode], &z, &mut rng)?;
                for c in 0..n_y.min(y.len()) {
                    mean[c] += y[c];
                }
            }
            mean /= cfg.n_samples as f64;
            for c in 0..n_y {
                pred[(t - range.start, c)] = mean[c];
            }
        }
        // absorb the true observation
        let mut row = vec![0.0; d];
        for j in 0..d {
            row[j] = q[j].max(f64::MIN_POSITIVE).ln() + le[j];
        }
        let norm = log_sum_exp(&row);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "prediction filter",
                t,
            });
        }
        for j in 0..d {
            log_alpha[j] = row[j] - norm;
        }
    }
    Ok(pred)
}

/// Open-loop prediction output: per-time trimmed mean and quartile bands.
#[derive(Debug, Clone)]
pub struct OpenLoopPrediction {
    pub mean: DMatrix<f64>,
    pub q25: DMatrix<f64>,
    pub q75: DMatrix<f64>,
}

/// Roll out `n_samples` independent trajectories from the window `z_start`
/// with initial-mode distribution `alpha_est`, using the supplied control
/// inputs (rows aligned with the rollout, row 0 at the window time), and
/// aggregate per time step.
pub fn open_loop_predict(
    model: &ModelParams,
    alpha_est: &DVector<f64>,
    z_start: &DVector<f64>,
    u_future: Option<&DMatrix<f64>>,
    horizon: usize,
    cfg: &PredictionConfig,
) -> Result<OpenLoopPrediction> {
    cfg.validate()?;
    check_simplex(alpha_est, model.d())?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    if model.cfg.t_u > 0 && u_future.is_none() {
        return Err(Error::InvalidArgument(
            "model uses exogenous inputs; supply them for the horizon".into(),
        ));
    }
    let n_y = model.n_y;
    let samples: Vec<Result<DMatrix<f64>>> = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s));
            let (traj, _) = simulate(model, z_start, u_future, horizon, alpha_est, &mut rng)?;
            Ok(traj.y.rows(1, horizon).into_owned())
        })
        .collect();
    let mut rollouts = Vec::with_capacity(cfg.n_samples);
    for s in samples {
        rollouts.push(s?);
    }
    let mut mean = DMatrix::zeros(horizon, n_y);
    let mut q25 = DMatrix::zeros(horizon, n_y);
    let mut q75 = DMatrix::zeros(horizon, n_y);
    let mut values = vec![0.0; rollouts.len()];
    for t in 0..horizon {
        for c in 0..n_y {
            for (s, roll) in rollouts.iter().enumerate() {
                values[s] = roll[(t, c)];
            }
            mean[(t, c)] = trimmed_mean(&values, cfg.trim_fraction)?;
            values.sort_by(|a, b| a.total_cmp(b));
            q25[(t, c)] = quantile_sorted(&values, 0.25);
            q75[(t, c)] = quantile_sorted(&values, 0.75);
        }
    }
    Ok(OpenLoopPrediction { mean, q25, q75 })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Initial mode distribution for open-loop prediction: smooth the warm-up
/// range and take the final smoothed marginal.
pub fn estimate_initial_mode_distribution(
    model: &ModelParams,
    warmup: &Trajectory,
    alpha0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let post = forward_backward(model, warmup, alpha0)?;
    Ok(post.gamma.row(post.gamma.nrows() - 1).transpose())
}
