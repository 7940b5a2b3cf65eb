//! Outer fitting loop: alternate the smoothing pass, surrogate construction
//! and the parallel convex subproblem solves, with monotone-descent
//! checking, gradient/relative-decrease stopping and multi-start.
//!
//! The initial-mode distribution is refreshed each iteration with the
//! smoothed marginal at time zero, which minimizes the cross-entropy block
//! of the surrogate; the tracked objective is the regularized NLL evaluated
//! with the iteration's own initial-mode vector, and it must never increase
//! beyond the slack — a violation is a correctness bug, not a warning.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::data::{DatasetSplit, RegressorConfig, Trajectory};
use crate::error::{Error, Result};
use crate::families::{EmissionParams, FamilyKind};
use crate::likelihood::{nll, ModelParams, Regularizer, SwitchStructure};
use crate::mstep::{
    build_weights, prepare_step_data, solve_gaussian_step, solve_generic_smooth_step,
    solve_laplace_step, solve_student_t_step, solve_switch_step, surrogate_gradient_at_base,
    SolverOptions, SurrogateWeights,
};
use crate::posterior::{forward_backward, posterior_state_dependent, Posteriors};

/// Model skeleton fixing everything but the parameter values.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub structure: SwitchStructure,
    pub family: FamilyKind,
    pub d: usize,
    pub cfg: RegressorConfig,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop once the gradient norm of the regularized NLL drops below this.
    pub grad_stop: f64,
    /// Relative-decrease stop; `0.0` disables it.
    pub rel_decrease_stop: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub monotonicity_slack: f64,
    pub solver: SolverOptions,
    /// Hold the precision matrix fixed at this value (Gaussian/Student-t
    /// only); the emission step then updates only `B`.
    pub fixed_lambda: Option<DMatrix<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 500,
            grad_stop: 1e-4,
            rel_decrease_stop: 1e-10,
            n_restarts: 5,
            seed: 0,
            monotonicity_slack: 1e-8,
            solver: SolverOptions::default(),
            fixed_lambda: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Gradient,
    RelativeDecrease,
    MaxIters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub reg_nll: f64,
    pub grad_norm: Option<f64>,
    pub e_step_secs: f64,
    pub m_step_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub iterations: Vec<IterRecord>,
    pub stop: StopReason,
    pub model: ModelParams,
    pub alpha0: DVector<f64>,
    pub final_reg_nll: f64,
    /// True if any inner solve hit its cap before reaching its tolerance.
    pub any_inexact: bool,
}

/// Moment-based initialization: a global least-squares fit perturbed per
/// mode, pooled-residual precision, small random switching logits, and a
/// random simplex point for the initial-mode distribution.
pub fn initialize(
    spec: &ModelSpec,
    traj: &Trajectory,
    seed: u64,
) -> Result<(ModelParams, DVector<f64>)> {
    spec.cfg.validate()?;
    spec.family.validate()?;
    if spec.d < 1 {
        return Err(Error::InvalidArgument("mode count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_y = traj.n_y();
    let n_u = traj.n_u();
    let n_z = spec.cfg.n_z(n_y, n_u);
    let skeleton = ModelParams {
        structure: spec.structure,
        theta: Vec::new(),
        family: spec.family,
        betas: Vec::new(),
        cfg: spec.cfg,
        n_y,
        n_u,
    };
    let data = prepare_step_data(&skeleton, traj)?;
    let t_len = data.zs.len();

    // Global regularized least squares of y_{t+1} on z_t.
    let mut s_zz = DMatrix::identity(n_z, n_z) * 1e-8;
    let mut s_yz = DMatrix::zeros(n_y, n_z);
    for t in 0..t_len {
        s_zz.ger(1.0, &data.zs[t], &data.zs[t], 1.0);
        s_yz.ger(1.0, &data.ys[t], &data.zs[t], 1.0);
    }
    let l_glob = match s_zz.clone().cholesky() {
        Some(chol) => chol.solve(&s_yz.transpose()).transpose(),
        None => DMatrix::zeros(n_y, n_z),
    };
    let mut resid_cov = DMatrix::zeros(n_y, n_y);
    for t in 0..t_len {
        let r = &data.ys[t] - &l_glob * &data.zs[t];
        resid_cov.ger(1.0 / t_len as f64, &r, &r, 1.0);
    }
    let jitter_scale = 0.1 * (1.0 + l_glob.norm() / (l_glob.len() as f64).sqrt());

    let mut betas = Vec::with_capacity(spec.d);
    for _ in 0..spec.d {
        let mut l_mode = l_glob.clone();
        if spec.d > 1 {
            for v in l_mode.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += jitter_scale * n;
            }
        }
        let beta = match spec.family {
            FamilyKind::Gaussian | FamilyKind::StudentT { .. } => {
                let mut cov = resid_cov.clone() + DMatrix::identity(n_y, n_y) * 1e-9;
                crate::families::symmetrize(&mut cov);
                // degenerate (zero-variance) data falls back to an inflated identity
                let lambda = match cov.clone().cholesky() {
                    Some(chol) => {
                        let mut lam = chol.inverse();
                        crate::families::symmetrize(&mut lam);
                        lam
                    }
                    None => DMatrix::identity(n_y, n_y) * 1e3,
                };
                let b = &lambda * &l_mode;
                if matches!(spec.family, FamilyKind::Gaussian) {
                    EmissionParams::Gaussian { b, lambda }
                } else {
                    EmissionParams::StudentT { b, lambda }
                }
            }
            FamilyKind::Laplace => {
                let r = DVector::from_fn(n_y, |i, _| {
                    1.0 / resid_cov[(i, i)].sqrt().max(1e-6)
                });
                let mut m = l_mode.clone();
                for i in 0..n_y {
                    let row = m.row(i) * r[i];
                    m.set_row(i, &row);
                }
                EmissionParams::Laplace { m, r }
            }
            FamilyKind::Logistic | FamilyKind::Gumbel => {
                if n_y != 1 {
                    return Err(Error::InvalidArgument(
                        "scalar families require a one-dimensional observation".into(),
                    ));
                }
                let lambda = 1.0 / resid_cov[(0, 0)].sqrt().max(1e-6);
                let b = DVector::from_fn(n_z, |l, _| lambda * l_mode[(0, l)]);
                if matches!(spec.family, FamilyKind::Logistic) {
                    EmissionParams::Logistic { b, lambda }
                } else {
                    EmissionParams::Gumbel { b, lambda }
                }
            }
            FamilyKind::Categorical { n_classes } => EmissionParams::Categorical {
                theta: DMatrix::from_fn(n_z, n_classes, |_, _| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    0.1 * n
                }),
            },
        };
        betas.push(beta);
    }
    let theta = (0..spec.structure.slice_count(spec.d))
        .map(|_| {
            DMatrix::from_fn(spec.structure.input_dim(n_z), spec.d - 1, |_, _| {
                let n: f64 = StandardNormal.sample(&mut rng);
                0.1 * n
            })
        })
        .collect();
    let model = ModelParams {
        structure: spec.structure,
        theta,
        family: spec.family,
        betas,
        cfg: spec.cfg,
        n_y,
        n_u,
    };
    model.validate()?;
    // random simplex point via normalized exponentials
    let mut alpha0 = DVector::from_fn(spec.d, |_, _| -rng.random_range(0.0f64..1.0).ln());
    alpha0 /= alpha0.sum();
    Ok((model, alpha0))
}

fn smooth(model: &ModelParams, traj: &Trajectory, alpha0: &DVector<f64>) -> Result<Posteriors> {
    if model.structure.depends_on_mode() {
        forward_backward(model, traj, alpha0)
    } else {
        posterior_state_dependent(model, traj, alpha0)
    }
}

fn emission_updates(
    model: &ModelParams,
    weights: &SurrogateWeights,
    data: &crate::mstep::StepData,
    reg: &Regularizer,
    opts: &FitOptions,
) -> Result<(Vec<EmissionParams>, bool)> {
    if opts.fixed_lambda.is_some()
        && !matches!(
            model.family,
            FamilyKind::Gaussian | FamilyKind::StudentT { .. }
        )
    {
        return Err(Error::InvalidArgument(
            "fixed covariance mode requires a Gaussian-type family".into(),
        ));
    }
    let results: Vec<Result<(EmissionParams, bool)>> = (0..model.d())
        .into_par_iter()
        .map(|j| match &model.betas[j] {
            EmissionParams::Gaussian { .. } => {
                let (b, lambda) = solve_gaussian_step(
                    weights,
                    data,
                    reg.gamma2,
                    reg.gamma3,
                    j,
                    opts.fixed_lambda.as_ref(),
                )?;
                Ok((EmissionParams::Gaussian { b, lambda }, false))
            }
            EmissionParams::StudentT { .. } => {
                let (b, lambda) = solve_student_t_step(
                    weights,
                    data,
                    reg.gamma2,
                    reg.gamma3,
                    j,
                    opts.fixed_lambda.as_ref(),
                )?;
                Ok((EmissionParams::StudentT { b, lambda }, false))
            }
            EmissionParams::Laplace { m, r } => {
                let (m, r, info) = solve_laplace_step(
                    weights,
                    data,
                    reg.gamma2,
                    reg.gamma3,
                    j,
                    &opts.solver,
                    (m, r),
                )?;
                Ok((EmissionParams::Laplace { m, r }, info.inexact))
            }
            beta => {
                let (beta, info) = solve_generic_smooth_step(
                    &model.family,
                    weights,
                    data,
                    reg,
                    j,
                    &opts.solver,
                    beta,
                )?;
                Ok((beta, info.inexact))
            }
        })
        .collect();
    let mut betas = Vec::with_capacity(model.d());
    let mut inexact = false;
    for r in results {
        let (beta, ix) = r?;
        inexact |= ix;
        betas.push(beta);
    }
    Ok((betas, inexact))
}

/// One full fit from the given starting point.
pub fn fit(
    model0: &ModelParams,
    alpha0: &DVector<f64>,
    traj: &Trajectory,
    reg: &Regularizer,
    opts: &FitOptions,
) -> Result<FitReport> {
    model0.validate()?;
    reg.validate()?;
    let mut model = model0.clone();
    let mut alpha = alpha0.clone();
    let mut iterations: Vec<IterRecord> = Vec::new();
    let mut any_inexact = false;
    let data = prepare_step_data(&model, traj)?;
    let switch_inputs: Vec<DVector<f64>> =
        data.zs.iter().map(|z| model.switch_input(z)).collect();
    let gradient_available = !matches!(model.family, FamilyKind::Laplace);
    let mut stop = StopReason::MaxIters;
    for _ in 0..opts.max_iters {
        let e_start = Instant::now();
        let post = smooth(&model, traj, &alpha)?;
        let weights = build_weights(&model, &post, traj)?;
        let e_secs = e_start.elapsed().as_secs_f64();
        let reg_nll_here = -post.loglik + reg.value(&model);
        if !reg_nll_here.is_finite() {
            return Err(Error::NonFinite {
                context: "regularized NLL",
                t: iterations.len(),
            });
        }
        if let Some(prev) = iterations.last() {
            if reg_nll_here > prev.reg_nll + opts.monotonicity_slack {
                return Err(Error::MonotonicityViolation {
                    iter: iterations.len(),
                    previous: prev.reg_nll,
                    current: reg_nll_here,
                });
            }
        }
        let grad_norm = if gradient_available {
            let mut grad = surrogate_gradient_at_base(&model, &weights, traj, reg)?;
            // with a held precision matrix those coordinates are not decision
            // variables; exclude them from the stationarity measure
            if opts.fixed_lambda.is_some() {
                let n_y = model.emission_n_y();
                let n_b = n_y * model.n_z();
                for g in &mut grad.betas {
                    for k in n_b..g.len() {
                        g[k] = 0.0;
                    }
                }
            }
            Some(grad.norm())
        } else {
            None
        };
        iterations.push(IterRecord {
            reg_nll: reg_nll_here,
            grad_norm,
            e_step_secs: e_secs,
            m_step_secs: 0.0,
        });
        if let Some(g) = grad_norm {
            if g <= opts.grad_stop {
                stop = StopReason::Gradient;
                break;
            }
        }
        if opts.rel_decrease_stop > 0.0 && iterations.len() >= 2 {
            let prev = iterations[iterations.len() - 2].reg_nll;
            let rel = (prev - reg_nll_here).abs() / reg_nll_here.abs().max(1.0);
            if rel < opts.rel_decrease_stop {
                stop = StopReason::RelativeDecrease;
                break;
            }
        }
        // refresh the initial-mode distribution with the smoothed marginal
        alpha = weights.pi0.clone();
        alpha /= alpha.sum();
        let m_start = Instant::now();
        let (theta, sw_info) = solve_switch_step(
            model.structure,
            &weights,
            &switch_inputs,
            reg.gamma1,
            &opts.solver,
            &model.theta,
        )?;
        let (betas, em_inexact) = emission_updates(&model, &weights, &data, reg, opts)?;
        any_inexact |= sw_info.inexact | em_inexact;
        model.theta = theta;
        model.betas = betas;
        if let Some(rec) = iterations.last_mut() {
            rec.m_step_secs = m_start.elapsed().as_secs_f64();
        }
    }
    let final_reg_nll = iterations
        .last()
        .map(|r| r.reg_nll)
        .unwrap_or(f64::INFINITY);
    Ok(FitReport {
        iterations,
        stop,
        model,
        alpha0: alpha,
        final_reg_nll,
        any_inexact,
    })
}

#[derive(Debug, Clone)]
pub struct RestartSummary {
    pub seed: u64,
    /// Value used for restart selection (validation or training reg-NLL).
    pub selection: Option<f64>,
    pub final_reg_nll: Option<f64>,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub error: Option<String>,
    pub report: Option<FitReport>,
}

#[derive(Debug, Clone)]
pub struct MultistartReport {
    pub best: FitReport,
    pub best_index: usize,
    pub best_selection: f64,
    pub restarts: Vec<RestartSummary>,
}

/// Run independent restarts (concurrently) and select the best.
///
/// With a split, fits run on the training range and selection uses the
/// conditional validation NLL (the NLL of the validation range given a
/// filter warmed over the training range) plus the regularizer value;
/// otherwise selection uses the training regularized NLL.
pub fn multistart_fit(
    spec: &ModelSpec,
    traj: &Trajectory,
    split: Option<&DatasetSplit>,
    reg: &Regularizer,
    opts: &FitOptions,
) -> Result<MultistartReport> {
    if let Some(split) = split {
        split.validate(traj.y.nrows())?;
    }
    let train = match split {
        Some(split) => traj.slice(split.train.clone(), &spec.cfg)?,
        None => traj.clone(),
    };
    let train_val = match split {
        Some(split) => Some(traj.slice(split.train.start..split.validation.end, &spec.cfg)?),
        None => None,
    };
    let outcomes: Vec<RestartSummary> = (0..opts.n_restarts as u64)
        .into_par_iter()
        .map(|r| {
            let seed = opts.seed.wrapping_add(r);
            let run = || -> Result<(FitReport, f64)> {
                let (model0, alpha0) = initialize(spec, &train, seed)?;
                let report = fit(&model0, &alpha0, &train, reg, opts)?;
                let selection = match &train_val {
                    Some(tv) => {
                        let full = nll(&report.model, tv, &report.alpha0)?;
                        let train_part = nll(&report.model, &train, &report.alpha0)?;
                        full - train_part + reg.value(&report.model)
                    }
                    None => report.final_reg_nll,
                };
                Ok((report, selection))
            };
            match run() {
                Ok((report, selection)) => RestartSummary {
                    seed,
                    selection: Some(selection),
                    final_reg_nll: Some(report.final_reg_nll),
                    iterations: report.iterations.len(),
                    stop: Some(report.stop),
                    error: None,
                    report: Some(report),
                },
                Err(e) => RestartSummary {
                    seed,
                    selection: None,
                    final_reg_nll: None,
                    iterations: 0,
                    stop: None,
                    error: Some(e.to_string()),
                    report: None,
                },
            }
        })
        .collect();
    let best_index = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.selection.map(|s| (i, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    match best_index {
        Some(i) => Ok(MultistartReport {
            best: outcomes[i].report.clone().unwrap(),
            best_index: i,
            best_selection: outcomes[i].selection.unwrap(),
            restarts: outcomes,
        }),
        None => Err(Error::AllRestartsFailed {
            n: opts.n_restarts,
            first: outcomes
                .first()
                .and_then(|o| o.error.clone())
                .unwrap_or_else(|| "no restarts ran".into()),
        }),
    }
}
