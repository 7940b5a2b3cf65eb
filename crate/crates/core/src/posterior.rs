//! Smoothed mode posteriors (the E-step).
//!
//! `forward_backward` computes the smoothed marginals `gamma[t][i] =
//! p(mode i at t | all data)` and pairwise marginals `xi[t][(i, j)] =
//! p(mode i at t, mode j at t+1 | all data)` with a modified
//! forward-backward recursion: the forward filter is normalized per step
//! (the normalizers accumulate the log-likelihood) and the backward
//! likelihood runs in the log domain, where each backward step folds in the
//! emission of its own time index. The pairwise marginal combines filter,
//! transition and backward terms and normalizes per step, so any per-step
//! rescaling of the backward pass cancels.
//!
//! For switching structures that ignore the previous mode the posterior
//! factorizes across time; `posterior_state_dependent` exploits this with an
//! `O(dT)` parallel pass. A brute-force enumeration oracle is provided for
//! testing.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::families::log_sum_exp;
use crate::likelihood::{
    check_simplex, compute_log_steps, enumeration_size, for_each_mode_sequence,
    log_joint_fixed_modes, ModelParams,
};

/// Smoothed marginals plus the data log-likelihood byproduct.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// `(T+1) x d`; row `t` is the smoothed distribution of the mode at `t`.
    pub gamma: DMatrix<f64>,
    /// `T` matrices `d x d`; `xi[t][(i, j)]` pairs modes at `t` and `t+1`.
    pub xi: Vec<DMatrix<f64>>,
    /// Log-likelihood of the data (`-nll`), from the forward normalizers.
    pub loglik: f64,
}

impl Posteriors {
    /// Simplex and marginalization-consistency checks (tolerances 1e-10 on
    /// sums, 1e-9 on gamma/xi coupling).
    pub fn validate(&self) -> Result<()> {
        let d = self.gamma.ncols();
        for t in 0..self.gamma.nrows() {
            let s: f64 = self.gamma.row(t).iter().sum();
            if (s - 1.0).abs() > 1e-10 || self.gamma.row(t).iter().any(|&v| v < 0.0) {
                return Err(Error::Numeric(format!(
                    "gamma row {t} is not a distribution (sum {s})"
                )));
            }
        }
        for (t, xi) in self.xi.iter().enumerate() {
            let s: f64 = xi.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Numeric(format!("xi slice {t} sums to {s}")));
            }
            for i in 0..d {
                let row: f64 = xi.row(i).iter().sum();
                if (row - self.gamma[(t, i)]).abs() > 1e-9 {
                    return Err(Error::Numeric(format!(
                        "xi row marginal mismatch at t={t}, i={i}"
                    )));
                }
            }
            for j in 0..d {
                let col: f64 = xi.column(j).iter().sum();
                if (col - self.gamma[(t + 1, j)]).abs() > 1e-9 {
                    return Err(Error::Numeric(format!(
                        "xi column marginal mismatch at t={t}, j={j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Full forward-backward smoothing pass.
pub fn forward_backward(
    model: &ModelParams,
    traj: &Trajectory,
    alpha0: &DVector<f64>,
) -> Result<Posteriors> {
    let d = model.d();
    check_simplex(alpha0, d)?;
    let t_len = traj.transitions();
    let steps = compute_log_steps(model, traj, true)?;

    // Forward filter in log domain, normalized per step.
    let mut log_alpha = DMatrix::zeros(t_len + 1, d);
    for i in 0..d {
        log_alpha[(0, i)] = alpha0[i].max(f64::MIN_POSITIVE).ln();
    }
    let mut loglik = 0.0;
    let mut scratch = vec![0.0; d];
    for t in 1..=t_len {
        let lp = &steps.log_trans[t - 1];
        let le = &steps.log_emit[t - 1];
        let mut row = vec![0.0; d];
        for (j, r) in row.iter_mut().enumerate() {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = log_alpha[(t - 1, i)] + lp[(i, j)];
            }
            *r = log_sum_exp(&scratch) + le[j];
        }
        let norm = log_sum_exp(&row);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "forward filter",
                t,
            });
        }
        loglik += norm;
        for j in 0..d {
            log_alpha[(t, j)] = row[j] - norm;
        }
    }

    // Backward likelihood in log domain; `log_zeta[t]` is over the mode at
    // t+1, with the boundary slice at t = T identically one. Each step folds
    // in the emission at its own index, following the recursion literally
    // (the transition at t = T marginalizes to one).
    let mut log_zeta = DMatrix::zeros(t_len + 1, d);
    for t in (1..=t_len).rev() {
        let lp = &steps.log_trans[t];
        let le = &steps.log_emit[t - 1];
        for i in 0..d {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = log_zeta[(t, j)] + lp[(i, j)];
            }
            let v = le[i] + log_sum_exp(&scratch);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "backward recursion",
                    t,
                });
            }
            log_zeta[(t - 1, i)] = v;
        }
    }

    // Pairwise marginals from the filter/transition/backward ratio,
    // normalized per step over (i, j).
    let mut gamma = DMatrix::zeros(t_len + 1, d);
    let mut xi = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let lp = &steps.log_trans[t];
        let mut log_rho = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                log_rho[(i, j)] = log_alpha[(t, i)] + lp[(i, j)] + log_zeta[(t, j)];
            }
        }
        let norm = log_sum_exp(log_rho.as_slice());
        let mut slice = log_rho.map(|v| (v - norm).exp());
        // v - norm cancels catastrophically when the log magnitudes are
        // huge (degenerate far-off modes); one explicit renormalization
        // restores the simplex to machine precision
        let total = slice.sum();
        if total > 0.0 {
            slice /= total;
        }
        for j in 0..d {
            gamma[(t + 1, j)] = slice.column(j).sum();
        }
        if t == 0 {
            for i in 0..d {
                gamma[(0, i)] = slice.row(i).sum();
            }
        }
        xi.push(slice);
    }
    Ok(Posteriors { gamma, xi, loglik })
}

/// Fast path for structures whose switching ignores the previous mode: the
/// posterior factorizes across time, so each step is independent and the
/// pass parallelizes over `t` at `O(dT)` cost.
pub fn posterior_state_dependent(
    model: &ModelParams,
    traj: &Trajectory,
    alpha0: &DVector<f64>,
) -> Result<Posteriors> {
    if model.structure.depends_on_mode() {
        return Err(Error::InvalidArgument(format!(
            "posterior_state_dependent requires mode-independent switching, got {}",
            model.structure.name()
        )));
    }
    let d = model.d();
    check_simplex(alpha0, d)?;
    let t_len = traj.transitions();
    let steps = compute_log_steps(model, traj, false)?;
    let rows: Vec<(Vec<f64>, f64)> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let lp = &steps.log_trans[t];
            let le = &steps.log_emit[t];
            let joint: Vec<f64> = (0..d).map(|j| lp[(0, j)] + le[j]).collect();
            let norm = log_sum_exp(&joint);
            (joint.iter().map(|v| (v - norm).exp()).collect(), norm)
        })
        .collect();
    let mut gamma = DMatrix::zeros(t_len + 1, d);
    let mut loglik = 0.0;
    for i in 0..d {
        gamma[(0, i)] = alpha0[i];
    }
    for (t, (row, norm)) in rows.iter().enumerate() {
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "state-dependent posterior",
                t: t + 1,
            });
        }
        loglik += norm;
        for j in 0..d {
            gamma[(t + 1, j)] = row[j];
        }
    }
    // Conditional independence of consecutive modes given the data.
    let xi = (0..t_len)
        .map(|t| {
            DMatrix::from_fn(d, d, |i, j| gamma[(t, i)] * gamma[(t + 1, j)])
        })
        .collect();
    Ok(Posteriors { gamma, xi, loglik })
}

/// Enumeration oracle: exact posterior over all `d^(T+1)` mode sequences.
pub fn brute_force_posterior(
    model: &ModelParams,
    traj: &Trajectory,
    alpha0: &DVector<f64>,
) -> Result<Posteriors> {
    let d = model.d();
    check_simplex(alpha0, d)?;
    let t_len = traj.transitions();
    enumeration_size(d, t_len + 1)?;
    let mut log_weights = Vec::new();
    let mut sequences = Vec::new();
    for_each_mode_sequence(d, t_len + 1, |modes| {
        let lj = log_joint_fixed_modes(model, traj, modes)?;
        log_weights.push(lj + alpha0[modes[0]].max(f64::MIN_POSITIVE).ln());
        sequences.push(modes.to_vec());
        Ok(())
    })?;
    let norm = log_sum_exp(&log_weights);
    let mut gamma = DMatrix::zeros(t_len + 1, d);
    let mut xi = vec![DMatrix::zeros(d, d); t_len];
    for (modes, lw) in sequences.iter().zip(&log_weights) {
        let w = (lw - norm).exp();
        for (t, &m) in modes.iter().enumerate() {
            gamma[(t, m)] += w;
            if t < t_len {
                xi[t][(m, modes[t + 1])] += w;
            }
        }
    }
    Ok(Posteriors {
        gamma,
        xi,
        loglik: norm,
    })
}
