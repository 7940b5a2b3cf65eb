//! Convex surrogate construction and the decoupled minimization steps.
//!
//! Given smoothed posteriors at the current iterate, the surrogate splits
//! into a switching block (weighted soft-label softmax regressions, one per
//! previous mode, or a single collapsed problem when the structure is
//! shared) and per-mode emission blocks in which the concave link `f` is
//! replaced by its tangent at the current `ell` values. The frozen slopes
//! `f'(ell_t(beta^k))` act as per-sample weights; for Student's t they
//! downweight large residuals, which is exactly an IRLS reweighting.
//!
//! Every solver starts from the incoming point and only accepts improving
//! steps, so the subproblem objective never ends above the incoming value;
//! that is all the outer loop's monotone descent needs, even when an inner
//! solve stops at its iteration cap.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{build_regressor, Trajectory};
use crate::error::{Error, Result};
use crate::families::{log_sum_exp, EmissionParams, FamilyKind};
use crate::likelihood::{
    enumeration_size, for_each_mode_sequence, log_joint_fixed_modes, ModelParams, Regularizer,
    SwitchStructure,
};
use crate::posterior::Posteriors;

/// Per-time, per-mode weights and frozen linearization coefficients that
/// define the convex subproblems at one iterate.
#[derive(Debug, Clone)]
pub struct SurrogateWeights {
    /// `T` slices of `d x d` pairwise posteriors.
    pub xi_weights: Vec<DMatrix<f64>>,
    /// `T x d`; row `t` is the smoothed distribution of the mode at `t+1`.
    pub mode_weights: DMatrix<f64>,
    /// `T x d` frozen slopes `f'(ell_t(beta_i^k))`, in `(0, u_bar]`.
    pub lin_coeffs: DMatrix<f64>,
    /// `T x d` values `ell_t(beta_i^k)` at the base point.
    pub base_ell: DMatrix<f64>,
    /// Smoothed distribution of the initial mode.
    pub pi0: DVector<f64>,
    /// Constant collecting `f(ell^k) - f'(ell^k) ell^k` terms, needed only
    /// when comparing surrogate values against the loss.
    pub const_offset: f64,
}

/// Inner-solver tolerances and caps.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub grad_tol: f64,
    pub max_newton_iters: usize,
    pub backtrack_factor: f64,
    pub sufficient_decrease: f64,
    pub laplace_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            grad_tol: 1e-8,
            max_newton_iters: 100,
            backtrack_factor: 0.5,
            sufficient_decrease: 1e-4,
            laplace_iters: 200,
        }
    }
}

/// Outcome flags of an inner solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveInfo {
    pub iterations: usize,
    /// True when the iteration cap was reached before `grad_tol`.
    pub inexact: bool,
}

/// Regressors and next observations shared by the solvers:
/// `zs[t] = z_t`, `ys[t] = y_{t+1}`, for `t` in `0..T`.
pub struct StepData {
    pub zs: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
}

pub fn prepare_step_data(model: &ModelParams, traj: &Trajectory) -> Result<StepData> {
    let t_len = traj.transitions();
    let mut zs = Vec::with_capacity(t_len);
    let mut ys = Vec::with_capacity(t_len);
    for t in 0..t_len {
        zs.push(build_regressor(traj, &model.cfg, t)?);
        ys.push(traj.y.row(t + 1).transpose());
    }
    Ok(StepData { zs, ys })
}

/// Assemble the surrogate weights at the iterate that produced `post`.
pub fn build_weights(
    model: &ModelParams,
    post: &Posteriors,
    traj: &Trajectory,
) -> Result<SurrogateWeights> {
    let t_len = traj.transitions();
    let d = model.d();
    if post.gamma.nrows() != t_len + 1 || post.xi.len() != t_len {
        return Err(Error::DimensionMismatch {
            context: "posteriors vs trajectory",
            expected: t_len,
            actual: post.xi.len(),
        });
    }
    let data = prepare_step_data(model, traj)?;
    let n_y = model.emission_n_y();
    let mut lin_coeffs = DMatrix::zeros(t_len, d);
    let mut base_ell = DMatrix::zeros(t_len, d);
    let mut mode_weights = DMatrix::zeros(t_len, d);
    let mut const_offset = 0.0;
    for t in 0..t_len {
        for i in 0..d {
            let (ell, _) = model.betas[i].ell_g(&data.ys[t], &data.zs[t])?;
            let ell = model.family.clamp_to_domain(ell);
            let (fval, fprime) =
                model
                    .family
                    .f_value_and_derivative(n_y, ell)
                    .map_err(|_| Error::Numeric(format!(
                        "f domain violation at (t, mode) = ({t}, {i})"
                    )))?;
            base_ell[(t, i)] = ell;
            lin_coeffs[(t, i)] = fprime;
            mode_weights[(t, i)] = post.gamma[(t + 1, i)];
            const_offset += post.gamma[(t + 1, i)] * (fval - fprime * ell);
        }
    }
    Ok(SurrogateWeights {
        xi_weights: post.xi.clone(),
        mode_weights,
        lin_coeffs,
        base_ell,
        pi0: post.gamma.row(0).transpose(),
        const_offset,
    })
}

// ---------------------------------------------------------------------------
// Weighted soft-label softmax regression (switching step, categorical step)
// ---------------------------------------------------------------------------

/// One weighted multinomial problem: minimize over the free logit matrix
/// `sum_t [mass_t * lse(s_t) - <labels_t, s_t>] + ridge/2 * |theta|^2`,
/// where `s_t = theta' z_t` with an appended zero column iff
/// `fixed_zero_last`.
struct SoftmaxProblem<'a> {
    zs: &'a [DVector<f64>],
    masses: Vec<f64>,
    /// `labels[t]` has one entry per (total) column; sums to `masses[t]`.
    labels: Vec<DVector<f64>>,
    ridge: f64,
    fixed_zero_last: bool,
}

impl SoftmaxProblem<'_> {
    fn free_cols(&self, theta: &DMatrix<f64>) -> usize {
        theta.ncols()
    }

    fn total_cols(&self, theta: &DMatrix<f64>) -> usize {
        theta.ncols() + usize::from(self.fixed_zero_last)
    }

    fn softmax_at(&self, theta: &DMatrix<f64>, t: usize) -> (Vec<f64>, f64) {
        let total = self.total_cols(theta);
        let mut logits = vec![0.0; total];
        for j in 0..self.free_cols(theta) {
            logits[j] = theta.column(j).dot(&self.zs[t]);
        }
        let lse = log_sum_exp(&logits);
        for l in logits.iter_mut() {
            *l = (*l - lse).exp();
        }
        (logits, lse)
    }

    fn objective(&self, theta: &DMatrix<f64>) -> f64 {
        let mut total = 0.5 * self.ridge * theta.iter().map(|v| v * v).sum::<f64>();
        for t in 0..self.zs.len() {
            if self.masses[t] == 0.0 && self.labels[t].iter().all(|&l| l == 0.0) {
                continue;
            }
            let free = self.free_cols(theta);
            let mut logits = vec![0.0; self.total_cols(theta)];
            for (j, l) in logits.iter_mut().take(free).enumerate() {
                *l = theta.column(j).dot(&self.zs[t]);
            }
            let lse = log_sum_exp(&logits);
            total += self.masses[t] * lse;
            for (j, &l) in logits.iter().enumerate() {
                total -= self.labels[t][j] * l;
            }
        }
        total
    }

    /// Gradient with respect to the free columns.
    fn gradient(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut grad = theta * self.ridge;
        for t in 0..self.zs.len() {
            let (probs, _) = self.softmax_at(theta, t);
            for j in 0..self.free_cols(theta) {
                let coef = self.masses[t] * probs[j] - self.labels[t][j];
                if coef != 0.0 {
                    grad.column_mut(j).axpy(coef, &self.zs[t], 1.0);
                }
            }
        }
        grad
    }

    /// Dense Hessian over the flattened free parameters (column j, row l at
    /// flat index `j * n_x + l`).
    fn hessian(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        let n_x = theta.nrows();
        let k = self.free_cols(theta);
        let n = n_x * k;
        let mut hess = DMatrix::identity(n, n) * self.ridge;
        for t in 0..self.zs.len() {
            if self.masses[t] == 0.0 {
                continue;
            }
            let (probs, _) = self.softmax_at(theta, t);
            let z = &self.zs[t];
            for j1 in 0..k {
                for j2 in 0..k {
                    let w = self.masses[t]
                        * (if j1 == j2 { probs[j1] } else { 0.0 } - probs[j1] * probs[j2]);
                    if w == 0.0 {
                        continue;
                    }
                    for l1 in 0..n_x {
                        let wz = w * z[l1];
                        for l2 in 0..n_x {
                            hess[(j1 * n_x + l1, j2 * n_x + l2)] += wz * z[l2];
                        }
                    }
                }
            }
        }
        hess
    }
}

fn flat_to_matrix(flat: &DVector<f64>, n_x: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_x, k, |l, j| flat[j * n_x + l])
}

fn matrix_to_flat(m: &DMatrix<f64>) -> DVector<f64> {
    let (n_x, k) = m.shape();
    let _ = k;
    DVector::from_fn(m.len(), |idx, _| m[(idx % n_x, idx / n_x)])
}

/// Damped Newton with Armijo backtracking; the convex objective never ends
/// above its value at `init`. A singular or near-singular Hessian (zero
/// ridge with saturated softmax rows) is handled by escalating
/// Levenberg-Marquardt damping until a descent step is accepted; in the
/// large-damping limit this becomes a scaled gradient step.
fn softmax_newton(
    problem: &SoftmaxProblem,
    init: &DMatrix<f64>,
    opts: &SolverOptions,
) -> (DMatrix<f64>, SolveInfo) {
    let mut theta = init.clone();
    let mut info = SolveInfo::default();
    if theta.ncols() == 0 {
        return (theta, info);
    }
    let n = theta.len();
    let mut obj = problem.objective(&theta);
    for iter in 0..opts.max_newton_iters {
        info.iterations = iter;
        let grad = problem.gradient(&theta);
        let grad_norm = grad.norm();
        if grad_norm <= opts.grad_tol {
            return (theta, info);
        }
        let gflat = matrix_to_flat(&grad);
        let hess = problem.hessian(&theta);
        let scale = hess.diagonal().amax().max(1e-30);
        let mut damping = 0.0;
        let mut moved = false;
        'damping: for _ in 0..24 {
            let step = match (hess.clone() + DMatrix::identity(n, n) * damping).cholesky() {
                Some(chol) => chol.solve(&gflat),
                None => {
                    damping = if damping == 0.0 { 1e-12 * scale } else { damping * 100.0 };
                    continue;
                }
            };
            let slope = -step.dot(&gflat);
            if slope < 0.0 {
                let dir = -flat_to_matrix(&step, theta.nrows(), theta.ncols());
                let mut alpha = 1.0;
                for _ in 0..40 {
                    let trial = &theta + &dir * alpha;
                    let trial_obj = problem.objective(&trial);
                    if trial_obj <= obj + opts.sufficient_decrease * alpha * slope {
                        theta = trial;
                        obj = trial_obj;
                        moved = true;
                        break 'damping;
                    }
                    alpha *= opts.backtrack_factor;
                }
            }
            damping = if damping == 0.0 { 1e-12 * scale } else { damping * 100.0 };
        }
        if !moved {
            info.inexact = grad_norm > opts.grad_tol;
            return (theta, info);
        }
    }
    info.iterations = opts.max_newton_iters;
    info.inexact = problem.gradient(&theta).norm() > opts.grad_tol;
    (theta, info)
}

/// Cholesky solve with escalating diagonal damping.
fn solve_spd_with_damping(hess: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = hess.nrows();
    let scale = hess.diagonal().amax().max(1.0);
    let mut damping = 0.0;
    for _ in 0..8 {
        let damped = hess + DMatrix::identity(n, n) * damping;
        if let Some(chol) = damped.cholesky() {
            return Some(chol.solve(rhs));
        }
        damping = if damping == 0.0 {
            1e-10 * scale
        } else {
            damping * 100.0
        };
    }
    None
}

/// Solve the switching block: one soft-label softmax regression per stored
/// logit slice, with previous-mode posteriors as labels (collapsed to the
/// next-mode marginals when the slice is shared across modes).
pub fn solve_switch_step(
    structure: SwitchStructure,
    weights: &SurrogateWeights,
    switch_inputs: &[DVector<f64>],
    gamma1: f64,
    opts: &SolverOptions,
    init: &[DMatrix<f64>],
) -> Result<(Vec<DMatrix<f64>>, SolveInfo)> {
    let t_len = switch_inputs.len();
    if weights.xi_weights.len() != t_len {
        return Err(Error::DimensionMismatch {
            context: "switch step weights",
            expected: t_len,
            actual: weights.xi_weights.len(),
        });
    }
    let solved: Vec<(DMatrix<f64>, SolveInfo)> = init
        .par_iter()
        .enumerate()
        .map(|(slice, th0)| {
            let (masses, labels): (Vec<f64>, Vec<DVector<f64>>) = if structure.depends_on_mode() {
                (0..t_len)
                    .map(|t| {
                        let xi = &weights.xi_weights[t];
                        let mass: f64 = xi.row(slice).iter().sum();
                        (mass, xi.row(slice).transpose())
                    })
                    .unzip()
            } else {
                (0..t_len)
                    .map(|t| (1.0, weights.mode_weights.row(t).transpose()))
                    .unzip()
            };
            let problem = SoftmaxProblem {
                zs: switch_inputs,
                masses,
                labels,
                ridge: gamma1,
                fixed_zero_last: true,
            };
            softmax_newton(&problem, th0, opts)
        })
        .collect();
    let mut info = SolveInfo::default();
    let mut out = Vec::with_capacity(solved.len());
    for (th, i) in solved {
        info.iterations = info.iterations.max(i.iterations);
        info.inexact |= i.inexact;
        out.push(th);
    }
    Ok((out, info))
}

// ---------------------------------------------------------------------------
// Emission steps
// ---------------------------------------------------------------------------

/// Exact minimizer of the quadratic emission block shared by the Gaussian
/// and Student-t families (in the transformed coordinates the two objectives
/// coincide once the frozen slopes are folded into the sample weights):
///
/// ```text
///   L* = (sum w_t y z') (sum w_t z z' + g3 I)^{-1}
///   Lambda*^{-1} = (sum w_t r r' + g2 I + g3 L* L*') / (sum v_t + g2)
/// ```
///
/// with `r_t = y_{t+1} - L* z_t`. Returns `(B, Lambda) = (Lambda L*, Lambda)`.
fn solve_quadratic_emission(
    w: &[f64],
    v_sum: f64,
    zs: &[DVector<f64>],
    ys: &[DVector<f64>],
    gamma2: f64,
    gamma3: f64,
    fixed_lambda: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n_z = zs[0].len();
    let n_y = ys[0].len();
    let mut s_zz = DMatrix::identity(n_z, n_z) * gamma3;
    let mut s_yz = DMatrix::zeros(n_y, n_z);
    for t in 0..zs.len() {
        if w[t] == 0.0 {
            continue;
        }
        s_zz.ger(w[t], &zs[t], &zs[t], 1.0);
        s_yz.ger(w[t], &ys[t], &zs[t], 1.0);
    }
    crate::families::symmetrize(&mut s_zz);
    let chol = s_zz.cholesky().ok_or_else(|| {
        Error::Numeric(
            "singular regressor normal matrix (rank-deficient regressors with gamma3 = 0)".into(),
        )
    })?;
    // L solves L (S_zz + g3 I) = S_yz.
    let l = chol.solve(&s_yz.transpose()).transpose();
    if let Some(lambda) = fixed_lambda {
        return Ok((lambda * &l, lambda.clone()));
    }
    let mut lambda_inv = DMatrix::identity(n_y, n_y) * gamma2;
    lambda_inv += &l * l.transpose() * gamma3;
    for t in 0..zs.len() {
        if w[t] == 0.0 {
            continue;
        }
        let r = &ys[t] - &l * &zs[t];
        lambda_inv.ger(w[t], &r, &r, 1.0);
    }
    let denom = v_sum + gamma2;
    if denom <= 0.0 {
        return Err(Error::Numeric(
            "zero effective weight mass and gamma2 = 0 in emission step".into(),
        ));
    }
    lambda_inv /= denom;
    crate::families::symmetrize(&mut lambda_inv);
    let mut lambda = lambda_inv
        .cholesky()
        .ok_or(Error::NotSpd { context: "lambda" })?
        .inverse();
    crate::families::symmetrize(&mut lambda);
    Ok(((&lambda) * &l, lambda))
}

/// Closed-form Gaussian emission step for mode `j`.
pub fn solve_gaussian_step(
    weights: &SurrogateWeights,
    data: &StepData,
    gamma2: f64,
    gamma3: f64,
    j: usize,
    fixed_lambda: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let w: Vec<f64> = (0..data.zs.len())
        .map(|t| weights.mode_weights[(t, j)] * weights.lin_coeffs[(t, j)])
        .collect();
    let v_sum = weights.mode_weights.column(j).sum();
    solve_quadratic_emission(&w, v_sum, &data.zs, &data.ys, gamma2, gamma3, fixed_lambda)
}

/// Student-t emission step for mode `j`: the Gaussian closed form with the
/// frozen slopes as IRLS weights in the quadratic part and the unweighted
/// mode posteriors in the log-determinant denominator.
pub fn solve_student_t_step(
    weights: &SurrogateWeights,
    data: &StepData,
    gamma2: f64,
    gamma3: f64,
    j: usize,
    fixed_lambda: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    solve_gaussian_step(weights, data, gamma2, gamma3, j, fixed_lambda)
}

/// Weighted emission objective for one mode with frozen slopes:
/// `sum_t v_t (c_t ell_t(beta) + g_t(beta)) + r2(beta)`.
pub fn emission_objective(
    beta: &EmissionParams,
    weights: &SurrogateWeights,
    data: &StepData,
    reg: &Regularizer,
    j: usize,
) -> Result<f64> {
    let mut total = reg.r2_single(beta);
    for t in 0..data.zs.len() {
        let v = weights.mode_weights[(t, j)];
        if v == 0.0 {
            continue;
        }
        let (ell, g) = beta.ell_g(&data.ys[t], &data.zs[t])?;
        total += v * (weights.lin_coeffs[(t, j)] * ell + g);
    }
    Ok(total)
}

/// Damped-Newton solve of the smooth scalar emission blocks (logistic and
/// Gumbel); the categorical block reuses the softmax machinery.
pub fn solve_generic_smooth_step(
    family: &FamilyKind,
    weights: &SurrogateWeights,
    data: &StepData,
    reg: &Regularizer,
    j: usize,
    opts: &SolverOptions,
    init: &EmissionParams,
) -> Result<(EmissionParams, SolveInfo)> {
    match (family, init) {
        (FamilyKind::Categorical { n_classes }, EmissionParams::Categorical { theta }) => {
            let t_len = data.zs.len();
            let mut masses = Vec::with_capacity(t_len);
            let mut labels = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let w = weights.mode_weights[(t, j)] * weights.lin_coeffs[(t, j)];
                let class = data.ys[t][0] as usize;
                if class >= *n_classes {
                    return Err(Error::InvalidArgument(format!(
                        "class index {class} out of range at t = {t}"
                    )));
                }
                let mut label = DVector::zeros(*n_classes);
                label[class] = w;
                masses.push(w);
                labels.push(label);
            }
            let problem = SoftmaxProblem {
                zs: &data.zs,
                masses,
                labels,
                ridge: reg.gamma3,
                fixed_zero_last: false,
            };
            let (theta, info) = softmax_newton(&problem, theta, opts);
            Ok((EmissionParams::Categorical { theta }, info))
        }
        (FamilyKind::Logistic, EmissionParams::Logistic { .. })
        | (FamilyKind::Gumbel, EmissionParams::Gumbel { .. }) => {
            scalar_family_newton(weights, data, reg, j, opts, init)
        }
        _ => Err(Error::InvalidArgument(format!(
            "solve_generic_smooth_step does not handle family {}",
            family.name()
        ))),
    }
}

/// Newton iteration over `(b, lambda)` with a positivity guard on `lambda`.
fn scalar_family_newton(
    weights: &SurrogateWeights,
    data: &StepData,
    reg: &Regularizer,
    j: usize,
    opts: &SolverOptions,
    init: &EmissionParams,
) -> Result<(EmissionParams, SolveInfo)> {
    let n_z = data.zs[0].len();
    let n = n_z + 1;
    let mut beta = init.clone();
    let mut obj = emission_objective(&beta, weights, data, reg, j)?;
    let mut info = SolveInfo::default();
    for iter in 0..opts.max_newton_iters {
        info.iterations = iter;
        let (grad, hess) = scalar_family_grad_hess(&beta, weights, data, reg, j)?;
        let grad_norm = grad.norm();
        if grad_norm <= opts.grad_tol {
            return Ok((beta, info));
        }
        let step = solve_spd_with_damping(&hess, &grad).unwrap_or_else(|| grad.clone());
        let slope = -step.dot(&grad);
        let mut alpha = 1.0;
        let mut moved = false;
        let flat = beta.flatten();
        for _ in 0..60 {
            let mut trial = flat.clone();
            for i in 0..n {
                trial[i] -= alpha * step[i];
            }
            if trial[n_z] > 0.0 {
                let candidate = beta.unflatten(&trial)?;
                if let Ok(trial_obj) = emission_objective(&candidate, weights, data, reg, j) {
                    if trial_obj <= obj + opts.sufficient_decrease * alpha * slope {
                        beta = candidate;
                        obj = trial_obj;
                        moved = true;
                        break;
                    }
                }
            }
            alpha *= opts.backtrack_factor;
        }
        if !moved {
            info.inexact = grad_norm > opts.grad_tol;
            return Ok((beta, info));
        }
    }
    info.iterations = opts.max_newton_iters;
    info.inexact = true;
    Ok((beta, info))
}

fn scalar_family_grad_hess(
    beta: &EmissionParams,
    weights: &SurrogateWeights,
    data: &StepData,
    reg: &Regularizer,
    j: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n_z = data.zs[0].len();
    let n = n_z + 1;
    let mut grad = reg.r2_grad(beta)?;
    let mut hess = DMatrix::zeros(n, n);
    // Regularizer Hessian: gamma2 (lambda - ln lambda) + gamma3 |b|^2 / lambda.
    let (bvec, lambda) = match beta {
        EmissionParams::Logistic { b, lambda } | EmissionParams::Gumbel { b, lambda } => {
            (b.clone(), *lambda)
        }
        _ => unreachable!("scalar_family_grad_hess called on non-scalar family"),
    };
    for l in 0..n_z {
        hess[(l, l)] += 2.0 * reg.gamma3 / lambda;
        hess[(l, n_z)] += -2.0 * reg.gamma3 * bvec[l] / (lambda * lambda);
        hess[(n_z, l)] += -2.0 * reg.gamma3 * bvec[l] / (lambda * lambda);
    }
    hess[(n_z, n_z)] += reg.gamma2 / (lambda * lambda)
        + 2.0 * reg.gamma3 * bvec.norm_squared() / (lambda * lambda * lambda);
    for t in 0..data.zs.len() {
        let v = weights.mode_weights[(t, j)];
        if v == 0.0 {
            continue;
        }
        let c = weights.lin_coeffs[(t, j)];
        let z = &data.zs[t];
        let eta = data.ys[t][0];
        match beta {
            EmissionParams::Logistic { b, lambda } => {
                let s = 0.5 * (lambda * eta - b.dot(z));
                let (sh, ch) = (s.sinh(), s.cosh());
                // grad dir of s: (-z/2, eta/2)
                let mut ds = DVector::zeros(n);
                for l in 0..n_z {
                    ds[l] = -0.5 * z[l];
                }
                ds[n_z] = 0.5 * eta;
                grad.axpy(v * c * sh, &ds, 1.0);
                grad[n_z] += v * (-1.0 / lambda);
                hess.ger(v * c * ch, &ds, &ds, 1.0);
                hess[(n_z, n_z)] += v / (lambda * lambda);
            }
            EmissionParams::Gumbel { b, lambda } => {
                let u = -lambda * eta + b.dot(z);
                let eu = u.exp();
                let mut du = DVector::zeros(n);
                for l in 0..n_z {
                    du[l] = z[l];
                }
                du[n_z] = -eta;
                grad.axpy(v * c * eu, &du, 1.0);
                // g = -ln lambda + lambda eta - b'z
                for l in 0..n_z {
                    grad[l] += v * (-z[l]);
                }
                grad[n_z] += v * (eta - 1.0 / lambda);
                hess.ger(v * c * eu, &du, &du, 1.0);
                hess[(n_z, n_z)] += v / (lambda * lambda);
            }
            _ => unreachable!(),
        }
    }
    crate::families::symmetrize(&mut hess);
    Ok((grad, hess))
}

// ---------------------------------------------------------------------------
// Laplace emission step
// ---------------------------------------------------------------------------

/// Alternating exact coordinate updates for the Laplace block, one output
/// row at a time: the row of `M` by coordinate descent (each coordinate is a
/// weighted-median-type one-dimensional l1+ridge problem solved exactly) and
/// the diagonal entry of `R` by bisection on the monotone subgradient.
/// The objective never increases across sweeps.
pub fn solve_laplace_step(
    weights: &SurrogateWeights,
    data: &StepData,
    gamma2: f64,
    gamma3: f64,
    j: usize,
    opts: &SolverOptions,
    init: (&DMatrix<f64>, &DVector<f64>),
) -> Result<(DMatrix<f64>, DVector<f64>, SolveInfo)> {
    let (m0, r0) = init;
    let n_y = m0.nrows();
    let n_z = m0.ncols();
    let t_len = data.zs.len();
    let v: Vec<f64> = (0..t_len).map(|t| weights.mode_weights[(t, j)]).collect();
    let v_sum: f64 = v.iter().sum();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut m = m0.clone();
    let mut r = r0.clone();
    let mut info = SolveInfo::default();
    for i in 0..n_y {
        let etas: Vec<f64> = (0..t_len).map(|t| data.ys[t][i]).collect();
        let mut mi: Vec<f64> = (0..n_z).map(|l| m[(i, l)]).collect();
        let mut ri = r[i];
        // per-row objective: weighted l1 fit, the -ln r_i emission terms
        // (weight v_sum), and the row's regularizer share
        let row_obj = |mi: &[f64], ri: f64| -> f64 {
            let mut total = gamma2 * (ri - ri.ln()) - v_sum * ri.ln()
                + gamma3 * mi.iter().map(|x| x * x).sum::<f64>();
            for t in 0..t_len {
                if v[t] == 0.0 {
                    continue;
                }
                let fit: f64 = (0..n_z).map(|l| mi[l] * data.zs[t][l]).sum();
                total += sqrt2 * v[t] * (ri * etas[t] - fit).abs();
            }
            total
        };
        let mut obj = row_obj(&mi, ri);
        let incoming = (mi.clone(), ri, obj);
        for sweep in 0..opts.laplace_iters {
            info.iterations = info.iterations.max(sweep + 1);
            // (a) coordinate descent over the row of M
            for l in 0..n_z {
                let mut breakpoints: Vec<(f64, f64)> = Vec::new();
                for t in 0..t_len {
                    let zl = data.zs[t][l];
                    if v[t] == 0.0 || zl == 0.0 {
                        continue;
                    }
                    let partial: f64 = (0..n_z)
                        .filter(|&l2| l2 != l)
                        .map(|l2| mi[l2] * data.zs[t][l2])
                        .sum();
                    let a = ri * etas[t] - partial;
                    breakpoints.push((a / zl, sqrt2 * v[t] * zl.abs()));
                }
                mi[l] = l1_ridge_scalar_min(&mut breakpoints, gamma3, mi[l]);
            }
            // (b) exact scale update by subgradient bisection
            if v_sum + gamma2 > 0.0 {
                let fits: Vec<f64> = (0..t_len)
                    .map(|t| (0..n_z).map(|l| mi[l] * data.zs[t][l]).sum())
                    .collect();
                let dj = |rv: f64| -> f64 {
                    let mut s = gamma2 - (v_sum + gamma2) / rv;
                    for t in 0..t_len {
                        if v[t] == 0.0 {
                            continue;
                        }
                        s += sqrt2 * v[t] * etas[t] * (rv * etas[t] - fits[t]).signum();
                    }
                    s
                };
                let mut lo = 1e-12;
                let mut hi = (2.0 * ri).max(1.0);
                let mut grows = 0;
                while dj(hi) < 0.0 && grows < 80 {
                    hi *= 2.0;
                    grows += 1;
                }
                if grows < 80 && dj(lo) < 0.0 {
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if dj(mid) < 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let candidate = 0.5 * (lo + hi);
                    if row_obj(&mi, candidate) <= row_obj(&mi, ri) {
                        ri = candidate;
                    }
                }
            }
            // (c) line searches along active kink directions: coordinate
            // descent stalls on the hyperplanes r eta_t = <m, z_t>, and the
            // direction (dm, dr) = (eta_t z_t / |z_t|^2, 1) stays on kink t,
            // so a convex 1-D search along it slides the iterate off the
            // stall. Only near-active kinks are searched.
            {
                let scale = ri.abs().max(mi.iter().fold(0.0f64, |a, &b| a.max(b.abs()))).max(1.0);
                let mut searched = 0;
                for t in 0..t_len {
                    if searched >= 8 {
                        break;
                    }
                    if v[t] == 0.0 {
                        continue;
                    }
                    let znorm2: f64 = (0..n_z).map(|l| data.zs[t][l] * data.zs[t][l]).sum();
                    if znorm2 == 0.0 {
                        continue;
                    }
                    let fit: f64 = (0..n_z).map(|l| mi[l] * data.zs[t][l]).sum();
                    if (ri * etas[t] - fit).abs() > 1e-7 * scale {
                        continue;
                    }
                    searched += 1;
                    let dm: Vec<f64> =
                        (0..n_z).map(|l| etas[t] * data.zs[t][l] / znorm2).collect();
                    let eval = |tau: f64| -> f64 {
                        if ri + tau <= 0.0 {
                            return f64::INFINITY;
                        }
                        let m_trial: Vec<f64> =
                            (0..n_z).map(|l| mi[l] + tau * dm[l]).collect();
                        row_obj(&m_trial, ri + tau)
                    };
                    // golden-section on a bracket grown in both directions
                    let (mut lo, mut hi) = (-0.9 * ri, ri.max(1.0));
                    while eval(hi) < eval(hi * 0.5) && hi < 1e8 {
                        hi *= 2.0;
                    }
                    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
                    for _ in 0..120 {
                        let x1 = hi - phi * (hi - lo);
                        let x2 = lo + phi * (hi - lo);
                        if eval(x1) <= eval(x2) {
                            hi = x2;
                        } else {
                            lo = x1;
                        }
                    }
                    let tau = 0.5 * (lo + hi);
                    if eval(tau) < row_obj(&mi, ri) {
                        for l in 0..n_z {
                            mi[l] += tau * dm[l];
                        }
                        ri += tau;
                    }
                }
            }
            // (d) exact joint rescaling (m, r) -> c (m, r): the l1 kink
            // hyperplanes are homogeneous, so this direction slides along
            // them where the axis updates stall; the 1-D problem in c has a
            // closed form.
            if v_sum + gamma2 > 0.0 {
                let a: f64 = (0..t_len)
                    .map(|t| {
                        let fit: f64 = (0..n_z).map(|l| mi[l] * data.zs[t][l]).sum();
                        sqrt2 * v[t] * (ri * etas[t] - fit).abs()
                    })
                    .sum();
                let b: f64 = gamma3 * mi.iter().map(|x| x * x).sum::<f64>();
                let k = v_sum + gamma2;
                let lin = a + gamma2 * ri;
                let c = if b > 0.0 {
                    (-lin + (lin * lin + 8.0 * b * k).sqrt()) / (4.0 * b)
                } else if lin > 0.0 {
                    k / lin
                } else {
                    1.0
                };
                if c.is_finite() && c > 0.0 {
                    let scaled: Vec<f64> = mi.iter().map(|x| c * x).collect();
                    if row_obj(&scaled, c * ri) < row_obj(&mi, ri) {
                        mi = scaled;
                        ri *= c;
                    }
                }
            }
            let new_obj = row_obj(&mi, ri);
            let rel = (obj - new_obj) / obj.abs().max(1.0);
            obj = new_obj;
            if rel < 1e-10 {
                break;
            }
            if sweep + 1 == opts.laplace_iters {
                info.inexact = true;
            }
        }
        // never-worse-than-incoming fallback
        if obj > incoming.2 {
            mi = incoming.0;
            ri = incoming.1;
        }
        for l in 0..n_z {
            m[(i, l)] = mi[l];
        }
        r[i] = ri;
    }
    Ok((m, r, info))
}

/// Exact minimizer of `sum_k w_k |x - b_k| + ridge x^2` (lower weighted
/// median when `ridge == 0`; ties on even mass splits break toward the
/// lower value).
fn l1_ridge_scalar_min(breakpoints: &mut Vec<(f64, f64)>, ridge: f64, current: f64) -> f64 {
    if breakpoints.is_empty() {
        return if ridge > 0.0 { 0.0 } else { current };
    }
    breakpoints.sort_by(|a, b| a.0.total_cmp(&b.0));
    // merge equal breakpoints so the subgradient intervals are exact
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(breakpoints.len());
    for &(b, w) in breakpoints.iter() {
        match merged.last_mut() {
            Some(last) if last.0 == b => last.1 += w,
            _ => merged.push((b, w)),
        }
    }
    let total: f64 = merged.iter().map(|(_, w)| w).sum();
    if ridge == 0.0 {
        // lower weighted median: smallest b with cumulative weight >= total/2
        let mut acc = 0.0;
        for &(b, w) in &merged {
            acc += w;
            if acc >= 0.5 * total {
                return b;
            }
        }
        return merged.last().unwrap().0;
    }
    // psi(x) = sum w_k sgn(x - b_k) + 2 ridge x is nondecreasing; scan the
    // regions between breakpoints and the subgradient intervals at them.
    let before = -total; // sgn-sum on (-inf, b_0)
    let x = -before / (2.0 * ridge);
    if x < merged[0].0 {
        return x;
    }
    let mut below = 0.0;
    for k in 0..merged.len() {
        let (b_k, w_k) = merged[k];
        let above = total - below - w_k;
        let sub_lo = below - w_k - above + 2.0 * ridge * b_k;
        let sub_hi = below + w_k - above + 2.0 * ridge * b_k;
        if sub_lo <= 0.0 && 0.0 <= sub_hi {
            return b_k;
        }
        below += w_k;
        let sgn_sum = below - (total - below);
        let x = -sgn_sum / (2.0 * ridge);
        let next = merged.get(k + 1).map(|p| p.0).unwrap_or(f64::INFINITY);
        if x > b_k && x < next {
            return x;
        }
    }
    merged.last().unwrap().0
}

// ---------------------------------------------------------------------------
// Surrogate value and gradient
// ---------------------------------------------------------------------------

/// Entropy constant `c_k = sum_seq P(seq | data) ln P(seq | data)` at the
/// base iterate, by enumeration (testing use only; guarded).
pub fn posterior_entropy_constant(
    model_at_base: &ModelParams,
    traj: &Trajectory,
    alpha0: &DVector<f64>,
) -> Result<f64> {
    let d = model_at_base.d();
    let t_len = traj.transitions();
    enumeration_size(d, t_len + 1)?;
    let mut log_w = Vec::new();
    for_each_mode_sequence(d, t_len + 1, |modes| {
        let lj = log_joint_fixed_modes(model_at_base, traj, modes)?;
        log_w.push(lj + alpha0[modes[0]].max(f64::MIN_POSITIVE).ln());
        Ok(())
    })?;
    let norm = log_sum_exp(&log_w);
    Ok(log_w
        .iter()
        .map(|lw| {
            let lp = lw - norm;
            lp.exp() * lp
        })
        .sum())
}

/// Value of the convex surrogate at `model` (an arbitrary candidate), built
/// from `weights` at the base iterate.
///
/// With `entropy_constant` supplied (see [`posterior_entropy_constant`])
/// the absolute value satisfies tangency and majorization against the
/// regularized NLL; without it the constant block of the surrogate is
/// dropped, which does not affect minimization.
pub fn eval_surrogate(
    model: &ModelParams,
    weights: &SurrogateWeights,
    traj: &Trajectory,
    reg: &Regularizer,
    alpha0: &DVector<f64>,
    entropy_constant: Option<f64>,
) -> Result<f64> {
    let data = prepare_step_data(model, traj)?;
    let t_len = data.zs.len();
    let d = model.d();
    let mut total = weights.const_offset + reg.value(model);
    // switching block: cross-entropy of the pairwise posteriors
    for t in 0..t_len {
        let z = &data.zs[t];
        if model.structure.depends_on_mode() {
            for i in 0..d {
                let lp = model.switch_log_probs(z, i)?;
                for jj in 0..d {
                    let w = weights.xi_weights[t][(i, jj)];
                    if w != 0.0 {
                        total -= w * lp[jj];
                    }
                }
            }
        } else {
            let lp = model.switch_log_probs(z, 0)?;
            for jj in 0..d {
                let w = weights.mode_weights[(t, jj)];
                if w != 0.0 {
                    total -= w * lp[jj];
                }
            }
        }
    }
    // emission block with frozen slopes
    for jj in 0..d {
        for t in 0..t_len {
            let v = weights.mode_weights[(t, jj)];
            if v == 0.0 {
                continue;
            }
            let (ell, g) = model.betas[jj].ell_g(&data.ys[t], &data.zs[t])?;
            total += v * (weights.lin_coeffs[(t, jj)] * ell + g);
        }
    }
    if let Some(c_k) = entropy_constant {
        let t_ln_c = t_len as f64 * model.family.ln_c(model.emission_n_y());
        let mut q0 = c_k - t_ln_c;
        for i in 0..d {
            q0 -= weights.pi0[i] * alpha0[i].max(f64::MIN_POSITIVE).ln();
        }
        total += q0;
    }
    Ok(total)
}

/// Analytic gradient of `Q1 + Q2 + r` at the base iterate; by the
/// directional-derivative identity this equals the gradient of the
/// regularized NLL there, and serves as the driver's stationarity measure.
#[derive(Debug, Clone)]
pub struct GradientPack {
    pub theta: Vec<DMatrix<f64>>,
    pub betas: Vec<DVector<f64>>,
}

impl GradientPack {
    pub fn norm(&self) -> f64 {
        let t: f64 = self.theta.iter().map(|m| m.norm_squared()).sum();
        let b: f64 = self.betas.iter().map(|v| v.norm_squared()).sum();
        (t + b).sqrt()
    }

    /// Concatenated layout matching [`ModelParams::flatten_params`].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for m in &self.theta {
            out.extend(m.transpose().as_slice());
        }
        for v in &self.betas {
            out.extend(v.as_slice());
        }
        DVector::from_vec(out)
    }
}

pub fn surrogate_gradient_at_base(
    model: &ModelParams,
    weights: &SurrogateWeights,
    traj: &Trajectory,
    reg: &Regularizer,
) -> Result<GradientPack> {
    if matches!(model.family, FamilyKind::Laplace) {
        return Err(Error::InvalidArgument(
            "surrogate gradient is unsupported for the nonsmooth Laplace family".into(),
        ));
    }
    let data = prepare_step_data(model, traj)?;
    let t_len = data.zs.len();
    let d = model.d();
    // switching gradient
    let mut theta_grads: Vec<DMatrix<f64>> =
        model.theta.iter().map(|th| th * reg.gamma1).collect();
    for t in 0..t_len {
        let zin = model.switch_input(&data.zs[t]);
        for slice in 0..model.theta.len() {
            let lp = model.switch_log_probs(&data.zs[t], slice)?;
            let (mass, labels): (f64, DVector<f64>) = if model.structure.depends_on_mode() {
                let xi = &weights.xi_weights[t];
                (xi.row(slice).iter().sum(), xi.row(slice).transpose())
            } else {
                (1.0, weights.mode_weights.row(t).transpose())
            };
            for jj in 0..d - 1 {
                let coef = mass * lp[jj].exp() - labels[jj];
                if coef != 0.0 {
                    theta_grads[slice].column_mut(jj).axpy(coef, &zin, 1.0);
                }
            }
        }
    }
    // emission gradient
    let mut beta_grads = Vec::with_capacity(d);
    for jj in 0..d {
        let mut grad = reg.r2_grad(&model.betas[jj])?;
        for t in 0..t_len {
            let v = weights.mode_weights[(t, jj)];
            if v == 0.0 {
                continue;
            }
            let (_, _, grad_ell, grad_g, _) =
                model.betas[jj].ell_g_with_grads(&data.ys[t], &data.zs[t])?;
            grad.axpy(v * weights.lin_coeffs[(t, jj)], &grad_ell, 1.0);
            grad.axpy(v, &grad_g, 1.0);
        }
        beta_grads.push(grad);
    }
    Ok(GradientPack {
        theta: theta_grads,
        betas: beta_grads,
    })
}
