//! Switching-system model parameters and exact likelihood evaluation.
//!
//! The model switches among `d` subsystems: the next mode is drawn from a
//! softmax over logits that are linear in the regressor (with a structure
//! selecting which of mode/state the logits depend on), and the next
//! observation is drawn from the emission family of the active mode.
//!
//! Softmax logits are translation invariant, so the parametrization is
//! reduced: each logit matrix has `d - 1` columns and the omitted last
//! column is identically zero.
//!
//! The negative log-likelihood marginalizes the latent mode sequence with a
//! normalized forward recursion; all probabilities are handled in the log
//! domain, with the per-step normalization constants accumulating the NLL.
//! An exponential enumeration oracle is provided for testing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_regressor, RegressorConfig, Trajectory};
use crate::error::{Error, Result};
use crate::families::{log_density, log_sum_exp, sample_emission, EmissionParams, FamilyKind};

/// Guard for the enumeration oracles: `d^(T+1)` must not exceed this.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// Which of (previous mode, regressor) the switching logits depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchStructure {
    /// One shared logit vector; ignores both mode and regressor.
    Static,
    /// One logit vector per previous mode; ignores the regressor.
    ModeDependent,
    /// One shared logit matrix applied to the regressor; ignores the mode.
    StateDependent,
    /// One logit matrix per previous mode, applied to the regressor.
    Full,
}

impl SwitchStructure {
    /// Rows of each stored logit matrix (`1` for the structures that ignore
    /// the regressor, `n_z` otherwise).
    pub fn input_dim(&self, n_z: usize) -> usize {
        match self {
            SwitchStructure::Static | SwitchStructure::ModeDependent => 1,
            SwitchStructure::StateDependent | SwitchStructure::Full => n_z,
        }
    }

    /// Number of stored logit matrices (`1` when shared across modes).
    pub fn slice_count(&self, d: usize) -> usize {
        match self {
            SwitchStructure::Static | SwitchStructure::StateDependent => 1,
            SwitchStructure::ModeDependent | SwitchStructure::Full => d,
        }
    }

    /// Index of the logit matrix used when the previous mode is `i`.
    pub fn slice_index(&self, i: usize) -> usize {
        match self {
            SwitchStructure::Static | SwitchStructure::StateDependent => 0,
            SwitchStructure::ModeDependent | SwitchStructure::Full => i,
        }
    }

    pub fn depends_on_mode(&self) -> bool {
        matches!(self, SwitchStructure::ModeDependent | SwitchStructure::Full)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SwitchStructure::Static => "static",
            SwitchStructure::ModeDependent => "mode_dependent",
            SwitchStructure::StateDependent => "state_dependent",
            SwitchStructure::Full => "full",
        }
    }
}

/// Full parameter pack: switching parameters, emission parameters and the
/// structural metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub structure: SwitchStructure,
    /// Logit matrices, `input_dim x (d-1)` each; see [`SwitchStructure`].
    pub theta: Vec<DMatrix<f64>>,
    pub family: FamilyKind,
    /// Emission parameters, one per mode, all of the same kind and shape.
    pub betas: Vec<EmissionParams>,
    pub cfg: RegressorConfig,
    pub n_y: usize,
    pub n_u: usize,
}

impl ModelParams {
    pub fn d(&self) -> usize {
        self.betas.len()
    }

    pub fn n_z(&self) -> usize {
        self.cfg.n_z(self.n_y, self.n_u)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        let d = self.d();
        if d < 1 {
            return Err(Error::InvalidArgument("model needs at least one mode".into()));
        }
        let n_z = self.n_z();
        if self.theta.len() != self.structure.slice_count(d) {
            return Err(Error::DimensionMismatch {
                context: "theta slice count",
                expected: self.structure.slice_count(d),
                actual: self.theta.len(),
            });
        }
        for th in &self.theta {
            if th.nrows() != self.structure.input_dim(n_z) || th.ncols() != d - 1 {
                return Err(Error::DimensionMismatch {
                    context: "theta shape",
                    expected: self.structure.input_dim(n_z) * (d - 1),
                    actual: th.len(),
                });
            }
        }
        for beta in &self.betas {
            if !beta.kind_matches(&self.family) {
                return Err(Error::InvalidArgument(
                    "emission parameters do not match the family kind".into(),
                ));
            }
            beta.validate()?;
            if beta.n_z() != n_z {
                return Err(Error::DimensionMismatch {
                    context: "emission n_z",
                    expected: n_z,
                    actual: beta.n_z(),
                });
            }
            if beta.n_y() != self.emission_n_y() {
                return Err(Error::DimensionMismatch {
                    context: "emission n_y",
                    expected: self.emission_n_y(),
                    actual: beta.n_y(),
                });
            }
        }
        Ok(())
    }

    /// Observation dimension as seen by the emission family (`1` for the
    /// scalar and categorical families).
    pub fn emission_n_y(&self) -> usize {
        match self.family {
            FamilyKind::Logistic | FamilyKind::Gumbel | FamilyKind::Categorical { .. } => 1,
            _ => self.n_y,
        }
    }

    /// The effective input of the switching logits: the regressor itself, or
    /// the constant `[1]` for the structures that ignore it.
    pub fn switch_input(&self, z: &DVector<f64>) -> DVector<f64> {
        match self.structure {
            SwitchStructure::Static | SwitchStructure::ModeDependent => {
                DVector::from_element(1, 1.0)
            }
            _ => z.clone(),
        }
    }

    /// Logits of the next-mode distribution given regressor `z` and previous
    /// mode `i`; the reduced last entry is the appended zero.
    pub fn switch_logits(&self, z: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        let d = self.d();
        if i >= d {
            return Err(Error::ModeIndex { index: i, d });
        }
        let th = &self.theta[self.structure.slice_index(i)];
        let zin = self.switch_input(z);
        if zin.len() != th.nrows() {
            return Err(Error::DimensionMismatch {
                context: "switch_logits z",
                expected: th.nrows(),
                actual: zin.len(),
            });
        }
        let mut logits = DVector::zeros(d);
        for j in 0..d - 1 {
            logits[j] = th.column(j).dot(&zin);
        }
        Ok(logits)
    }

    /// Log transition row `ln p(next mode | z, previous mode i)`.
    pub fn switch_log_probs(&self, z: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        let mut logits = self.switch_logits(z, i)?;
        let lse = log_sum_exp(logits.as_slice());
        logits.add_scalar_mut(-lse);
        Ok(logits)
    }

    /// Flatten all free parameters (theta slices row-major, then each
    /// mode's emission parameters) for finite differencing.
    pub fn flatten_params(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for th in &self.theta {
            out.extend(th.transpose().as_slice());
        }
        for beta in &self.betas {
            out.extend(beta.flatten().as_slice());
        }
        DVector::from_vec(out)
    }

    /// Rebuild a model of the same shapes from [`flatten_params`] output.
    pub fn with_flat_params(&self, v: &DVector<f64>) -> Result<ModelParams> {
        let mut model = self.clone();
        let mut off = 0;
        for th in &mut model.theta {
            let len = th.len();
            *th = DMatrix::from_row_slice(th.nrows(), th.ncols(), &v.as_slice()[off..off + len]);
            off += len;
        }
        for beta in &mut model.betas {
            let len = beta.dof();
            *beta = beta.unflatten(&DVector::from_column_slice(&v.as_slice()[off..off + len]))?;
            off += len;
        }
        if off != v.len() {
            return Err(Error::DimensionMismatch {
                context: "with_flat_params",
                expected: off,
                actual: v.len(),
            });
        }
        Ok(model)
    }
}

/// Reduce an unreduced `n x d` logit matrix to the canonical `n x (d-1)`
/// form by subtracting the last column (softmax translation invariance).
pub fn reduce_logit_matrix(unreduced: &DMatrix<f64>) -> DMatrix<f64> {
    let d = unreduced.ncols();
    let mut out = DMatrix::zeros(unreduced.nrows(), d - 1);
    for j in 0..d - 1 {
        out.set_column(j, &(unreduced.column(j) - unreduced.column(d - 1)));
    }
    out
}

/// Regularizer weights: a ridge on the switching logits plus per-family
/// emission terms patterned on the Gaussian conjugate-prior form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Regularizer {
    pub const ZERO: Regularizer = Regularizer {
        gamma1: 0.0,
        gamma2: 0.0,
        gamma3: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Switching part: `(gamma1 / 2) * sum of squared logit entries` (each
    /// stored slice counted once).
    pub fn r1(&self, model: &ModelParams) -> f64 {
        0.5 * self.gamma1
            * model
                .theta
                .iter()
                .map(|th| th.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
    }

    /// Emission part; see the per-family forms in the match arms.
    pub fn r2(&self, model: &ModelParams) -> f64 {
        model.betas.iter().map(|b| self.r2_single(b)).sum()
    }

    pub fn r2_single(&self, beta: &EmissionParams) -> f64 {
        match beta {
            EmissionParams::Gaussian { b, lambda } | EmissionParams::StudentT { b, lambda } => {
                let lu = lambda.clone().lu();
                let logdet = lu.determinant().max(f64::MIN_POSITIVE).ln();
                let tr = lambda.diagonal().sum();
                let quad = match lu.try_inverse() {
                    Some(inv) => (b.transpose() * inv * b).diagonal().sum(),
                    None => f64::INFINITY,
                };
                0.5 * (self.gamma2 * (tr - logdet) + self.gamma3 * quad)
            }
            EmissionParams::Laplace { m, r } => {
                let rterm: f64 = r.iter().map(|&v| v - v.max(f64::MIN_POSITIVE).ln()).sum();
                self.gamma2 * rterm + self.gamma3 * m.iter().map(|v| v * v).sum::<f64>()
            }
            EmissionParams::Logistic { b, lambda } | EmissionParams::Gumbel { b, lambda } => {
                self.gamma2 * (lambda - lambda.max(f64::MIN_POSITIVE).ln())
                    + self.gamma3 * b.norm_squared() / lambda
            }
            EmissionParams::Categorical { theta } => {
                0.5 * self.gamma3 * theta.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// Gradient of [`Regularizer::r2_single`] in the flat parameter layout.
    pub fn r2_grad(&self, beta: &EmissionParams) -> Result<DVector<f64>> {
        let mut grad = DVector::zeros(beta.dof());
        match beta {
            EmissionParams::Gaussian { b, lambda } | EmissionParams::StudentT { b, lambda } => {
                let n_y = b.nrows();
                let n_z = b.ncols();
                let inv = lambda
                    .clone()
                    .lu()
                    .try_inverse()
                    .ok_or(Error::NotSpd { context: "lambda" })?;
                let gb = &inv * b; // gamma3 * Λ⁻¹B
                let gl = {
                    let bbt = b * b.transpose();
                    let mut gl = DMatrix::identity(n_y, n_y) * self.gamma2;
                    gl -= &inv * self.gamma2;
                    gl -= (&inv * bbt * &inv) * self.gamma3;
                    gl * 0.5
                };
                for i in 0..n_y {
                    for l in 0..n_z {
                        grad[i * n_z + l] = self.gamma3 * gb[(i, l)];
                    }
                    for j in 0..n_y {
                        grad[n_y * n_z + i * n_y + j] = gl[(i, j)];
                    }
                }
            }
            EmissionParams::Laplace { m, r } => {
                let n_y = m.nrows();
                let n_z = m.ncols();
                for i in 0..n_y {
                    for l in 0..n_z {
                        grad[i * n_z + l] = 2.0 * self.gamma3 * m[(i, l)];
                    }
                    grad[n_y * n_z + i] = self.gamma2 * (1.0 - 1.0 / r[i]);
                }
            }
            EmissionParams::Logistic { b, lambda } | EmissionParams::Gumbel { b, lambda } => {
                let n_z = b.len();
                for l in 0..n_z {
                    grad[l] = 2.0 * self.gamma3 * b[l] / lambda;
                }
                grad[n_z] = self.gamma2 * (1.0 - 1.0 / lambda)
                    - self.gamma3 * b.norm_squared() / (lambda * lambda);
            }
            EmissionParams::Categorical { theta } => {
                let n_classes = theta.ncols();
                for l in 0..theta.nrows() {
                    for j in 0..n_classes {
                        grad[l * n_classes + j] = self.gamma3 * theta[(l, j)];
                    }
                }
            }
        }
        Ok(grad)
    }

    pub fn value(&self, model: &ModelParams) -> f64 {
        self.r1(model) + self.r2(model)
    }
}

pub(crate) fn check_simplex(alpha0: &DVector<f64>, d: usize) -> Result<()> {
    if alpha0.len() != d {
        return Err(Error::DimensionMismatch {
            context: "alpha0",
            expected: d,
            actual: alpha0.len(),
        });
    }
    if alpha0.iter().any(|&v| v < 0.0) || (alpha0.sum() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "alpha0 is not on the probability simplex (sum = {})",
            alpha0.sum()
        )));
    }
    Ok(())
}

/// Per-step log quantities shared by the likelihood and posterior passes:
/// `log_trans[t][(i, j)] = ln p(mode j at t+1 | z_t, mode i at t)` and
/// `log_emit[t][j] = ln p(y_{t+1} | z_t, mode j at t+1)`.
pub(crate) struct LogSteps {
    pub log_trans: Vec<DMatrix<f64>>,
    pub log_emit: Vec<DVector<f64>>,
}

pub(crate) fn compute_log_steps(
    model: &ModelParams,
    traj: &Trajectory,
    with_final_trans: bool,
) -> Result<LogSteps> {
    let t_len = traj.transitions();
    let d = model.d();
    let n_trans = if with_final_trans { t_len + 1 } else { t_len };
    let mut log_trans = Vec::with_capacity(n_trans);
    let mut log_emit = Vec::with_capacity(t_len);
    for t in 0..n_trans {
        let z = build_regressor(traj, &model.cfg, t)?;
        let mut lp = DMatrix::zeros(d, d);
        if model.structure.depends_on_mode() {
            for i in 0..d {
                lp.set_row(i, &model.switch_log_probs(&z, i)?.transpose());
            }
        } else {
            let row = model.switch_log_probs(&z, 0)?.transpose();
            for i in 0..d {
                lp.set_row(i, &row);
            }
        }
        log_trans.push(lp);
        if t < t_len {
            let y_next = traj.y.row(t + 1).transpose();
            let mut le = DVector::zeros(d);
            for j in 0..d {
                le[j] = log_density(&model.family, &model.betas[j], &y_next, &z)?;
            }
            log_emit.push(le);
        }
    }
    Ok(LogSteps {
        log_trans,
        log_emit,
    })
}

/// Negative log-likelihood of the trajectory with modes marginalized out.
///
/// The constant `ln p(z_0)` is dropped; the mode prior enters through
/// `alpha0`. Returns an error naming the time index if the recursion
/// produces a non-finite value.
pub fn nll(model: &ModelParams, traj: &Trajectory, alpha0: &DVector<f64>) -> Result<f64> {
    let d = model.d();
    check_simplex(alpha0, d)?;
    let steps = compute_log_steps(model, traj, false)?;
    let mut log_alpha: Vec<f64> = alpha0.iter().map(|&a| a.max(f64::MIN_POSITIVE).ln()).collect();
    let mut total = 0.0;
    let mut scratch = vec![0.0; d];
    let mut log_q = vec![0.0; d];
    for t in 0..traj.transitions() {
        let lp = &steps.log_trans[t];
        let le = &steps.log_emit[t];
        for j in 0..d {
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = log_alpha[i] + lp[(i, j)];
            }
            log_q[j] = log_sum_exp(&scratch) + le[j];
        }
        let norm = log_sum_exp(&log_q);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "forward recursion",
                t: t + 1,
            });
        }
        for j in 0..d {
            log_alpha[j] = log_q[j] - norm;
        }
        total += norm;
    }
    Ok(-total)
}

/// Regularized NLL: `nll + r1(theta) + r2(beta)`.
pub fn reg_nll(
    model: &ModelParams,
    traj: &Trajectory,
    alpha0: &DVector<f64>,
    reg: &Regularizer,
) -> Result<f64> {
    Ok(nll(model, traj, alpha0)? + reg.value(model))
}

/// Log of the joint density of the observations and a fixed mode sequence,
/// with the constant mode/state prior dropped.
pub fn log_joint_fixed_modes(
    model: &ModelParams,
    traj: &Trajectory,
    modes: &[usize],
) -> Result<f64> {
    let t_len = traj.transitions();
    if modes.len() != t_len + 1 {
        return Err(Error::DimensionMismatch {
            context: "mode sequence length",
            expected: t_len + 1,
            actual: modes.len(),
        });
    }
    let d = model.d();
    if let Some(&bad) = modes.iter().find(|&&m| m >= d) {
        return Err(Error::ModeIndex { index: bad, d });
    }
    let mut total = 0.0;
    for t in 0..t_len {
        let z = build_regressor(traj, &model.cfg, t)?;
        let y_next = traj.y.row(t + 1).transpose();
        total += model.switch_log_probs(&z, modes[t])?[modes[t + 1]];
        total += log_density(&model.family, &model.betas[modes[t + 1]], &y_next, &z)?;
    }
    Ok(total)
}

pub(crate) fn enumeration_size(d: usize, t_plus_1: usize) -> Result<()> {
    let size = (d as f64).powi(t_plus_1 as i32);
    if size > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Iterate all mode sequences of the given length (testing oracles only).
pub(crate) fn for_each_mode_sequence<F: FnMut(&[usize]) -> Result<()>>(
    d: usize,
    len: usize,
    mut f: F,
) -> Result<()> {
    let mut seq = vec![0usize; len];
    loop {
        f(&seq)?;
        let mut pos = len;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            seq[pos] += 1;
            if seq[pos] < d {
                break;
            }
            seq[pos] = 0;
        }
    }
}

/// NLL by exact log-sum-exp over all mode sequences; testing oracle only.
pub fn nll_bruteforce(
    model: &ModelParams,
    traj: &Trajectory,
    alpha0: &DVector<f64>,
) -> Result<f64> {
    let d = model.d();
    check_simplex(alpha0, d)?;
    let t_len = traj.transitions();
    enumeration_size(d, t_len + 1)?;
    let mut terms = Vec::new();
    for_each_mode_sequence(d, t_len + 1, |modes| {
        let lj = log_joint_fixed_modes(model, traj, modes)?;
        terms.push(lj + alpha0[modes[0]].max(f64::MIN_POSITIVE).ln());
        Ok(())
    })?;
    Ok(-log_sum_exp(&terms))
}

pub(crate) fn sample_categorical<R: Rng>(probs: &DVector<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

/// Simulate a trajectory of `t_len + 1` observations from the model.
///
/// `z0` is the stacked regressor window at time 0 (its first observation
/// block becomes `y_0`); `u` supplies exogenous inputs for all `t_len + 1`
/// steps when the regressor uses them. Returns the trajectory and the latent
/// mode sequence for diagnostics.
pub fn simulate<R: Rng>(
    model: &ModelParams,
    z0: &DVector<f64>,
    u: Option<&DMatrix<f64>>,
    t_len: usize,
    xi0_dist: &DVector<f64>,
    rng: &mut R,
) -> Result<(Trajectory, Vec<usize>)> {
    let d = model.d();
    check_simplex(xi0_dist, d)?;
    let n_z = model.n_z();
    if z0.len() != n_z {
        return Err(Error::DimensionMismatch {
            context: "simulate z0",
            expected: n_z,
            actual: z0.len(),
        });
    }
    if model.cfg.t_u > 0 {
        match u {
            None => {
                return Err(Error::InvalidArgument(
                    "model uses exogenous inputs but none were supplied".into(),
                ))
            }
            Some(u) if u.nrows() != t_len + 1 => {
                return Err(Error::DimensionMismatch {
                    context: "simulate u rows",
                    expected: t_len + 1,
                    actual: u.nrows(),
                });
            }
            _ => {}
        }
    }
    let n_y = model.n_y;
    let mut traj = Trajectory {
        y: DMatrix::zeros(t_len + 1, n_y),
        u: u.cloned(),
        z0: Some(z0.clone()),
    };
    if model.cfg.t_y > 0 {
        for c in 0..n_y {
            traj.y[(0, c)] = z0[c];
        }
    }
    let mut modes = Vec::with_capacity(t_len + 1);
    modes.push(sample_categorical(xi0_dist, rng));
    for t in 0..t_len {
        let z = build_regressor(&traj, &model.cfg, t)?;
        let log_probs = model.switch_log_probs(&z, modes[t])?;
        let probs = DVector::from_iterator(d, log_probs.iter().map(|lp| lp.exp()));
        let next = sample_categorical(&probs, rng);
        modes.push(next);
        let y_next = sample_emission(&model.family, &model.betas[next], &z, rng)?;
        for c in 0..n_y.min(y_next.len()) {
            traj.y[(t + 1, c)] = y_next[c];
        }
    }
    Ok((traj, modes))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Random small model of any family/structure, with a matching random
    /// trajectory (observations drawn loosely so posteriors are non-trivial).
    pub fn random_model(
        structure: SwitchStructure,
        family: FamilyKind,
        d: usize,
        t_len: usize,
        seed: u64,
    ) -> (ModelParams, Trajectory, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut randn = |scale: f64| -> f64 {
            let u: f64 = rng.sample(StandardNormal);
            scale * u
        };
        let n_y = match family {
            FamilyKind::Gaussian | FamilyKind::StudentT { .. } | FamilyKind::Laplace => 2,
            _ => 1,
        };
        let cfg = RegressorConfig {
            t_y: 1,
            t_u: 0,
            include_bias: true,
        };
        let n_z = cfg.n_z(n_y, 0);
        let betas = (0..d)
            .map(|_| match family {
                FamilyKind::Gaussian | FamilyKind::StudentT { .. } => {
                    let b = DMatrix::from_fn(n_y, n_z, |_, _| randn(0.8));
                    let a = DMatrix::from_fn(n_y, n_y, |_, _| randn(0.3));
                    let lambda = &a * a.transpose() + DMatrix::identity(n_y, n_y);
                    if matches!(family, FamilyKind::Gaussian) {
                        EmissionParams::Gaussian { b, lambda }
                    } else {
                        EmissionParams::StudentT { b, lambda }
                    }
                }
                FamilyKind::Laplace => EmissionParams::Laplace {
                    m: DMatrix::from_fn(n_y, n_z, |_, _| randn(0.8)),
                    r: DVector::from_fn(n_y, |_, _| 0.6 + randn(0.2).abs()),
                },
                FamilyKind::Logistic => EmissionParams::Logistic {
                    b: DVector::from_fn(n_z, |_, _| randn(0.8)),
                    lambda: 0.7 + randn(0.3).abs(),
                },
                FamilyKind::Gumbel => EmissionParams::Gumbel {
                    b: DVector::from_fn(n_z, |_, _| randn(0.5)),
                    lambda: 0.7 + randn(0.3).abs(),
                },
                FamilyKind::Categorical { n_classes } => EmissionParams::Categorical {
                    theta: DMatrix::from_fn(n_z, n_classes, |_, _| randn(0.8)),
                },
            })
            .collect::<Vec<_>>();
        let theta = (0..structure.slice_count(d))
            .map(|_| DMatrix::from_fn(structure.input_dim(n_z), d - 1, |_, _| randn(0.7)))
            .collect();
        let model = ModelParams {
            structure,
            theta,
            family,
            betas,
            cfg,
            n_y,
            n_u: 0,
        };
        model.validate().unwrap();
        let y = match family {
            FamilyKind::Categorical { n_classes } => DMatrix::from_fn(t_len + 1, 1, |_, _| {
                rng.random_range(0..n_classes) as f64
            }),
            _ => DMatrix::from_fn(t_len + 1, n_y, |_, _| {
                let u: f64 = rng.sample(StandardNormal);
                u
            }),
        };
        let traj = Trajectory { y, u: None, z0: None };
        let mut alpha0 = DVector::from_fn(d, |_, _| rng.random_range(0.1..1.0f64));
        alpha0 /= alpha0.sum();
        (model, traj, alpha0)
    }

    pub fn all_structures() -> [SwitchStructure; 4] {
        [
            SwitchStructure::Static,
            SwitchStructure::ModeDependent,
            SwitchStructure::StateDependent,
            SwitchStructure::Full,
        ]
    }

    pub fn all_families() -> Vec<FamilyKind> {
        vec![
            FamilyKind::Gaussian,
            FamilyKind::StudentT { nu: 4.0 },
            FamilyKind::Laplace,
            FamilyKind::Logistic,
            FamilyKind::Gumbel,
            FamilyKind::Categorical { n_classes: 3 },
        ]
    }
}
