//! Emission families for the per-mode observation model.
//!
//! Each family specifies the conditional density of the next observation given
//! the regressor `z` and the active mode, in the composite form
//!
//! ```text
//!   p(y | z) = C * exp(-f(ell(y, z, beta)) - g(y, z, beta))
//! ```
//!
//! where `beta ↦ ell` and `beta ↦ g` are convex, and `f` is concave and
//! strictly increasing with derivative bounded by `u_bar`. Parameters are
//! stored in the transformed coordinates in which `ell` and `g` are convex
//! (`B = Λ L`, `Λ = Σ⁻¹` for Gaussian/Student-t, `M = R L`, `R = Σ^{-1/2}`
//! for Laplace, `b = λ a`, `λ = ς⁻¹` for the scalar families); conversion
//! back to natural coordinates is provided as a utility.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Margin used to keep `ell` values inside the open domain of `f`.
const DOMAIN_MARGIN: f64 = 1e-12;

/// Selector for the emission distribution shared by all modes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    Gaussian,
    /// Student's t with fixed degrees of freedom `nu` (a hyperparameter,
    /// never optimized).
    StudentT { nu: f64 },
    Laplace,
    Logistic,
    Gumbel,
    Categorical { n_classes: usize },
}

impl FamilyKind {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::StudentT { .. } => "student_t",
            FamilyKind::Laplace => "laplace",
            FamilyKind::Logistic => "logistic",
            FamilyKind::Gumbel => "gumbel",
            FamilyKind::Categorical { .. } => "categorical",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FamilyKind::StudentT { nu } if !(*nu > 0.0) => Err(Error::NotPositive {
                name: "nu",
                value: *nu,
            }),
            FamilyKind::Categorical { n_classes } if *n_classes < 2 => Err(
                Error::InvalidArgument(format!("n_classes must be >= 2, got {n_classes}")),
            ),
            _ => Ok(()),
        }
    }

    /// Value and derivative of the concave link `f` at `x`.
    ///
    /// `n_y` is the observation dimension (it enters the Student-t link).
    pub fn f_value_and_derivative(&self, n_y: usize, x: f64) -> Result<(f64, f64)> {
        match self {
            FamilyKind::Gaussian | FamilyKind::Gumbel | FamilyKind::Categorical { .. } => {
                Ok((x, 1.0))
            }
            FamilyKind::StudentT { nu } => {
                if x <= -nu / 2.0 {
                    return Err(Error::DomainViolation {
                        family: "student_t",
                        value: x,
                        bound: "x > -nu/2",
                    });
                }
                let a = (nu + n_y as f64) / 2.0;
                Ok((a * (1.0 + 2.0 * x / nu).ln(), 2.0 * a / (nu + 2.0 * x)))
            }
            FamilyKind::Laplace => Ok((std::f64::consts::SQRT_2 * x, std::f64::consts::SQRT_2)),
            FamilyKind::Logistic => {
                if x <= 0.0 {
                    return Err(Error::DomainViolation {
                        family: "logistic",
                        value: x,
                        bound: "x > 0",
                    });
                }
                Ok((2.0 * x.ln(), 2.0 / x))
            }
        }
    }

    /// Upper bound `u_bar` on `f'` over the reachable values of `ell`
    /// (`ell >= 0` for Student-t, `ell >= 1` for logistic).
    pub fn derivative_bound(&self, n_y: usize) -> f64 {
        match self {
            FamilyKind::Gaussian | FamilyKind::Gumbel | FamilyKind::Categorical { .. } => 1.0,
            FamilyKind::StudentT { nu } => (nu + n_y as f64) / nu,
            FamilyKind::Laplace => std::f64::consts::SQRT_2,
            FamilyKind::Logistic => 2.0,
        }
    }

    /// Clamp an `ell` value to the open domain of `f`, guarding against
    /// boundary values produced by round-off.
    pub fn clamp_to_domain(&self, ell: f64) -> f64 {
        match self {
            FamilyKind::StudentT { nu } => ell.max(-nu / 2.0 + DOMAIN_MARGIN),
            FamilyKind::Logistic => ell.max(DOMAIN_MARGIN),
            _ => ell,
        }
    }

    /// Log of the parameter-invariant constant `C`.
    pub fn ln_c(&self, n_y: usize) -> f64 {
        let ny = n_y as f64;
        match self {
            FamilyKind::Gaussian => -0.5 * ny * (2.0 * std::f64::consts::PI).ln(),
            FamilyKind::StudentT { nu } => {
                ln_gamma((nu + ny) / 2.0)
                    - ln_gamma(nu / 2.0)
                    - 0.5 * ny * (std::f64::consts::PI * nu).ln()
            }
            FamilyKind::Laplace => -0.5 * ny * 2.0_f64.ln(),
            FamilyKind::Logistic => -4.0_f64.ln(),
            FamilyKind::Gumbel => 0.0,
            FamilyKind::Categorical { .. } => 0.0,
        }
    }
}

/// Per-mode emission parameters, one variant per [`FamilyKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EmissionParams {
    /// `B` is `n_y x n_z`, `Λ` is `n_y x n_y` symmetric positive definite.
    Gaussian {
        b: DMatrix<f64>,
        lambda: DMatrix<f64>,
    },
    StudentT {
        b: DMatrix<f64>,
        lambda: DMatrix<f64>,
    },
    /// `M` is `n_y x n_z`, `r` holds the strictly positive diagonal of `R`.
    Laplace { m: DMatrix<f64>, r: DVector<f64> },
    Logistic { b: DVector<f64>, lambda: f64 },
    Gumbel { b: DVector<f64>, lambda: f64 },
    /// `theta` is `n_z x n_classes`.
    Categorical { theta: DMatrix<f64> },
}

/// Natural parameters recovered from the transformed coordinates.
#[derive(Debug, Clone)]
pub enum NaturalParams {
    /// Location map `L` and covariance `Σ` (Gaussian / Student-t / Laplace).
    LocationScale { l: DMatrix<f64>, sigma: DMatrix<f64> },
    /// Location coefficients `a` and scale `ς` for the scalar families.
    ScalarLocationScale { a: DVector<f64>, scale: f64 },
    /// Class-logit matrix (categorical; already natural).
    Logits(DMatrix<f64>),
}

fn lu_inv_logdet(mat: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let lu = mat.clone().lu();
    let det = lu.determinant();
    if !det.is_finite() || det <= 0.0 {
        return Err(Error::NotSpd { context: "lambda" });
    }
    let inv = lu.try_inverse().ok_or(Error::NotSpd { context: "lambda" })?;
    Ok((inv, det.ln()))
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_dims(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

impl EmissionParams {
    pub fn kind_matches(&self, kind: &FamilyKind) -> bool {
        matches!(
            (self, kind),
            (EmissionParams::Gaussian { .. }, FamilyKind::Gaussian)
                | (EmissionParams::StudentT { .. }, FamilyKind::StudentT { .. })
                | (EmissionParams::Laplace { .. }, FamilyKind::Laplace)
                | (EmissionParams::Logistic { .. }, FamilyKind::Logistic)
                | (EmissionParams::Gumbel { .. }, FamilyKind::Gumbel)
                | (EmissionParams::Categorical { .. }, FamilyKind::Categorical { .. })
        )
    }

    pub fn n_y(&self) -> usize {
        match self {
            EmissionParams::Gaussian { b, .. } | EmissionParams::StudentT { b, .. } => b.nrows(),
            EmissionParams::Laplace { m, .. } => m.nrows(),
            EmissionParams::Logistic { .. }
            | EmissionParams::Gumbel { .. }
            | EmissionParams::Categorical { .. } => 1,
        }
    }

    pub fn n_z(&self) -> usize {
        match self {
            EmissionParams::Gaussian { b, .. } | EmissionParams::StudentT { b, .. } => b.ncols(),
            EmissionParams::Laplace { m, .. } => m.ncols(),
            EmissionParams::Logistic { b, .. } | EmissionParams::Gumbel { b, .. } => b.len(),
            EmissionParams::Categorical { theta } => theta.nrows(),
        }
    }

    /// Check the positivity/SPD invariants (smallest eigenvalue or diagonal
    /// entry strictly positive).
    pub fn validate(&self) -> Result<()> {
        match self {
            EmissionParams::Gaussian { lambda, .. } | EmissionParams::StudentT { lambda, .. } => {
                let eig = lambda.clone().symmetric_eigen();
                if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
                    return Err(Error::NotSpd { context: "lambda" });
                }
                Ok(())
            }
            EmissionParams::Laplace { r, .. } => {
                if let Some(&bad) = r.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::NotPositive {
                        name: "r diagonal",
                        value: bad,
                    });
                }
                Ok(())
            }
            EmissionParams::Logistic { lambda, .. } | EmissionParams::Gumbel { lambda, .. } => {
                if *lambda <= 0.0 {
                    return Err(Error::NotPositive {
                        name: "lambda",
                        value: *lambda,
                    });
                }
                Ok(())
            }
            EmissionParams::Categorical { .. } => Ok(()),
        }
    }

    /// Recover the natural parameters: `L = Λ⁻¹ B`, `Σ = Λ⁻¹` for
    /// Gaussian/Student-t, `L = R⁻¹ M`, `Σ = R⁻²` for Laplace, and
    /// `a = b / λ`, `ς = 1/λ` for the scalar families.
    pub fn natural(&self) -> Result<NaturalParams> {
        match self {
            EmissionParams::Gaussian { b, lambda } | EmissionParams::StudentT { b, lambda } => {
                let (inv, _) = lu_inv_logdet(lambda)?;
                Ok(NaturalParams::LocationScale {
                    l: &inv * b,
                    sigma: inv,
                })
            }
            EmissionParams::Laplace { m, r } => {
                let mut l = m.clone();
                let mut sigma = DMatrix::zeros(r.len(), r.len());
                for i in 0..r.len() {
                    if r[i] <= 0.0 {
                        return Err(Error::NotPositive {
                            name: "r diagonal",
                            value: r[i],
                        });
                    }
                    let row = l.row(i) / r[i];
                    l.set_row(i, &row);
                    sigma[(i, i)] = 1.0 / (r[i] * r[i]);
                }
                Ok(NaturalParams::LocationScale { l, sigma })
            }
            EmissionParams::Logistic { b, lambda } | EmissionParams::Gumbel { b, lambda } => {
                Ok(NaturalParams::ScalarLocationScale {
                    a: b / *lambda,
                    scale: 1.0 / *lambda,
                })
            }
            EmissionParams::Categorical { theta } => Ok(NaturalParams::Logits(theta.clone())),
        }
    }

    /// Conditional mean location `L z` (class probabilities for categorical).
    pub fn location(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        match self.natural()? {
            NaturalParams::LocationScale { l, .. } => Ok(&l * z),
            NaturalParams::ScalarLocationScale { a, .. } => {
                Ok(DVector::from_element(1, a.dot(z)))
            }
            NaturalParams::Logits(theta) => {
                let logits: Vec<f64> = (0..theta.ncols())
                    .map(|j| theta.column(j).dot(z))
                    .collect();
                let lse = log_sum_exp(&logits);
                Ok(DVector::from_iterator(
                    logits.len(),
                    logits.iter().map(|l| (l - lse).exp()),
                ))
            }
        }
    }

    /// Total number of flattened scalar parameters.
    pub fn dof(&self) -> usize {
        match self {
            EmissionParams::Gaussian { b, lambda } | EmissionParams::StudentT { b, lambda } => {
                b.len() + lambda.len()
            }
            EmissionParams::Laplace { m, r } => m.len() + r.len(),
            EmissionParams::Logistic { b, .. } | EmissionParams::Gumbel { b, .. } => b.len() + 1,
            EmissionParams::Categorical { theta } => theta.len(),
        }
    }

    /// Flatten into a vector (matrices row-major, scale parameters last).
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.dof());
        match self {
            EmissionParams::Gaussian { b, lambda } | EmissionParams::StudentT { b, lambda } => {
                out.extend(b.transpose().as_slice());
                out.extend(lambda.transpose().as_slice());
            }
            EmissionParams::Laplace { m, r } => {
                out.extend(m.transpose().as_slice());
                out.extend(r.as_slice());
            }
            EmissionParams::Logistic { b, lambda } | EmissionParams::Gumbel { b, lambda } => {
                out.extend(b.as_slice());
                out.push(*lambda);
            }
            EmissionParams::Categorical { theta } => {
                out.extend(theta.transpose().as_slice());
            }
        }
        DVector::from_vec(out)
    }

    /// Rebuild parameters of the same variant and shapes from a flat vector.
    pub fn unflatten(&self, v: &DVector<f64>) -> Result<EmissionParams> {
        check_dims("unflatten", self.dof(), v.len())?;
        let row_major = |rows: usize, cols: usize, data: &[f64]| {
            DMatrix::from_row_slice(rows, cols, data)
        };
        Ok(match self {
            EmissionParams::Gaussian { b, lambda } => EmissionParams::Gaussian {
                b: row_major(b.nrows(), b.ncols(), &v.as_slice()[..b.len()]),
                lambda: row_major(lambda.nrows(), lambda.ncols(), &v.as_slice()[b.len()..]),
            },
            EmissionParams::StudentT { b, lambda } => EmissionParams::StudentT {
                b: row_major(b.nrows(), b.ncols(), &v.as_slice()[..b.len()]),
                lambda: row_major(lambda.nrows(), lambda.ncols(), &v.as_slice()[b.len()..]),
            },
            EmissionParams::Laplace { m, .. } => EmissionParams::Laplace {
                m: row_major(m.nrows(), m.ncols(), &v.as_slice()[..m.len()]),
                r: DVector::from_column_slice(&v.as_slice()[m.len()..]),
            },
            EmissionParams::Logistic { b, .. } => EmissionParams::Logistic {
                b: DVector::from_column_slice(&v.as_slice()[..b.len()]),
                lambda: v[b.len()],
            },
            EmissionParams::Gumbel { b, .. } => EmissionParams::Gumbel {
                b: DVector::from_column_slice(&v.as_slice()[..b.len()]),
                lambda: v[b.len()],
            },
            EmissionParams::Categorical { theta } => EmissionParams::Categorical {
                theta: row_major(theta.nrows(), theta.ncols(), v.as_slice()),
            },
        })
    }

    /// Evaluate `(ell, g)` at observation `y` and regressor `z`.
    pub fn ell_g(&self, y: &DVector<f64>, z: &DVector<f64>) -> Result<(f64, f64)> {
        check_dims("ell_g y", self.n_y(), y.len())?;
        check_dims("ell_g z", self.n_z(), z.len())?;
        match self {
            EmissionParams::Gaussian { b, lambda } => {
                let bz = b * z;
                let (lambda_inv, logdet) = lu_inv_logdet(lambda)?;
                let ell = 0.5 * y.dot(&(lambda * y)) - y.dot(&bz);
                let g = 0.5 * (bz.dot(&(&lambda_inv * &bz)) - logdet);
                Ok((ell, g))
            }
            EmissionParams::StudentT { b, lambda } => {
                let r = lambda * y - b * z;
                let (lambda_inv, logdet) = lu_inv_logdet(lambda)?;
                let ell = 0.5 * r.dot(&(&lambda_inv * &r));
                Ok((ell, -0.5 * logdet))
            }
            EmissionParams::Laplace { m, r } => {
                let mut ell = 0.0;
                let mut g = 0.0;
                let mz = m * z;
                for i in 0..r.len() {
                    if r[i] <= 0.0 {
                        return Err(Error::NotPositive {
                            name: "r diagonal",
                            value: r[i],
                        });
                    }
                    ell += (r[i] * y[i] - mz[i]).abs();
                    g -= r[i].ln();
                }
                Ok((ell, g))
            }
            EmissionParams::Logistic { b, lambda } => {
                if *lambda <= 0.0 {
                    return Err(Error::NotPositive {
                        name: "lambda",
                        value: *lambda,
                    });
                }
                let s = 0.5 * (lambda * y[0] - b.dot(z));
                Ok((s.cosh(), -lambda.ln()))
            }
            EmissionParams::Gumbel { b, lambda } => {
                if *lambda <= 0.0 {
                    return Err(Error::NotPositive {
                        name: "lambda",
                        value: *lambda,
                    });
                }
                let u = -lambda * y[0] + b.dot(z);
                Ok((u.exp(), -lambda.ln() - u))
            }
            EmissionParams::Categorical { theta } => {
                let class = class_index(y[0], theta.ncols())?;
                let logits: Vec<f64> = (0..theta.ncols())
                    .map(|j| theta.column(j).dot(z))
                    .collect();
                Ok((-logits[class], log_sum_exp(&logits)))
            }
        }
    }

    /// `(ell, g)` together with their gradients in the [`flatten`] layout.
    ///
    /// For Laplace the `ell` gradient is a subgradient of the l1 composite
    /// (zero chosen at kinks); the returned flag is true when any kink was
    /// active.
    pub fn ell_g_with_grads(
        &self,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> Result<(f64, f64, DVector<f64>, DVector<f64>, bool)> {
        let (ell, g) = self.ell_g(y, z)?;
        let mut grad_ell = DVector::zeros(self.dof());
        let mut grad_g = DVector::zeros(self.dof());
        let mut subgradient = false;
        match self {
            EmissionParams::Gaussian { b, lambda } => {
                let n_y = b.nrows();
                let n_z = b.ncols();
                let bz = b * z;
                let (lambda_inv, _) = lu_inv_logdet(lambda)?;
                let u = &lambda_inv * &bz;
                // ell = 0.5 y'Λy - y'Bz
                for i in 0..n_y {
                    for l in 0..n_z {
                        grad_ell[i * n_z + l] = -y[i] * z[l];
                    }
                    for j in 0..n_y {
                        grad_ell[n_y * n_z + i * n_y + j] = 0.5 * y[i] * y[j];
                    }
                }
                // g = 0.5 ((Bz)'Λ⁻¹(Bz) - ln det Λ)
                for i in 0..n_y {
                    for l in 0..n_z {
                        grad_g[i * n_z + l] = u[i] * z[l];
                    }
                    for j in 0..n_y {
                        grad_g[n_y * n_z + i * n_y + j] =
                            -0.5 * (u[i] * u[j] + lambda_inv[(i, j)]);
                    }
                }
            }
            EmissionParams::StudentT { b, lambda } => {
                let n_y = b.nrows();
                let n_z = b.ncols();
                let (lambda_inv, _) = lu_inv_logdet(lambda)?;
                let e = y - &lambda_inv * (b * z);
                for i in 0..n_y {
                    for l in 0..n_z {
                        grad_ell[i * n_z + l] = -e[i] * z[l];
                    }
                    for j in 0..n_y {
                        grad_ell[n_y * n_z + i * n_y + j] = e[i] * y[j] - 0.5 * e[i] * e[j];
                        grad_g[n_y * n_z + i * n_y + j] = -0.5 * lambda_inv[(i, j)];
                    }
                }
            }
            EmissionParams::Laplace { m, r } => {
                let n_y = m.nrows();
                let n_z = m.ncols();
                let mz = m * z;
                for i in 0..n_y {
                    let resid = r[i] * y[i] - mz[i];
                    let s = if resid > 0.0 {
                        1.0
                    } else if resid < 0.0 {
                        -1.0
                    } else {
                        subgradient = true;
                        0.0
                    };
                    for l in 0..n_z {
                        grad_ell[i * n_z + l] = -s * z[l];
                    }
                    grad_ell[n_y * n_z + i] = s * y[i];
                    grad_g[n_y * n_z + i] = -1.0 / r[i];
                }
            }
            EmissionParams::Logistic { b, lambda } => {
                let n_z = b.len();
                let s = 0.5 * (lambda * y[0] - b.dot(z));
                let sh = s.sinh();
                for l in 0..n_z {
                    grad_ell[l] = -0.5 * sh * z[l];
                }
                grad_ell[n_z] = 0.5 * sh * y[0];
                grad_g[n_z] = -1.0 / lambda;
            }
            EmissionParams::Gumbel { b, lambda } => {
                let n_z = b.len();
                let eu = ell; // ell = exp(u)
                for l in 0..n_z {
                    grad_ell[l] = eu * z[l];
                    grad_g[l] = -z[l];
                }
                grad_ell[n_z] = -eu * y[0];
                grad_g[n_z] = y[0] - 1.0 / lambda;
            }
            EmissionParams::Categorical { theta } => {
                let n_z = theta.nrows();
                let n_classes = theta.ncols();
                let class = class_index(y[0], n_classes)?;
                let logits: Vec<f64> = (0..n_classes)
                    .map(|j| theta.column(j).dot(z))
                    .collect();
                let lse = log_sum_exp(&logits);
                for l in 0..n_z {
                    grad_ell[l * n_classes + class] = -z[l];
                    for j in 0..n_classes {
                        grad_g[l * n_classes + j] = (logits[j] - lse).exp() * z[l];
                    }
                }
            }
        }
        Ok((ell, g, grad_ell, grad_g, subgradient))
    }
}

fn class_index(y: f64, n_classes: usize) -> Result<usize> {
    let class = y.round();
    if !(0.0..n_classes as f64).contains(&class) || (y - class).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "categorical observation {y} is not a class index in 0..{n_classes}"
        )));
    }
    Ok(class as usize)
}

/// Log density `ln C - f(ell) - g` of the observation under the family.
pub fn log_density(
    kind: &FamilyKind,
    params: &EmissionParams,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    let (ell, g) = params.ell_g(y, z)?;
    let (f, _) = kind.f_value_and_derivative(params.n_y(), kind.clamp_to_domain(ell))?;
    Ok(kind.ln_c(params.n_y()) - f - g)
}

/// Draw one observation from the family at regressor `z`.
///
/// Mutates only the caller-supplied generator, so the sequence is
/// reproducible for a fixed seed.
pub fn sample_emission<R: Rng>(
    kind: &FamilyKind,
    params: &EmissionParams,
    z: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    params.validate()?;
    check_dims("sample z", params.n_z(), z.len())?;
    match (kind, params) {
        (FamilyKind::Gaussian, EmissionParams::Gaussian { b, lambda }) => {
            let (sigma, _) = lu_inv_logdet(lambda)?;
            let mu = &sigma * (b * z);
            let chol = sigma
                .cholesky()
                .ok_or(Error::NotSpd { context: "sigma" })?;
            let eps = DVector::from_fn(mu.len(), |_, _| rng.sample(StandardNormal));
            Ok(mu + chol.l() * eps)
        }
        (FamilyKind::StudentT { nu }, EmissionParams::StudentT { b, lambda }) => {
            let (sigma, _) = lu_inv_logdet(lambda)?;
            let mu = &sigma * (b * z);
            let chol = sigma
                .cholesky()
                .ok_or(Error::NotSpd { context: "sigma" })?;
            let eps = DVector::from_fn(mu.len(), |_, _| rng.sample(StandardNormal));
            let chi = ChiSquared::new(*nu).map_err(|e| Error::Numeric(e.to_string()))?;
            let w: f64 = chi.sample(rng);
            Ok(mu + chol.l() * eps * (nu / w).sqrt())
        }
        (FamilyKind::Laplace, EmissionParams::Laplace { m, r }) => {
            let mz = m * z;
            let mut y = DVector::zeros(r.len());
            for i in 0..r.len() {
                let scale = 1.0 / (std::f64::consts::SQRT_2 * r[i]);
                let u: f64 = rng.random_range(-0.5..0.5);
                let draw = -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                y[i] = mz[i] / r[i] + draw;
            }
            Ok(y)
        }
        (FamilyKind::Logistic, EmissionParams::Logistic { b, lambda }) => {
            let mu = b.dot(z) / lambda;
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            Ok(DVector::from_element(1, mu + (u / (1.0 - u)).ln() / lambda))
        }
        (FamilyKind::Gumbel, EmissionParams::Gumbel { b, lambda }) => {
            let mu = b.dot(z) / lambda;
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            Ok(DVector::from_element(1, mu - (-u.ln()).ln() / lambda))
        }
        (FamilyKind::Categorical { n_classes }, EmissionParams::Categorical { theta }) => {
            check_dims("sample n_classes", *n_classes, theta.ncols())?;
            let probs = params.location(z)?;
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut class = *n_classes - 1;
            for j in 0..*n_classes {
                acc += probs[j];
                if u < acc {
                    class = j;
                    break;
                }
            }
            Ok(DVector::from_element(1, class as f64))
        }
        _ => Err(Error::InvalidArgument(
            "emission parameters do not match the family kind".into(),
        )),
    }
}

/// Symmetrize in place, controlling drift after repeated updates.
pub fn symmetrize(mat: &mut DMatrix<f64>) {
    let sym = (mat.clone() + mat.transpose()) * 0.5;
    *mat = sym;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn all_kinds() -> Vec<FamilyKind> {
        vec![
            FamilyKind::Gaussian,
            FamilyKind::StudentT { nu: 3.0 },
            FamilyKind::Laplace,
            FamilyKind::Logistic,
            FamilyKind::Gumbel,
            FamilyKind::Categorical { n_classes: 3 },
        ]
    }

    /// Random well-conditioned parameters for a family (n_y = 2 for the
    /// matrix families, scalar otherwise), n_z = 3.
    fn random_params(kind: &FamilyKind, rng: &mut ChaCha8Rng) -> EmissionParams {
        let n_z = 3;
        let mut randn = |scale: f64| -> f64 {
            let u: f64 = rng.sample(StandardNormal);
            scale * u
        };
        match kind {
            FamilyKind::Gaussian | FamilyKind::StudentT { .. } => {
                let n_y = 2;
                let b = DMatrix::from_fn(n_y, n_z, |_, _| randn(1.0));
                let a = DMatrix::from_fn(n_y, n_y, |_, _| randn(0.4));
                let lambda = &a * a.transpose() + DMatrix::identity(n_y, n_y);
                if matches!(kind, FamilyKind::Gaussian) {
                    EmissionParams::Gaussian { b, lambda }
                } else {
                    EmissionParams::StudentT { b, lambda }
                }
            }
            FamilyKind::Laplace => EmissionParams::Laplace {
                m: DMatrix::from_fn(2, n_z, |_, _| randn(1.0)),
                r: DVector::from_fn(2, |_, _| 0.5 + randn(0.2).abs()),
            },
            FamilyKind::Logistic => EmissionParams::Logistic {
                b: DVector::from_fn(n_z, |_, _| randn(1.0)),
                lambda: 0.5 + randn(0.3).abs(),
            },
            FamilyKind::Gumbel => EmissionParams::Gumbel {
                b: DVector::from_fn(n_z, |_, _| randn(0.5)),
                lambda: 0.5 + randn(0.3).abs(),
            },
            FamilyKind::Categorical { n_classes } => EmissionParams::Categorical {
                theta: DMatrix::from_fn(n_z, *n_classes, |_, _| randn(1.0)),
            },
        }
    }

    fn random_y(kind: &FamilyKind, params: &EmissionParams, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match kind {
            FamilyKind::Categorical { n_classes } => {
                dvec(&[(rng.random_range(0..*n_classes)) as f64])
            }
            _ => DVector::from_fn(params.n_y(), |_, _| rng.sample(StandardNormal)),
        }
    }

    #[test]
    fn f_gaussian_is_identity() {
        let (f, fp) = FamilyKind::Gaussian.f_value_and_derivative(1, 2.5).unwrap();
        assert_eq!((f, fp), (2.5, 1.0));
    }

    #[test]
    fn f_student_t_at_zero() {
        // symbolic derivative of (nu+n_y)/2 ln(1 + 2x/nu) at x = 0 is (nu+n_y)/nu
        let (f, fp) = FamilyKind::StudentT { nu: 3.0 }
            .f_value_and_derivative(1, 0.0)
            .unwrap();
        assert!(f.abs() < 1e-15);
        assert!((fp - 4.0 / 3.0).abs() < 1e-15);
        // cross-check against central differences
        let kind = FamilyKind::StudentT { nu: 3.0 };
        let h = 1e-6;
        let fd = (kind.f_value_and_derivative(1, h).unwrap().0
            - kind.f_value_and_derivative(1, -h).unwrap().0)
            / (2.0 * h);
        assert!((fd - fp).abs() < 1e-8);
    }

    #[test]
    fn f_gumbel_is_identity() {
        let (f, fp) = FamilyKind::Gumbel.f_value_and_derivative(1, -1.0).unwrap();
        assert_eq!((f, fp), (-1.0, 1.0));
    }

    #[test]
    fn f_domain_errors_name_bound() {
        let err = FamilyKind::StudentT { nu: 3.0 }
            .f_value_and_derivative(1, -1.5)
            .unwrap_err();
        assert!(err.to_string().contains("-nu/2"));
        let err = FamilyKind::Logistic.f_value_and_derivative(1, 0.0).unwrap_err();
        assert!(err.to_string().contains("x > 0"));
    }

    #[test]
    fn f_derivative_in_bound_on_reachable_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in all_kinds() {
            let ub = kind.derivative_bound(2);
            for _ in 0..200 {
                // reachable ell values: >= 0 for Student-t, >= 1 for logistic
                let x = match kind {
                    FamilyKind::Logistic => 1.0 + rng.random_range(0.0..5.0f64),
                    _ => rng.random_range(0.0..5.0f64),
                };
                let (_, fp) = kind.f_value_and_derivative(2, x).unwrap();
                assert!(fp > 0.0 && fp <= ub + 1e-12, "{kind:?} f'={fp} ub={ub}");
            }
        }
    }

    #[test]
    fn ell_g_gaussian_1d_example() {
        let params = EmissionParams::Gaussian {
            b: DMatrix::from_element(1, 1, 2.0),
            lambda: DMatrix::from_element(1, 1, 4.0),
        };
        let (ell, g) = params.ell_g(&dvec(&[1.0]), &dvec(&[1.0])).unwrap();
        assert!(ell.abs() < 1e-15);
        assert!((g - 0.5 * (1.0 - 4.0f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn ell_g_categorical_zero_logits() {
        let params = EmissionParams::Categorical {
            theta: DMatrix::zeros(2, 4),
        };
        let (ell, g) = params.ell_g(&dvec(&[1.0]), &dvec(&[0.3, -0.7])).unwrap();
        assert_eq!(ell, 0.0);
        assert!((g - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ell_g_laplace_1d_example() {
        let params = EmissionParams::Laplace {
            m: DMatrix::from_element(1, 1, 1.0),
            r: dvec(&[1.0]),
        };
        let (ell, g) = params.ell_g(&dvec(&[0.0]), &dvec(&[1.0])).unwrap();
        assert_eq!(ell, 1.0);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn log_density_gaussian_matches_normal_pdf_oracle() {
        // N(mu = Lz = 0.5, sigma^2 = 1/4) at y = 1
        let params = EmissionParams::Gaussian {
            b: DMatrix::from_element(1, 1, 2.0),
            lambda: DMatrix::from_element(1, 1, 4.0),
        };
        let ld = log_density(&FamilyKind::Gaussian, &params, &dvec(&[1.0]), &dvec(&[1.0])).unwrap();
        let (mu, sigma2) = (0.5, 0.25);
        let oracle = -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln()
            - (1.0 - mu) * (1.0 - mu) / (2.0 * sigma2);
        assert!((ld - oracle).abs() < 1e-12, "{ld} vs {oracle}");
        assert!((ld - -0.7257913526447274).abs() < 1e-10);
    }

    #[test]
    fn log_density_standard_normal_at_mean() {
        let params = EmissionParams::Gaussian {
            b: DMatrix::zeros(1, 1),
            lambda: DMatrix::from_element(1, 1, 1.0),
        };
        let ld = log_density(&FamilyKind::Gaussian, &params, &dvec(&[0.0]), &dvec(&[1.0])).unwrap();
        assert!((ld + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn student_t_large_nu_approaches_gaussian() {
        let b = DMatrix::from_row_slice(1, 2, &[0.8, -0.3]);
        let lambda = DMatrix::from_element(1, 1, 2.0);
        let t = EmissionParams::StudentT {
            b: b.clone(),
            lambda: lambda.clone(),
        };
        let gauss = EmissionParams::Gaussian { b, lambda };
        let z = dvec(&[1.0, 0.5]);
        for y in [-2.0, -0.5, 0.3, 1.7] {
            let ld_t =
                log_density(&FamilyKind::StudentT { nu: 1e6 }, &t, &dvec(&[y]), &z).unwrap();
            let ld_g = log_density(&FamilyKind::Gaussian, &gauss, &dvec(&[y]), &z).unwrap();
            assert!((ld_t - ld_g).abs() < 1e-3, "y={y}: {ld_t} vs {ld_g}");
        }
    }

    #[test]
    fn majorization_of_f_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in all_kinds() {
            for _ in 0..1000 {
                let draw = |rng: &mut ChaCha8Rng| match kind {
                    FamilyKind::StudentT { nu } => rng.random_range(-nu / 2.0 + 1e-6..6.0),
                    FamilyKind::Logistic => rng.random_range(1e-6..6.0f64),
                    _ => rng.random_range(-6.0..6.0f64),
                };
                let x = draw(&mut rng);
                let xbar = draw(&mut rng);
                let (fx, _) = kind.f_value_and_derivative(2, x).unwrap();
                let (fxb, fpxb) = kind.f_value_and_derivative(2, xbar).unwrap();
                let tangent = fxb + fpxb * (x - xbar);
                assert!(
                    tangent - fx >= -1e-12,
                    "{kind:?}: f({x}) = {fx} above tangent {tangent}"
                );
                let (fx2, _) = kind.f_value_and_derivative(2, xbar).unwrap();
                assert!((fx2 - fxb).abs() == 0.0);
            }
        }
    }

    #[test]
    fn ell_and_g_are_midpoint_convex_in_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in all_kinds() {
            for _ in 0..200 {
                let p1 = random_params(&kind, &mut rng);
                let p2 = random_params(&kind, &mut rng);
                let y = random_y(&kind, &p1, &mut rng);
                let z = DVector::from_fn(3, |_, _| rng.sample(StandardNormal));
                let mid = p1.unflatten(&((p1.flatten() + p2.flatten()) * 0.5)).unwrap();
                let (e1, g1) = p1.ell_g(&y, &z).unwrap();
                let (e2, g2) = p2.ell_g(&y, &z).unwrap();
                let (em, gm) = mid.ell_g(&y, &z).unwrap();
                assert!(em <= 0.5 * (e1 + e2) + 1e-10, "{kind:?} ell not convex");
                assert!(gm <= 0.5 * (g1 + g2) + 1e-10, "{kind:?} g not convex");
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for kind in all_kinds() {
            for trial in 0..40 {
                let params = random_params(&kind, &mut rng);
                let y = random_y(&kind, &params, &mut rng);
                let z = DVector::from_fn(3, |_, _| rng.sample(StandardNormal));
                let (_, _, grad_ell, grad_g, at_kink) = params.ell_g_with_grads(&y, &z).unwrap();
                if at_kink {
                    continue; // Laplace subgradient is only tested off kinks
                }
                let flat = params.flatten();
                for idx in 0..flat.len() {
                    let mut plus = flat.clone();
                    plus[idx] += h;
                    let mut minus = flat.clone();
                    minus[idx] -= h;
                    let (ep, gp) = params.unflatten(&plus).unwrap().ell_g(&y, &z).unwrap();
                    let (em, gm) = params.unflatten(&minus).unwrap().ell_g(&y, &z).unwrap();
                    let fd_ell = (ep - em) / (2.0 * h);
                    let fd_g = (gp - gm) / (2.0 * h);
                    let tol = |analytic: f64| 1e-5 * analytic.abs().max(1e-3);
                    assert!(
                        (fd_ell - grad_ell[idx]).abs() <= tol(grad_ell[idx]),
                        "{kind:?} trial {trial} ell grad[{idx}]: fd {fd_ell} vs {}",
                        grad_ell[idx]
                    );
                    assert!(
                        (fd_g - grad_g[idx]).abs() <= tol(grad_g[idx]),
                        "{kind:?} trial {trial} g grad[{idx}]: fd {fd_g} vs {}",
                        grad_g[idx]
                    );
                }
            }
        }
    }

    /// Composite Simpson integration over [a, b].
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut total = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            total += w * f(a + k as f64 * h);
        }
        total * h / 3.0
    }

    #[test]
    fn scalar_densities_integrate_to_one() {
        let z = dvec(&[1.0, -0.5, 0.3]);
        let cases: Vec<(FamilyKind, EmissionParams, f64, f64)> = vec![
            // (kind, params, center, std)
            {
                let p = EmissionParams::Gaussian {
                    b: DMatrix::from_row_slice(1, 3, &[0.5, 0.2, -0.1]),
                    lambda: DMatrix::from_element(1, 1, 2.0),
                };
                let mu = match p.natural().unwrap() {
                    NaturalParams::LocationScale { l, .. } => (&l * &z)[0],
                    _ => unreachable!(),
                };
                (FamilyKind::Gaussian, p, mu, (1.0f64 / 2.0).sqrt())
            },
            {
                let p = EmissionParams::StudentT {
                    b: DMatrix::from_row_slice(1, 3, &[0.5, 0.2, -0.1]),
                    lambda: DMatrix::from_element(1, 1, 2.0),
                };
                let nu = 10.0;
                let scale = (1.0f64 / 2.0).sqrt();
                (
                    FamilyKind::StudentT { nu },
                    p,
                    0.5 - 0.1 - 0.03,
                    scale * (nu / (nu - 2.0)).sqrt(),
                )
            },
            {
                let p = EmissionParams::Laplace {
                    m: DMatrix::from_row_slice(1, 3, &[0.4, 0.1, 0.0]),
                    r: dvec(&[1.5]),
                };
                (FamilyKind::Laplace, p, (0.4 - 0.05) / 1.5, 1.0 / 1.5)
            },
            {
                let p = EmissionParams::Logistic {
                    b: dvec(&[0.3, 0.0, 0.1]),
                    lambda: 1.2,
                };
                let sigma = std::f64::consts::PI / (1.2 * 3.0f64.sqrt());
                ((FamilyKind::Logistic), p, (0.3 - 0.0 + 0.03) / 1.2, sigma)
            },
            {
                let p = EmissionParams::Gumbel {
                    b: dvec(&[0.3, 0.0, 0.1]),
                    lambda: 1.2,
                };
                let euler = 0.5772156649015329;
                let mu = (0.3 + 0.03) / 1.2 + euler / 1.2;
                let sigma = std::f64::consts::PI / (1.2 * 6.0f64.sqrt());
                (FamilyKind::Gumbel, p, mu, sigma)
            },
        ];
        for (kind, params, center, sigma) in cases {
            let integral = simpson(
                |y| {
                    log_density(&kind, &params, &dvec(&[y]), &z)
                        .map(|ld| ld.exp())
                        .unwrap_or(0.0)
                },
                center - 12.0 * sigma,
                center + 12.0 * sigma,
                40000,
            );
            assert!(
                (integral - 1.0).abs() < 1e-6,
                "{kind:?}: density integrates to {integral}"
            );
        }
    }

    #[test]
    fn categorical_mass_sums_to_one() {
        let params = EmissionParams::Categorical {
            theta: DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 0.2, 1.5, 0.0, -0.3]),
        };
        let z = dvec(&[0.7, -0.4]);
        let kind = FamilyKind::Categorical { n_classes: 3 };
        let total: f64 = (0..3)
            .map(|c| log_density(&kind, &params, &dvec(&[c as f64]), &z).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn natural_parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for kind in [FamilyKind::Gaussian, FamilyKind::StudentT { nu: 4.0 }] {
            for _ in 0..50 {
                let params = random_params(&kind, &mut rng);
                let (b, lambda) = match &params {
                    EmissionParams::Gaussian { b, lambda }
                    | EmissionParams::StudentT { b, lambda } => (b.clone(), lambda.clone()),
                    _ => unreachable!(),
                };
                match params.natural().unwrap() {
                    NaturalParams::LocationScale { l, sigma } => {
                        let b2 = sigma.clone().lu().try_inverse().unwrap() * &l;
                        let lam2 = sigma.lu().try_inverse().unwrap();
                        assert!((&b2 - &b).norm() / b.norm().max(1.0) < 1e-10);
                        assert!((&lam2 - &lambda).norm() / lambda.norm() < 1e-10);
                    }
                    _ => unreachable!(),
                }
            }
        }
        // Laplace: L = R^{-1} M
        let params = EmissionParams::Laplace {
            m: DMatrix::from_row_slice(2, 2, &[2.0, 4.0, -1.0, 3.0]),
            r: dvec(&[2.0, 0.5]),
        };
        match params.natural().unwrap() {
            NaturalParams::LocationScale { l, .. } => {
                assert!((l[(0, 0)] - 1.0).abs() < 1e-14);
                assert!((l[(1, 0)] + 2.0).abs() < 1e-14);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn sampling_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = EmissionParams::Gaussian {
            b: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.25, 2.0]),
            lambda: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]),
        };
        let z = dvec(&[1.0, -1.0]);
        let n = 100_000;
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += sample_emission(&FamilyKind::Gaussian, &params, &z, &mut rng).unwrap();
        }
        mean /= n as f64;
        let expected = params.location(&z).unwrap();
        let sigma = match params.natural().unwrap() {
            NaturalParams::LocationScale { sigma, .. } => sigma,
            _ => unreachable!(),
        };
        for c in 0..2 {
            let tol = 4.0 * sigma[(c, c)].sqrt() / (n as f64).sqrt();
            assert!(
                (mean[c] - expected[c]).abs() < tol,
                "component {c}: {} vs {} (tol {tol})",
                mean[c],
                expected[c]
            );
        }
    }

    #[test]
    fn categorical_sampling_uniform_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n_classes = 4;
        let params = EmissionParams::Categorical {
            theta: DMatrix::zeros(2, n_classes),
        };
        let kind = FamilyKind::Categorical { n_classes };
        let z = dvec(&[0.5, 2.0]);
        let n = 100_000;
        let mut counts = vec![0usize; n_classes];
        for _ in 0..n {
            let y = sample_emission(&kind, &params, &z, &mut rng).unwrap();
            counts[y[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        for kind in all_kinds() {
            let mut setup = ChaCha8Rng::seed_from_u64(31);
            let params = random_params(&kind, &mut setup);
            let z = dvec(&[1.0, -0.5, 0.2]);
            let draw_seq = |seed: u64| -> Vec<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..20)
                    .flat_map(|_| {
                        sample_emission(&kind, &params, &z, &mut rng)
                            .unwrap()
                            .iter()
                            .copied()
                            .collect::<Vec<_>>()
                    })
                    .collect()
            };
            assert_eq!(draw_seq(42), draw_seq(42), "{kind:?} not deterministic");
        }
    }

    #[test]
    fn spd_validation_rejects_indefinite_lambda() {
        let params = EmissionParams::Gaussian {
            b: DMatrix::zeros(2, 2),
            lambda: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        };
        assert!(params.validate().is_err());
        let err = params.ell_g(&dvec(&[0.0, 0.0]), &dvec(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::NotSpd { .. }));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let params = EmissionParams::Gaussian {
            b: DMatrix::zeros(1, 2),
            lambda: DMatrix::from_element(1, 1, 1.0),
        };
        assert!(matches!(
            params.ell_g(&dvec(&[0.0]), &dvec(&[1.0])).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }
}
