//! Trajectory containers, the regressor window map, benchmark generators
//! and CSV I/O.
//!
//! The regressor at time `t` stacks lagged outputs, lagged exogenous inputs
//! and an optional bias term:
//!
//! ```text
//!   z_t = (y_t, ..., y_{t-t_y+1}, u_t, ..., u_{t-t_u+1}, [1])
//! ```
//!
//! Lags reaching before time 0 are read from the trajectory's `z0` window
//! (zero-padded when absent), so no data is discarded at the start.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::families::{EmissionParams, FamilyKind};
use crate::likelihood::{simulate, ModelParams, SwitchStructure};

/// Observed sequence with optional exogenous inputs and the stacked
/// regressor window at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(T+1) x n_y` observations.
    pub y: DMatrix<f64>,
    /// `(T+1) x n_u` exogenous inputs, when present.
    pub u: Option<DMatrix<f64>>,
    /// Stacked regressor window at time 0 (pre-history); zero-padded if absent.
    pub z0: Option<DVector<f64>>,
}

impl Trajectory {
    pub fn new(y: DMatrix<f64>, u: Option<DMatrix<f64>>) -> Result<Self> {
        let traj = Trajectory { y, u, z0: None };
        traj.validate()?;
        Ok(traj)
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.u.as_ref().map_or(0, |u| u.ncols())
    }

    /// Number of transitions `T` (the trajectory holds `T + 1` rows).
    pub fn transitions(&self) -> usize {
        self.y.nrows() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.nrows() < 2 {
            return Err(Error::InvalidArgument(
                "trajectory needs at least two rows (T >= 1)".into(),
            ));
        }
        if let Some((idx, _)) = self.y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "trajectory y",
                t: idx % self.y.nrows(),
            });
        }
        if let Some(u) = &self.u {
            if u.nrows() != self.y.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "u rows",
                    expected: self.y.nrows(),
                    actual: u.nrows(),
                });
            }
            if let Some((idx, _)) = u.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "trajectory u",
                    t: idx % u.nrows(),
                });
            }
        }
        Ok(())
    }

    /// Sub-trajectory over `range`, with `z0` rebuilt from the data before
    /// the range start so early regressors keep the true pre-history.
    pub fn slice(&self, range: Range<usize>, cfg: &RegressorConfig) -> Result<Trajectory> {
        if range.end > self.y.nrows() || range.start >= range.end {
            return Err(Error::InvalidArgument(format!(
                "slice {range:?} out of bounds for {} rows",
                self.y.nrows()
            )));
        }
        let z0 = build_regressor(self, cfg, range.start)?;
        Ok(Trajectory {
            y: self.y.rows(range.start, range.end - range.start).into_owned(),
            u: self
                .u
                .as_ref()
                .map(|u| u.rows(range.start, range.end - range.start).into_owned()),
            z0: Some(z0),
        })
    }
}

/// The window map producing regressors from lagged outputs and inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorConfig {
    /// Output lag count.
    pub t_y: usize,
    /// Input lag count.
    pub t_u: usize,
    /// Append a constant 1.
    pub include_bias: bool,
}

impl RegressorConfig {
    pub fn n_z(&self, n_y: usize, n_u: usize) -> usize {
        self.t_y * n_y + self.t_u * n_u + usize::from(self.include_bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_y + self.t_u == 0 && !self.include_bias {
            return Err(Error::Config(
                "regressor must use at least one lag or a bias term".into(),
            ));
        }
        Ok(())
    }
}

/// Build the regressor `z_t`; deterministic in the trajectory contents.
pub fn build_regressor(traj: &Trajectory, cfg: &RegressorConfig, t: usize) -> Result<DVector<f64>> {
    if t >= traj.y.nrows() {
        return Err(Error::InvalidArgument(format!(
            "time index {t} out of range for {} rows",
            traj.y.nrows()
        )));
    }
    let n_y = traj.n_y();
    let n_u = traj.n_u();
    let mut z = DVector::zeros(cfg.n_z(n_y, n_u));
    let mut off = 0;
    for lag in 0..cfg.t_y {
        if t >= lag {
            for c in 0..n_y {
                z[off + c] = traj.y[(t - lag, c)];
            }
        } else if let Some(z0) = &traj.z0 {
            // virtual y_{t-lag} with t-lag = -(lag-t): block lag-t of z0
            let block = lag - t;
            for c in 0..n_y {
                z[off + c] = z0[block * n_y + c];
            }
        }
        off += n_y;
    }
    if cfg.t_u > 0 {
        let u = traj.u.as_ref().ok_or_else(|| {
            Error::Config("regressor uses input lags but the trajectory has no u".into())
        })?;
        for lag in 0..cfg.t_u {
            if t >= lag {
                for c in 0..n_u {
                    z[off + c] = u[(t - lag, c)];
                }
            } else if let Some(z0) = &traj.z0 {
                let block = lag - t;
                for c in 0..n_u {
                    z[off + c] = z0[cfg.t_y * n_y + block * n_u + c];
                }
            }
            off += n_u;
        }
    }
    if cfg.include_bias {
        z[off] = 1.0;
    }
    Ok(z)
}

/// Contiguous, disjoint, ordered index ranges over one trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl DatasetSplit {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        let ordered = self.train.start < self.train.end
            && self.train.end <= self.validation.start
            && self.validation.start < self.validation.end
            && self.validation.end <= self.test.start
            && self.test.start < self.test.end
            && self.test.end <= n_rows;
        if !ordered {
            return Err(Error::Config(format!(
                "split ranges must be ordered and within 0..{n_rows}: {self:?}"
            )));
        }
        Ok(())
    }
}

fn gaussian_mode(l: &DMatrix<f64>, lambda: &DMatrix<f64>) -> EmissionParams {
    EmissionParams::Gaussian {
        b: lambda * l,
        lambda: lambda.clone(),
    }
}

/// Three-subsystem planar benchmark: `y_{t+1} = A_i (y_t, 1) + w_t` with
/// `w ~ N(0, 1e-3 I)` and full-dependence softmax switching.
pub fn gen_synthetic_3mode(t_len: usize, seed: u64) -> Result<(Trajectory, ModelParams)> {
    let a1 = DMatrix::from_row_slice(2, 3, &[0.9912, 0.1307, 0.2, -0.1305, 0.9914, 0.06]);
    let a2 = DMatrix::from_row_slice(2, 3, &[0.94, 0.15, -0.01, -0.15, 0.94, -0.13]);
    let a3 = DMatrix::from_row_slice(2, 3, &[0.97, 0.4, 0.1, -0.4, 0.97, 0.1]);
    let th1 = DMatrix::from_row_slice(3, 2, &[30.0, 10.0, 1.0, -16.07, -10.0, 10.0]);
    let th2 = DMatrix::from_row_slice(3, 2, &[30.0, 30.0, 20.0, -10.0, 0.0, 0.0]);
    let th3 = DMatrix::from_row_slice(3, 2, &[24.8, 0.0, 11.38, -28.62, -57.73, 7.07]);
    let lambda = DMatrix::identity(2, 2) * 1e3;
    let cfg = RegressorConfig {
        t_y: 1,
        t_u: 0,
        include_bias: true,
    };
    let model = ModelParams {
        structure: SwitchStructure::Full,
        theta: vec![th1, th2, th3],
        family: FamilyKind::Gaussian,
        betas: vec![
            gaussian_mode(&a1, &lambda),
            gaussian_mode(&a2, &lambda),
            gaussian_mode(&a3, &lambda),
        ],
        cfg,
        n_y: 2,
        n_u: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
    let xi0 = DVector::from_element(3, 1.0 / 3.0);
    let (traj, _) = simulate(&model, &z0, None, t_len, &xi0, &mut rng)?;
    Ok((traj, model))
}

/// Mode weights of the Markov ARX benchmark's transition matrix, reduced to
/// softmax logits (`theta_ij = ln(P_ij / P_id)`).
fn transition_logits(p: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let d = p.ncols();
    (0..p.nrows())
        .map(|i| {
            DMatrix::from_fn(1, d - 1, |_, j| (p[(i, j)] / p[(i, d - 1)]).ln())
        })
        .collect()
}

/// Switched Markov ARX benchmark: three scalar ARX(2,2) subsystems with
/// mode-dependent switching, `w ~ N(0, 0.025)` and `u ~ U[-1, 1]`.
pub fn gen_markov_arx(t_len: usize, seed: u64) -> Result<(Trajectory, ModelParams)> {
    let betas = [
        [1.143, -0.4346, 0.0572, 0.2415],
        [0.9534, -0.0475, 0.0618, 0.0336],
        [1.178, -0.09, 0.089, 0.15],
    ];
    let p = DMatrix::from_row_slice(
        3,
        3,
        &[0.25, 0.10, 0.65, 0.55, 0.35, 0.10, 0.15, 0.15, 0.70],
    );
    let lambda = DMatrix::from_element(1, 1, 1.0 / 0.025);
    let cfg = RegressorConfig {
        t_y: 2,
        t_u: 2,
        include_bias: false,
    };
    let model = ModelParams {
        structure: SwitchStructure::ModeDependent,
        theta: transition_logits(&p),
        family: FamilyKind::Gaussian,
        betas: betas
            .iter()
            .map(|b| gaussian_mode(&DMatrix::from_row_slice(1, 4, b), &lambda))
            .collect(),
        cfg,
        n_y: 1,
        n_u: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = DMatrix::from_fn(t_len + 1, 1, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::zeros(4);
    let xi0 = DVector::from_element(3, 1.0 / 3.0);
    let (traj, _) = simulate(&model, &z0, Some(&u), t_len, &xi0, &mut rng)?;
    Ok((traj, model))
}

/// Piecewise affine benchmark: two scalar ARX(2,2)-with-bias subsystems
/// selected deterministically by the sign of a linear guard,
/// `w ~ N(0, 1e-4)` and `u ~ N(0, 0.25)`.
///
/// The returned reference model approximates the hard region switch by a
/// state-dependent softmax with sharply scaled guard logits.
pub fn gen_pwa(t_len: usize, seed: u64) -> Result<(Trajectory, ModelParams)> {
    let beta0 = DVector::from_vec(vec![0.5, 1.0, 2.0, -0.3, 0.2]);
    let beta1 = DVector::from_vec(vec![0.1, 0.5, -0.4, 0.3, 0.0]);
    let beta2 = DVector::from_vec(vec![0.2, 0.4, 0.1, 0.4, 0.0]);
    let cfg = RegressorConfig {
        t_y: 2,
        t_u: 2,
        include_bias: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(t_len + 1, 1);
    let u = DMatrix::from_fn(t_len + 1, 1, |_, _| {
        0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let mut traj = Trajectory {
        y: DMatrix::zeros(t_len + 1, 1),
        u: Some(u),
        z0: Some(DVector::zeros(5)),
    };
    for t in 0..t_len {
        let z = build_regressor(&traj, &cfg, t)?;
        let active = if beta0.dot(&z) >= 0.0 { &beta1 } else { &beta2 };
        let w: f64 = 0.01 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        y[(t + 1, 0)] = active.dot(&z) + w;
        traj.y[(t + 1, 0)] = y[(t + 1, 0)];
    }
    let guard_scale = 100.0;
    let lambda = DMatrix::from_element(1, 1, 1e4);
    let model = ModelParams {
        structure: SwitchStructure::StateDependent,
        theta: vec![DMatrix::from_fn(5, 1, |r, _| guard_scale * beta0[r])],
        family: FamilyKind::Gaussian,
        betas: vec![
            gaussian_mode(&DMatrix::from_row_slice(1, 5, beta1.as_slice()), &lambda),
            gaussian_mode(&DMatrix::from_row_slice(1, 5, beta2.as_slice()), &lambda),
        ],
        cfg,
        n_y: 1,
        n_u: 1,
    };
    Ok((traj, model))
}

/// Perturb each observation in `range` (default: all rows) independently
/// with probability `p` by componentwise additive noise uniform on
/// `[-max_t |y_t|, max_t |y_t|]`. Returns the perturbed trajectory and the
/// number of perturbed rows.
pub fn inject_outliers(
    traj: &Trajectory,
    p: f64,
    seed: u64,
    range: Option<Range<usize>>,
) -> Result<(Trajectory, usize)> {
    if !(0.0..1.0 + 1e-12).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "outlier probability must be in [0, 1], got {p}"
        )));
    }
    let range = range.unwrap_or(0..traj.y.nrows());
    if range.end > traj.y.nrows() {
        return Err(Error::InvalidArgument(format!(
            "outlier range {range:?} out of bounds"
        )));
    }
    let n_y = traj.n_y();
    let max_abs: Vec<f64> = (0..n_y)
        .map(|c| traj.y.column(c).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let mut out = traj.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for t in range {
        if rng.random_range(0.0..1.0) < p {
            count += 1;
            for c in 0..n_y {
                if max_abs[c] > 0.0 {
                    out.y[(t, c)] += rng.random_range(-max_abs[c]..max_abs[c]);
                }
            }
        }
    }
    Ok((out, count))
}

/// Load a trajectory from CSV with header columns `y1..y{n_y}, u1..u{n_u}`.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Trajectory> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::Io {
            path: path_str.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(&path_str, 1, e.to_string()))?
        .clone();
    let mut y_cols = Vec::new();
    let mut u_cols = Vec::new();
    for (idx, name) in headers.iter().enumerate() {
        if name.starts_with('y') {
            y_cols.push(idx);
        } else if name.starts_with('u') {
            u_cols.push(idx);
        } else {
            return Err(csv_error(
                &path_str,
                1,
                format!("unknown column '{name}' (expected y* or u*)"),
            ));
        }
    }
    if y_cols.is_empty() {
        return Err(csv_error(&path_str, 1, "no y columns found".into()));
    }
    let mut y_rows: Vec<f64> = Vec::new();
    let mut u_rows: Vec<f64> = Vec::new();
    let mut n_rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(n_rows + 2);
            csv_error(&path_str, line, e.to_string())
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(n_rows + 2);
        for &col in &y_cols {
            y_rows.push(parse_cell(&record, col, &path_str, line)?);
        }
        for &col in &u_cols {
            u_rows.push(parse_cell(&record, col, &path_str, line)?);
        }
        n_rows += 1;
    }
    if n_rows < 2 {
        return Err(csv_error(
            &path_str,
            n_rows + 1,
            "trajectory needs at least two data rows".into(),
        ));
    }
    let y = DMatrix::from_row_slice(n_rows, y_cols.len(), &y_rows);
    let u = if u_cols.is_empty() {
        None
    } else {
        Some(DMatrix::from_row_slice(n_rows, u_cols.len(), &u_rows))
    };
    Trajectory::new(y, u)
}

fn parse_cell(record: &csv::StringRecord, col: usize, path: &str, line: usize) -> Result<f64> {
    let cell = record.get(col).ok_or_else(|| {
        csv_error(path, line, format!("missing column {col} (ragged row)"))
    })?;
    cell.parse::<f64>()
        .map_err(|_| csv_error(path, line, format!("non-numeric cell '{cell}'")))
}

fn csv_error(path: &str, line: usize, message: String) -> Error {
    Error::Csv {
        path: path.to_string(),
        line,
        message,
    }
}

/// Save a trajectory as CSV; `load_csv(save_csv(x)) == x` exactly (shortest
/// round-trip decimal formatting).
pub fn save_csv<P: AsRef<Path>>(traj: &Trajectory, path: P) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    let mut file = std::fs::File::create(path.as_ref()).map_err(|e| Error::Io {
        path: path_str.clone(),
        source: e,
    })?;
    let mut header: Vec<String> = (1..=traj.n_y()).map(|c| format!("y{c}")).collect();
    header.extend((1..=traj.n_u()).map(|c| format!("u{c}")));
    let write = |file: &mut std::fs::File, line: String| {
        writeln!(file, "{line}").map_err(|e| Error::Io {
            path: path_str.clone(),
            source: e,
        })
    };
    write(&mut file, header.join(","))?;
    for t in 0..traj.y.nrows() {
        let mut cells: Vec<String> = traj.y.row(t).iter().map(|v| format!("{v}")).collect();
        if let Some(u) = &traj.u {
            cells.extend(u.row(t).iter().map(|v| format!("{v}")));
        }
        write(&mut file, cells.join(","))?;
    }
    Ok(())
}

/// Row view helper used by prediction code.
pub fn row_vector(m: &DMatrix<f64>, t: usize) -> RowDVector<f64> {
    m.row(t).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::nll;

    fn scalar_traj(values: &[f64]) -> Trajectory {
        Trajectory {
            y: DMatrix::from_column_slice(values.len(), 1, values),
            u: None,
            z0: None,
        }
    }

    #[test]
    fn regressor_windowing_example() {
        let traj = scalar_traj(&[1.0, 2.0, 3.0]);
        let cfg = RegressorConfig {
            t_y: 2,
            t_u: 0,
            include_bias: true,
        };
        let z1 = build_regressor(&traj, &cfg, 1).unwrap();
        assert_eq!(z1.as_slice(), &[2.0, 1.0, 1.0]);
    }

    #[test]
    fn bias_only_regressor_is_constant() {
        let traj = scalar_traj(&[1.0, 2.0, 3.0]);
        let cfg = RegressorConfig {
            t_y: 0,
            t_u: 0,
            include_bias: true,
        };
        for t in 0..3 {
            assert_eq!(build_regressor(&traj, &cfg, t).unwrap().as_slice(), &[1.0]);
        }
    }

    #[test]
    fn arx_regressor_layout() {
        // z_{t-1} = (y_{t-1}, y_{t-2}, u_{t-1}, u_{t-2})
        let traj = Trajectory {
            y: DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            u: Some(DMatrix::from_column_slice(4, 1, &[10.0, 20.0, 30.0, 40.0])),
            z0: None,
        };
        let cfg = RegressorConfig {
            t_y: 2,
            t_u: 2,
            include_bias: false,
        };
        let z2 = build_regressor(&traj, &cfg, 2).unwrap();
        assert_eq!(z2.as_slice(), &[3.0, 2.0, 30.0, 20.0]);
    }

    #[test]
    fn early_time_regressors_use_z0_prehistory() {
        let mut traj = scalar_traj(&[5.0, 6.0]);
        let cfg = RegressorConfig {
            t_y: 3,
            t_u: 0,
            include_bias: false,
        };
        // window at time 0: (y_0, y_{-1}, y_{-2})
        traj.z0 = Some(DVector::from_column_slice(&[5.0, -1.0, -2.0]));
        let z0 = build_regressor(&traj, &cfg, 0).unwrap();
        assert_eq!(z0.as_slice(), &[5.0, -1.0, -2.0]);
        let z1 = build_regressor(&traj, &cfg, 1).unwrap();
        assert_eq!(z1.as_slice(), &[6.0, 5.0, -1.0]);
        // absent z0 means zero padding
        traj.z0 = None;
        assert_eq!(build_regressor(&traj, &cfg, 0).unwrap().as_slice(), &[5.0, 0.0, 0.0]);
    }

    #[test]
    fn slices_are_shift_consistent() {
        let (traj, _) = gen_markov_arx(60, 3).unwrap();
        let cfg = RegressorConfig {
            t_y: 2,
            t_u: 2,
            include_bias: false,
        };
        let s = 17;
        let shifted = traj.slice(s..61, &cfg).unwrap();
        for t in 0..40 {
            let a = build_regressor(&traj, &cfg, t + s).unwrap();
            let b = build_regressor(&shifted, &cfg, t).unwrap();
            assert!((a - b).norm() == 0.0, "mismatch at t={t}");
        }
    }

    #[test]
    fn three_mode_generator_matches_printed_constants() {
        let (traj, model) = gen_synthetic_3mode(50, 0).unwrap();
        assert_eq!(traj.y.ncols(), 2);
        // first row of A_1, recovered from B = Lambda L with Lambda = 1e3 I
        match &model.betas[0] {
            crate::families::EmissionParams::Gaussian { b, lambda } => {
                assert_eq!(lambda[(0, 0)], 1e3);
                assert_eq!(lambda[(0, 1)], 0.0);
                let a_row: Vec<f64> = (0..3).map(|c| b[(0, c)] / 1e3).collect();
                for (got, want) in a_row.iter().zip([0.9912, 0.1307, 0.2]) {
                    assert!((got - want).abs() < 1e-12);
                }
            }
            _ => panic!("expected gaussian"),
        }
        assert_eq!(model.theta[2][(0, 0)], 24.8);
        assert_eq!(model.theta[2][(2, 0)], -57.73);
    }

    #[test]
    fn markov_arx_constants_and_softmax_identity() {
        let (_, model) = gen_markov_arx(10, 0).unwrap();
        match &model.betas[0] {
            crate::families::EmissionParams::Gaussian { b, lambda } => {
                assert!((lambda[(0, 0)] - 40.0).abs() < 1e-12);
                let beta1: Vec<f64> = (0..4).map(|c| b[(0, c)] / 40.0).collect();
                for (got, want) in beta1.iter().zip([1.143, -0.4346, 0.0572, 0.2415]) {
                    assert!((got - want).abs() < 1e-12);
                }
            }
            _ => panic!("expected gaussian"),
        }
        // softmax of the reduced logits reproduces the transition rows
        let p = [
            [0.25, 0.10, 0.65],
            [0.55, 0.35, 0.10],
            [0.15, 0.15, 0.70],
        ];
        let z = DVector::from_column_slice(&[0.3, -0.8, 0.1, 0.9]);
        for i in 0..3 {
            let probs = model.switch_log_probs(&z, i).unwrap();
            for j in 0..3 {
                assert!(
                    (probs[j].exp() - p[i][j]).abs() < 1e-12,
                    "row {i} col {j}: {} vs {}",
                    probs[j].exp(),
                    p[i][j]
                );
            }
        }
    }

    #[test]
    fn markov_arx_empirical_transition_frequencies() {
        let (_, model) = gen_markov_arx(10, 0).unwrap();
        // re-simulate with mode tracking
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t_len = 100_000;
        let u = DMatrix::from_fn(t_len + 1, 1, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::zeros(4);
        let xi0 = DVector::from_element(3, 1.0 / 3.0);
        let (_, modes) =
            crate::likelihood::simulate(&model, &z0, Some(&u), t_len, &xi0, &mut rng).unwrap();
        let mut counts = [[0.0f64; 3]; 3];
        for w in modes.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        let p = [
            [0.25, 0.10, 0.65],
            [0.55, 0.35, 0.10],
            [0.15, 0.15, 0.70],
        ];
        for i in 0..3 {
            let row_sum: f64 = counts[i].iter().sum();
            for j in 0..3 {
                assert!(
                    (counts[i][j] / row_sum - p[i][j]).abs() <= 0.02,
                    "empirical transition ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn pwa_constants_and_region_split() {
        let (traj, model) = gen_pwa(2000, 1).unwrap();
        let beta0 = DVector::from_column_slice(&[0.5, 1.0, 2.0, -0.3, 0.2]);
        // guard scale stores kappa * beta0
        for r in 0..5 {
            assert!((model.theta[0][(r, 0)] / 100.0 - beta0[r]).abs() < 1e-12);
        }
        // verify the deterministic case split on the generated data:
        // residual against the active subsystem must look like N(0, 1e-4)
        let cfg = model.cfg;
        let beta1 = DVector::from_column_slice(&[0.1, 0.5, -0.4, 0.3, 0.0]);
        let beta2 = DVector::from_column_slice(&[0.2, 0.4, 0.1, 0.4, 0.0]);
        let mut ss = 0.0;
        for t in 0..2000 {
            let z = build_regressor(&traj, &cfg, t).unwrap();
            let active = if beta0.dot(&z) >= 0.0 { &beta1 } else { &beta2 };
            let r = traj.y[(t + 1, 0)] - active.dot(&z);
            ss += r * r;
        }
        let var = ss / 2000.0;
        assert!((var - 1e-4).abs() < 3e-5, "residual variance {var}");
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let (a, _) = gen_synthetic_3mode(100, 9).unwrap();
        let (b, _) = gen_synthetic_3mode(100, 9).unwrap();
        assert_eq!(a.y, b.y);
        let (c, _) = gen_synthetic_3mode(100, 10).unwrap();
        assert_ne!(a.y, c.y);
        let (d, _) = gen_markov_arx(100, 9).unwrap();
        let (e, _) = gen_markov_arx(100, 9).unwrap();
        assert_eq!(d.y, e.y);
        assert_eq!(d.u, e.u);
        let (f, _) = gen_pwa(100, 9).unwrap();
        let (g, _) = gen_pwa(100, 9).unwrap();
        assert_eq!(f.y, g.y);
    }

    #[test]
    fn outlier_injection_edge_probabilities() {
        let (traj, _) = gen_markov_arx(200, 2).unwrap();
        let (same, count0) = inject_outliers(&traj, 0.0, 7, None).unwrap();
        assert_eq!(count0, 0);
        assert_eq!(same.y, traj.y);
        let (all, count1) = inject_outliers(&traj, 1.0, 7, None).unwrap();
        assert_eq!(count1, 201);
        let changed = (0..201).filter(|&t| all.y[(t, 0)] != traj.y[(t, 0)]).count();
        assert!(changed >= 200); // zero draws are measure-zero
    }

    #[test]
    fn outlier_injection_binomial_count() {
        // 99% binomial interval for Bin(5001, 0.05): mean 250, sd ~ 15.4
        let (traj, _) = gen_markov_arx(5000, 3).unwrap();
        let (_, count) = inject_outliers(&traj, 0.05, 11, None).unwrap();
        assert!(
            count > 150 && count < 350,
            "perturbed count {count} outside binomial band"
        );
    }

    #[test]
    fn outliers_respect_range_and_propagate_to_regressors() {
        let (traj, model) = gen_markov_arx(100, 4).unwrap();
        let (corrupted, _) = inject_outliers(&traj, 0.5, 13, Some(10..50)).unwrap();
        for t in 0..10 {
            assert_eq!(corrupted.y[(t, 0)], traj.y[(t, 0)]);
        }
        for t in 50..101 {
            assert_eq!(corrupted.y[(t, 0)], traj.y[(t, 0)]);
        }
        // corrupted y re-enters the regressors
        let z = build_regressor(&corrupted, &model.cfg, 20).unwrap();
        assert_eq!(z[0], corrupted.y[(20, 0)]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let (traj, _) = gen_markov_arx(100, 8).unwrap();
        save_csv(&traj, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.y, traj.y);
        assert_eq!(loaded.u, traj.u);
    }

    #[test]
    fn csv_without_u_columns_leaves_u_absent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y_only.csv");
        std::fs::write(&path, "y1\n1.0\n2.0\n3.0\n").unwrap();
        let loaded = load_csv(&path).unwrap();
        assert!(loaded.u.is_none());
        assert_eq!(loaded.y.nrows(), 3);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "y1,u1\n1.0,2.0\n3.0\n4.0,5.0\n").unwrap();
        let err = load_csv(&ragged).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let non_numeric = dir.path().join("bad_cell.csv");
        std::fs::write(&non_numeric, "y1\n1.0\noops\n").unwrap();
        let err = load_csv(&non_numeric).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(err.to_string().contains("oops"), "{err}");
    }

    #[test]
    fn sliced_nll_matches_manual_offset() {
        // slicing preserves pre-history, so a d=1 model scores the slice
        // identically whether regressors come from the slice or the source
        let (traj, model) = gen_markov_arx(50, 6).unwrap();
        let mut single = model.clone();
        single.structure = crate::likelihood::SwitchStructure::Static;
        single.theta = vec![DMatrix::zeros(1, 0)];
        single.betas = vec![model.betas[0].clone()];
        let alpha = DVector::from_element(1, 1.0);
        let a = nll(&single, &traj.slice(20..51, &model.cfg).unwrap(), &alpha).unwrap();
        let full = nll(&single, &traj, &alpha).unwrap();
        let head = nll(&single, &traj.slice(0..21, &model.cfg).unwrap(), &alpha).unwrap();
        assert!((full - head - a).abs() < 1e-9, "{full} != {head} + {a}");
    }
}
