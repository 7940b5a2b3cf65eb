//! JSON model files and fit report files.
//!
//! Matrices are stored dense row-major; emission blocks use the transformed
//! coordinate names (`B`, `Lambda`, `M`, `R`, `b`, `lambda`, `Theta`).
//! Numbers round-trip exactly (shortest-representation decimal encoding).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::data::RegressorConfig;
use crate::driver::{MultistartReport, StopReason};
use crate::error::{Error, Result};
use crate::families::{EmissionParams, FamilyKind};
use crate::likelihood::{ModelParams, Regularizer, SwitchStructure};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaJson {
    Location {
        #[serde(rename = "B")]
        b: MatrixJson,
        #[serde(rename = "Lambda")]
        lambda: MatrixJson,
    },
    LaplaceRow {
        #[serde(rename = "M")]
        m: MatrixJson,
        #[serde(rename = "R")]
        r: Vec<f64>,
    },
    Scalar {
        b: Vec<f64>,
        lambda: f64,
    },
    ClassLogits {
        #[serde(rename = "Theta")]
        theta: MatrixJson,
    },
}

impl BetaJson {
    pub fn from_params(params: &EmissionParams) -> Self {
        match params {
            EmissionParams::Gaussian { b, lambda } | EmissionParams::StudentT { b, lambda } => {
                BetaJson::Location {
                    b: MatrixJson::from_matrix(b),
                    lambda: MatrixJson::from_matrix(lambda),
                }
            }
            EmissionParams::Laplace { m, r } => BetaJson::LaplaceRow {
                m: MatrixJson::from_matrix(m),
                r: r.as_slice().to_vec(),
            },
            EmissionParams::Logistic { b, lambda } | EmissionParams::Gumbel { b, lambda } => {
                BetaJson::Scalar {
                    b: b.as_slice().to_vec(),
                    lambda: *lambda,
                }
            }
            EmissionParams::Categorical { theta } => BetaJson::ClassLogits {
                theta: MatrixJson::from_matrix(theta),
            },
        }
    }

    pub fn to_params(&self, family: &FamilyKind) -> Result<EmissionParams> {
        match (family, self) {
            (FamilyKind::Gaussian, BetaJson::Location { b, lambda }) => {
                Ok(EmissionParams::Gaussian {
                    b: b.to_matrix()?,
                    lambda: lambda.to_matrix()?,
                })
            }
            (FamilyKind::StudentT { .. }, BetaJson::Location { b, lambda }) => {
                Ok(EmissionParams::StudentT {
                    b: b.to_matrix()?,
                    lambda: lambda.to_matrix()?,
                })
            }
            (FamilyKind::Laplace, BetaJson::LaplaceRow { m, r }) => Ok(EmissionParams::Laplace {
                m: m.to_matrix()?,
                r: DVector::from_column_slice(r),
            }),
            (FamilyKind::Logistic, BetaJson::Scalar { b, lambda }) => {
                Ok(EmissionParams::Logistic {
                    b: DVector::from_column_slice(b),
                    lambda: *lambda,
                })
            }
            (FamilyKind::Gumbel, BetaJson::Scalar { b, lambda }) => Ok(EmissionParams::Gumbel {
                b: DVector::from_column_slice(b),
                lambda: *lambda,
            }),
            (FamilyKind::Categorical { .. }, BetaJson::ClassLogits { theta }) => {
                Ok(EmissionParams::Categorical {
                    theta: theta.to_matrix()?,
                })
            }
            _ => Err(Error::Config(
                "beta block does not match the declared family".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub data_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub structure: SwitchStructure,
    pub family: FamilyKind,
    pub d: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub regressor: RegressorConfig,
    pub theta: Vec<MatrixJson>,
    pub beta: Vec<BetaJson>,
    pub alpha0: Vec<f64>,
    pub regularizer: Regularizer,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn from_parts(
        model: &ModelParams,
        alpha0: &DVector<f64>,
        reg: &Regularizer,
        provenance: Provenance,
    ) -> Self {
        ModelFile {
            version: MODEL_FILE_VERSION,
            structure: model.structure,
            family: model.family,
            d: model.d(),
            n_y: model.n_y,
            n_u: model.n_u,
            regressor: model.cfg,
            theta: model.theta.iter().map(MatrixJson::from_matrix).collect(),
            beta: model.betas.iter().map(BetaJson::from_params).collect(),
            alpha0: alpha0.as_slice().to_vec(),
            regularizer: *reg,
            provenance,
        }
    }

    pub fn to_parts(&self) -> Result<(ModelParams, DVector<f64>, Regularizer)> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::Config(format!(
                "unsupported model file version {}",
                self.version
            )));
        }
        if self.beta.len() != self.d {
            return Err(Error::Config(format!(
                "model file declares d = {} but has {} beta blocks",
                self.d,
                self.beta.len()
            )));
        }
        let betas = self
            .beta
            .iter()
            .map(|b| b.to_params(&self.family))
            .collect::<Result<Vec<_>>>()?;
        let theta = self
            .theta
            .iter()
            .map(|m| m.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        let model = ModelParams {
            structure: self.structure,
            theta,
            family: self.family,
            betas,
            cfg: self.regressor,
            n_y: self.n_y,
            n_u: self.n_u,
        };
        model.validate()?;
        let alpha0 = DVector::from_column_slice(&self.alpha0);
        Ok((model, alpha0, self.regularizer))
    }
}

pub fn save_model<P: AsRef<Path>>(file: &ModelFile, path: P) -> Result<()> {
    let json = serde_json::to_string_pretty(file)
        .map_err(|e| Error::Config(format!("model serialization failed: {e}")))?;
    std::fs::write(path.as_ref(), json).map_err(|e| Error::Io {
        path: path.as_ref().display().to_string(),
        source: e,
    })
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::Io {
        path: path.as_ref().display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("model file: {e}")))
}

/// Hex SHA-256 of raw file bytes, recorded as provenance in model files.
pub fn hash_file<P: AsRef<Path>>(path: P) -> Result<String> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Io {
        path: path.as_ref().display().to_string(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartJson {
    pub seed: u64,
    pub selection: Option<f64>,
    pub final_reg_nll: Option<f64>,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReportJson {
    pub best_restart: usize,
    pub stop: StopReason,
    pub final_reg_nll: f64,
    pub reg_nll_per_iteration: Vec<f64>,
    pub grad_norm_per_iteration: Vec<Option<f64>>,
    pub e_step_secs: f64,
    pub m_step_secs: f64,
    pub restarts: Vec<RestartJson>,
}

impl FitReportJson {
    pub fn from_report(ms: &MultistartReport) -> Self {
        let best = &ms.best;
        FitReportJson {
            best_restart: ms.best_index,
            stop: best.stop,
            final_reg_nll: best.final_reg_nll,
            reg_nll_per_iteration: best.iterations.iter().map(|r| r.reg_nll).collect(),
            grad_norm_per_iteration: best.iterations.iter().map(|r| r.grad_norm).collect(),
            e_step_secs: best.iterations.iter().map(|r| r.e_step_secs).sum(),
            m_step_secs: best.iterations.iter().map(|r| r.m_step_secs).sum(),
            restarts: ms
                .restarts
                .iter()
                .map(|r| RestartJson {
                    seed: r.seed,
                    selection: r.selection,
                    final_reg_nll: r.final_reg_nll,
                    iterations: r.iterations,
                    stop: r.stop,
                    error: r.error.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_markov_arx;
    use crate::likelihood::reg_nll;

    #[test]
    fn model_file_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let (traj, model) = gen_markov_arx(50, 1).unwrap();
        let alpha0 = DVector::from_column_slice(&[0.2, 0.5, 0.3]);
        let reg = Regularizer {
            gamma1: 1e-4,
            gamma2: 2e-5,
            gamma3: 3.3e-6,
        };
        let file = ModelFile::from_parts(
            &model,
            &alpha0,
            &reg,
            Provenance {
                seed: 42,
                data_hash: "abc".into(),
            },
        );
        save_model(&file, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let (model2, alpha2, reg2) = loaded.to_parts().unwrap();
        assert_eq!(model.flatten_params(), model2.flatten_params());
        assert_eq!(alpha0, alpha2);
        assert_eq!(reg, reg2);
        // bit-identical parameters give bit-identical objective values
        let a = reg_nll(&model, &traj, &alpha0, &reg).unwrap();
        let b = reg_nll(&model2, &traj, &alpha2, &reg2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_family_round_trips() {
        use crate::likelihood::test_support::{all_families, random_model};
        use crate::likelihood::SwitchStructure;
        let dir = tempfile::tempdir().unwrap();
        for (k, family) in all_families().into_iter().enumerate() {
            let (model, _, alpha0) = random_model(SwitchStructure::Full, family, 2, 4, k as u64);
            let path = dir.path().join(format!("m{k}.json"));
            let file = ModelFile::from_parts(
                &model,
                &alpha0,
                &Regularizer::ZERO,
                Provenance {
                    seed: 0,
                    data_hash: String::new(),
                },
            );
            save_model(&file, &path).unwrap();
            let (model2, _, _) = load_model(&path).unwrap().to_parts().unwrap();
            assert_eq!(model.flatten_params(), model2.flatten_params(), "{family:?}");
        }
    }

    #[test]
    fn mismatched_beta_count_is_rejected() {
        let (_, model) = gen_markov_arx(20, 2).unwrap();
        let alpha0 = DVector::from_element(3, 1.0 / 3.0);
        let mut file = ModelFile::from_parts(
            &model,
            &alpha0,
            &Regularizer::ZERO,
            Provenance {
                seed: 0,
                data_hash: String::new(),
            },
        );
        file.beta.pop();
        assert!(file.to_parts().is_err());
    }

    #[test]
    fn matrix_json_is_row_major() {
        let m = nalgebra::DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let j = MatrixJson::from_matrix(&m);
        assert_eq!(j.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(j.to_matrix().unwrap(), m);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"version": 1, "bogus": true}"#;
        let parsed: std::result::Result<ModelFile, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }
}
