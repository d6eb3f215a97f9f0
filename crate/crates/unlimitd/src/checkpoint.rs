//! Versioned checkpoint container: everything needed to evaluate a trained
//! model or to continue its training bit-exactly (parameters, covariance
//! payload, task sources, RNG streams and optimizer moments).
//!
//! Checkpoints are JSON. Floating-point values round-trip exactly through the
//! shortest-representation formatting, so saving and reloading reproduces the
//! run byte for byte. Matrices are stored row-major with explicit shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{NetworkSpec, ParamVector};
use crate::error::{Error, Result};
use crate::gp::{CovarianceParam, GaussianTaskPrior};
use crate::maml::{MamlConfig, MamlModel};
use crate::mixture::{ClusterPrior, MixtureModel};
use crate::opt::AdamState;
use crate::taskgen::TaskSource;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Dense matrix payload, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut values = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                values.push(m[(r, c)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            values,
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }
}

/// Which covariance structure the parameters are currently trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Identity,
    Projected,
}

/// The seeded streams a training loop consumes: task choice, input locations,
/// observation noise, and one-off initialization draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngBundle {
    pub tasks: ChaCha8Rng,
    pub inputs: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

/// Prior covariance payload of a checkpoint. Eigenvalue estimates accompany
/// Fisher-derived projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariancePayload {
    Identity,
    LowRank {
        basis: MatrixData,
        scales: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eigenvalues: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlimitdCheckpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub sources: Vec<TaskSource>,
    pub phase: Phase,
    pub epoch: usize,
    pub network: NetworkSpec,
    pub lin_point: Vec<f64>,
    pub weight_means: Vec<Vec<f64>>,
    pub covariance: CovariancePayload,
    pub sigma_eps: f64,
    pub rng: RngBundle,
    pub optimizer: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MamlCheckpoint {
    pub version: u32,
    pub config: MamlConfig,
    pub sources: Vec<TaskSource>,
    pub epoch: usize,
    pub network: NetworkSpec,
    pub theta: Vec<f64>,
    pub rng: RngBundle,
    pub optimizer: AdamState,
}

/// A trained (or in-flight) model of either family.
///
/// Externally tagged on purpose: the RNG state nests a 128-bit counter, which
/// serde's internal-tag buffering cannot replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Unlimitd(UnlimitdCheckpoint),
    Maml(MamlCheckpoint),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ck.validate_version()?;
        Ok(ck)
    }

    fn validate_version(&self) -> Result<()> {
        let version = match self {
            Checkpoint::Unlimitd(c) => c.version,
            Checkpoint::Maml(c) => c.version,
        };
        if version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        match self {
            Checkpoint::Unlimitd(c) => c.epoch,
            Checkpoint::Maml(c) => c.epoch,
        }
    }

    /// Instantiates the runtime model this checkpoint describes.
    pub fn model(&self) -> Result<LoadedModel> {
        match self {
            Checkpoint::Unlimitd(ck) => {
                let lin_point = ParamVector::new(
                    ck.network.clone(),
                    DVector::from_column_slice(&ck.lin_point),
                )?;
                match (&ck.covariance, ck.weight_means.len()) {
                    (CovariancePayload::Identity, 1) => Ok(LoadedModel::Gp(GaussianTaskPrior::new(
                        lin_point,
                        DVector::from_column_slice(&ck.weight_means[0]),
                        CovarianceParam::Identity,
                        ck.sigma_eps,
                    )?)),
                    (CovariancePayload::Identity, _) => Err(Error::InvalidConfig(
                        "identity-covariance checkpoint with several clusters".into(),
                    )),
                    (CovariancePayload::LowRank { basis, scales, .. }, n) => {
                        if scales.len() != n {
                            return Err(Error::InvalidConfig(
                                "checkpoint scale count does not match cluster count".into(),
                            ));
                        }
                        let basis = basis.to_matrix();
                        if n == 1 {
                            Ok(LoadedModel::Gp(GaussianTaskPrior::new(
                                lin_point,
                                DVector::from_column_slice(&ck.weight_means[0]),
                                CovarianceParam::low_rank(
                                    basis,
                                    DVector::from_column_slice(&scales[0]),
                                )?,
                                ck.sigma_eps,
                            )?))
                        } else {
                            let clusters = ck
                                .weight_means
                                .iter()
                                .zip(scales)
                                .map(|(m, s)| ClusterPrior {
                                    weight_mean: DVector::from_column_slice(m),
                                    scales: DVector::from_column_slice(s),
                                })
                                .collect();
                            Ok(LoadedModel::Mixture(MixtureModel::new(
                                lin_point,
                                basis,
                                clusters,
                                ck.sigma_eps,
                            )?))
                        }
                    }
                }
            }
            Checkpoint::Maml(ck) => {
                let theta = ParamVector::new(
                    ck.network.clone(),
                    DVector::from_column_slice(&ck.theta),
                )?;
                Ok(LoadedModel::Maml(MamlModel {
                    theta,
                    inner_steps: ck.config.inner_steps_test,
                    inner_lr: ck.config.inner_lr,
                }))
            }
        }
    }
}

/// A checkpointed model in evaluable form.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Gp(GaussianTaskPrior),
    Mixture(MixtureModel),
    Maml(MamlModel),
}

impl LoadedModel {
    pub fn describe(&self) -> String {
        match self {
            LoadedModel::Gp(g) => format!(
                "single GP ({} covariance)",
                match g.cov {
                    CovarianceParam::Identity => "identity".to_string(),
                    CovarianceParam::LowRank { ref basis, .. } =>
                        format!("rank-{} projected", basis.nrows()),
                }
            ),
            LoadedModel::Mixture(m) => format!("{}-cluster GP mixture", m.cluster_count()),
            LoadedModel::Maml(_) => "gradient-adaptation baseline".to_string(),
        }
    }
}
