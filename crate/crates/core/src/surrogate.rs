//! Anything that maps designs to predicted spectra.

use crate::dataset::TrainingData;
use crate::design::{decode_design, CellGeometry, DesignVector};
use crate::error::Result;
use crate::oracle::{oracle_evaluate, FrequencyGrid, ResponseVector, ORACLE_VERSION};

pub trait Surrogate {
    /// Physical-unit spectra, one per design, in input order.
    fn predict(&self, designs: &[DesignVector]) -> Result<Vec<ResponseVector>>;

    /// Oracle the surrogate was trained against.
    fn oracle_version(&self) -> &str;
}

/// The oracle itself, for self-consistency checks of the screening path.
#[derive(Debug, Clone)]
pub struct OracleSurrogate {
    pub geometry: CellGeometry,
    pub grid: FrequencyGrid,
}

impl OracleSurrogate {
    pub fn new(geometry: CellGeometry) -> Self {
        OracleSurrogate {
            geometry,
            grid: FrequencyGrid::default(),
        }
    }
}

impl Surrogate for OracleSurrogate {
    fn predict(&self, designs: &[DesignVector]) -> Result<Vec<ResponseVector>> {
        designs
            .iter()
            .map(|d| {
                let design = decode_design(d, &self.geometry)?;
                Ok(oracle_evaluate(&design, &self.geometry, &self.grid).to_vector())
            })
            .collect()
    }

    fn oracle_version(&self) -> &str {
        ORACLE_VERSION
    }
}

/// Predicts the training-set mean response for every design.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPredictor {
    pub mean: ResponseVector,
}

impl MeanPredictor {
    pub fn fit(data: &TrainingData) -> Self {
        let n = data.y_train.rows() as f64;
        let mean_norm: Vec<f64> = data.y_train.column_sums().iter().map(|s| s / n).collect();
        // The scaler is affine, so the mean commutes with denormalisation.
        MeanPredictor {
            mean: ResponseVector(data.scaler.denormalize(&mean_norm)),
        }
    }
}

impl Surrogate for MeanPredictor {
    fn predict(&self, designs: &[DesignVector]) -> Result<Vec<ResponseVector>> {
        Ok(vec![self.mean.clone(); designs.len()])
    }

    fn oracle_version(&self) -> &str {
        ORACLE_VERSION
    }
}
