//! NMSE metric and the MLP / CNN regression baselines.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ResponseScaler, Split, TrainingData};
use crate::design::{decode_design, normalize_design, rasterize_design, CellGeometry, DesignVector, DESIGN_DIM};
use crate::error::{Error, Result};
use crate::gan::{train_gan_on, GanTrainingConfig};
use crate::nn::conv::{CnnCache, CnnRegressor};
use crate::nn::network::LEAKY_SLOPE;
use crate::nn::{
    Activation, AdamConfig, AdamState, Architecture, Fault, Matrix, ModelFile, ModelRole, Mode, Network,
    ParamTensor, Regularization,
};
use crate::oracle::{ResponseVector, Segment, RESPONSE_DIM};
use crate::seed;
use crate::surrogate::{MeanPredictor, Surrogate};

/// Which part of the response vector an NMSE covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Segment(Segment),
    All,
}

/// `Σ‖y − ŷ‖² / Σ‖y‖²` over paired vectors.
pub fn nmse_slices<A: AsRef<[f64]>, B: AsRef<[f64]>>(real: &[A], predicted: &[B]) -> Result<f64> {
    if real.len() != predicted.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "nmse over {} real and {} predicted vectors",
            real.len(),
            predicted.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, p) in real.iter().zip(predicted) {
        let (y, p) = (y.as_ref(), p.as_ref());
        if y.len() != p.len() {
            return Err(Error::Shape(format!("vector widths {} and {}", y.len(), p.len())));
        }
        for (a, b) in y.iter().zip(p) {
            num += (a - b) * (a - b);
            den += a * a;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("nmse reference has zero energy".into()));
    }
    Ok(num / den)
}

pub fn nmse(real: &[ResponseVector], predicted: &[ResponseVector], scope: Scope) -> Result<f64> {
    let cut = |v: &ResponseVector| -> Vec<f64> {
        match scope {
            Scope::Segment(s) => v.segment(s).to_vec(),
            Scope::All => v.values().to_vec(),
        }
    };
    let r: Vec<Vec<f64>> = real.iter().map(cut).collect();
    let p: Vec<Vec<f64>> = predicted.iter().map(cut).collect();
    nmse_slices(&r, &p)
}

/// NMSE per response segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentNmse {
    pub gain: f64,
    pub axial_ratio: f64,
    pub return_loss: f64,
}

impl SegmentNmse {
    pub fn evaluate(real: &[ResponseVector], predicted: &[ResponseVector]) -> Result<Self> {
        Ok(SegmentNmse {
            gain: nmse(real, predicted, Scope::Segment(Segment::Gain))?,
            axial_ratio: nmse(real, predicted, Scope::Segment(Segment::AxialRatio))?,
            return_loss: nmse(real, predicted, Scope::Segment(Segment::ReturnLoss))?,
        })
    }

    pub fn get(&self, s: Segment) -> f64 {
        match s {
            Segment::Gain => self.gain,
            Segment::AxialRatio => self.axial_ratio,
            Segment::ReturnLoss => self.return_loss,
        }
    }

    pub fn mean(items: &[SegmentNmse]) -> SegmentNmse {
        let n = items.len() as f64;
        SegmentNmse {
            gain: items.iter().map(|m| m.gain).sum::<f64>() / n,
            axial_ratio: items.iter().map(|m| m.axial_ratio).sum::<f64>() / n,
            return_loss: items.iter().map(|m| m.return_loss).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Filled from the run's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub regularization: Regularization,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 2000,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 0.01,
            seed: 0,
            regularization: Regularization::DecoupledDecay,
        }
    }
}

impl BaselineConfig {
    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr {} / weight_decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            regularization: self.regularization,
            ..AdamConfig::default()
        }
    }
}

pub const MLP_HIDDEN: [usize; 2] = [256, 256];
pub const CNN_RESOLUTION: usize = 60;
pub const CNN_CHANNELS: [usize; 2] = [8, 16];
pub const CNN_DENSE: usize = 256;

pub fn mlp_architecture() -> Architecture {
    Architecture {
        dims: vec![DESIGN_DIM, MLP_HIDDEN[0], MLP_HIDDEN[1], RESPONSE_DIM],
        activations: vec![Activation::leaky(), Activation::leaky(), Activation::Identity],
        batch_norm: vec![false; 3],
    }
}

pub fn cnn_head_architecture() -> Architecture {
    let side = CNN_RESOLUTION >> CNN_CHANNELS.len();
    Architecture {
        dims: vec![side * side * CNN_CHANNELS[CNN_CHANNELS.len() - 1], CNN_DENSE, RESPONSE_DIM],
        activations: vec![Activation::leaky(), Activation::Identity],
        batch_norm: vec![false; 2],
    }
}

pub fn build_mlp(seed: u64) -> Result<Network> {
    Network::init(&mlp_architecture(), seed)
}

pub fn build_cnn(seed: u64) -> Result<CnnRegressor> {
    Ok(CnnRegressor {
        stage: CnnRegressor::init_stage(CNN_RESOLUTION, &CNN_CHANNELS, LEAKY_SLOPE, seed::tagged_seed(seed, "conv")),
        head: Network::init(&cnn_head_architecture(), seed::tagged_seed(seed, "head"))?,
    })
}

/// Models trained by plain minibatch regression.
trait Regressor {
    type Cache;
    fn forward(&self, x: &Matrix) -> Result<(Matrix, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, dy: &Matrix) -> Result<Vec<Vec<f64>>>;
    fn params(&mut self) -> Vec<ParamTensor<'_>>;
}

impl Regressor for Network {
    type Cache = crate::nn::Cache;

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Self::Cache)> {
        Network::forward(self, x, Mode::Train)
    }

    fn backward(&self, cache: &Self::Cache, dy: &Matrix) -> Result<Vec<Vec<f64>>> {
        let (g, _) = Network::backward(self, cache, dy)?;
        Ok(g.tensors().into_iter().map(<[f64]>::to_vec).collect())
    }

    fn params(&mut self) -> Vec<ParamTensor<'_>> {
        self.param_tensors()
    }
}

impl Regressor for CnnRegressor {
    type Cache = CnnCache;

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Self::Cache)> {
        CnnRegressor::forward(self, x)
    }

    fn backward(&self, cache: &Self::Cache, dy: &Matrix) -> Result<Vec<Vec<f64>>> {
        CnnRegressor::backward(self, cache, dy, Fault::None)
    }

    fn params(&mut self) -> Vec<ParamTensor<'_>> {
        self.param_tensors()
    }
}

/// Mean squared error over every element, and its gradient.
fn mse(y: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let n = y.data().len() as f64;
    let mut grad = Matrix::zeros(y.rows(), y.cols());
    let mut value = 0.0;
    for ((g, a), b) in grad.data_mut().iter_mut().zip(y.data()).zip(target.data()) {
        let d = a - b;
        value += d * d / n;
        *g = 2.0 * d / n;
    }
    (value, grad)
}

/// Training-set MSE (normalised units) before the first update and after
/// every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionHistory {
    pub initial_mse: f64,
    pub epoch_mse: Vec<f64>,
}

impl RegressionHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_mse")?;
        writeln!(w, "0,{}", self.initial_mse)?;
        for (i, v) in self.epoch_mse.iter().enumerate() {
            writeln!(w, "{},{v}", i + 1)?;
        }
        Ok(())
    }
}

fn full_mse<M: Regressor>(model: &M, x: &Matrix, y: &Matrix) -> Result<f64> {
    let (out, _) = model.forward(x)?;
    Ok(mse(&out, y).0)
}

fn fit<M: Regressor>(model: &mut M, x: &Matrix, y: &Matrix, config: &BaselineConfig) -> Result<RegressionHistory> {
    config.check()?;
    let mut opt = AdamState::for_params(config.adam(), &model.params());
    let initial_mse = full_mse(model, x, y)?;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut rng = seed::rng(seed::tagged_seed(config.seed, "epochs"));
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (out, cache) = model.forward(&x.select_rows(chunk))?;
            let (loss, dy) = mse(&out, &y.select_rows(chunk));
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    iteration: epoch,
                    batch_seed: config.seed,
                });
            }
            total += loss * chunk.len() as f64;
            let grads = model.backward(&cache, &dy)?;
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(model.params(), &refs)?;
        }
        epoch_mse.push(total / x.rows() as f64);
    }
    Ok(RegressionHistory {
        initial_mse,
        epoch_mse,
    })
}

/// Rows of flattened `CNN_RESOLUTION²` occupancy grids.
pub fn raster_matrix(designs: &[DesignVector], geometry: &CellGeometry) -> Result<Matrix> {
    let rows = designs
        .iter()
        .map(|d| Ok(rasterize_design(&decode_design(d, geometry)?, geometry, CNN_RESOLUTION)?.to_f64()))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn to_physical(y: &Matrix, scaler: &ResponseScaler) -> Vec<ResponseVector> {
    (0..y.rows()).map(|i| ResponseVector(scaler.denormalize(y.row(i)))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSurrogate {
    pub network: Network,
    pub scaler: ResponseScaler,
    pub geometry: CellGeometry,
    pub oracle_version: String,
}

impl Surrogate for MlpSurrogate {
    fn predict(&self, designs: &[DesignVector]) -> Result<Vec<ResponseVector>> {
        if designs.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = designs.iter().map(|d| normalize_design(d, &self.geometry)).collect();
        Ok(to_physical(&self.network.predict(&Matrix::from_rows(&rows)?)?, &self.scaler))
    }

    fn oracle_version(&self) -> &str {
        &self.oracle_version
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnSurrogate {
    pub model: CnnRegressor,
    pub scaler: ResponseScaler,
    pub geometry: CellGeometry,
    pub oracle_version: String,
}

impl Surrogate for CnnSurrogate {
    fn predict(&self, designs: &[DesignVector]) -> Result<Vec<ResponseVector>> {
        if designs.is_empty() {
            return Ok(Vec::new());
        }
        let x = raster_matrix(designs, &self.geometry)?;
        Ok(to_physical(&self.model.predict(&x)?, &self.scaler))
    }

    fn oracle_version(&self) -> &str {
        &self.oracle_version
    }
}

pub fn train_mlp(dataset: &Dataset, data: &TrainingData, config: &BaselineConfig) -> Result<(MlpSurrogate, RegressionHistory)> {
    let mut net = build_mlp(seed::tagged_seed(config.seed, "mlp-init"))?;
    let history = fit(&mut net, &data.x_train, &data.y_train, config)?;
    Ok((
        MlpSurrogate {
            network: net,
            scaler: data.scaler.clone(),
            geometry: data.geometry,
            oracle_version: dataset.oracle_version.clone(),
        },
        history,
    ))
}

pub fn train_cnn(dataset: &Dataset, data: &TrainingData, config: &BaselineConfig) -> Result<(CnnSurrogate, RegressionHistory)> {
    let designs: Vec<DesignVector> = data.split.train.iter().map(|&i| dataset.entries[i].design.clone()).collect();
    let x = raster_matrix(&designs, &data.geometry)?;
    let mut model = build_cnn(seed::tagged_seed(config.seed, "cnn-init"))?;
    let history = fit(&mut model, &x, &data.y_train, config)?;
    Ok((
        CnnSurrogate {
            model,
            scaler: data.scaler.clone(),
            geometry: data.geometry,
            oracle_version: dataset.oracle_version.clone(),
        },
        history,
    ))
}

fn geometry_extra(g: &CellGeometry) -> Vec<f64> {
    vec![g.cell_side_mm, g.brick_size_mm, g.loop_inset_mm]
}

fn common_extras(file: &ModelFile, role: ModelRole) -> Result<(ResponseScaler, CellGeometry)> {
    if file.role != role {
        return Err(Error::Architecture(format!(
            "expected a {} checkpoint, found {}",
            role.name(),
            file.role.name()
        )));
    }
    let scaler = ResponseScaler::from_flat(
        file.extra("scaler")
            .ok_or_else(|| Error::format("FPCM", "missing normalisation statistics"))?,
    )?;
    let geometry = match file.extra("geometry") {
        Some(&[side, brick, inset]) => CellGeometry {
            cell_side_mm: side,
            brick_size_mm: brick,
            loop_inset_mm: inset,
        },
        _ => return Err(Error::format("FPCM", "missing geometry record")),
    };
    geometry.check()?;
    Ok((scaler, geometry))
}

impl MlpSurrogate {
    pub fn to_model_file(&self) -> ModelFile {
        ModelFile::new(ModelRole::Mlp, &self.oracle_version, self.network.clone())
            .with_extra("scaler", self.scaler.to_flat())
            .with_extra("geometry", geometry_extra(&self.geometry))
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        let (scaler, geometry) = common_extras(&file, ModelRole::Mlp)?;
        if file.network.architecture() != mlp_architecture() {
            return Err(Error::Architecture("MLP layer widths differ from 72/256/256/303".into()));
        }
        Ok(MlpSurrogate {
            network: file.network,
            scaler,
            geometry,
            oracle_version: file.oracle_version,
        })
    }
}

impl CnnSurrogate {
    /// The dense head is the checkpoint's network; kernels travel as extras.
    pub fn to_model_file(&self) -> ModelFile {
        let stage = &self.model.stage;
        let mut shape = vec![stage.input_side as f64, stage.slope];
        shape.extend(stage.layers.iter().map(|l| l.out_channels as f64));
        let mut file = ModelFile::new(ModelRole::Cnn, &self.oracle_version, self.model.head.clone())
            .with_extra("scaler", self.scaler.to_flat())
            .with_extra("geometry", geometry_extra(&self.geometry))
            .with_extra("conv_shape", shape);
        for (i, l) in stage.layers.iter().enumerate() {
            file = file
                .with_extra(&format!("conv{i}.kernel"), l.kernel.data().to_vec())
                .with_extra(&format!("conv{i}.bias"), l.bias.clone());
        }
        file
    }

    pub fn from_model_file(file: ModelFile) -> Result<Self> {
        let (scaler, geometry) = common_extras(&file, ModelRole::Cnn)?;
        let bad = || Error::Architecture("CNN convolution stage does not match 60x60 -> 8 -> 16".into());
        let shape = file.extra("conv_shape").ok_or_else(bad)?;
        let expected: Vec<f64> = [CNN_RESOLUTION as f64, LEAKY_SLOPE]
            .into_iter()
            .chain(CNN_CHANNELS.iter().map(|&c| c as f64))
            .collect();
        if shape != expected.as_slice() || file.network.architecture() != cnn_head_architecture() {
            return Err(bad());
        }
        let mut stage = CnnRegressor::init_stage(CNN_RESOLUTION, &CNN_CHANNELS, LEAKY_SLOPE, 0);
        for (i, l) in stage.layers.iter_mut().enumerate() {
            let k = file.extra(&format!("conv{i}.kernel")).ok_or_else(bad)?;
            let b = file.extra(&format!("conv{i}.bias")).ok_or_else(bad)?;
            if k.len() != l.kernel.data().len() || b.len() != l.bias.len() {
                return Err(bad());
            }
            l.kernel.data_mut().copy_from_slice(k);
            l.bias.copy_from_slice(b);
        }
        Ok(CnnSurrogate {
            model: CnnRegressor {
                stage,
                head: file.network,
            },
            scaler,
            geometry,
            oracle_version: file.oracle_version,
        })
    }
}

/// Seeds that went into a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSeeds {
    pub split: u64,
    pub gan: u64,
    pub mlp: u64,
    pub cnn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseReport {
    pub tool_version: String,
    pub oracle_version: String,
    pub dataset_fingerprint: String,
    /// Split indices and scaler shared by all three models.
    pub pipeline_fingerprint: String,
    pub seeds: BenchmarkSeeds,
    pub models: BTreeMap<String, SegmentNmse>,
    /// Training-mean reference on the same validation split.
    pub mean_predictor: SegmentNmse,
}

pub fn hex(v: u64) -> String {
    format!("{v:016x}")
}

/// Trains GAN, MLP and CNN on one holdout split (seeded by `split_seed`)
/// and scores each on its validation part.
pub fn benchmark_models(
    dataset: &Dataset,
    split_seed: u64,
    gan: &GanTrainingConfig,
    mlp: &BaselineConfig,
    cnn: &BaselineConfig,
) -> Result<NmseReport> {
    let data = TrainingData::prepare(dataset, Split::holdout(dataset.len(), 0.9, split_seed)?)?;
    let truth = &data.validation_responses;
    let designs = &data.validation_designs;
    let mut models = BTreeMap::new();
    let g = train_gan_on(dataset, &data, gan)?;
    models.insert("gan".to_string(), SegmentNmse::evaluate(truth, &g.surrogate.predict(designs)?)?);
    let (m, _) = train_mlp(dataset, &data, mlp)?;
    models.insert("mlp".to_string(), SegmentNmse::evaluate(truth, &m.predict(designs)?)?);
    let (c, _) = train_cnn(dataset, &data, cnn)?;
    models.insert("cnn".to_string(), SegmentNmse::evaluate(truth, &c.predict(designs)?)?);
    let mean = MeanPredictor::fit(&data);
    Ok(NmseReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        oracle_version: dataset.oracle_version.clone(),
        dataset_fingerprint: hex(dataset.fingerprint()),
        pipeline_fingerprint: hex(data.fingerprint()),
        seeds: BenchmarkSeeds {
            split: split_seed,
            gan: gan.seed,
            mlp: mlp.seed,
            cnn: cnn.seed,
        },
        models,
        mean_predictor: SegmentNmse::evaluate(truth, &mean.predict(designs)?)?,
    })
}
