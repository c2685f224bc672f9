//! Conditional GAN surrogate: the generator maps (noise ‖ design) to a
//! normalised spectrum, the critic scores (spectrum ‖ design) pairs as real
//! or generated.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::SegmentNmse;
use crate::dataset::{Dataset, ResponseScaler, Split, TrainingData};
use crate::design::{normalize_design, CellGeometry, DesignVector, DESIGN_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, AdamConfig, AdamState, Architecture, Matrix, ModelFile, ModelRole, Network,
    Regularization,
};
use crate::oracle::{ResponseVector, ORACLE_VERSION, RESPONSE_DIM};
use crate::seed;
use crate::surrogate::Surrogate;

pub const NOISE_DIM: usize = 100;
pub const GENERATOR_HIDDEN: [usize; 3] = [128, 256, 512];
pub const CRITIC_HIDDEN: [usize; 2] = [512, 256];
/// Floor applied inside every log of the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    /// Filled from the run's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub critic_steps_per_gen_step: usize,
    pub prediction_noise_draws: usize,
    /// Feed the design vector to the critic alongside the spectrum.
    pub conditional_critic: bool,
    pub validation_interval: usize,
    pub regularization: Regularization,
}

impl Default for GanTrainingConfig {
    fn default() -> Self {
        GanTrainingConfig {
            iterations: 10_000,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 0.01,
            bn_momentum: 0.8,
            seed: 0,
            critic_steps_per_gen_step: 1,
            prediction_noise_draws: 8,
            conditional_critic: true,
            validation_interval: 250,
            regularization: Regularization::DecoupledDecay,
        }
    }
}

impl GanTrainingConfig {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("critic_steps_per_gen_step", self.critic_steps_per_gen_step),
            ("prediction_noise_draws", self.prediction_noise_draws),
            ("validation_interval", self.validation_interval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "lr {}, weight_decay {}, bn_momentum {} out of range",
                self.lr, self.weight_decay, self.bn_momentum
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            regularization: self.regularization,
            ..AdamConfig::default()
        }
    }

    pub fn noise_policy(&self) -> NoisePolicy {
        NoisePolicy::Average {
            draws: self.prediction_noise_draws,
            seed: seed::tagged_seed(self.seed, "prediction-noise"),
        }
    }
}

pub fn generator_architecture() -> Architecture {
    let mut dims = vec![NOISE_DIM + DESIGN_DIM];
    dims.extend(GENERATOR_HIDDEN);
    dims.push(RESPONSE_DIM);
    Architecture {
        dims,
        activations: vec![Activation::leaky(), Activation::leaky(), Activation::leaky(), Activation::Identity],
        batch_norm: vec![true, true, true, false],
    }
}

pub fn critic_architecture(conditional: bool) -> Architecture {
    let mut dims = vec![RESPONSE_DIM + if conditional { DESIGN_DIM } else { 0 }];
    dims.extend(CRITIC_HIDDEN);
    dims.push(1);
    Architecture {
        dims,
        activations: vec![Activation::leaky(), Activation::leaky(), Activation::Sigmoid],
        batch_norm: vec![false; 3],
    }
}

pub fn build_generator(config: &GanTrainingConfig, seed: u64) -> Result<Network> {
    let mut net = Network::init(&generator_architecture(), seed)?;
    for n in net.blocks.iter_mut().filter_map(|b| b.norm.as_mut()) {
        n.momentum = config.bn_momentum;
    }
    Ok(net)
}

pub fn build_critic(config: &GanTrainingConfig, seed: u64) -> Result<Network> {
    Network::init(&critic_architecture(config.conditional_critic), seed)
}

fn is_conditional(critic: &Network) -> bool {
    critic.in_dim() == RESPONSE_DIM + DESIGN_DIM
}

fn critic_input(critic: &Network, responses: &Matrix, designs: &Matrix) -> Result<Matrix> {
    if is_conditional(critic) {
        Matrix::hcat(responses, designs)
    } else {
        Ok(responses.clone())
    }
}

/// Probability that a normalised (response, design) pair is real.
pub fn critic_score(critic: &Network, response: &[f64], design: &[f64]) -> Result<f64> {
    let r = Matrix::from_vec(1, response.len(), response.to_vec())?;
    let d = Matrix::from_vec(1, design.len(), design.to_vec())?;
    Ok(critic.predict(&critic_input(critic, &r, &d)?)?.get(0, 0))
}

/// Critic loss `−log s_real − log(1 − s_fake)` for one pair of scores.
pub fn critic_loss(s_real: f64, s_fake: f64) -> f64 {
    -s_real.max(LOG_CLAMP).ln() - (1.0 - s_fake).max(LOG_CLAMP).ln()
}

/// Non-saturating generator loss `−log s_fake`.
pub fn generator_loss(s_fake: f64) -> f64 {
    -s_fake.max(LOG_CLAMP).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoisePolicy {
    FixedZero,
    /// Mean over `draws` standard-normal noise vectors taken from `seed`.
    Average { draws: usize, seed: u64 },
}

pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut seed::Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Normalised generator output for normalised designs (one per row).
/// Every design sees the same noise draws, so a row's prediction does not
/// depend on the rest of the batch.
pub fn generator_predict_normalized(gen: &Network, designs: &Matrix, policy: NoisePolicy) -> Result<Matrix> {
    let n = designs.rows();
    match policy {
        NoisePolicy::FixedZero => gen.predict(&Matrix::hcat(&Matrix::zeros(n, NOISE_DIM), designs)?),
        NoisePolicy::Average { draws, seed } => {
            if draws == 0 {
                return Err(Error::InvalidArgument("noise average over zero draws".into()));
            }
            let mut rng = seed::rng(seed);
            let mut acc = Matrix::zeros(n, gen.out_dim());
            for _ in 0..draws {
                let z = standard_normal_matrix(1, NOISE_DIM, &mut rng);
                let mut noise = Matrix::zeros(n, NOISE_DIM);
                for i in 0..n {
                    noise.row_mut(i).copy_from_slice(z.row(0));
                }
                let y = gen.predict(&Matrix::hcat(&noise, designs)?)?;
                for (a, b) in acc.data_mut().iter_mut().zip(y.data()) {
                    *a += b;
                }
            }
            let k = draws as f64;
            acc.data_mut().iter_mut().for_each(|v| *v /= k);
            Ok(acc)
        }
    }
}

/// Physical-unit prediction for one design.
pub fn generator_predict(
    gen: &Network,
    design: &DesignVector,
    geometry: &CellGeometry,
    scaler: Option<&ResponseScaler>,
    policy: NoisePolicy,
) -> Result<ResponseVector> {
    let scaler = scaler.ok_or_else(|| Error::InvalidArgument("missing normalisation statistics".into()))?;
    let x = Matrix::from_vec(1, DESIGN_DIM, normalize_design(design, geometry))?;
    let y = generator_predict_normalized(gen, &x, policy)?;
    Ok(ResponseVector(scaler.denormalize(y.row(0))))
}

/// Generator, critic and their optimiser states.
#[derive(Debug, Clone)]
pub struct GanState {
    pub generator: Network,
    pub critic: Network,
    pub gen_opt: AdamState,
    pub critic_opt: AdamState,
    pub critic_steps: usize,
}

impl GanState {
    pub fn new(config: &GanTrainingConfig) -> Result<Self> {
        config.check()?;
        let mut generator = build_generator(config, seed::tagged_seed(config.seed, "generator-init"))?;
        let mut critic = build_critic(config, seed::tagged_seed(config.seed, "critic-init"))?;
        let gen_opt = AdamState::for_params(config.adam(), &generator.param_tensors());
        let critic_opt = AdamState::for_params(config.adam(), &critic.param_tensors());
        Ok(GanState {
            generator,
            critic,
            gen_opt,
            critic_opt,
            critic_steps: config.critic_steps_per_gen_step,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub generator: f64,
    pub critic: f64,
}

/// One critic update (generator held fixed) then one generator update
/// (critic held fixed). `real` and `designs` are normalised batch rows.
/// Noise is drawn from `rng`; `iteration` and `batch_seed` only label a
/// non-finite abort.
pub fn gan_train_step(
    state: &mut GanState,
    real: &Matrix,
    designs: &Matrix,
    rng: &mut seed::Rng,
    iteration: usize,
    batch_seed: u64,
) -> Result<StepLosses> {
    let b = real.rows();
    let bf = b as f64;
    let non_finite = || Error::NonFinite { iteration, batch_seed };
    let mut critic_value = 0.0;
    for _ in 0..state.critic_steps {
        let z = standard_normal_matrix(b, NOISE_DIM, rng);
        let (fake, _) = state
            .generator
            .forward(&Matrix::hcat(&z, designs)?, crate::nn::Mode::Train)?;
        let input = Matrix::vcat(
            &critic_input(&state.critic, real, designs)?,
            &critic_input(&state.critic, &fake, designs)?,
        )?;
        let (s, cache) = state.critic.forward(&input, crate::nn::Mode::Train)?;
        let mut ds = Matrix::zeros(2 * b, 1);
        critic_value = 0.0;
        for i in 0..b {
            let (sr, sf) = (s.get(i, 0), s.get(b + i, 0));
            critic_value += critic_loss(sr, sf) / bf;
            if sr > LOG_CLAMP {
                ds.set(i, 0, -1.0 / (bf * sr));
            }
            if 1.0 - sf > LOG_CLAMP {
                ds.set(b + i, 0, 1.0 / (bf * (1.0 - sf)));
            }
        }
        if !critic_value.is_finite() {
            return Err(non_finite());
        }
        let (grads, _) = state.critic.backward(&cache, &ds)?;
        state.critic_opt.step(state.critic.param_tensors(), &grads.tensors())?;
    }

    let z = standard_normal_matrix(b, NOISE_DIM, rng);
    let (fake, gcache) = state.generator.forward_train(&Matrix::hcat(&z, designs)?)?;
    let (s, ccache) = state
        .critic
        .forward(&critic_input(&state.critic, &fake, designs)?, crate::nn::Mode::Train)?;
    let mut ds = Matrix::zeros(b, 1);
    let mut gen_value = 0.0;
    for i in 0..b {
        let sf = s.get(i, 0);
        gen_value += generator_loss(sf) / bf;
        if sf > LOG_CLAMP {
            ds.set(i, 0, -1.0 / (bf * sf));
        }
    }
    if !gen_value.is_finite() {
        return Err(non_finite());
    }
    let (_, d_input) = state.critic.backward(&ccache, &ds)?;
    let d_fake = d_input.columns(0, RESPONSE_DIM);
    let (grads, _) = state.generator.backward(&gcache, &d_fake)?;
    if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(non_finite());
    }
    state.gen_opt.step(state.generator.param_tensors(), &grads.tensors())?;
    Ok(StepLosses {
        generator: gen_value,
        critic: critic_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSnapshot {
    /// 1-based iteration after which the snapshot was taken.
    pub iteration: usize,
    pub nmse: SegmentNmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub gen_loss: Vec<f64>,
    pub critic_loss: Vec<f64>,
    pub snapshots: Vec<ValidationSnapshot>,
    /// How often each dataset index was drawn into a training batch.
    pub sample_counts: Vec<u32>,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,gen_loss,critic_loss,val_nmse_ar,val_nmse_rl,val_nmse_gain")?;
        let mut snaps = self.snapshots.iter().peekable();
        for (i, (g, c)) in self.gen_loss.iter().zip(&self.critic_loss).enumerate() {
            let iter = i + 1;
            write!(w, "{iter},{g},{c}")?;
            match snaps.peek() {
                Some(s) if s.iteration == iter => {
                    writeln!(w, ",{},{},{}", s.nmse.axial_ratio, s.nmse.return_loss, s.nmse.gain)?;
                    snaps.next();
                }
                _ => writeln!(w, ",,,")?,
            }
        }
        Ok(())
    }
}

/// A trained generator with what it needs to predict in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct GanSurrogate {
    pub generator: Network,
    pub scaler: ResponseScaler,
    pub geometry: CellGeometry,
    pub policy: NoisePolicy,
    pub oracle_version: String,
}

impl Surrogate for GanSurrogate {
    fn predict(&self, designs: &[DesignVector]) -> Result<Vec<ResponseVector>> {
        if designs.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = designs.iter().map(|d| normalize_design(d, &self.geometry)).collect();
        let y = generator_predict_normalized(&self.generator, &Matrix::from_rows(&rows)?, self.policy)?;
        Ok((0..y.rows())
            .map(|i| ResponseVector(self.scaler.denormalize(y.row(i))))
            .collect())
    }

    fn oracle_version(&self) -> &str {
        &self.oracle_version
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGan {
    pub surrogate: GanSurrogate,
    pub critic: Network,
    pub history: TrainingHistory,
    pub split: Split,
}

impl TrainedGan {
    pub fn validation_nmse(&self, data: &TrainingData) -> Result<SegmentNmse> {
        let pred = self.surrogate.predict(&data.validation_designs)?;
        SegmentNmse::evaluate(&data.validation_responses, &pred)
    }
}

/// Trains on the 90/10 holdout split seeded by `config.seed`.
pub fn train_gan(dataset: &Dataset, config: &GanTrainingConfig) -> Result<TrainedGan> {
    let split = Split::holdout(dataset.len(), 0.9, config.seed)?;
    let data = TrainingData::prepare(dataset, split)?;
    train_gan_on(dataset, &data, config)
}

pub fn train_gan_on(dataset: &Dataset, data: &TrainingData, config: &GanTrainingConfig) -> Result<TrainedGan> {
    config.check()?;
    if dataset.len() < 2 * config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} entries is smaller than two batches of {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let mut state = GanState::new(config)?;
    let policy = config.noise_policy();
    let batch_master = seed::tagged_seed(config.seed, "gan-batches");
    let n_train = data.split.train.len();
    let mut history = TrainingHistory {
        gen_loss: Vec::with_capacity(config.iterations),
        critic_loss: Vec::with_capacity(config.iterations),
        snapshots: Vec::new(),
        sample_counts: vec![0; dataset.len()],
    };
    for it in 0..config.iterations {
        let batch_seed = seed::child_seed(batch_master, it as u64);
        let mut rng = seed::rng(batch_seed);
        let rows: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..n_train)).collect();
        for &r in &rows {
            history.sample_counts[data.split.train[r]] += 1;
        }
        let real = data.y_train.select_rows(&rows);
        let designs = data.x_train.select_rows(&rows);
        let losses = gan_train_step(&mut state, &real, &designs, &mut rng, it, batch_seed)?;
        history.gen_loss.push(losses.generator);
        history.critic_loss.push(losses.critic);
        let done = it + 1;
        if done % config.validation_interval == 0 || done == config.iterations {
            let y = generator_predict_normalized(&state.generator, &data.x_validation, policy)?;
            let pred: Vec<ResponseVector> = (0..y.rows())
                .map(|i| ResponseVector(data.scaler.denormalize(y.row(i))))
                .collect();
            history.snapshots.push(ValidationSnapshot {
                iteration: done,
                nmse: SegmentNmse::evaluate(&data.validation_responses, &pred)?,
            });
        }
    }
    Ok(TrainedGan {
        surrogate: GanSurrogate {
            generator: state.generator,
            scaler: data.scaler.clone(),
            geometry: data.geometry,
            policy,
            oracle_version: dataset.oracle_version.clone(),
        },
        critic: state.critic,
        history,
        split: data.split.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<SegmentNmse>,
    pub mean: SegmentNmse,
}

/// k-fold CV; each fold fits its own scaler on its training part.
pub fn cross_validate(dataset: &Dataset, folds: usize, config: &GanTrainingConfig) -> Result<CrossValidation> {
    let splits = Split::k_fold(dataset.len(), folds, config.seed)?;
    let mut per_fold = Vec::with_capacity(folds);
    for split in splits {
        let data = TrainingData::prepare(dataset, split)?;
        let trained = train_gan_on(dataset, &data, config)?;
        per_fold.push(trained.validation_nmse(&data)?);
    }
    Ok(CrossValidation {
        mean: SegmentNmse::mean(&per_fold),
        folds: per_fold,
    })
}

fn geometry_extra(g: &CellGeometry) -> Vec<f64> {
    vec![g.cell_side_mm, g.brick_size_mm, g.loop_inset_mm]
}

fn geometry_from_extra(file: &ModelFile) -> Result<CellGeometry> {
    match file.extra("geometry") {
        Some(&[side, brick, inset]) => {
            let g = CellGeometry {
                cell_side_mm: side,
                brick_size_mm: brick,
                loop_inset_mm: inset,
            };
            g.check()?;
            Ok(g)
        }
        _ => Err(Error::format("FPCM", "missing geometry record")),
    }
}

fn require_architecture(net: &Network, expected: &Architecture, what: &str) -> Result<()> {
    let found = net.architecture();
    if &found != expected {
        return Err(Error::Architecture(format!(
            "{what} has layer widths {:?}, expected {:?}",
            found.dims, expected.dims
        )));
    }
    Ok(())
}

impl GanSurrogate {
    pub fn to_model_file(&self) -> ModelFile {
        ModelFile::new(ModelRole::Generator, &self.oracle_version, self.generator.clone())
            .with_extra("scaler", self.scaler.to_flat())
            .with_extra("geometry", geometry_extra(&self.geometry))
    }

    /// Loads a generator checkpoint; the noise policy is supplied by the caller.
    pub fn from_model_file(file: ModelFile, policy: NoisePolicy) -> Result<Self> {
        if file.role != ModelRole::Generator {
            return Err(Error::Architecture(format!(
                "expected a generator checkpoint, found {}",
                file.role.name()
            )));
        }
        require_architecture(&file.network, &generator_architecture(), "generator")?;
        let scaler = ResponseScaler::from_flat(
            file.extra("scaler")
                .ok_or_else(|| Error::format("FPCM", "missing normalisation statistics"))?,
        )?;
        Ok(GanSurrogate {
            geometry: geometry_from_extra(&file)?,
            scaler,
            policy,
            oracle_version: file.oracle_version,
            generator: file.network,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_model_file().save(path)
    }

    pub fn load(path: &Path, policy: NoisePolicy) -> Result<Self> {
        Self::from_model_file(ModelFile::load(path)?, policy)
    }

    /// Errors unless the checkpoint was trained against `version`.
    pub fn require_oracle(&self, version: &str) -> Result<()> {
        if self.oracle_version != version {
            return Err(Error::VersionMismatch {
                expected: version.to_string(),
                found: self.oracle_version.clone(),
            });
        }
        Ok(())
    }
}

pub fn critic_model_file(critic: &Network, geometry: &CellGeometry) -> ModelFile {
    ModelFile::new(ModelRole::Critic, ORACLE_VERSION, critic.clone()).with_extra("geometry", geometry_extra(geometry))
}

pub fn critic_from_model_file(file: ModelFile) -> Result<Network> {
    if file.role != ModelRole::Critic {
        return Err(Error::Architecture(format!(
            "expected a critic checkpoint, found {}",
            file.role.name()
        )));
    }
    let arch = file.network.architecture();
    if arch != critic_architecture(true) && arch != critic_architecture(false) {
        return Err(Error::Architecture(format!(
            "critic has layer widths {:?}, expected {:?}",
            arch.dims,
            critic_architecture(true).dims
        )));
    }
    Ok(file.network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::standard_normal;
    use crate::nn::Mode;

    fn counted_params(arch: &Architecture) -> usize {
        let mut total = 0;
        for i in 0..arch.activations.len() {
            total += arch.dims[i] * arch.dims[i + 1] + arch.dims[i + 1];
            if arch.batch_norm[i] {
                total += 2 * arch.dims[i + 1];
            }
        }
        total
    }

    #[test]
    fn generator_shape_and_parameter_count() {
        let g = build_generator(&GanTrainingConfig::default(), 1).unwrap();
        assert_eq!(g.architecture().dims, vec![172, 128, 256, 512, 303]);
        // Layer-by-layer: 22144 + 33024 + 131584 + 155439 dense, 1792 batch norm.
        assert_eq!(counted_params(&generator_architecture()), 343_983);
        assert_eq!(g.param_count(), 343_983);
        let y = g.forward(&standard_normal(16, 172, 2), Mode::Train).unwrap().0;
        assert_eq!((y.rows(), y.cols()), (16, 303));
        for n in g.blocks.iter().filter_map(|b| b.norm.as_ref()) {
            assert_eq!(n.momentum, 0.8);
        }
    }

    #[test]
    fn same_seed_builds_identical_checkpoints() {
        let c = GanTrainingConfig::default();
        let a = ModelFile::new(ModelRole::Generator, ORACLE_VERSION, build_generator(&c, 9).unwrap());
        let b = ModelFile::new(ModelRole::Generator, ORACLE_VERSION, build_generator(&c, 9).unwrap());
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn critic_shape_and_range() {
        let c = build_critic(&GanTrainingConfig::default(), 3).unwrap();
        assert_eq!(c.architecture().dims, vec![375, 512, 256, 1]);
        let s = c.predict(&standard_normal(16, 375, 4).clone()).unwrap();
        assert_eq!((s.rows(), s.cols()), (16, 1));
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = c.predict(&Matrix::zeros(1, 375)).unwrap();
        assert_eq!(zero.get(0, 0), 0.5);
        let u = build_critic(
            &GanTrainingConfig {
                conditional_critic: false,
                ..GanTrainingConfig::default()
            },
            3,
        )
        .unwrap();
        assert_eq!(u.in_dim(), 303);
        assert_eq!(critic_score(&u, &[0.0; 303], &[0.0; 72]).unwrap(), 0.5);
    }

    #[test]
    fn value_function_algebra() {
        assert!((critic_loss(0.5, 0.5) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        for (sr, sf) in [(0.9, 0.2), (0.3, 0.7), (0.999, 0.001)] {
            let hand = -f64::ln(sr) - f64::ln(1.0 - sf);
            assert!((critic_loss(sr, sf) - hand).abs() < 1e-12);
        }
        assert!((critic_loss(0.0, 1.0) - 2.0 * -LOG_CLAMP.ln()).abs() < 1e-9);
        assert!(generator_loss(0.0).is_finite());
    }

    #[test]
    fn one_step_moves_both_networks() {
        let config = GanTrainingConfig::default();
        let mut s = GanState::new(&config).unwrap();
        let before = (s.generator.clone(), s.critic.clone());
        let real = standard_normal(16, 303, 1);
        let designs = standard_normal(16, 72, 2);
        let l = gan_train_step(&mut s, &real, &designs, &mut seed::rng(5), 0, 5).unwrap();
        assert!(l.critic.is_finite() && l.generator.is_finite());
        assert_ne!(s.critic, before.1);
        assert_ne!(s.generator, before.0);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostic() {
        let mut s = GanState::new(&GanTrainingConfig::default()).unwrap();
        let mut real = standard_normal(16, 303, 1);
        real.set(3, 4, f64::NAN);
        let designs = standard_normal(16, 72, 2);
        let err = gan_train_step(&mut s, &real, &designs, &mut seed::rng(5), 41, 1234).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 41, batch_seed: 1234 }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn critic_alone_separates_clusters() {
        // Generator frozen: only critic steps, real rows near +1, fake near −1.
        let config = GanTrainingConfig::default();
        let mut critic = build_critic(&config, 8).unwrap();
        let mut opt = AdamState::for_params(config.adam(), &critic.param_tensors());
        let mut rng = seed::rng(3);
        let cluster = |centre: f64, rng: &mut seed::Rng| {
            let mut m = standard_normal_matrix(16, 375, rng);
            m.data_mut().iter_mut().for_each(|v| *v = centre + 0.3 * *v);
            m
        };
        for _ in 0..200 {
            let input = Matrix::vcat(&cluster(0.5, &mut rng), &cluster(-0.5, &mut rng)).unwrap();
            let (s, cache) = critic.forward(&input, Mode::Train).unwrap();
            let mut ds = Matrix::zeros(32, 1);
            for i in 0..16 {
                ds.set(i, 0, -1.0 / (16.0 * s.get(i, 0)));
                ds.set(16 + i, 0, 1.0 / (16.0 * (1.0 - s.get(16 + i, 0))));
            }
            let (g, _) = critic.backward(&cache, &ds).unwrap();
            opt.step(critic.param_tensors(), &g.tensors()).unwrap();
        }
        let real = critic.predict(&cluster(0.5, &mut rng)).unwrap();
        let fake = critic.predict(&cluster(-0.5, &mut rng)).unwrap();
        let correct = real.data().iter().filter(|&&v| v > 0.5).count()
            + fake.data().iter().filter(|&&v| v < 0.5).count();
        assert!(correct as f64 / 32.0 > 0.95, "{correct}/32");
    }

    #[test]
    fn prediction_policies() {
        let g = build_generator(&GanTrainingConfig::default(), 1).unwrap();
        let x = standard_normal(3, 72, 2);
        let a = generator_predict_normalized(&g, &x, NoisePolicy::FixedZero).unwrap();
        let b = generator_predict_normalized(&g, &x, NoisePolicy::FixedZero).unwrap();
        assert_eq!(a, b);
        // average(1, s) is one forward with the first draw of s.
        let one = generator_predict_normalized(&g, &x, NoisePolicy::Average { draws: 1, seed: 4 }).unwrap();
        let mut z = standard_normal_matrix(1, NOISE_DIM, &mut seed::rng(4));
        z = Matrix::vcat(&Matrix::vcat(&z, &z).unwrap(), &z).unwrap();
        assert_eq!(one, g.predict(&Matrix::hcat(&z, &x).unwrap()).unwrap());
        // A row's prediction is independent of its batch mates.
        let row = generator_predict_normalized(&g, &x.select_rows(&[1]), NoisePolicy::Average { draws: 4, seed: 4 })
            .unwrap();
        let all = generator_predict_normalized(&g, &x, NoisePolicy::Average { draws: 4, seed: 4 }).unwrap();
        assert_eq!(row.row(0), all.row(1));
    }

    #[test]
    fn noise_averaging_reduces_variance() {
        let mut g = build_generator(&GanTrainingConfig::default(), 1).unwrap();
        // Give the running statistics realistic values so noise matters.
        for _ in 0..5 {
            g.forward_train(&standard_normal(32, 172, 7)).unwrap();
        }
        let x = standard_normal(1, 72, 2);
        let spread = |k: usize| {
            let outs: Vec<Matrix> = (0..20)
                .map(|s| generator_predict_normalized(&g, &x, NoisePolicy::Average { draws: k, seed: s }).unwrap())
                .collect();
            let mut total = 0.0;
            for j in 0..303 {
                let mean = outs.iter().map(|o| o.get(0, j)).sum::<f64>() / 20.0;
                total += outs.iter().map(|o| (o.get(0, j) - mean).powi(2)).sum::<f64>() / 19.0;
            }
            total
        };
        let (v1, v4, v16) = (spread(1), spread(4), spread(16));
        assert!(v1 > v4 && v4 > v16, "{v1} {v4} {v16}");
    }

    #[test]
    fn missing_scaler_is_an_error() {
        let g = build_generator(&GanTrainingConfig::default(), 1).unwrap();
        let d = DesignVector::new(vec![1.0; 72]).unwrap();
        assert!(generator_predict(&g, &d, &CellGeometry::default(), None, NoisePolicy::FixedZero).is_err());
    }

    #[test]
    fn checkpoint_architecture_is_enforced() {
        let critic = build_critic(&GanTrainingConfig::default(), 1).unwrap();
        let file = critic_model_file(&critic, &CellGeometry::default());
        assert_eq!(critic_from_model_file(file.clone()).unwrap(), critic);
        // A critic file is not a generator.
        assert!(GanSurrogate::from_model_file(file, NoisePolicy::FixedZero).is_err());
        let wrong = Network::init(
            &Architecture {
                dims: vec![172, 128, 303],
                activations: vec![Activation::leaky(), Activation::Identity],
                batch_norm: vec![true, false],
            },
            1,
        )
        .unwrap();
        let f = ModelFile::new(ModelRole::Generator, ORACLE_VERSION, wrong)
            .with_extra("scaler", vec![0.0; 606])
            .with_extra("geometry", vec![30.0, 0.5, 2.0]);
        let err = GanSurrogate::from_model_file(f, NoisePolicy::FixedZero).unwrap_err();
        assert!(matches!(err, Error::Architecture(_)), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainingHistory {
            gen_loss: vec![1.0, 2.0],
            critic_loss: vec![0.5, 0.25],
            snapshots: vec![ValidationSnapshot {
                iteration: 2,
                nmse: SegmentNmse {
                    gain: 0.3,
                    axial_ratio: 0.1,
                    return_loss: 0.2,
                },
            }],
            sample_counts: vec![],
        };
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "iter,gen_loss,critic_loss,val_nmse_ar,val_nmse_rl,val_nmse_gain\n1,1,0.5,,,\n2,2,0.25,0.1,0.2,0.3\n"
        );
    }
}
