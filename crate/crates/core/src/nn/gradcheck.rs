//! Central-difference verification of analytic gradients.
//!
//! A random subset of parameters is perturbed by ±h and the loss difference
//! compared with the back-propagated gradient. Probes whose perturbation
//! flips a leaky-ReLU sign or a max-pool winner are resampled, since the
//! finite difference straddles a kink there. Running batch-norm statistics
//! are never touched while probing.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::network::{Fault, Mode, Network, ParamTensor};
use crate::error::{Error, Result};
use crate::seed;

/// Loss value and its gradient with respect to the model output.
pub type LossFn<'a> = dyn Fn(&Matrix) -> (f64, Matrix) + 'a;

/// Result of one loss evaluation inside the checker.
pub struct Probe {
    pub loss: f64,
    /// Analytic gradients per tensor, when requested.
    pub grads: Option<Vec<Vec<f64>>>,
    /// Piecewise-linear region identifier; see module docs.
    pub pattern: Vec<u32>,
}

/// Models the checker can probe.
pub trait GradProbe {
    fn param_tensors(&mut self) -> Vec<ParamTensor<'_>>;

    fn probe(&self, x: &Matrix, loss: &LossFn<'_>, fault: Fault, with_grads: bool) -> Result<Probe>;
}

impl GradProbe for Network {
    fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        Network::param_tensors(self)
    }

    fn probe(&self, x: &Matrix, loss: &LossFn<'_>, fault: Fault, with_grads: bool) -> Result<Probe> {
        let (y, cache) = self.forward(x, Mode::Train)?;
        let (value, dy) = loss(&y);
        let grads = if with_grads {
            let (g, _) = self.backward_with(&cache, &dy, fault)?;
            Some(g.tensors().into_iter().map(<[f64]>::to_vec).collect())
        } else {
            None
        };
        Ok(Probe {
            loss: value,
            grads,
            pattern: cache.kink_pattern(self).into_iter().map(u32::from).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Denominator floor for the relative error of near-zero gradients.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            probes: 100,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub probes: usize,
    pub skipped_kinks: usize,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn gradient_check<M: GradProbe>(
    model: &mut M,
    batch: &Matrix,
    loss: &LossFn<'_>,
    config: &GradCheckConfig,
    fault: Fault,
) -> Result<GradCheckReport> {
    let base = model.probe(batch, loss, fault, true)?;
    let analytic = base.grads.expect("requested");
    let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.values.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("model has no parameters".into()));
    }
    let mut rng = seed::rng(config.seed);
    let mut max_rel: f64 = 0.0;
    let mut done = 0;
    let mut skipped = 0;
    let max_attempts = 20 * config.probes + 100;
    for _ in 0..max_attempts {
        if done == config.probes {
            break;
        }
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let original = model.param_tensors()[t].values[flat];
        let mut eval_at = |v: f64| -> Result<Probe> {
            model.param_tensors()[t].values[flat] = v;
            model.probe(batch, loss, fault, false)
        };
        let plus = eval_at(original + config.step);
        let minus = eval_at(original - config.step);
        model.param_tensors()[t].values[flat] = original;
        let (plus, minus) = (plus?, minus?);
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * config.step);
        max_rel = max_rel.max(rel_error(analytic[t][flat], numeric, config.abs_floor));
        done += 1;
    }
    if done < config.probes {
        return Err(Error::InvalidArgument(format!(
            "only {done} of {} probes avoided activation kinks",
            config.probes
        )));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        pass: max_rel < config.tolerance,
        probes: done,
        skipped_kinks: skipped,
    })
}

/// `0.5 · Σ (y − t)² / rows` against a fixed target.
pub fn mse_loss(target: Matrix) -> impl Fn(&Matrix) -> (f64, Matrix) {
    move |y: &Matrix| {
        let n = y.rows() as f64;
        let mut grad = Matrix::zeros(y.rows(), y.cols());
        let mut value = 0.0;
        for ((g, a), b) in grad.data_mut().iter_mut().zip(y.data()).zip(target.data()) {
            let d = a - b;
            value += 0.5 * d * d / n;
            *g = d / n;
        }
        (value, grad)
    }
}

pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seed::rng(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}
