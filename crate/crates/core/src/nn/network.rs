//! Fixed-structure feed-forward networks: a chain of
//! `dense → [batch norm] → activation` blocks with hand-written gradients.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};
use crate::seed;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.8;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu(LEAKY_SLOPE)
    }

    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if u > 0.0 {
                    u
                } else {
                    s * u
                }
            }
            Activation::Sigmoid => sigmoid(u),
            Activation::Identity => u,
        }
    }

    /// Derivative given the pre-activation `u` and output `a`.
    pub fn derivative(self, u: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if u > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> (u8, f64) {
        match self {
            Activation::LeakyRelu(s) => (1, s),
            Activation::Sigmoid => (2, 0.0),
            Activation::Identity => (0, 0.0),
        }
    }

    pub(crate) fn from_code(code: u8, param: f64) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 if param > 0.0 && param < 1.0 => Ok(Activation::LeakyRelu(param)),
            2 => Ok(Activation::Sigmoid),
            _ => Err(Error::Architecture(format!("unknown activation code {code}/{param}"))),
        }
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `y = x · W + b` with `W` stored `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut seed::Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        DenseLayer {
            weights: Matrix::from_vec(in_dim, out_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(dim: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dense: DenseLayer,
    pub norm: Option<BatchNormLayer>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics; no cross-sample coupling.
    Infer,
}

/// Deliberate gradient bugs for mutation-testing the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Drops the batch-mean terms from the batch-norm input gradient.
    BatchNormMeanTerms,
    /// Uses slope 0.3 instead of the configured leaky slope on the way back.
    LeakySlope,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Matrix,
    /// Normalised pre-activations and 1/sqrt(var + eps), batch-norm blocks only.
    xhat: Option<Matrix>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    pre_activation: Matrix,
    output: Matrix,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    mode: Mode,
    blocks: Vec<BlockCache>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Sign pattern of every leaky-ReLU pre-activation; changes when a
    /// perturbation crosses a kink.
    pub fn kink_pattern(&self, net: &Network) -> Vec<bool> {
        net.blocks
            .iter()
            .zip(&self.blocks)
            .filter(|(b, _)| matches!(b.activation, Activation::LeakyRelu(_)))
            .flat_map(|(_, c)| c.pre_activation.data().iter().map(|&u| u > 0.0))
            .collect()
    }

    pub fn output(&self) -> &Matrix {
        &self.blocks.last().expect("non-empty network").output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
}

impl Gradients {
    /// Tensors in the same order as [`Network::param_tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.weights.data());
            out.push(&b.bias[..]);
            if !b.gamma.is_empty() {
                out.push(&b.gamma[..]);
                out.push(&b.beta[..]);
            }
        }
        out
    }
}

/// One trainable tensor and whether weight decay applies to it.
pub struct ParamTensor<'a> {
    pub values: &'a mut [f64],
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub blocks: Vec<Block>,
}

/// Layer widths, activations and batch-norm placement of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub batch_norm: Vec<bool>,
}

impl Architecture {
    pub fn check(&self) -> Result<()> {
        let n = self.dims.len().saturating_sub(1);
        if n == 0 || self.activations.len() != n || self.batch_norm.len() != n {
            return Err(Error::Architecture(format!(
                "{} dims, {} activations, {} batch-norm flags",
                self.dims.len(),
                self.activations.len(),
                self.batch_norm.len()
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Architecture("zero-width layer".into()));
        }
        Ok(())
    }
}

impl Network {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.check()?;
        let mut rng = seed::rng(seed);
        let blocks = (0..arch.activations.len())
            .map(|i| Block {
                dense: DenseLayer::glorot(arch.dims[i], arch.dims[i + 1], &mut rng),
                norm: arch.batch_norm[i].then(|| BatchNormLayer::new(arch.dims[i + 1])),
                activation: arch.activations[i],
            })
            .collect();
        Ok(Network { blocks })
    }

    pub fn architecture(&self) -> Architecture {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.blocks.iter().map(|b| b.dense.out_dim()));
        Architecture {
            dims,
            activations: self.blocks.iter().map(|b| b.activation).collect(),
            batch_norm: self.blocks.iter().map(|b| b.norm.is_some()).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].dense.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().expect("non-empty network").dense.out_dim()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.blocks.iter().any(|b| b.norm.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                b.dense.weights.data().len()
                    + b.dense.bias.len()
                    + b.norm.as_ref().map_or(0, |n| 2 * n.dim())
            })
            .sum()
    }

    /// Trainable tensors in declaration order: per block W, b, then γ, β.
    pub fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(ParamTensor {
                values: b.dense.weights.data_mut(),
                decay: true,
            });
            out.push(ParamTensor {
                values: &mut b.dense.bias,
                decay: false,
            });
            if let Some(n) = &mut b.norm {
                out.push(ParamTensor {
                    values: &mut n.gamma,
                    decay: true,
                });
                out.push(ParamTensor {
                    values: &mut n.beta,
                    decay: false,
                });
            }
        }
        out
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<(Matrix, Cache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects width {}, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        if mode == Mode::Train && self.has_batch_norm() && x.rows() < 2 {
            return Err(Error::Shape(
                "batch norm in train mode needs at least 2 rows".into(),
            ));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut input = x.clone();
        for block in &self.blocks {
            let c = block_forward(block, input, mode)?;
            input = c.output.clone();
            caches.push(c);
        }
        Ok((input, Cache { mode, blocks: caches }))
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running averages.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Cache)> {
        let (out, cache) = self.forward(x, Mode::Train)?;
        self.update_running_stats(&cache);
        Ok((out, cache))
    }

    /// `running ← momentum · running + (1 − momentum) · batch`.
    pub fn update_running_stats(&mut self, cache: &Cache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let Some(n) = &mut b.norm {
                let m = n.momentum;
                for j in 0..n.dim() {
                    n.running_mean[j] = m * n.running_mean[j] + (1.0 - m) * c.batch_mean[j];
                    n.running_var[j] = m * n.running_var[j] + (1.0 - m) * c.batch_var[j];
                }
            }
        }
    }

    /// Inference without keeping intermediates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects width {}, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut a = x.clone();
        for block in &self.blocks {
            a = block_forward(block, a, Mode::Infer)?.output;
        }
        Ok(a)
    }

    pub fn backward(&self, cache: &Cache, grad_output: &Matrix) -> Result<(Gradients, Matrix)> {
        self.backward_with(cache, grad_output, Fault::None)
    }

    pub fn backward_with(
        &self,
        cache: &Cache,
        grad_output: &Matrix,
        fault: Fault,
    ) -> Result<(Gradients, Matrix)> {
        if cache.mode != Mode::Train {
            return Err(Error::InvalidArgument(
                "cannot back-propagate through an inference-mode cache".into(),
            ));
        }
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::Shape("cache does not belong to this network".into()));
        }
        let out = cache.output();
        if grad_output.rows() != out.rows() || grad_output.cols() != out.cols() {
            return Err(Error::Shape(format!(
                "output gradient {}x{} for output {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut upstream = grad_output.clone();
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (g, down) = block_backward(block, c, upstream, fault)?;
            grads.push(g);
            upstream = down;
        }
        grads.reverse();
        Ok((Gradients { blocks: grads }, upstream))
    }
}

fn block_forward(block: &Block, input: Matrix, mode: Mode) -> Result<BlockCache> {
    let rows = input.rows();
    let dim = block.dense.out_dim();
    let mut z = Matrix::zeros(rows, dim);
    for i in 0..rows {
        z.row_mut(i).copy_from_slice(&block.dense.bias);
    }
    gemm(1.0, &input, false, &block.dense.weights, false, 1.0, &mut z)?;

    let mut xhat = None;
    let mut inv_std = Vec::new();
    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    let pre = match &block.norm {
        None => z,
        Some(n) => {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean: Vec<f64> = z.column_sums().iter().map(|s| s / rows as f64).collect();
                    let mut var = vec![0.0; dim];
                    for i in 0..rows {
                        for (j, v) in z.row(i).iter().enumerate() {
                            let d = v - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows as f64);
                    (mean, var)
                }
                Mode::Infer => (n.running_mean.clone(), n.running_var.clone()),
            };
            inv_std = var.iter().map(|v| 1.0 / (v + n.epsilon).sqrt()).collect();
            let mut xh = z;
            let mut u = Matrix::zeros(rows, dim);
            for i in 0..rows {
                let xr = xh.row_mut(i);
                for j in 0..dim {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                }
                let ur = u.row_mut(i);
                for j in 0..dim {
                    ur[j] = n.gamma[j] * xr[j] + n.beta[j];
                }
            }
            batch_mean = mean;
            batch_var = var;
            xhat = Some(xh);
            u
        }
    };
    let mut output = pre.clone();
    output
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = block.activation.apply(*v));
    Ok(BlockCache {
        input,
        xhat,
        inv_std,
        batch_mean,
        batch_var,
        pre_activation: pre,
        output,
    })
}

fn block_backward(
    block: &Block,
    c: &BlockCache,
    mut grad: Matrix,
    fault: Fault,
) -> Result<(BlockGrads, Matrix)> {
    let rows = grad.rows();
    let dim = block.dense.out_dim();
    let act = match (block.activation, fault) {
        (Activation::LeakyRelu(_), Fault::LeakySlope) => Activation::LeakyRelu(0.3),
        (a, _) => a,
    };
    for ((g, &u), &a) in grad
        .data_mut()
        .iter_mut()
        .zip(c.pre_activation.data())
        .zip(c.output.data())
    {
        *g *= act.derivative(u, a);
    }

    let (mut gamma_grad, mut beta_grad) = (Vec::new(), Vec::new());
    if let (Some(n), Some(xhat)) = (&block.norm, &c.xhat) {
        beta_grad = grad.column_sums();
        gamma_grad = vec![0.0; dim];
        for i in 0..rows {
            for (j, (g, x)) in grad.row(i).iter().zip(xhat.row(i)).enumerate() {
                gamma_grad[j] += g * x;
            }
        }
        // dxhat = dy · γ; dz = inv_std/B · (B·dxhat − Σ dxhat − xhat · Σ dxhat·xhat)
        let b = rows as f64;
        let sum_dxhat: Vec<f64> = (0..dim).map(|j| beta_grad[j] * n.gamma[j]).collect();
        let sum_dxhat_xhat: Vec<f64> = (0..dim).map(|j| gamma_grad[j] * n.gamma[j]).collect();
        for i in 0..rows {
            let xr = xhat.row(i);
            let gr = grad.row_mut(i);
            for j in 0..dim {
                let dxhat = gr[j] * n.gamma[j];
                gr[j] = match fault {
                    Fault::BatchNormMeanTerms => dxhat * c.inv_std[j],
                    _ => {
                        c.inv_std[j] / b
                            * (b * dxhat - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j])
                    }
                };
            }
        }
    }

    let mut w_grad = Matrix::zeros(block.dense.in_dim(), dim);
    gemm(1.0, &c.input, true, &grad, false, 0.0, &mut w_grad)?;
    let bias_grad = grad.column_sums();
    let mut input_grad = Matrix::zeros(rows, block.dense.in_dim());
    gemm(1.0, &grad, false, &block.dense.weights, true, 0.0, &mut input_grad)?;
    Ok((
        BlockGrads {
            weights: w_grad,
            bias: bias_grad,
            gamma: gamma_grad,
            beta: beta_grad,
        },
        input_grad,
    ))
}
