//! 3×3 same-padded convolutions with 2×2 max pooling, feeding a dense head.
//! Only what the CNN baseline needs.
//!
//! Feature maps are stored pixel-major: a `(batch · side²) × channels` matrix
//! whose row `(b · side + y) · side + x` holds every channel of one pixel.

use rand::Rng as _;

use super::gradcheck::{GradProbe, LossFn, Probe};
use super::matrix::{gemm, Matrix};
use super::network::{Activation, Cache as DenseCache, Fault, Mode, Network, ParamTensor};
use crate::error::{Error, Result};
use crate::seed;

const K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(9 · in_channels) × out_channels`, rows ordered `(ky, kx, c_in)`.
    pub kernel: Matrix,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn glorot(in_channels: usize, out_channels: usize, rng: &mut seed::Rng) -> Self {
        let fan = (K * K * (in_channels + out_channels)) as f64;
        let limit = (6.0 / fan).sqrt();
        let rows = K * K * in_channels;
        let data = (0..rows * out_channels)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel: Matrix::from_vec(rows, out_channels, data).expect("sized above"),
            bias: vec![0.0; out_channels],
        }
    }
}

fn im2col(input: &Matrix, batch: usize, side: usize) -> Matrix {
    let c = input.cols();
    let mut cols = Matrix::zeros(batch * side * side, K * K * c);
    for b in 0..batch {
        for y in 0..side {
            for x in 0..side {
                let dst = cols.row_mut((b * side + y) * side + x);
                for ky in 0..K {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= side as isize {
                            continue;
                        }
                        let src = input.row((b * side + iy as usize) * side + ix as usize);
                        let off = (ky * K + kx) * c;
                        dst[off..off + c].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Matrix, batch: usize, side: usize, channels: usize) -> Matrix {
    let mut out = Matrix::zeros(batch * side * side, channels);
    for b in 0..batch {
        for y in 0..side {
            for x in 0..side {
                let src = cols.row((b * side + y) * side + x);
                for ky in 0..K {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= side as isize {
                        continue;
                    }
                    for kx in 0..K {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= side as isize {
                            continue;
                        }
                        let dst = out.row_mut((b * side + iy as usize) * side + ix as usize);
                        let off = (ky * K + kx) * channels;
                        for (d, s) in dst.iter_mut().zip(&src[off..off + channels]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ConvCache {
    side: usize,
    cols: Matrix,
    pre_activation: Matrix,
    /// Winning row of the activation map for every pooled element.
    argmax: Vec<u32>,
}

/// Convolution blocks `conv → leaky ReLU → 2×2 max-pool`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub input_side: usize,
    pub layers: Vec<Conv2d>,
    pub slope: f64,
}

impl ConvStage {
    pub fn output_side(&self) -> usize {
        self.input_side >> self.layers.len()
    }

    pub fn output_width(&self) -> usize {
        let s = self.output_side();
        s * s * self.layers.last().map_or(1, |l| l.out_channels)
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<ConvCache>)> {
        let side0 = self.input_side;
        if x.cols() != side0 * side0 {
            return Err(Error::Shape(format!(
                "conv stage expects {} pixels, got {}",
                side0 * side0,
                x.cols()
            )));
        }
        let batch = x.rows();
        let mut maps = Matrix::from_vec(batch * side0 * side0, 1, x.data().to_vec())?;
        let mut side = side0;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if side % 2 != 0 {
                return Err(Error::Shape(format!("cannot pool a {side}x{side} map")));
            }
            let cols = im2col(&maps, batch, side);
            let mut z = Matrix::zeros(cols.rows(), layer.out_channels);
            for i in 0..z.rows() {
                z.row_mut(i).copy_from_slice(&layer.bias);
            }
            gemm(1.0, &cols, false, &layer.kernel, false, 1.0, &mut z)?;
            let act = Activation::LeakyRelu(self.slope);
            let half = side / 2;
            let ch = layer.out_channels;
            let mut pooled = Matrix::zeros(batch * half * half, ch);
            let mut argmax = vec![0u32; batch * half * half * ch];
            for b in 0..batch {
                for py in 0..half {
                    for px in 0..half {
                        let o = (b * half + py) * half + px;
                        for c in 0..ch {
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = 0;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let r = (b * side + 2 * py + dy) * side + 2 * px + dx;
                                let v = act.apply(z.get(r, c));
                                if v > best {
                                    best = v;
                                    arg = r;
                                }
                            }
                            pooled.set(o, c, best);
                            argmax[o * ch + c] = arg as u32;
                        }
                    }
                }
            }
            caches.push(ConvCache {
                side,
                cols,
                pre_activation: z,
                argmax,
            });
            maps = pooled;
            side = half;
        }
        let flat = Matrix::from_vec(batch, maps.rows() / batch * maps.cols(), maps.into_data())?;
        Ok((flat, caches))
    }

    /// Returns per-layer (kernel, bias) gradients.
    fn backward(
        &self,
        caches: &[ConvCache],
        grad_flat: &Matrix,
        fault: Fault,
    ) -> Result<Vec<(Matrix, Vec<f64>)>> {
        let batch = grad_flat.rows();
        let last = self.layers.last().expect("non-empty stage");
        let mut upstream = Matrix::from_vec(
            grad_flat.data().len() / last.out_channels,
            last.out_channels,
            grad_flat.data().to_vec(),
        )?;
        let slope = match fault {
            Fault::LeakySlope => 0.3,
            _ => self.slope,
        };
        let mut grads = Vec::with_capacity(self.layers.len());
        for (li, (layer, c)) in self.layers.iter().zip(caches).enumerate().rev() {
            let ch = layer.out_channels;
            let mut dz = Matrix::zeros(c.pre_activation.rows(), ch);
            for (o, g) in upstream.data().iter().enumerate() {
                let r = c.argmax[o] as usize;
                let col = o % ch;
                let u = c.pre_activation.get(r, col);
                let d = if u > 0.0 { 1.0 } else { slope };
                dz.set(r, col, dz.get(r, col) + g * d);
            }
            let mut dk = Matrix::zeros(layer.kernel.rows(), ch);
            gemm(1.0, &c.cols, true, &dz, false, 0.0, &mut dk)?;
            let db = dz.column_sums();
            grads.push((dk, db));
            if li > 0 {
                let mut dcols = Matrix::zeros(c.cols.rows(), c.cols.cols());
                gemm(1.0, &dz, false, &layer.kernel, true, 0.0, &mut dcols)?;
                upstream = col2im(&dcols, batch, c.side, layer.in_channels);
            }
        }
        grads.reverse();
        Ok(grads)
    }
}

/// Intermediates of a [`CnnRegressor`] forward pass.
pub struct CnnCache {
    conv: Vec<ConvCache>,
    head: DenseCache,
}

impl CnnCache {
    pub fn kink_pattern(&self, model: &CnnRegressor) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .conv
            .iter()
            .flat_map(|c| {
                c.pre_activation
                    .data()
                    .iter()
                    .map(|&u| u32::from(u > 0.0))
                    .chain(c.argmax.iter().copied())
            })
            .collect();
        out.extend(self.head.kink_pattern(&model.head).into_iter().map(u32::from));
        out
    }
}

/// Convolution stage followed by a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnRegressor {
    pub stage: ConvStage,
    pub head: Network,
}

impl CnnRegressor {
    /// Random kernels for `channels` conv blocks on a `side × side` input.
    pub fn init_stage(side: usize, channels: &[usize], slope: f64, seed: u64) -> ConvStage {
        let mut rng = seed::rng(seed);
        let mut c_in = 1;
        let layers = channels
            .iter()
            .map(|&c| {
                let l = Conv2d::glorot(c_in, c, &mut rng);
                c_in = c;
                l
            })
            .collect();
        ConvStage {
            input_side: side,
            layers,
            slope,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, CnnCache)> {
        let (flat, conv) = self.stage.forward(x)?;
        let (y, head) = self.head.forward(&flat, Mode::Train)?;
        Ok((y, CnnCache { conv, head }))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let (flat, _) = self.stage.forward(x)?;
        self.head.predict(&flat)
    }

    /// Gradients in [`Self::param_tensors`] order.
    pub fn backward(&self, cache: &CnnCache, dy: &Matrix, fault: Fault) -> Result<Vec<Vec<f64>>> {
        let (head_grads, d_flat) = self.head.backward_with(&cache.head, dy, fault)?;
        let conv_grads = self.stage.backward(&cache.conv, &d_flat, fault)?;
        let mut out = Vec::new();
        for (k, b) in conv_grads {
            out.push(k.into_data());
            out.push(b);
        }
        out.extend(head_grads.tensors().into_iter().map(<[f64]>::to_vec));
        Ok(out)
    }

    pub fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        let mut out = Vec::new();
        for l in &mut self.stage.layers {
            out.push(ParamTensor {
                values: l.kernel.data_mut(),
                decay: true,
            });
            out.push(ParamTensor {
                values: &mut l.bias,
                decay: false,
            });
        }
        out.extend(self.head.param_tensors());
        out
    }

    pub fn param_count(&self) -> usize {
        self.stage
            .layers
            .iter()
            .map(|l| l.kernel.data().len() + l.bias.len())
            .sum::<usize>()
            + self.head.param_count()
    }
}

impl GradProbe for CnnRegressor {
    fn param_tensors(&mut self) -> Vec<ParamTensor<'_>> {
        CnnRegressor::param_tensors(self)
    }

    fn probe(&self, x: &Matrix, loss: &LossFn<'_>, fault: Fault, with_grads: bool) -> Result<Probe> {
        let (y, cache) = self.forward(x)?;
        let (value, dy) = loss(&y);
        let grads = if with_grads {
            Some(self.backward(&cache, &dy, fault)?)
        } else {
            None
        };
        Ok(Probe {
            loss: value,
            grads,
            pattern: cache.kink_pattern(self),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{gradient_check, mse_loss, standard_normal, GradCheckConfig};
    use crate::nn::network::Architecture;

    fn small_cnn(seed: u64) -> CnnRegressor {
        let stage = CnnRegressor::init_stage(8, &[3, 4], 0.2, seed);
        let head = Network::init(
            &Architecture {
                dims: vec![stage.output_width(), 6, 5],
                activations: vec![Activation::leaky(), Activation::Identity],
                batch_norm: vec![false, false],
            },
            seed + 1,
        )
        .unwrap();
        CnnRegressor { stage, head }
    }

    #[test]
    fn shape_chain_60_to_15() {
        let stage = CnnRegressor::init_stage(60, &[8, 16], 0.2, 0);
        assert_eq!(stage.output_side(), 15);
        assert_eq!(stage.output_width(), 3600);
        let x = standard_normal(2, 3600, 1);
        let (flat, caches) = stage.forward(&x).unwrap();
        assert_eq!((flat.rows(), flat.cols()), (2, 3600));
        assert_eq!(caches[0].side, 60);
        assert_eq!(caches[1].side, 30);
    }

    #[test]
    fn single_pixel_convolution_matches_direct_sum() {
        let mut stage = CnnRegressor::init_stage(4, &[2], 0.2, 3);
        stage.layers[0].bias = vec![0.1, -0.2];
        let mut x = Matrix::zeros(1, 16);
        x.set(0, 5, 1.0); // pixel (y=1, x=1)
        let cols = im2col(&Matrix::from_vec(16, 1, x.data().to_vec()).unwrap(), 1, 4);
        let k = &stage.layers[0].kernel;
        // Output pixel (0,0) sees input (1,1) at kernel offset (ky=2, kx=2).
        let z00: f64 = (0..9).map(|t| cols.get(0, t) * k.get(t, 0)).sum();
        assert!((z00 - k.get(8, 0)).abs() < 1e-15);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = standard_normal(2 * 36, 3, 1);
        let c = standard_normal(2 * 36, 27, 2);
        let lhs: f64 = im2col(&x, 2, 6).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(col2im(&c, 2, 6, 3).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradients_pass_finite_differences() {
        let mut m = small_cnn(4);
        let x = standard_normal(3, 64, 5);
        let loss = mse_loss(standard_normal(3, 5, 6));
        let r = gradient_check(&mut m, &x, &loss, &GradCheckConfig::default(), Fault::None).unwrap();
        assert!(r.pass, "{r:?}");
        let r = gradient_check(&mut m, &x, &loss, &GradCheckConfig::default(), Fault::LeakySlope).unwrap();
        assert!(!r.pass, "{r:?}");
    }
}
