//! Forward and backward passes for convolution, max pooling, flatten and
//! dense layers.
//!
//! Layers operate on a single example. Feature maps are `[h, w, c]`,
//! convolution weights `[f, f, c_in, n_f]` and dense weights
//! `[in_dim, out_dim]`. Convolution is cross-correlation, lowered to a
//! matrix product through an im2col buffer whose column index is
//! `(a·f + b)·c_in + c`, which makes the weight tensor directly usable as a
//! `[f·f·c_in, n_f]` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Fault;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Element, Shape, Tensor};

/// Geometry of one square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// Input spatial size.
    pub n: usize,
    /// Filter spatial size.
    pub f: usize,
    /// Zero padding per side.
    pub p: usize,
    pub s: usize,
    /// Number of filters (output channels).
    pub n_f: usize,
    pub c_in: usize,
}

impl ConvSpec {
    /// Valid padding, stride 1.
    pub fn valid(n: usize, f: usize, c_in: usize, n_f: usize) -> Self {
        ConvSpec {
            n,
            f,
            p: 0,
            s: 1,
            n_f,
            c_in,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.s == 0 || self.n_f == 0 || self.c_in == 0 || self.n == 0 {
            return Err(Error::shape(format!("degenerate conv spec {self:?}")));
        }
        if self.n + 2 * self.p < self.f {
            return Err(Error::shape(format!(
                "filter {f} larger than padded input {n}+2·{p}",
                f = self.f,
                n = self.n,
                p = self.p
            )));
        }
        Ok(())
    }

    pub fn output_size(&self) -> Result<usize> {
        self.validate()?;
        Ok((self.n + 2 * self.p - self.f) / self.s + 1)
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.f, self.f, self.c_in, self.n_f]
    }

    pub fn fan_in(&self) -> usize {
        self.f * self.f * self.c_in
    }

    pub fn fan_out(&self) -> usize {
        self.f * self.f * self.n_f
    }
}

/// Output dimensions `(h, w, n_f)` with `h = w = ⌊(n + 2p − f)/s⌋ + 1`.
pub fn conv_output_shape(spec: &ConvSpec) -> Result<(usize, usize, usize)> {
    let out = spec.output_size()?;
    Ok((out, out, spec.n_f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvSpec,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    spec: ConvSpec,
    out: usize,
    cols: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ConvLayer<T> {
    pub fn zeros(spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ConvLayer {
            spec,
            weights: Tensor::zeros(&Shape::new(&spec.weight_dims())?),
            bias: Tensor::zeros(&Shape::new(&[spec.n_f])?),
        })
    }

    pub fn new(spec: ConvSpec, weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        spec.validate()?;
        weights.expect_dims(&spec.weight_dims(), "conv weights")?;
        bias.expect_dims(&[spec.n_f], "conv bias")?;
        Ok(ConvLayer {
            spec,
            weights,
            bias,
        })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let spec = self.spec;
        input.expect_dims(&[spec.n, spec.n, spec.c_in], "conv input")?;
        let (out, _, n_f) = conv_output_shape(&spec)?;
        let k = spec.fan_in();
        let cols = im2col(input.data(), &spec, out);

        let mut z = Vec::with_capacity(out * out * n_f);
        for _ in 0..out * out {
            z.extend_from_slice(self.bias.data());
        }
        gemm_nn(&cols, self.weights.data(), &mut z, out * out, k, n_f);
        let z = Tensor::from_vec(&[out, out, n_f], z)?;
        Ok((z, ConvCache { spec, out, cols }))
    }

    pub fn backward(&self, cache: &ConvCache<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        self.backward_with(cache, grad_out, None)
    }

    pub(crate) fn backward_with(
        &self,
        cache: &ConvCache<T>,
        grad_out: &Tensor<T>,
        fault: Option<Fault>,
    ) -> Result<ConvGrads<T>> {
        let spec = self.spec;
        if cache.spec != spec {
            return Err(Error::shape("conv cache was produced by a different layer"));
        }
        let out = cache.out;
        grad_out.expect_dims(&[out, out, spec.n_f], "conv grad_out")?;
        let k = spec.fan_in();
        let g = grad_out.data();

        let mut grad_w = vec![T::zero(); k * spec.n_f];
        gemm_tn(&cache.cols, g, &mut grad_w, k, out * out, spec.n_f);

        let mut grad_b = vec![T::zero(); spec.n_f];
        if fault != Some(Fault::ConvBiasGradDropped) {
            for row in g.chunks_exact(spec.n_f) {
                for (b, &v) in grad_b.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }

        let mut grad_cols = vec![T::zero(); out * out * k];
        gemm_nt(
            g,
            self.weights.data(),
            &mut grad_cols,
            out * out,
            spec.n_f,
            k,
        );
        let transpose_kernel = fault == Some(Fault::ConvInputGradKernelTransposed);
        let grad_in = col2im(&grad_cols, &spec, out, transpose_kernel);

        Ok(ConvGrads {
            input: Tensor::from_vec(&[spec.n, spec.n, spec.c_in], grad_in)?,
            weights: Tensor::from_vec(&spec.weight_dims(), grad_w)?,
            bias: Tensor::from_vec(&[spec.n_f], grad_b)?,
        })
    }
}

fn im2col<T: Element>(input: &[T], spec: &ConvSpec, out: usize) -> Vec<T> {
    let ConvSpec {
        n, f, p, s, c_in, ..
    } = *spec;
    let k = f * f * c_in;
    let mut cols = vec![T::zero(); out * out * k];
    for i in 0..out {
        for j in 0..out {
            let row = &mut cols[(i * out + j) * k..][..k];
            for a in 0..f {
                let y = (i * s + a) as isize - p as isize;
                if y < 0 || y >= n as isize {
                    continue;
                }
                for b in 0..f {
                    let x = (j * s + b) as isize - p as isize;
                    if x < 0 || x >= n as isize {
                        continue;
                    }
                    let src = (y as usize * n + x as usize) * c_in;
                    let dst = (a * f + b) * c_in;
                    row[dst..dst + c_in].copy_from_slice(&input[src..src + c_in]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], spec: &ConvSpec, out: usize, transpose_kernel: bool) -> Vec<T> {
    let ConvSpec {
        n, f, p, s, c_in, ..
    } = *spec;
    let k = f * f * c_in;
    let mut grad = vec![T::zero(); n * n * c_in];
    for i in 0..out {
        for j in 0..out {
            let row = &cols[(i * out + j) * k..][..k];
            for a in 0..f {
                for b in 0..f {
                    let (ya, xb) = if transpose_kernel { (b, a) } else { (a, b) };
                    let y = (i * s + ya) as isize - p as isize;
                    let x = (j * s + xb) as isize - p as isize;
                    if y < 0 || y >= n as isize || x < 0 || x >= n as isize {
                        continue;
                    }
                    let dst = (y as usize * n + x as usize) * c_in;
                    let src = (a * f + b) * c_in;
                    for c in 0..c_in {
                        grad[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    grad
}

/// Max-pooling geometry. The network only uses the 2×2 / stride 2 window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub const TWO_BY_TWO: PoolSpec = PoolSpec {
        window: 2,
        stride: 2,
    };

    pub fn output_size(&self, n: usize) -> Result<usize> {
        if n < self.window {
            return Err(Error::shape(format!(
                "pool input {n} smaller than window {}",
                self.window
            )));
        }
        Ok((n - self.window) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    /// Flat input index of each output's winning element.
    winners: Vec<usize>,
}

impl PoolCache {
    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// 2×2 / stride 2 max pooling. Ties go to the first element in row-major order.
pub fn maxpool_forward<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let pool = PoolSpec::TWO_BY_TWO;
    let &[h, w, c] = input.dims() else {
        return Err(Error::shape(format!(
            "pool input must be [h, w, c], got {:?}",
            input.dims()
        )));
    };
    let (oh, ow) = (pool.output_size(h)?, pool.output_size(w)?);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut winners = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best = ((i * pool.stride) * w + j * pool.stride) * c + ch;
                for a in 0..pool.window {
                    for b in 0..pool.window {
                        let idx = ((i * pool.stride + a) * w + j * pool.stride + b) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                winners.push(best);
            }
        }
    }
    let cache = PoolCache {
        in_dims: [h, w, c],
        out_dims: [oh, ow, c],
        winners,
    };
    Ok((Tensor::from_vec(&[oh, ow, c], out)?, cache))
}

pub fn maxpool_backward<T: Element>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool_backward_with(cache, grad_out, None)
}

pub(crate) fn maxpool_backward_with<T: Element>(
    cache: &PoolCache,
    grad_out: &Tensor<T>,
    fault: Option<Fault>,
) -> Result<Tensor<T>> {
    grad_out.expect_dims(&cache.out_dims, "pool grad_out")?;
    let [_, w, c] = cache.in_dims;
    let [_, ow, _] = cache.out_dims;
    let mut grad = Tensor::zeros(&Shape::new(&cache.in_dims)?);
    let g = grad.data_mut();
    for (o, (&winner, &v)) in cache.winners.iter().zip(grad_out.data()).enumerate() {
        let target = if fault == Some(Fault::PoolRoutesToWindowOrigin) {
            let (i, rest) = (o / (ow * c), o % (ow * c));
            let (j, ch) = (rest / c, rest % c);
            ((2 * i) * w + 2 * j) * c + ch
        } else {
            winner
        };
        g[target] += v;
    }
    Ok(grad)
}

pub fn flatten_forward<T: Element>(input: Tensor<T>) -> Result<Tensor<T>> {
    let n = input.len();
    input.reshape(&[n])
}

pub fn flatten_backward<T: Element>(grad: Tensor<T>, dims: &[usize]) -> Result<Tensor<T>> {
    grad.reshape(dims)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    input: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(DenseLayer {
            weights: Tensor::zeros(&Shape::new(&[in_dim, out_dim])?),
            bias: Tensor::zeros(&Shape::new(&[out_dim])?),
        })
    }

    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let &[_, out_dim] = weights.dims() else {
            return Err(Error::shape(format!(
                "dense weights must be [in, out], got {:?}",
                weights.dims()
            )));
        };
        bias.expect_dims(&[out_dim], "dense bias")?;
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        input.expect_dims(&[self.in_dim()], "dense input")?;
        let mut z = self.bias.data().to_vec();
        gemm_nn(
            input.data(),
            self.weights.data(),
            &mut z,
            1,
            self.in_dim(),
            self.out_dim(),
        );
        let cache = DenseCache {
            input: input.data().to_vec(),
        };
        Ok((Tensor::from_vec(&[self.out_dim()], z)?, cache))
    }

    pub fn backward(&self, cache: &DenseCache<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
        self.backward_with(cache, grad_out, None)
    }

    pub(crate) fn backward_with(
        &self,
        cache: &DenseCache<T>,
        grad_out: &Tensor<T>,
        fault: Option<Fault>,
    ) -> Result<DenseGrads<T>> {
        let (in_dim, out_dim) = (self.in_dim(), self.out_dim());
        grad_out.expect_dims(&[out_dim], "dense grad_out")?;
        if cache.input.len() != in_dim {
            return Err(Error::shape(
                "dense cache was produced by a different layer",
            ));
        }
        let g = grad_out.data();
        let w = self.weights.data();

        let mut grad_w = vec![T::zero(); in_dim * out_dim];
        gemm_tn(&cache.input, g, &mut grad_w, in_dim, 1, out_dim);

        let mut grad_in = vec![T::zero(); in_dim];
        if fault == Some(Fault::DenseInputGradTransposedWeights) {
            // reads the weight buffer as if it were stored [out, in]
            for (i, gi) in grad_in.iter_mut().enumerate() {
                for (j, &gj) in g.iter().enumerate() {
                    *gi += w[j * in_dim + i] * gj;
                }
            }
        } else {
            gemm_nt(g, w, &mut grad_in, 1, out_dim, in_dim);
        }

        Ok(DenseGrads {
            input: Tensor::from_vec(&[in_dim], grad_in)?,
            weights: Tensor::from_vec(&[in_dim, out_dim], grad_w)?,
            bias: grad_out.clone(),
        })
    }
}
