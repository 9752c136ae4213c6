//! The three-convolution network: architecture description, parameters,
//! full forward pass and backpropagation.
//!
//! ```text
//! conv1 → act → pool → conv2 → act → pool → conv3 → act → flatten
//!       → dense1 → act → dense_out → softmax (fused with the loss)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::gradcheck::Fault;
use crate::init::xavier_uniform_init;
use crate::layers::{
    flatten_backward, flatten_forward, maxpool_backward_with, maxpool_forward, ConvCache,
    ConvLayer, ConvSpec, DenseCache, DenseLayer, PoolCache, PoolSpec,
};
use crate::tensor::{Element, Tensor};

pub const CONV_LAYER_NAMES: [&str; 3] = ["conv1", "conv2", "conv3"];

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "dense1.weight",
    "dense1.bias",
    "dense_out.weight",
    "dense_out.bias",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub input_channels: usize,
    pub filter_size: usize,
    pub conv_filters: [usize; 3],
    pub hidden: usize,
    pub classes: usize,
    pub activation: ActivationKind,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_size: 32,
            input_channels: 3,
            filter_size: 3,
            conv_filters: [32, 64, 64],
            hidden: 64,
            classes: 10,
            activation: ActivationKind::Asu,
        }
    }
}

/// Spatial/channel shapes produced by each stage of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageShapes {
    pub conv: [[usize; 3]; 3],
    pub pool: [[usize; 3]; 2],
    pub flat: usize,
    pub hidden: usize,
    pub logits: usize,
}

impl StageShapes {
    /// Every intermediate shape in forward order.
    pub fn cascade(&self) -> Vec<Vec<usize>> {
        vec![
            self.conv[0].to_vec(),
            self.pool[0].to_vec(),
            self.conv[1].to_vec(),
            self.pool[1].to_vec(),
            self.conv[2].to_vec(),
            vec![self.flat],
            vec![self.hidden],
            vec![self.logits],
        ]
    }
}

impl Architecture {
    /// Smallest-scale variant used for finite-difference certification:
    /// 22×22×3 input, two filters per conv, four hidden units, three classes.
    pub fn tiny(activation: ActivationKind) -> Self {
        Architecture {
            input_size: 22,
            input_channels: 3,
            filter_size: 3,
            conv_filters: [2, 2, 2],
            hidden: 4,
            classes: 3,
            activation,
        }
    }

    pub fn conv_specs(&self) -> Result<[ConvSpec; 3]> {
        let pool = PoolSpec::TWO_BY_TWO;
        let f = self.filter_size;
        let [f1, f2, f3] = self.conv_filters;
        let c1 = ConvSpec::valid(self.input_size, f, self.input_channels, f1);
        let n2 = pool.output_size(c1.output_size()?)?;
        let c2 = ConvSpec::valid(n2, f, f1, f2);
        let n3 = pool.output_size(c2.output_size()?)?;
        let c3 = ConvSpec::valid(n3, f, f2, f3);
        c3.output_size()?;
        Ok([c1, c2, c3])
    }

    pub fn stage_shapes(&self) -> Result<StageShapes> {
        let pool = PoolSpec::TWO_BY_TWO;
        let specs = self.conv_specs()?;
        let mut conv = [[0; 3]; 3];
        for (dst, spec) in conv.iter_mut().zip(&specs) {
            let out = spec.output_size()?;
            *dst = [out, out, spec.n_f];
        }
        let mut pools = [[0; 3]; 2];
        for (dst, c) in pools.iter_mut().zip(&conv) {
            let out = pool.output_size(c[0])?;
            *dst = [out, out, c[2]];
        }
        Ok(StageShapes {
            conv,
            pool: pools,
            flat: conv[2].iter().product(),
            hidden: self.hidden,
            logits: self.classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.classes < 2 {
            return Err(Error::Usage(format!(
                "need hidden ≥ 1 and classes ≥ 2, got {self:?}"
            )));
        }
        self.stage_shapes().map(|_| ())
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.input_size, self.input_size, self.input_channels]
    }

    pub fn param_dims(&self) -> Result<Vec<Vec<usize>>> {
        let specs = self.conv_specs()?;
        let flat = self.stage_shapes()?.flat;
        let mut dims = Vec::with_capacity(PARAM_NAMES.len());
        for s in &specs {
            dims.push(s.weight_dims().to_vec());
            dims.push(vec![s.n_f]);
        }
        dims.push(vec![flat, self.hidden]);
        dims.push(vec![self.hidden]);
        dims.push(vec![self.hidden, self.classes]);
        dims.push(vec![self.classes]);
        Ok(dims)
    }

    pub fn num_parameters(&self) -> Result<usize> {
        Ok(self
            .param_dims()?
            .iter()
            .map(|d| d.iter().product::<usize>())
            .sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub conv: [ConvLayer<T>; 3],
    pub dense1: DenseLayer<T>,
    pub dense_out: DenseLayer<T>,
}

impl<T: Element> ModelParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let [c1, c2, c3] = arch.conv_specs()?;
        let flat = arch.stage_shapes()?.flat;
        Ok(ModelParams {
            arch,
            conv: [
                ConvLayer::zeros(c1)?,
                ConvLayer::zeros(c2)?,
                ConvLayer::zeros(c3)?,
            ],
            dense1: DenseLayer::zeros(flat, arch.hidden)?,
            dense_out: DenseLayer::zeros(arch.hidden, arch.classes)?,
        })
    }

    /// Assemble from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for ((slot, t), name) in model
            .tensors_mut()
            .into_iter()
            .zip(tensors)
            .zip(PARAM_NAMES)
        {
            t.expect_dims(slot.dims(), name)?;
            *slot = t;
        }
        Ok(model)
    }

    pub fn tensors(&self) -> [&Tensor<T>; 10] {
        let [c1, c2, c3] = &self.conv;
        [
            &c1.weights,
            &c1.bias,
            &c2.weights,
            &c2.bias,
            &c3.weights,
            &c3.bias,
            &self.dense1.weights,
            &self.dense1.bias,
            &self.dense_out.weights,
            &self.dense_out.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        let [c1, c2, c3] = &mut self.conv;
        [
            &mut c1.weights,
            &mut c1.bias,
            &mut c2.weights,
            &mut c2.bias,
            &mut c3.weights,
            &mut c3.bias,
            &mut self.dense1.weights,
            &mut self.dense1.bias,
            &mut self.dense_out.weights,
            &mut self.dense_out.bias,
        ]
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let tensors = self.tensors().iter().map(|t| t.cast()).collect();
        ModelParams::from_tensors(self.arch, tensors).expect("same architecture")
    }
}

/// Xavier-uniform weights, zero biases, seeded.
pub fn build_model<T: Element>(arch: Architecture, seed: u64) -> Result<ModelParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::zeros(arch)?;
    for layer in &mut model.conv {
        let s = layer.spec;
        layer.weights = xavier_uniform_init(&s.weight_dims(), s.fan_in(), s.fan_out(), &mut rng)?;
    }
    for layer in [&mut model.dense1, &mut model.dense_out] {
        let (i, o) = (layer.in_dim(), layer.out_dim());
        layer.weights = xavier_uniform_init(&[i, o], i, o, &mut rng)?;
    }
    Ok(model)
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    conv: Vec<ConvCache<T>>,
    conv_pre: Vec<Tensor<T>>,
    pools: Vec<PoolCache>,
    flat_dims: Vec<usize>,
    dense1: DenseCache<T>,
    dense1_pre: Tensor<T>,
    dense_out: DenseCache<T>,
}

impl<T> ForwardTrace<T> {
    pub fn pool_caches(&self) -> &[PoolCache] {
        &self.pools
    }
}

/// A named intermediate output.
#[derive(Clone, Debug)]
pub struct LayerOutput<T> {
    pub name: &'static str,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub trace: ForwardTrace<T>,
    /// Post-activation conv maps, pooled maps, flattened vector and hidden
    /// activations, in forward order.
    pub activations: Vec<LayerOutput<T>>,
}

impl<T: Element> ForwardOutput<T> {
    pub fn activation(&self, name: &str) -> Option<&Tensor<T>> {
        self.activations
            .iter()
            .find(|l| l.name == name)
            .map(|l| &l.tensor)
    }
}

const POOL_NAMES: [&str; 2] = ["pool1", "pool2"];

fn activate<T: Element>(kind: ActivationKind, z: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
    let a = z.map(|v| kind.eval(v));
    if !a.is_finite() {
        return Err(Error::divergence(layer));
    }
    Ok(a)
}

pub fn forward_full<T: Element>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
) -> Result<ForwardOutput<T>> {
    let kind = params.arch.activation;
    image.expect_dims(&params.arch.input_dims(), "input image")?;
    let mut activations = Vec::with_capacity(8);
    let mut conv = Vec::with_capacity(3);
    let mut conv_pre = Vec::with_capacity(3);
    let mut pools = Vec::with_capacity(2);

    let mut x = image.clone();
    for (l, layer) in params.conv.iter().enumerate() {
        let (z, cache) = layer.forward(&x)?;
        let expected = crate::layers::conv_output_shape(&layer.spec)?;
        debug_assert_eq!(z.dims(), &[expected.0, expected.1, expected.2]);
        let a = activate(kind, &z, CONV_LAYER_NAMES[l])?;
        conv.push(cache);
        conv_pre.push(z);
        activations.push(LayerOutput {
            name: CONV_LAYER_NAMES[l],
            tensor: a.clone(),
        });
        x = if l < 2 {
            let (p, cache) = maxpool_forward(&a)?;
            pools.push(cache);
            activations.push(LayerOutput {
                name: POOL_NAMES[l],
                tensor: p.clone(),
            });
            p
        } else {
            a
        };
    }

    let flat_dims = x.dims().to_vec();
    let flat = flatten_forward(x)?;
    activations.push(LayerOutput {
        name: "flatten",
        tensor: flat.clone(),
    });
    let (dense1_pre, dense1) = params.dense1.forward(&flat)?;
    let hidden = activate(kind, &dense1_pre, "dense1")?;
    activations.push(LayerOutput {
        name: "dense1",
        tensor: hidden.clone(),
    });
    let (logits, dense_out) = params.dense_out.forward(&hidden)?;
    if !logits.is_finite() {
        return Err(Error::divergence("dense_out"));
    }

    Ok(ForwardOutput {
        logits,
        trace: ForwardTrace {
            conv,
            conv_pre,
            pools,
            flat_dims,
            dense1,
            dense1_pre,
            dense_out,
        },
        activations,
    })
}

/// Gradients of the loss with respect to every parameter, in
/// [`PARAM_NAMES`] order, given the gradient with respect to the logits.
pub fn backward<T: Element>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    backward_with(params, trace, grad_logits, None)
}

fn activation_backward<T: Element>(
    kind: ActivationKind,
    pre: &Tensor<T>,
    grad: &Tensor<T>,
    fault: Option<Fault>,
) -> Result<Tensor<T>> {
    pre.expect_same_shape(grad)?;
    let use_value = fault == Some(Fault::ActivationDerivativeUsesValue);
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&z, &g)| {
            let d = if use_value {
                kind.eval(z)
            } else {
                kind.derivative(z)
            };
            d * g
        })
        .collect();
    Tensor::from_vec(pre.dims(), data)
}

pub(crate) fn backward_with<T: Element>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Tensor<T>,
    fault: Option<Fault>,
) -> Result<Vec<Tensor<T>>> {
    let kind = params.arch.activation;
    let out = params
        .dense_out
        .backward_with(&trace.dense_out, grad_logits, fault)?;
    let g = activation_backward(kind, &trace.dense1_pre, &out.input, fault)?;
    let d1 = params.dense1.backward_with(&trace.dense1, &g, fault)?;
    let mut g = flatten_backward(d1.input, &trace.flat_dims)?;

    let mut conv_grads: Vec<(Tensor<T>, Tensor<T>)> = Vec::with_capacity(3);
    for l in (0..3).rev() {
        if l < 2 {
            g = maxpool_backward_with(&trace.pools[l], &g, fault)?;
        }
        let gz = activation_backward(kind, &trace.conv_pre[l], &g, fault)?;
        let cg = params.conv[l].backward_with(&trace.conv[l], &gz, fault)?;
        conv_grads.push((cg.weights, cg.bias));
        g = cg.input;
    }

    let mut grads = Vec::with_capacity(PARAM_NAMES.len());
    for (w, b) in conv_grads.into_iter().rev() {
        grads.push(w);
        grads.push(b);
    }
    grads.extend([d1.weights, d1.bias, out.weights, out.bias]);
    Ok(grads)
}
