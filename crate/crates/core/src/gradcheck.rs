//! Finite-difference oracle for the analytic backward passes.
//!
//! Everything here runs in `f64`. The oracle only ever calls the forward
//! pass and the loss; it shares no code with backpropagation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    backward_with, build_model, forward_full, Architecture, ModelParams, PARAM_NAMES,
};
use crate::tensor::Tensor;
use crate::train::sparse_cce_with_softmax;

/// Step used for network checks.
pub const NETWORK_STEP: f64 = 1e-5;
/// Step used for scalar checks.
pub const SCALAR_STEP: f64 = 1e-6;
pub const REL_THRESHOLD: f64 = 1e-4;
/// Below this analytic magnitude the comparison switches to absolute error.
pub const TINY_ANALYTIC: f64 = 1e-6;
pub const ABS_THRESHOLD: f64 = 1e-7;

/// Deliberate backward-pass bugs, used to prove the oracle catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Dense input gradient reads the weight buffer as `[out, in]`.
    DenseInputGradTransposedWeights,
    ConvBiasGradDropped,
    /// Max-pool gradient always goes to the window's top-left element.
    PoolRoutesToWindowOrigin,
    /// Convolution input gradient uses the spatially transposed kernel.
    ConvInputGradKernelTransposed,
    /// Activation backward multiplies by f(z) instead of f'(z).
    ActivationDerivativeUsesValue,
}

impl Fault {
    pub const ALL: [Fault; 5] = [
        Fault::DenseInputGradTransposedWeights,
        Fault::ConvBiasGradDropped,
        Fault::PoolRoutesToWindowOrigin,
        Fault::ConvInputGradKernelTransposed,
        Fault::ActivationDerivativeUsesValue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fault::DenseInputGradTransposedWeights => "dense-transposed-weights",
            Fault::ConvBiasGradDropped => "conv-bias-dropped",
            Fault::PoolRoutesToWindowOrigin => "pool-routes-to-origin",
            Fault::ConvInputGradKernelTransposed => "conv-kernel-transposed",
            Fault::ActivationDerivativeUsesValue => "activation-uses-value",
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fault::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Fault::ALL.iter().map(|f| f.name()).collect();
                Error::Usage(format!("unknown fault '{s}' (valid: {})", valid.join(", ")))
            })
    }
}

/// Why a coordinate could not be probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    NonFinite,
    /// The perturbation crossed a non-differentiable point (max-pool tie).
    Kink,
}

/// A collection of `f64` tensors the oracle can perturb in place.
pub trait ParamSet {
    fn param_tensors(&self) -> Vec<&Tensor<f64>>;
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<f64>>;
}

impl ParamSet for Vec<Tensor<f64>> {
    fn param_tensors(&self) -> Vec<&Tensor<f64>> {
        self.iter().collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.iter_mut().collect()
    }
}

impl ParamSet for ModelParams<f64> {
    fn param_tensors(&self) -> Vec<&Tensor<f64>> {
        self.tensors().to_vec()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.tensors_mut().into_iter().collect()
    }
}

#[derive(Clone, Debug)]
pub struct NumericGrad {
    pub grads: Vec<Tensor<f64>>,
    /// `(tensor index, element index, reason)` of coordinates left out.
    pub skipped: Vec<(usize, usize, SkipReason)>,
}

/// Central differences `(L(θ + h·e) − L(θ − h·e)) / 2h` for every coordinate.
///
/// `loss_fn` may refuse a probe by returning a [`SkipReason`]; the
/// coordinate is then recorded as skipped and its numeric gradient left 0.
pub fn finite_diff_grad<P, F>(params: &mut P, mut loss_fn: F, h: f64) -> Result<NumericGrad>
where
    P: ParamSet,
    F: FnMut(&P) -> std::result::Result<f64, SkipReason>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Usage(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let sizes: Vec<(Vec<usize>, usize)> = params
        .param_tensors()
        .iter()
        .map(|t| (t.dims().to_vec(), t.len()))
        .collect();
    let mut grads = Vec::with_capacity(sizes.len());
    let mut skipped = Vec::new();
    for (ti, (dims, len)) in sizes.into_iter().enumerate() {
        let mut g = vec![0.0; len];
        for (ci, slot) in g.iter_mut().enumerate() {
            let original = params.param_tensors()[ti].data()[ci];
            params.param_tensors_mut()[ti].data_mut()[ci] = original + h;
            let plus = loss_fn(params);
            params.param_tensors_mut()[ti].data_mut()[ci] = original - h;
            let minus = loss_fn(params);
            params.param_tensors_mut()[ti].data_mut()[ci] = original;
            match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => *slot = (p - m) / (2.0 * h),
                (Err(reason), _) | (_, Err(reason)) => skipped.push((ti, ci, reason)),
                _ => skipped.push((ti, ci, SkipReason::NonFinite)),
            }
        }
        grads.push(Tensor::from_vec(&dims, g)?);
    }
    Ok(NumericGrad { grads, skipped })
}

/// Relative error with an absolute fallback for tiny analytic values.
/// Returns `(relative, absolute, passes)`.
pub fn compare_values(analytic: f64, numeric: f64) -> (f64, f64, bool) {
    let abs = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    let rel = if denom > 0.0 { abs / denom } else { 0.0 };
    let pass = if analytic.abs() < TINY_ANALYTIC {
        abs < ABS_THRESHOLD
    } else {
        rel < REL_THRESHOLD
    };
    (rel, abs, pass)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    /// Compare analytic and numeric gradients tensor by tensor.
    pub fn compare(
        names: &[&str],
        analytic: &[Tensor<f64>],
        numeric: &NumericGrad,
    ) -> Result<GradReport> {
        if names.len() != analytic.len() || analytic.len() != numeric.grads.len() {
            return Err(Error::shape("gradient lists differ in length"));
        }
        let mut params = Vec::with_capacity(names.len());
        for (ti, ((name, a), n)) in names.iter().zip(analytic).zip(&numeric.grads).enumerate() {
            a.expect_same_shape(n)?;
            let skip: Vec<usize> = numeric
                .skipped
                .iter()
                .filter(|(t, _, _)| *t == ti)
                .map(|(_, c, _)| *c)
                .collect();
            let mut check = ParamCheck {
                name: name.to_string(),
                max_rel: 0.0,
                max_abs: 0.0,
                worst_index: 0,
                checked: 0,
                skipped: skip.len(),
                pass: true,
            };
            let mut worst_score = f64::NEG_INFINITY;
            for (ci, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
                if skip.contains(&ci) {
                    continue;
                }
                let (rel, abs, ok) = compare_values(av, nv);
                check.checked += 1;
                check.pass &= ok;
                check.max_abs = check.max_abs.max(abs);
                if av.abs() >= TINY_ANALYTIC {
                    check.max_rel = check.max_rel.max(rel);
                }
                let score = if av.abs() < TINY_ANALYTIC {
                    abs / ABS_THRESHOLD
                } else {
                    rel / REL_THRESHOLD
                };
                if score > worst_score {
                    worst_score = score;
                    check.worst_index = ci;
                }
            }
            params.push(check);
        }
        Ok(GradReport { params })
    }

    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel))
    }

    /// Layer of the failing parameter closest to the loss, which is where a
    /// backward bug first shows up.
    pub fn failing_layer(&self) -> Option<&str> {
        self.params
            .iter()
            .rev()
            .find(|p| !p.pass)
            .map(|p| p.name.split('.').next().unwrap_or(&p.name))
    }

    /// Fold another report over the same parameters into this one.
    pub fn merge(&mut self, other: GradReport) {
        if self.params.is_empty() {
            *self = other;
            return;
        }
        for (mine, theirs) in self.params.iter_mut().zip(other.params) {
            if theirs.max_rel > mine.max_rel {
                mine.max_rel = theirs.max_rel;
                mine.worst_index = theirs.worst_index;
            }
            mine.max_abs = mine.max_abs.max(theirs.max_abs);
            mine.checked += theirs.checked;
            mine.skipped += theirs.skipped;
            mine.pass &= theirs.pass;
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>12} {:>12} {:>7} {:>7} {:>7}  result",
            "parameter", "max_rel", "max_abs", "worst", "checked", "skipped"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<18} {:>12.3e} {:>12.3e} {:>7} {:>7} {:>7}  {}",
                p.name,
                p.max_rel,
                p.max_abs,
                p.worst_index,
                p.checked,
                p.skipped,
                if p.pass { "ok" } else { "FAIL" }
            )?;
        }
        match self.failing_layer() {
            None => write!(f, "PASS max_rel={:.3e}", self.max_rel()),
            Some(layer) => write!(f, "FAIL worst layer: {layer}"),
        }
    }
}

/// Random input image with values in [0, 1] and a label, derived from `seed`.
pub fn probe_example(arch: &Architecture, seed: u64) -> Result<(Tensor<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1A6E);
    let dims = arch.input_dims();
    let data = (0..dims.iter().product::<usize>())
        .map(|_| rng.gen::<f64>())
        .collect();
    let label = rng.gen_range(0..arch.classes);
    Ok((Tensor::from_vec(&dims, data)?, label))
}

/// End-to-end check of one freshly initialized model against the oracle.
pub fn check_seed(arch: &Architecture, seed: u64, fault: Option<Fault>) -> Result<GradReport> {
    let mut params = build_model::<f64>(*arch, seed)?;
    let (image, label) = probe_example(arch, seed)?;

    let fwd = forward_full(&params, &image)?;
    let (_, grad_logits) = sparse_cce_with_softmax(fwd.logits.data(), label)?;
    let grad_logits = Tensor::from_vec(fwd.logits.dims(), grad_logits)?;
    let analytic = backward_with(&params, &fwd.trace, &grad_logits, fault)?;
    let baseline: Vec<Vec<usize>> = fwd
        .trace
        .pool_caches()
        .iter()
        .map(|c| c.winners().to_vec())
        .collect();

    let numeric = finite_diff_grad(
        &mut params,
        |p: &ModelParams<f64>| {
            let fwd = forward_full(p, &image).map_err(|_| SkipReason::NonFinite)?;
            let same_winners = fwd
                .trace
                .pool_caches()
                .iter()
                .zip(&baseline)
                .all(|(c, b)| c.winners() == b.as_slice());
            if !same_winners {
                return Err(SkipReason::Kink);
            }
            sparse_cce_with_softmax(fwd.logits.data(), label)
                .map(|(l, _)| l)
                .map_err(|_| SkipReason::NonFinite)
        },
        NETWORK_STEP,
    )?;
    GradReport::compare(&PARAM_NAMES, &analytic, &numeric)
}

/// Certify the full backward pass of `arch` on every seed.
pub fn check_model(arch: &Architecture, seeds: &[u64], fault: Option<Fault>) -> Result<GradReport> {
    let mut report = GradReport::default();
    for &seed in seeds {
        report.merge(check_seed(arch, seed, fault)?);
    }
    Ok(report)
}
