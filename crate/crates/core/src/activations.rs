//! Scalar activations with analytic derivatives, and a stable softmax.
//!
//! ASU(z) = z·sin z is even and oscillates with amplitude growing in |z|.
//! GCU and ReLU are kept as switchable baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Asu,
    Gcu,
    Relu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [Self::Asu, Self::Gcu, Self::Relu];

    pub fn name(self) -> &'static str {
        match self {
            Self::Asu => "asu",
            Self::Gcu => "gcu",
            Self::Relu => "relu",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Self::Asu => 0,
            Self::Gcu => 1,
            Self::Relu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    #[inline]
    pub fn eval<T: Element>(self, z: T) -> T {
        match self {
            Self::Asu => asu(z),
            Self::Gcu => gcu(z),
            Self::Relu => relu(z),
        }
    }

    #[inline]
    pub fn derivative<T: Element>(self, z: T) -> T {
        match self {
            Self::Asu => asu_prime(z),
            Self::Gcu => gcu_prime(z),
            Self::Relu => relu_prime(z),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown activation '{s}' (asu, gcu, relu)")))
    }
}

#[inline]
pub fn asu<T: Element>(z: T) -> T {
    z * z.sin()
}

#[inline]
pub fn asu_prime<T: Element>(z: T) -> T {
    let (s, c) = z.sin_cos();
    s + z * c
}

/// Second derivative, only used for plotting the activation's shape.
#[inline]
pub fn asu_second<T: Element>(z: T) -> T {
    let (s, c) = z.sin_cos();
    (c + c) - z * s
}

#[inline]
pub fn gcu<T: Element>(z: T) -> T {
    z * z.cos()
}

#[inline]
pub fn gcu_prime<T: Element>(z: T) -> T {
    let (s, c) = z.sin_cos();
    c - z * s
}

#[inline]
pub fn relu<T: Element>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

/// Subgradient 0 at the kink.
#[inline]
pub fn relu_prime<T: Element>(z: T) -> T {
    if z > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Elementwise activation; a non-finite result is reported as divergence.
pub fn apply_activation<T: Element>(kind: ActivationKind, t: &Tensor<T>) -> Result<Tensor<T>> {
    let out = t.map(|z| kind.eval(z));
    if !out.is_finite() {
        return Err(Error::divergence(format!("{kind} activation")));
    }
    Ok(out)
}

pub fn softmax_stable<T: Element>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
