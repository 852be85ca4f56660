//! Parameter containers and the small layers built from them.
//!
//! Every parameter struct is generic over its leaf type `P`: `Tensor<T>` for
//! owned weights, [`Var`] once bound onto a [`Graph`]. [`Module`] gives a
//! stable traversal order shared by the optimizer and the checkpoint code.

use crate::graph::{Graph, Var};
use crate::rng::{uniform_tensor, Rng};
use crate::scalar::{s, Scalar};
use crate::tensor::{Result, Tensor};

/// Fixed-order traversal of a parameter tree.
pub trait Module<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>);

    fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn leaves(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P, M: Module<P>> Module<P> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        for m in self.iter_mut() {
            m.visit_mut(out);
        }
    }
}

/// Total scalar count of an owned parameter tree.
pub fn param_count<T: Scalar, M: Module<Tensor<T>>>(m: &M) -> usize {
    m.leaves().iter().map(|t| t.numel()).sum()
}

/// Affine map `x . weight + bias`, weight stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<P> Module<P> for Linear<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T: Scalar> Linear<Tensor<T>> {
    /// Uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform_tensor(rng, &[fan_in, fan_out], -bound, bound),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Linear<Var> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row_vector(y, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> LayerNorm<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerNorm<Q> {
        LayerNorm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<P> Module<P> for LayerNorm<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T: Scalar> LayerNorm<Tensor<T>> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::ones(&[dim]),
            bias: Tensor::zeros(&[dim]),
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm<Var> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, s(LN_EPS))
    }
}

/// Binds every leaf of an owned tree onto `g`, trainable or frozen.
pub fn bind_leaf<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}
