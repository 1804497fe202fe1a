//! Parameter containers shared by the MoE layer and the transformer.
//!
//! Every container is generic over its leaf type: `T = Tensor` holds the
//! trainable values, `T = Var` holds the same structure bound onto a
//! [`Graph`]. [`ParamTree`] walks leaves in a fixed order so that the two
//! forms line up for gradient collection and optimizer state.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::Result;

pub trait ParamTree {
    type Leaf;
    type Mapped<U>;

    fn map_leaves<U>(&self, path: &str, f: &mut dyn FnMut(&str, &Self::Leaf) -> U)
        -> Self::Mapped<U>;
    fn leaves<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a Self::Leaf)>);
    fn leaves_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut Self::Leaf)>);
}

pub(crate) fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

/// Implements [`ParamTree`] for a struct generic over its leaf type.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),*], nodes: [$($node:ident),*] }) => {
        impl<T> $crate::nn::ParamTree for $name<T> {
            type Leaf = T;
            type Mapped<U> = $name<U>;

            #[allow(unused_variables)]
            fn map_leaves<U>(&self, path: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&$crate::nn::join(path, stringify!($leaf)), &self.$leaf),)*
                    $($node: self.$node.map_leaves(&$crate::nn::join(path, stringify!($node)), f),)*
                }
            }

            #[allow(unused_variables)]
            fn leaves<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push(($crate::nn::join(path, stringify!($leaf)), &self.$leaf));)*
                $(self.$node.leaves(&$crate::nn::join(path, stringify!($node)), out);)*
            }

            #[allow(unused_variables)]
            fn leaves_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut T)>) {
                $(out.push(($crate::nn::join(path, stringify!($leaf)), &mut self.$leaf));)*
                $(self.$node.leaves_mut(&$crate::nn::join(path, stringify!($node)), out);)*
            }
        }
    };
}
pub(crate) use param_tree;

impl<S: ParamTree> ParamTree for Vec<S> {
    type Leaf = S::Leaf;
    type Mapped<U> = Vec<S::Mapped<U>>;

    fn map_leaves<U>(&self, path: &str, f: &mut dyn FnMut(&str, &S::Leaf) -> U) -> Vec<S::Mapped<U>> {
        self.iter()
            .enumerate()
            .map(|(i, s)| s.map_leaves(&join(path, &i.to_string()), f))
            .collect()
    }

    fn leaves<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a S::Leaf)>) {
        for (i, s) in self.iter().enumerate() {
            s.leaves(&join(path, &i.to_string()), out);
        }
    }

    fn leaves_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut S::Leaf)>) {
        for (i, s) in self.iter_mut().enumerate() {
            s.leaves_mut(&join(path, &i.to_string()), out);
        }
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear { leaves: [weight, bias], nodes: [] });

impl Linear<Tensor> {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Self {
            weight: normal(rng, &[fan_in, fan_out], std),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_row(h, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T = Tensor> {
    pub gain: T,
    pub bias: T,
}
param_tree!(LayerNorm { leaves: [gain, bias], nodes: [] });

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm<Tensor> {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }
}

impl LayerNorm<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches")
}

/// Binds every leaf onto `g`; leaves for which `trainable(name)` holds track
/// gradients.
pub fn bind<P>(params: &P, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> P::Mapped<Var>
where
    P: ParamTree<Leaf = Tensor>,
{
    params.map_leaves("", &mut |name, t| g.param(t, trainable(name)))
}

/// Adds the gradients accumulated on `g` into the matching parameter tensors.
pub fn collect_grads<P, B>(params: &mut P, bound: &B, g: &Graph)
where
    P: ParamTree<Leaf = Tensor>,
    B: ParamTree<Leaf = Var>,
{
    let mut vars = Vec::new();
    bound.leaves("", &mut vars);
    let mut tensors = Vec::new();
    params.leaves_mut("", &mut tensors);
    debug_assert_eq!(vars.len(), tensors.len());
    for ((_, t), (_, v)) in tensors.into_iter().zip(vars) {
        if let Some(grad) = g.grad(*v) {
            t.accumulate_grad(grad);
        }
    }
}

pub fn zero_grads<P: ParamTree<Leaf = Tensor>>(params: &mut P) {
    let mut tensors = Vec::new();
    params.leaves_mut("", &mut tensors);
    tensors.into_iter().for_each(|(_, t)| t.zero_grad());
}
