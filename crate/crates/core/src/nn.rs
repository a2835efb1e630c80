//! Named parameter storage and convolution layers built on the autograd tape.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors. Order is the checkpoint order and the
/// order in which gradients are returned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Put every tensor on the tape, tracked or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect()
    }

    pub fn grads(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }

    /// Replace values from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for ((name, t), (want, dst)) in other.iter().zip(self.names.iter().zip(self.tensors.iter_mut())) {
            if name != want || t.shape() != dst.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
        grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activation applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Silu,
}

/// A `k × k` convolution with bias, "same" padding for odd `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
    pub act: Act,
}

impl Conv {
    /// Add weights drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)` scaled by
    /// `gain`, and a constant bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        act: Act,
        gain: f64,
        bias: f64,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * k * k).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weight = ps.push(format!("{name}.weight"), Tensor::new(&[c_out, c_in, k, k], w).expect("shape"));
        let bias = ps.push(format!("{name}.bias"), Tensor::full(&[c_out], bias));
        Self { weight, bias, stride, pad: k / 2, act }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, vars[self.weight], Some(vars[self.bias]), self.stride, self.pad)?;
        Ok(match self.act {
            Act::None => y,
            Act::Silu => g.silu(y),
        })
    }
}

/// Apply layers in order.
pub fn run_stack(layers: &[Conv], g: &mut Graph, vars: &[Var], mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, vars, x)?;
    }
    Ok(x)
}
