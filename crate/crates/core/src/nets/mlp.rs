use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Softplus => g.softplus(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Named parameter arrays addressed by slot index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
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

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

/// Fully connected network: affine layers with a shared hidden activation
/// and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    /// `(weight, bias)` slots per layer.
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Registers parameters in `store`. Weights are drawn uniformly from
    /// `±1/sqrt(fan_in)`; biases start at zero.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            let w = Tensor::matrix(fan_in, fan_out, w).expect("sized above");
            let ws = store.push(format!("{prefix}.{i}.weight"), w);
            let bs = store.push(format!("{prefix}.{i}.bias"), Tensor::zeros(&[1, fan_out]));
            layers.push((ws, bs));
        }
        Self {
            sizes: sizes.to_vec(),
            activation,
            layers,
        }
    }

    /// Re-attaches to parameters already present in `store` under `prefix`.
    pub fn attach<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let find = |suffix: &str, shape: [usize; 2]| -> Result<usize> {
                let name = format!("{prefix}.{i}.{suffix}");
                let slot = store
                    .slot_of(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))?;
                if store.get(slot).shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "array '{name}' has shape {:?}, architecture needs {:?}",
                        store.get(slot).shape(),
                        shape
                    )));
                }
                Ok(slot)
            };
            layers.push((
                find("weight", [pair[0], pair[1]])?,
                find("bias", [1, pair[1]])?,
            ));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn slots(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Appends the network to `g`, returning the pre-activation output.
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, &(ws, bs)) in self.layers.iter().enumerate() {
            let w = g.param(ws, &[self.sizes[i], self.sizes[i + 1]]);
            let b = g.param(bs, &[1, self.sizes[i + 1]]);
            h = g.affine(h, w, b);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}
