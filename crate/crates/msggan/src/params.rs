//! Named parameter tensors with equalized-learning-rate semantics.
//!
//! With equalization on, weights are stored as standard-normal draws and
//! multiplied by their He constant `sqrt(2 / fan_in)` inside the graph at
//! every use, so the optimizer sees unit-scale parameters. With it off, the
//! He scale is baked into the initial draw instead and no runtime scaling
//! happens. Biases start at zero either way.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Static description of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub shape: Shape,
    /// Inputs feeding each output unit; determines the He constant.
    pub fan_in: usize,
    pub bias: bool,
}

impl ParamDef {
    pub fn weight(name: impl Into<String>, shape: Shape, fan_in: usize) -> Self {
        ParamDef { name: name.into(), shape, fan_in, bias: false }
    }

    pub fn bias(name: impl Into<String>, channels: usize) -> Self {
        ParamDef { name: name.into(), shape: Shape::nchw(1, channels, 1, 1), fan_in: 0, bias: true }
    }

    fn he_constant(&self) -> f64 {
        (2.0 / self.fan_in as f64).sqrt()
    }
}

/// A set of parameter tensors in a fixed canonical order.
#[derive(Clone)]
pub struct ParamSet<T> {
    defs: Vec<ParamDef>,
    values: Vec<Tensor<T>>,
    equalized: bool,
}

impl<T: Real> ParamSet<T> {
    pub fn init<R: Rng>(defs: Vec<ParamDef>, equalized: bool, rng: &mut R) -> Self {
        let values = defs
            .iter()
            .map(|d| {
                if d.bias {
                    Tensor::zeros(d.shape)
                } else {
                    let t = Tensor::randn(d.shape, rng);
                    if equalized {
                        t
                    } else {
                        let c = T::from_f64(d.he_constant());
                        t.map(|x| x * c)
                    }
                }
            })
            .collect();
        ParamSet { defs, values, equalized }
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn equalized(&self) -> bool {
        self.equalized
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.defs
            .iter()
            .position(|d| d.name == name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
    }

    /// Replaces a value (checkpoint restore); shape must match the def.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) {
        let i = self.index_of(name);
        assert_eq!(
            value.shape(),
            self.defs[i].shape,
            "parameter '{}' shape mismatch",
            name
        );
        self.values[i] = value;
    }

    /// Creates one leaf per parameter in `g`. The returned binding exposes
    /// raw leaves (optimizer targets) and use-time vars (He-scaled when
    /// equalization is on).
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let mut leaves = Vec::with_capacity(self.defs.len());
        let mut uses = Vec::with_capacity(self.defs.len());
        for (d, v) in self.defs.iter().zip(&self.values) {
            let leaf = g.leaf(v.clone());
            leaves.push(leaf);
            let use_var = if self.equalized && !d.bias {
                g.scale(leaf, d.he_constant())
            } else {
                leaf
            };
            uses.push(use_var);
        }
        BoundParams { names: self.defs.iter().map(|d| d.name.clone()).collect(), leaves, uses }
    }
}

/// Graph handles for one bound [`ParamSet`].
pub struct BoundParams {
    names: Vec<String>,
    /// Raw parameter leaves, aligned with the set's canonical order.
    pub leaves: Vec<Var>,
    uses: Vec<Var>,
}

impl BoundParams {
    /// Use-time var for a parameter (scaled if equalization is on).
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name));
        self.uses[i]
    }
}
