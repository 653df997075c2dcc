//! Named parameter storage and the small layer wrappers built on it.

use std::collections::HashMap;
use std::ops::Index;

use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named model parameters. Order is creation order and is stable,
/// which fixes checkpoint layout and optimizer iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids().map(|id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, value)| g.leaf(value.clone(), trainable(name)))
            .collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] with a per-parameter trainable mask.
    pub fn bind_masked(&self, g: &mut Graph, trainable: &[bool]) -> Bound {
        assert_eq!(trainable.len(), self.values.len());
        let vars = self.values.iter().zip(trainable).map(|(v, &t)| g.leaf(v.clone(), t)).collect();
        Bound { vars }
    }
}

/// Graph handles of a [`ParamStore`], one per parameter, for a single step.
/// Every use of a parameter goes through the same handle, so gradients from
/// all uses accumulate on one node.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// He-normal initialization for layers followed by a ReLU.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Square `kernel x kernel` convolution; `std` overrides He initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: Option<f64>,
        rng: &mut Rng,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel, kernel];
        let w = match std {
            Some(s) => Tensor::randn(&shape, s, rng),
            None => he_normal(&shape, in_ch * kernel * kernel, rng),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, stride, padding }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.padding)?;
        g.bias_add(y, p[self.bias])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, std: Option<f64>, rng: &mut Rng) -> Self {
        let shape = [input, output];
        let w = match std {
            Some(s) => Tensor::randn(&shape, s, rng),
            None => he_normal(&shape, input, rng),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.linear(x, p[self.weight], p[self.bias])
    }
}
