//! Parameter storage and the small set of layers the network is built from.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Conv3dGeometry, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
struct Entry {
    name: String,
    value: Rc<Tensor>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.entries.len())
            .field("scalars", &self.scalar_count())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value: Rc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = Rc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Create graph leaves for every parameter.
    pub fn bind(&self) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| Var::shared_leaf(e.value.clone())).collect(),
        }
    }

    /// Names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }
}

/// Parameters bound as graph leaves for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Per-parameter gradients in storage order; `None` where no gradient
    /// reached the parameter.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.take(v)).collect()
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// He-normal weights for a layer with `fan_in` inputs.
    pub fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    /// Glorot-uniform weights.
    pub fn glorot(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.gen_range(-a..a));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }
}

/// Largest divisor of `channels` not above `max_groups` that leaves at least
/// two channels per group (one when `channels == 1`).
pub fn fit_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.max(1))
        .rev()
        .find(|&g| channels.is_multiple_of(g) && (channels / g >= 2 || channels == 1))
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: Conv3dGeometry,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, geometry: Conv3dGeometry, bias: bool) -> Self {
        let k = geometry.kernel;
        let fan_in = cin * k * k * k;
        let weight = init.he(format!("{name}.weight"), &[cout, cin, k, k, k], fan_in);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), &[cout], 0.0));
        Self { weight, bias, geometry, cin, cout }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv3d(p.var(self.weight), self.bias.map(|b| p.var(b)), self.geometry)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = init.glorot(format!("{name}.weight"), &[din, dout], din, dout);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), &[dout], 0.0));
        Self { weight, bias, din, dout }
    }

    /// `x` is `[..., din]`.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize, max_groups: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0),
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0),
            groups: fit_groups(channels, max_groups),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.group_norm(p.var(self.gamma), p.var(self.beta), self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), &[width], 1.0),
            beta: init.constant(format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

/// 3x3x3 convolution, normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        Self {
            conv: Conv3d::new(init, &format!("{name}.conv"), cin, cout, Conv3dGeometry::same(3), false),
            norm: GroupNorm::new(init, &format!("{name}.norm"), cout, groups),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(self.norm.forward(p, &self.conv.forward(p, x)?)?.relu())
    }
}

/// Pre-activation residual block: two (norm, ReLU, 3x3x3 conv) stages plus a
/// shortcut that is the identity or a 1x1x1 projection when widths differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv3d,
    pub norm2: GroupNorm,
    pub conv2: Conv3d,
    pub shortcut: Option<Conv3d>,
}

impl ResBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        let same = Conv3dGeometry::same(3);
        Self {
            norm1: GroupNorm::new(init, &format!("{name}.norm1"), cin, groups),
            conv1: Conv3d::new(init, &format!("{name}.conv1"), cin, cout, same, true),
            norm2: GroupNorm::new(init, &format!("{name}.norm2"), cout, groups),
            conv2: Conv3d::new(init, &format!("{name}.conv2"), cout, cout, same, true),
            shortcut: (cin != cout).then(|| {
                Conv3d::new(init, &format!("{name}.shortcut"), cin, cout, Conv3dGeometry::same(1), false)
            }),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x)?.relu())?;
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h)?.relu())?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(p, x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu())
    }

    /// `x + mlp(x)`.
    pub fn forward_residual(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.add(&self.forward(p, x)?)
    }
}
