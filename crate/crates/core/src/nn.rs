//! Parameter storage and the small layer library shared by the codec,
//! feature net, discriminator and transformer.
//!
//! Parameters live in a `ParamSet` keyed by stable insertion order, which
//! is also the serialization order. A `Fwd` context binds parameters into
//! a graph on demand, deduplicating so a parameter used twice contributes
//! a single graph node (its gradient then accumulates naturally).

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    decays: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), decays: Vec::new() }
    }

    /// Register a parameter. `decay` marks it for weight decay (weights
    /// yes; biases, norm affines and tokens no).
    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.decays.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Overwrite values by name, e.g. when restoring a checkpoint. Every
    /// parameter must be present with a matching shape.
    pub fn load_values(&mut self, source: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for i in 0..self.values.len() {
            let t = source(&self.names[i]).ok_or_else(|| Error::ManifestParse(format!(
                "missing parameter {} in checkpoint",
                self.names[i]
            )))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", self.values[i].shape()),
                    got: format!("{:?}", t.shape()),
                });
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// One forward pass: graph under construction plus the parameter bindings
/// made along the way.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    ps: &'a ParamSet,
    bound: Vec<Option<VarId>>,
    train: bool,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, ps: &'a ParamSet) -> Self {
        let bound = vec![None; ps.len()];
        Fwd { g, ps, bound, train: true }
    }

    /// Forward pass with every parameter bound as a constant; no gradients
    /// reach the parameters, only the data inputs.
    pub fn inference(g: &'a mut Graph, ps: &'a ParamSet) -> Self {
        let bound = vec![None; ps.len()];
        Fwd { g, ps, bound, train: false }
    }

    /// Bind a parameter into the graph (idempotent per pass).
    pub fn param(&mut self, id: ParamId) -> VarId {
        if !self.train {
            return self.frozen(id);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.param(self.ps.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Bind a parameter as a constant: value identical, no gradient.
    pub fn frozen(&mut self, id: ParamId) -> VarId {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.ps.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bindings(&self) -> Vec<(ParamId, VarId)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet, name: &str,
        cin: usize, cout: usize, k: usize, stride: usize, pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        let w = Tensor::from_parts(
            vec![cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| rng.normal_scaled(std)).collect(),
        );
        Conv2d {
            w: ps.add(&format!("{name}.w"), w, true),
            b: ps.add(&format!("{name}.b"), Tensor::zeros(&[cout]), false),
            stride,
            pad,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, din: usize, dout: usize, std: f32, rng: &mut Rng) -> Self {
        let w = Tensor::from_parts(vec![din, dout], (0..din * dout).map(|_| rng.normal_scaled(std)).collect());
        Linear {
            w: ps.add(&format!("{name}.w"), w, true),
            b: ps.add(&format!("{name}.b"), Tensor::zeros(&[dout]), false),
        }
    }

    /// Output projection initialized at zero, so a residual branch starts
    /// as the identity and a classifier head starts maximally uncertain.
    pub fn zeros(ps: &mut ParamSet, name: &str, din: usize, dout: usize) -> Self {
        Linear {
            w: ps.add(&format!("{name}.w"), Tensor::zeros(&[din, dout]), true),
            b: ps.add(&format!("{name}.b"), Tensor::zeros(&[dout]), false),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let w = f.param(self.w);
        let b = f.param(self.b);
        let y = f.g.matmul(x, w)?;
        f.g.add_bias_rows(y, b)
    }
}

pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNormLayer {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        GroupNormLayer {
            gamma: ps.add(&format!("{name}.g"), Tensor::full(&[channels], 1.0), false),
            beta: ps.add(&format!("{name}.b"), Tensor::zeros(&[channels]), false),
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.g.group_norm(x, g, b, self.groups, self.eps)
    }
}

pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNormLayer {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        LayerNormLayer {
            gamma: ps.add(&format!("{name}.g"), Tensor::full(&[width], 1.0), false),
            beta: ps.add(&format!("{name}.b"), Tensor::zeros(&[width]), false),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        f.g.layer_norm(x, g, b, self.eps)
    }
}
