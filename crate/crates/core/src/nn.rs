//! Parameters, forward sessions and the conv/BN/activation building blocks.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::NormStats;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors plus non-trainable buffers (BN running stats).
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn push(&mut self, name: &str, t: Tensor<T>, trainable: bool) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(t);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.push(name, Tensor::full(shape, T::c(v)), true)
    }

    /// Kaiming-normal initialisation with the given fan-in.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::c(normal.sample(rng)));
        self.push(name, t, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.push(name, Tensor::full(shape, T::c(v)), false)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} is {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                t.shape()
            )));
        }
        self.values[id.0] = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.ids().filter(|&i| self.is_trainable(i)).map(|i| self.get(i).len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names.iter().zip(&self.values).zip(&self.trainable).map(|((n, v), &t)| (n.as_str(), v, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Batch statistics while training, running statistics at evaluation.
    Batch,
    /// Running statistics always (the op is affine and deterministic).
    Frozen,
}

/// One forward pass: a fresh tape bound to the parameter store.
pub struct Session<'a, T: Real> {
    pub tape: Tape<T>,
    pub params: &'a mut ParamStore<T>,
    pub training: bool,
    pub norm: NormMode,
    track_grads: bool,
    leaves: HashMap<ParamId, Var>,
    momentum: f64,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, training: bool, norm: NormMode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            training,
            norm,
            track_grads: training,
            leaves: HashMap::new(),
            momentum: 0.1,
        }
    }

    /// Continue recording on an existing tape.
    pub fn on_tape(params: &'a mut ParamStore<T>, tape: Tape<T>, training: bool, norm: NormMode) -> Self {
        Self { tape, ..Self::new(params, training, norm) }
    }

    /// Record parameter gradients even outside training (gradient checks).
    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    /// Tape handle of a parameter; repeated uses share one leaf so gradients
    /// of shared weights accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.track_grads && self.params.is_trainable(id) {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.leaves.insert(id, v);
        v
    }

    /// Route a parameter through an existing tape node (gradient checks
    /// perturb weights as explicit inputs).
    pub fn bind_param(&mut self, id: ParamId, v: Var) -> Result<()> {
        if self.tape.shape(v) != self.params.get(id).shape() {
            return Err(Error::Shape(format!(
                "binding {} {:?} to {:?}",
                self.params.name(id),
                self.params.get(id).shape(),
                self.tape.shape(v)
            )));
        }
        self.leaves.insert(id, v);
        Ok(())
    }

    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .leaves
            .iter()
            .filter(|(id, _)| self.params.is_trainable(**id))
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn leaf_of(&self, id: ParamId) -> Option<Var> {
        self.leaves.get(&id).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.he_normal(&format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel);
        let bias = bias.then(|| store.constant(&format!("{name}.bias"), &[cout], 0.0));
        Self { weight, bias, stride, in_channels: cin, out_channels: cout, kernel }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.constant(&format!("{name}.gamma"), &[c], 1.0),
            beta: store.constant(&format!("{name}.beta"), &[c], 0.0),
            running_mean: store.buffer(&format!("{name}.running_mean"), &[c], 0.0),
            running_var: store.buffer(&format!("{name}.running_var"), &[c], 1.0),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let batch = s.training && s.norm == NormMode::Batch;
        if batch {
            let (y, obs) = s.tape.batch_norm(x, g, b, NormStats::Batch, T::c(BN_EPS))?;
            let obs = obs.expect("batch statistics");
            let m = T::c(s.momentum);
            let rm = s.params.get_mut(self.running_mean).data_mut();
            for (r, &o) in rm.iter_mut().zip(&obs.mean) {
                *r = (T::one() - m) * *r + m * o;
            }
            let rv = s.params.get_mut(self.running_var).data_mut();
            for (r, &o) in rv.iter_mut().zip(&obs.var) {
                *r = (T::one() - m) * *r + m * o;
            }
            Ok(y)
        } else {
            let mean = s.params.get(self.running_mean).data().to_vec();
            let var = s.params.get(self.running_var).data().to_vec();
            let (y, _) = s.tape.batch_norm(x, g, b, NormStats::Running { mean: &mean, var: &var }, T::c(BN_EPS))?;
            Ok(y)
        }
    }
}

/// Convolution, batch norm and activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Activation,
}

impl ConvBnAct {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, false),
            bn: Some(BatchNorm::new(store, &format!("{name}.bn"), cout)),
            act: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.act = act;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(s, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(s, y)?;
        }
        Ok(match self.act {
            Activation::Relu => s.tape.relu(y),
            Activation::Identity => y,
        })
    }
}
