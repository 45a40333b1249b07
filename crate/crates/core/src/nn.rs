//! Parameter storage and the three layer types the networks are built from.
//!
//! Layers only hold [`ParamId`]s; the weights live in a [`ParamStore`] so the
//! same architecture can be evaluated with `f32` or `f64` weights and with
//! either executor.

use std::cell::RefCell;
use std::collections::HashMap;

use gated_tensor::{BatchStats, BnMode, Float, Ops, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub kind: ParamKind,
}

/// Named tensors in registration order. Names follow `module.path.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replace every tensor with the same-named tensor from `other`, which
    /// must have exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        let mut problems = Vec::new();
        for p in &self.params {
            match other.id(&p.name) {
                None => problems.push(format!("{} missing", p.name)),
                Some(id) => {
                    let got = other.tensor(id).shape();
                    if got != p.tensor.shape() {
                        problems.push(format!(
                            "{}: expected {:?}, found {:?}",
                            p.name,
                            p.tensor.shape(),
                            got
                        ));
                    }
                }
            }
        }
        for (_, p) in other.iter() {
            if self.id(&p.name).is_none() {
                problems.push(format!("{} unexpected", p.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ArchitectureMismatch(problems));
        }
        for p in &mut self.params {
            p.tensor = other.tensor(other.id(&p.name).unwrap()).clone();
        }
        Ok(())
    }
}

/// Registers parameters under a dotted prefix, initialising them from a
/// seeded generator.
pub struct Builder<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Float> Builder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder for `prefix.name`.
    pub fn sub(&mut self, name: impl AsRef<str>) -> Builder<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<F> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches")
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.uniform(shape, 1.0 / (fan_in as f64).sqrt());
        let name = self.name(leaf);
        self.store.insert(name, t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64, kind: ParamKind) -> ParamId {
        let name = self.name(leaf);
        self.store
            .insert(name, Tensor::full(shape.to_vec(), F::from_f64_lossy(value)), kind)
    }
}

/// Evaluation context: which executor, which weights, and whether batch
/// norm runs in training mode.
pub struct Forward<'a, F: Float, O: Ops<F>> {
    pub ops: &'a O,
    store: &'a ParamStore<F>,
    train: bool,
    bound: RefCell<HashMap<ParamId, O::Value>>,
    bn_stats: RefCell<Vec<(BatchNorm2d, BatchStats<F>)>>,
}

impl<'a, F: Float, O: Ops<F>> Forward<'a, F, O> {
    pub fn new(ops: &'a O, store: &'a ParamStore<F>, train: bool) -> Self {
        Forward {
            ops,
            store,
            train,
            bound: RefCell::new(HashMap::new()),
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    /// Executor value for a parameter, bound once per context.
    pub fn param(&self, id: ParamId) -> O::Value {
        if let Some(v) = self.bound.borrow().get(&id) {
            return v.clone();
        }
        let p = self.store.get(id);
        let v = match p.kind {
            ParamKind::Trainable => self.ops.parameter(p.tensor.clone()),
            ParamKind::Buffer => self.ops.constant(p.tensor.clone()),
        };
        self.bound.borrow_mut().insert(id, v.clone());
        v
    }

    /// Values bound so far, for collecting gradients after a backward pass.
    pub fn bound_params(&self) -> Vec<(ParamId, O::Value)> {
        let mut v: Vec<_> = self.bound.borrow().iter().map(|(k, v)| (*k, v.clone())).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Batch statistics observed in training mode, in layer order.
    pub fn take_bn_stats(&self) -> Vec<(BatchNorm2d, BatchStats<F>)> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }
}

/// Fold observed batch statistics into the running buffers.
pub fn update_running_stats<F: Float>(
    store: &mut ParamStore<F>,
    stats: &[(BatchNorm2d, BatchStats<F>)],
    momentum: f64,
) {
    let m = F::from_f64_lossy(momentum);
    for (bn, s) in stats {
        for (id, batch) in [(bn.running_mean, &s.mean), (bn.running_var, &s.var)] {
            let run = store.tensor_mut(id);
            for (r, &b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = (F::one() - m) * *r + m * b;
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, cin: usize, cout: usize, kernel: usize, bias: bool) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = b.fan_in_uniform("weight", &[cout, cin, kernel, kernel], fan_in);
        let bias = bias.then(|| b.fan_in_uniform("bias", &[cout], fan_in));
        Conv2d { weight, bias, kernel }
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let w = fw.param(self.weight);
        let b = self.bias.map(|id| fw.param(id));
        Ok(fw.ops.conv2d(x, &w, b.as_ref(), self.kernel / 2)?)
    }
}

/// 2x2 stride-2 transposed convolution (exact 2x upsampling).
#[derive(Clone, Copy, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, cin: usize, cout: usize) -> Self {
        // fan-in as computed for transposed weights laid out (cin, cout, k, k)
        let fan_in = cout * 4;
        UpConv {
            weight: b.fan_in_uniform("weight", &[cin, cout, 2, 2], fan_in),
            bias: b.fan_in_uniform("bias", &[cout], fan_in),
        }
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        Ok(fw.ops.conv_transpose2x2(x, &w, Some(&b))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, channels: usize, eps: f64) -> Self {
        BatchNorm2d {
            weight: b.constant("weight", &[channels], 1.0, ParamKind::Trainable),
            bias: b.constant("bias", &[channels], 0.0, ParamKind::Trainable),
            running_mean: b.constant("running_mean", &[channels], 0.0, ParamKind::Buffer),
            running_var: b.constant("running_var", &[channels], 1.0, ParamKind::Buffer),
            eps,
        }
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        let eps = F::from_f64_lossy(self.eps);
        let mode = if fw.training() {
            BnMode::Batch { eps }
        } else {
            BnMode::Fixed {
                mean: fw.store().tensor(self.running_mean).clone(),
                var: fw.store().tensor(self.running_var).clone(),
                eps,
            }
        };
        let (y, stats) = fw.ops.batch_norm(x, &w, &b, &mode)?;
        if let Some(s) = stats {
            fw.bn_stats.borrow_mut().push((*self, s));
        }
        Ok(y)
    }
}

/// `ReLU(BN(Conv3x3(x)))` with a bias-free convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<F: Float>(b: &mut Builder<'_, F>, cin: usize, cout: usize, eps: f64) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&mut b.sub("conv"), cin, cout, 3, false),
            bn: BatchNorm2d::new(&mut b.sub("bn"), cout, eps),
        }
    }

    pub fn forward<F: Float, O: Ops<F>>(&self, fw: &Forward<'_, F, O>, x: &O::Value) -> Result<O::Value> {
        let y = self.conv.forward(fw, x)?;
        let y = self.bn.forward(fw, &y)?;
        Ok(fw.ops.relu(&y)?)
    }
}
