//! Named parameter storage and the handful of layers the networks use.
//!
//! Modules hold [`ParamId`]s into a [`ParamStore`]; a [`Ctx`] binds them to a
//! fresh [`Tape`] for one forward pass. The same module description therefore
//! runs over `f32` parameters for training and an `f64` copy for gradient checks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use kineflow_tensor::{Array, Float, Gradients, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    values: Vec<Array<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (n, f) in self.names.iter().zip(&mut self.frozen) {
            if n.starts_with(prefix) {
                *f = frozen;
            }
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }

    /// Overwrites parameters from `(name, value)` pairs whose names start with
    /// `prefix`; returns how many were replaced. Shapes must match.
    pub fn load_prefixed(&mut self, prefix: &str, tensors: &[(String, Array<T>)]) -> crate::Result<usize> {
        let mut n = 0;
        for (name, value) in tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self
                .id(name)
                .ok_or_else(|| crate::Error::Format(format!("unknown parameter `{name}`")))?;
            if self.get(id).shape() != value.shape() {
                return Err(crate::Error::ShapeMismatch(format!(
                    "`{name}` is {:?}, file has {:?}",
                    self.get(id).shape(),
                    value.shape()
                )));
            }
            *self.get_mut(id) = value.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }
}

/// Per-parameter gradients, indexed like the store.
pub type ParamGrads<T> = Vec<Option<Array<T>>>;

/// Binds parameters to a tape for one forward pass.
pub struct Ctx<'s, T: Float> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<T>>>>,
}

impl<'s, T: Float> Ctx<'s, T> {
    /// `train` enables gradient recording.
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            tape: if train { Tape::new() } else { Tape::no_grad() },
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binds parameters to an existing tape, so inputs recorded on it and
    /// parameters share one graph.
    pub fn on_tape(store: &'s ParamStore<T>, tape: Tape<T>) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The parameter as a tape value, bound on first use. Frozen parameters
    /// enter as constants.
    pub fn p(&self, id: ParamId) -> Var<T> {
        if let Some(v) = &self.bound.borrow()[id.0] {
            return v.clone();
        }
        let value = self.store.get(id).clone();
        let v = if self.store.is_frozen(id) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(Rc::new(value))
        };
        self.bound.borrow_mut()[id.0] = Some(v.clone());
        v
    }

    pub fn constant(&self, a: Array<T>) -> Var<T> {
        self.tape.constant(a)
    }

    /// Gradients of every parameter used in the pass.
    pub fn param_grads(&self, g: &mut Gradients<T>) -> ParamGrads<T> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.as_ref().and_then(|v| g.take(v)))
            .collect()
    }
}

/// Seeded initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Uniform with standard deviation `gain / sqrt(fan_in)`.
    pub fn scaled<T: Float>(&mut self, shape: Vec<usize>, fan_in: usize, gain: f64) -> Array<T> {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform<T: Float>(&mut self, shape: Vec<usize>, bound: f64) -> Array<T> {
        let n = shape.iter().product();
        let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| T::of(d.sample(&mut self.rng))).collect();
        Array::new(shape, data)
    }

    pub fn normal<T: Float>(&mut self, shape: Vec<usize>, std: f64) -> Array<T> {
        let n = shape.iter().product();
        let d = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::of(d.sample(&mut self.rng))).collect();
        Array::new(shape, data)
    }

    pub fn random_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Square-kernel convolution with "same"-style padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.scaled(vec![cout, cin, k, k], cin * k * k, gain));
        let bias = Some(store.add(format!("{name}.bias"), Array::zeros(vec![cout])));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// All weights and bias zero.
    pub fn zeroed<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Array::zeros(vec![cout, cin, k, k]));
        let bias = Some(store.add(format!("{name}.bias"), Array::zeros(vec![cout])));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let b = self.bias.map(|b| ctx.p(b));
        x.conv2d(&ctx.p(self.weight), b.as_ref(), self.stride, self.pad)
    }
}

/// Affine map over the last axis, `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize, gain: f64) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.scaled(vec![din, dout], din, gain)),
            bias: store.add(format!("{name}.bias"), Array::zeros(vec![dout])),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        x.matmul(&ctx.p(self.weight)).add(&ctx.p(self.bias))
    }
}

/// Layer normalization over the last axis with a learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array::ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), Array::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        x.layer_norm_last(Self::EPS).mul(&ctx.p(self.gamma)).add(&ctx.p(self.beta))
    }
}
