//! Parameter storage and the small set of layers the models are built from.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// The tape node holding this parameter after [`ParamStore::bind`].
    pub fn var(self) -> Var {
        Var(self.0)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Rounds every entry to the nearest `f32`. Parameters always hold
/// `f32`-representable values so that checkpoints stored as 32-bit floats
/// reload bit for bit; all arithmetic still runs in `f64`.
pub fn round_to_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        round_to_f32(&mut value);
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Pushes every parameter onto an empty tape as a gradient-tracked leaf,
    /// so that `ParamId::var` addresses it.
    pub fn bind(&self, tape: &mut Tape) {
        assert!(tape.is_empty(), "parameters must be bound to a fresh tape");
        for v in &self.values {
            tape.leaf(v.clone());
        }
    }
}

/// Uniform init in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    shape: (usize, usize),
) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64, shape: (usize, usize)) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn(shape, |_| normal.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, input, (input, output)),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                fan_in_uniform(rng, input, (1, output)),
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let y = t.matmul(x, self.weight.var());
        match self.bias {
            Some(b) => t.add_row(y, b.var()),
            None => y,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.layer_norm(x, LAYER_NORM_EPS);
        let n = t.mul_row(n, self.gamma.var());
        t.add_row(n, self.beta.var())
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, mut x: Var) -> Var {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(t, x);
            if i < last {
                x = t.relu(x);
            }
        }
        x
    }
}
