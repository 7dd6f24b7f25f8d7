//! Minimal neural-net substrate: a named parameter store and the layers the
//! denoiser is built from, each with an explicit forward cache and a
//! hand-derived backward pass. Everything is generic over f32/f64 so
//! gradient checks can run in f64 while training runs in f32.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;

use ndarray::{ArrayD, NdFloat};
use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type the net runs on.
pub trait Real: NdFloat + std::iter::Sum {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub trainable: bool,
    /// Cleared when a merged LoRA adapter retires its tensors; inactive
    /// slots keep their id so handles stay valid.
    pub active: bool,
}

/// Registry of every parameter tensor, addressable by id or name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
            active: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.params[id.0].value
    }

    pub fn meta(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn retire(&mut self, id: ParamId) {
        self.params[id.0].active = false;
        self.params[id.0].trainable = false;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.active && p.name == name)
            .map(ParamId)
    }

    /// Active parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.active)
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count over active tensors.
    pub fn scalar_count(&self) -> usize {
        self.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Scalar count over active trainable tensors.
    pub fn trainable_scalar_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }
}

/// Gradient buffers aligned with a store's parameter ids.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    buffers: Vec<ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Grads {
            buffers: store
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.buffers[id.0]
    }

    /// Accumulates `other` into `self` (fixed order keeps batch reduction
    /// deterministic).
    pub fn accumulate(&mut self, other: &Grads<F>) {
        for (a, b) in self.buffers.iter_mut().zip(other.buffers.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for b in &mut self.buffers {
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm over the given parameter ids.
    pub fn global_norm(&self, ids: impl Iterator<Item = ParamId>) -> f64 {
        let mut acc = 0.0f64;
        for id in ids {
            for v in self.buffers[id.0].iter() {
                let x = v.as_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}

/// Fills a tensor with zero-mean Gaussian entries of the given std.
pub fn fill_normal<F: Real, R: Rng + ?Sized>(arr: &mut ArrayD<F>, std: f64, rng: &mut R) {
    for v in arr.iter_mut() {
        *v = F::standard_normal(rng) * F::from_f64(std);
    }
}
