use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the networks are generic over: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let w = self.shape[self.shape.len() - 1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::lit(x.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient buffers laid out parallel to a [`ParamStore`]. Workers accumulate
/// into their own `Gradients` and the owner folds them into the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    data: Vec<Vec<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.data[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for x in self.data.iter_mut().flatten() {
            *x *= s;
        }
    }

    pub fn zero(&mut self) {
        for x in self.data.iter_mut().flatten() {
            *x = S::zero();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_zero())
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .flatten()
            .fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter tensors with a gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    lookup: HashMap<String, ParamId>,
    tensors: Vec<Tensor<S>>,
    grads: Gradients<S>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            lookup: HashMap::new(),
            tensors: Vec::new(),
            grads: Gradients { data: Vec::new() },
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<S>) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        let n = tensor.len();
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), id);
        self.tensors.push(tensor);
        self.grads.data.push(vec![S::zero(); n]);
        self.m.push(vec![S::zero(); n]);
        self.v.push(vec![S::zero(); n]);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        self.tensors[id.0].data()
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        self.tensors[id.0].data_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn adam_moments(&self, id: ParamId) -> (&[S], &[S]) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub(crate) fn restore_optimizer(&mut self, id: ParamId, m: Vec<S>, v: Vec<S>) -> Result<()> {
        let n = self.tensors[id.0].len();
        if m.len() != n || v.len() != n {
            return Err(Error::dim(
                self.names[id.0].clone(),
                n,
                m.len().min(v.len()),
            ));
        }
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Fresh zeroed buffers shaped like this store's parameters.
    pub fn zero_grads(&self) -> Gradients<S> {
        Gradients {
            data: self
                .tensors
                .iter()
                .map(|t| vec![S::zero(); t.len()])
                .collect(),
        }
    }

    pub fn grads(&self) -> &Gradients<S> {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Gradients<S> {
        &mut self.grads
    }

    pub fn accumulate(&mut self, g: &Gradients<S>, scale: S) {
        for (a, b) in self.grads.data.iter_mut().zip(&g.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }

    /// One Adam update with bias correction, then clears the gradients.
    ///
    /// Entries whose gradient is exactly zero keep both their value and their
    /// moments, so a zero gradient is the identity on parameters.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::lit(cfg.beta1);
        let b2 = S::lit(cfg.beta2);
        let one = S::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = S::lit(cfg.lr);
        let eps = S::lit(cfg.eps);
        for i in 0..self.tensors.len() {
            let p = self.tensors[i].data_mut();
            let g = &mut self.grads.data[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                if gj.is_zero() {
                    continue;
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
                g[j] = S::zero();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copy of the parameters (not the optimizer state) in another precision.
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.add(name, t.cast()).expect("names are unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(ps.add("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps
            .add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        ps.grads_mut().get_mut(id)[0] = 0.3;
        ps.adam_step(&AdamConfig::with_lr(0.1));
        let before = ps.data(id).to_vec();
        for _ in 0..5 {
            ps.adam_step(&AdamConfig::with_lr(0.1));
        }
        assert_eq!(ps.data(id), &before[..]);
        assert_eq!(ps.step(), 6);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::vector(vec![0.0])).unwrap();
        let cfg = AdamConfig::with_lr(0.01);
        let mut last = 0.0;
        for _ in 0..200 {
            ps.grads_mut().get_mut(id)[0] = 2.5;
            ps.adam_step(&cfg);
            let w = ps.data(id)[0];
            let delta = w - last;
            assert!(delta < 0.0);
            last = w;
            assert!((delta.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_quadratic_bowl_descends() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::vector(vec![0.3])).unwrap();
        let cfg = AdamConfig::with_lr(0.0005);
        let mut prev = f64::INFINITY;
        for step in 0..400 {
            let w = ps.data(id)[0];
            ps.grads_mut().get_mut(id)[0] = 2.0 * w;
            ps.adam_step(&cfg);
            let now = ps.data(id)[0].abs();
            if step > 5 {
                assert!(now < prev, "step {step}: {now} !< {prev}");
            }
            prev = now;
        }
        assert!(prev < 0.3 - 0.15);
    }
}
