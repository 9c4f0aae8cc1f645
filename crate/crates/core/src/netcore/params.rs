use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{NetError, Rng};
use crate::math;

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`.
    FanIn(usize),
    Uniform(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        let name = name.into();
        assert!(self.id_of(&name).is_none(), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::FanIn(fan_in) => math::sqrt(1.0 / fan_in.max(1) as f64),
            Init::Uniform(b) => b,
            _ => 0.0,
        };
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(_) | Init::Uniform(_) => {
                (0..n).map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 }).collect()
            }
        };
        self.params.push(ParamTensor { name, shape: shape.to_vec(), grad: vec![0.0; n], values });
        ParamId(self.params.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    #[inline]
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    /// A zeroed gradient buffer shaped like this store.
    pub fn gradients(&self) -> Gradients {
        Gradients { bufs: self.params.iter().map(|p| vec![0.0; p.numel()]).collect() }
    }

    /// `grad += scale * g` for every parameter.
    pub fn accumulate(&mut self, g: &Gradients, scale: f64) {
        for (p, b) in self.params.iter_mut().zip(&g.bufs) {
            math::axpy(scale, b, &mut p.grad);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        math::sqrt(self.params.iter().flat_map(|p| &p.grad).map(|g| g * g).sum())
    }

    /// Rescale accumulated gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn check_finite(&self) -> Result<(), NetError> {
        for p in &self.params {
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(NetError::TrainingDiverged(p.name.clone()));
            }
        }
        Ok(())
    }

    /// Copy values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            debug_assert_eq!(a.name, b.name);
            a.values.copy_from_slice(&b.values);
        }
    }

    /// Overwrite values by name. Every parameter in the store must be supplied
    /// with a matching shape.
    pub fn load_records(&mut self, records: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), NetError> {
        for p in &mut self.params {
            let rec = records
                .iter()
                .find(|r| r.0 == p.name)
                .ok_or_else(|| NetError::Checkpoint(alloc::format!("missing parameter {}", p.name)))?;
            if rec.1 != p.shape {
                return Err(NetError::Checkpoint(alloc::format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name,
                    rec.1,
                    p.shape
                )));
            }
            p.values.copy_from_slice(&rec.2);
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers for one or more backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}
