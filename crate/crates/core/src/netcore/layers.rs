use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{check_dim, Gradients, Init, NetError, ParamId, ParamStore, Rng};
use crate::math::{self, Mat};

/// Affine map `y = W^T x + b` with `W` stored as `d_in x d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_names(store, rng, &format!("{prefix}/W"), &format!("{prefix}/b"), d_in, d_out)
    }

    pub fn with_names(
        store: &mut ParamStore,
        rng: &mut Rng,
        w_name: &str,
        b_name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(w_name, &[d_in, d_out], Init::FanIn(d_in), rng);
        let b = store.add(b_name, &[d_out], Init::Zeros, rng);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NetError> {
        check_dim(self.d_in, x.len())?;
        let mut y = store.values(self.b).to_vec();
        math::vec_mat_acc(x, store.values(self.w), &mut y);
        Ok(y)
    }

    pub fn forward_rows(&self, store: &ParamStore, x: &Mat) -> Result<Mat, NetError> {
        check_dim(self.d_in, x.cols)?;
        let mut out = Mat::zeros(x.rows, self.d_out);
        let w = store.values(self.w);
        let b = store.values(self.b);
        for i in 0..x.rows {
            let row = out.row_mut(i);
            row.copy_from_slice(b);
            math::vec_mat_acc(x.row(i), w, row);
        }
        Ok(out)
    }

    /// Accumulate parameter gradients for one input and add `W dy` into `dx` when given.
    pub fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], grads: &mut Gradients, dx: Option<&mut [f64]>) {
        math::outer_acc(x, dy, grads.get_mut(self.w));
        math::axpy(1.0, dy, grads.get_mut(self.b));
        if let Some(dx) = dx {
            math::mat_vec_acc(store.values(self.w), dy, dx);
        }
    }

    pub fn backward_rows(&self, store: &ParamStore, x: &Mat, dy: &Mat, grads: &mut Gradients) -> Mat {
        let mut dx = Mat::zeros(x.rows, self.d_in);
        for i in 0..x.rows {
            self.backward(store, x.row(i), dy.row(i), grads, Some(dx.row_mut(i)));
        }
        dx
    }
}

/// Rectifier. The subgradient at zero is zero.
pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&p, &d)| if p > 0.0 { d } else { 0.0 }).collect()
}

/// Lookup table of `vocab x dim` vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, vocab: usize, dim: usize) -> Self {
        // A lookup has fan-in one.
        let table = store.add(name, &[vocab, dim], Init::FanIn(1), rng);
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, store: &ParamStore, ids: &[usize]) -> Mat {
        let t = store.values(self.table);
        let mut out = Mat::zeros(ids.len(), self.dim);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&t[id * self.dim..(id + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&self, ids: &[usize], d: &Mat, grads: &mut Gradients) {
        let g = grads.get_mut(self.table);
        for (i, &id) in ids.iter().enumerate() {
            math::axpy(1.0, d.row(i), &mut g[id * self.dim..(id + 1) * self.dim]);
        }
    }
}

pub(crate) fn name(prefix: &str, leaf: &str) -> String {
    let mut s = String::from(prefix);
    s.push('/');
    s.push_str(leaf);
    s
}
