//! LSTM cells with explicit backpropagation through time.
//!
//! Gate layout inside the `4H` pre-activation vector is `[input, forget, cell, output]`.

use alloc::vec::Vec;

use super::layers::name;
use super::{check_dim, Gradients, Init, NetError, ParamId, ParamStore, Rng};
use crate::math::{self, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One unidirectional LSTM layer. Weights: `Wx: D x 4H`, `Wh: H x 4H`, `b: 4H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Activations kept for the backward pass. Rows are indexed by sequence position.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Post-activation gates `[i, f, g, o]` per position.
    pub gates: Mat,
    pub cells: Mat,
    pub tanh_cells: Mat,
    pub hidden: Mat,
    pub direction: Direction,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input_dim: usize, hidden: usize) -> Self {
        let wx = store.add(name(prefix, "Wx"), &[input_dim, 4 * hidden], Init::FanIn(input_dim), rng);
        let wh = store.add(name(prefix, "Wh"), &[hidden, 4 * hidden], Init::FanIn(hidden), rng);
        let b = store.add(name(prefix, "b"), &[4 * hidden], Init::Zeros, rng);
        store.values_mut(b)[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        LstmLayer { wx, wh, b, input_dim, hidden }
    }

    fn order(n: usize, dir: Direction) -> impl Iterator<Item = usize> {
        let fwd = dir == Direction::Forward;
        (0..n).map(move |t| if fwd { t } else { n - 1 - t })
    }

    pub fn forward(&self, store: &ParamStore, xs: &Mat, dir: Direction) -> Result<LstmTrace, NetError> {
        if xs.rows == 0 {
            return Err(NetError::EmptySequence);
        }
        check_dim(self.input_dim, xs.cols)?;
        let h4 = 4 * self.hidden;
        let hd = self.hidden;
        let wx = store.values(self.wx);
        let wh = store.values(self.wh);
        let b = store.values(self.b);
        let n = xs.rows;
        let mut gates = Mat::zeros(n, h4);
        let mut cells = Mat::zeros(n, hd);
        let mut tanh_cells = Mat::zeros(n, hd);
        let mut hidden = Mat::zeros(n, hd);
        let mut h_prev = alloc::vec![0.0; hd];
        let mut c_prev = alloc::vec![0.0; hd];
        let mut z = alloc::vec![0.0; h4];
        for t in Self::order(n, dir) {
            z.copy_from_slice(b);
            math::vec_mat_acc(xs.row(t), wx, &mut z);
            math::vec_mat_acc(&h_prev, wh, &mut z);
            let g = gates.row_mut(t);
            for k in 0..hd {
                g[k] = math::sigmoid(z[k]);
                g[hd + k] = math::sigmoid(z[hd + k]);
                g[2 * hd + k] = math::tanh(z[2 * hd + k]);
                g[3 * hd + k] = math::sigmoid(z[3 * hd + k]);
            }
            let c = cells.row_mut(t);
            for k in 0..hd {
                c[k] = g[hd + k] * c_prev[k] + g[k] * g[2 * hd + k];
            }
            let tc = tanh_cells.row_mut(t);
            let h = hidden.row_mut(t);
            for k in 0..hd {
                tc[k] = math::tanh(c[k]);
                h[k] = g[3 * hd + k] * tc[k];
            }
            h_prev.copy_from_slice(h);
            c_prev.copy_from_slice(c);
        }
        Ok(LstmTrace { gates, cells, tanh_cells, hidden, direction: dir })
    }

    /// Backpropagate `dh` (gradient w.r.t. every hidden state) and return the input gradient.
    pub fn backward(&self, store: &ParamStore, xs: &Mat, trace: &LstmTrace, dh: &Mat, grads: &mut Gradients) -> Mat {
        let hd = self.hidden;
        let h4 = 4 * hd;
        let n = xs.rows;
        let wx = store.values(self.wx);
        let wh = store.values(self.wh);
        let mut dz_all = Mat::zeros(n, h4);
        let mut dh_next = alloc::vec![0.0; hd];
        let mut dc_next = alloc::vec![0.0; hd];
        let zeros = alloc::vec![0.0; hd];
        let steps: Vec<usize> = Self::order(n, trace.direction).collect();
        {
            let dwh = grads.get_mut(self.wh);
            for (s, &t) in steps.iter().enumerate().rev() {
                let prev = if s == 0 { None } else { Some(steps[s - 1]) };
                let c_prev = prev.map_or(&zeros[..], |p| trace.cells.row(p));
                let h_prev = prev.map_or(&zeros[..], |p| trace.hidden.row(p));
                let g = trace.gates.row(t);
                let tc = trace.tanh_cells.row(t);
                let dht = dh.row(t);
                let dz = dz_all.row_mut(t);
                for k in 0..hd {
                    let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
                    let dhk = dht[k] + dh_next[k];
                    let d_o = dhk * tc[k];
                    let dc = dhk * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
                    dz[k] = dc * gg * i * (1.0 - i);
                    dz[hd + k] = dc * c_prev[k] * f * (1.0 - f);
                    dz[2 * hd + k] = dc * i * (1.0 - gg * gg);
                    dz[3 * hd + k] = d_o * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                math::outer_acc(h_prev, dz, dwh);
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                math::mat_vec_acc(wh, dz, &mut dh_next);
            }
        }
        let mut dxs = Mat::zeros(n, self.input_dim);
        {
            let dwx = grads.get_mut(self.wx);
            for t in 0..n {
                math::outer_acc(xs.row(t), dz_all.row(t), dwx);
            }
        }
        {
            let db = grads.get_mut(self.b);
            for t in 0..n {
                math::axpy(1.0, dz_all.row(t), db);
            }
        }
        for t in 0..n {
            math::mat_vec_acc(wx, dz_all.row(t), dxs.row_mut(t));
        }
        dxs
    }
}

/// Forward and backward layers whose outputs are concatenated per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstm {
    pub fwd: LstmLayer,
    pub bwd: LstmLayer,
}

#[derive(Debug, Clone)]
pub struct BiLstmTrace {
    pub fwd: LstmTrace,
    pub bwd: LstmTrace,
    pub output: Mat,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input_dim: usize, hidden: usize) -> Self {
        let fwd = LstmLayer::new(store, rng, &name(prefix, "fwd"), input_dim, hidden);
        let bwd = LstmLayer::new(store, rng, &name(prefix, "bwd"), input_dim, hidden);
        BiLstm { fwd, bwd }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, store: &ParamStore, xs: &Mat) -> Result<BiLstmTrace, NetError> {
        let f = self.fwd.forward(store, xs, Direction::Forward)?;
        let b = self.bwd.forward(store, xs, Direction::Backward)?;
        let output = Mat::hcat(&[&f.hidden, &b.hidden]);
        Ok(BiLstmTrace { fwd: f, bwd: b, output })
    }

    pub fn backward(&self, store: &ParamStore, xs: &Mat, trace: &BiLstmTrace, dout: &Mat, grads: &mut Gradients) -> Mat {
        let h = self.fwd.hidden;
        let df = dout.slice_cols(0, h);
        let db = dout.slice_cols(h, h);
        let mut dx = self.fwd.backward(store, xs, &trace.fwd, &df, grads);
        let dxb = self.bwd.backward(store, xs, &trace.bwd, &db, grads);
        math::axpy(1.0, &dxb.data, &mut dx.data);
        dx
    }
}

/// BiLSTM layers where layer `k` reads the output of layer `k - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedBiLstm {
    pub layers: Vec<BiLstm>,
}

#[derive(Debug, Clone)]
pub struct StackedTrace {
    /// Input to each layer; `inputs[0]` is the sequence fed to the stack.
    pub inputs: Vec<Mat>,
    pub layers: Vec<BiLstmTrace>,
}

impl StackedTrace {
    pub fn output(&self) -> &Mat {
        match self.layers.last() {
            Some(l) => &l.output,
            None => &self.inputs[0],
        }
    }
}

impl StackedBiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input_dim: usize, hidden: usize, layers: usize) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut d = input_dim;
        for k in 0..layers {
            out.push(BiLstm::new(store, rng, &alloc::format!("{prefix}/l{k}"), d, hidden));
            d = 2 * hidden;
        }
        StackedBiLstm { layers: out }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, |l| l.output_dim())
    }

    pub fn forward(&self, store: &ParamStore, xs: Mat) -> Result<StackedTrace, NetError> {
        if xs.rows == 0 {
            return Err(NetError::EmptySequence);
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut traces = Vec::with_capacity(self.layers.len());
        inputs.push(xs);
        for (k, l) in self.layers.iter().enumerate() {
            let tr = l.forward(store, &inputs[k])?;
            if k + 1 < self.layers.len() {
                inputs.push(tr.output.clone());
            }
            traces.push(tr);
        }
        Ok(StackedTrace { inputs, layers: traces })
    }

    pub fn backward(&self, store: &ParamStore, trace: &StackedTrace, dout: Mat, grads: &mut Gradients) -> Mat {
        let mut d = dout;
        for (k, l) in self.layers.iter().enumerate().rev() {
            d = l.backward(store, &trace.inputs[k], &trace.layers[k], &d, grads);
        }
        d
    }
}
