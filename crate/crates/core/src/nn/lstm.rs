//! Single LSTM cell with batched stepping and backpropagation through time.
//!
//! Gate preactivations are stored as one `[batch, 4H]` block in the order
//! `[input, forget, cell, output]`. Inputs may be dense rows or class indices
//! (one-hot), in which case the input transform is a column gather from `wx`
//! instead of a matrix product.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, Params};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    /// `[4H, in]` input weights.
    pub wx: Array2<f64>,
    /// `[4H, H]` recurrent weights.
    pub wh: Array2<f64>,
    /// `[4H]` bias.
    pub b: Array1<f64>,
    pub hidden: usize,
}

/// Per-step values needed by the backward pass.
pub struct LstmStepCache {
    /// Post-nonlinearity gates `[batch, 4H]` in `[i, f, g, o]` order.
    pub gates: Array2<f64>,
    /// Cell state entering the step.
    pub c_in: Array2<f64>,
    /// Hidden state entering the step.
    pub h_in: Array2<f64>,
    /// `tanh` of the updated cell state.
    pub tanh_c2: Array2<f64>,
    /// Input of the step: class index per batch row (one-hot input).
    pub classes: Vec<usize>,
}

impl LstmCell {
    pub fn new(n_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let d = Dense::new(n_in, 4 * hidden, rng);
        let r = Dense::new(hidden, 4 * hidden, rng);
        LstmCell {
            wx: d.w,
            wh: r.w,
            b: d.b,
            hidden,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LstmCell {
            wx: Array2::zeros(self.wx.raw_dim()),
            wh: Array2::zeros(self.wh.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            hidden: self.hidden,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.wx.ncols()
    }

    /// Advances one step with one-hot inputs given as class indices.
    /// Returns the new `(h, c)` and a cache for the backward pass.
    pub fn step_classes(
        &self,
        classes: &[usize],
        h: &Array2<f64>,
        c: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, LstmStepCache) {
        let hh = self.hidden;
        let mut pre = h.dot(&self.wh.t());
        for (bi, &cls) in classes.iter().enumerate() {
            debug_assert!(cls < self.wx.ncols(), "class index out of range");
            let col = self.wx.column(cls);
            let mut row = pre.row_mut(bi);
            row += &col;
        }
        pre += &self.b;

        let mut gates = pre;
        apply_gate_nonlinearities(&mut gates, hh);
        let (c2, tanh_c2, h2) = advance_cell(&gates, c, hh);
        let cache = LstmStepCache {
            gates,
            c_in: c.clone(),
            h_in: h.clone(),
            tanh_c2,
            classes: classes.to_vec(),
        };
        (h2, c2, cache)
    }

    /// Backward through one step. `dh2`/`dc2` are gradients flowing into the
    /// step's outputs; parameter gradients accumulate into `grads`; returns
    /// gradients w.r.t. the incoming `(h, c)`.
    pub fn backward_step(
        &self,
        cache: &LstmStepCache,
        dh2: &Array2<f64>,
        dc2: &Array2<f64>,
        grads: &mut LstmCell,
    ) -> (Array2<f64>, Array2<f64>) {
        let hh = self.hidden;
        let i = cache.gates.slice(s![.., 0..hh]);
        let f = cache.gates.slice(s![.., hh..2 * hh]);
        let g = cache.gates.slice(s![.., 2 * hh..3 * hh]);
        let o = cache.gates.slice(s![.., 3 * hh..4 * hh]);
        let tc2 = &cache.tanh_c2;

        // dc through h2 = o * tanh(c2) plus the incoming dc2.
        let mut dc = dh2 * &o * &tc2.mapv(|t| 1.0 - t * t) + dc2;

        let batch = dh2.nrows();
        let mut dpre = Array2::<f64>::zeros((batch, 4 * hh));
        {
            let mut dpi = dpre.slice_mut(s![.., 0..hh]);
            dpi.assign(&(&dc * &g * &i.mapv(|x| x * (1.0 - x))));
            let mut dpf = dpre.slice_mut(s![.., hh..2 * hh]);
            dpf.assign(&(&dc * &cache.c_in * &f.mapv(|x| x * (1.0 - x))));
            let mut dpg = dpre.slice_mut(s![.., 2 * hh..3 * hh]);
            dpg.assign(&(&dc * &i * &g.mapv(|x| 1.0 - x * x)));
            let mut dpo = dpre.slice_mut(s![.., 3 * hh..4 * hh]);
            dpo.assign(&(dh2 * tc2 * &o.mapv(|x| x * (1.0 - x))));
        }

        // Parameter gradients.
        for (bi, &cls) in cache.classes.iter().enumerate() {
            let dp = dpre.row(bi);
            let mut col = grads.wx.column_mut(cls);
            col += &dp;
        }
        grads.wh = &grads.wh + &dpre.t().dot(&cache.h_in);
        grads.b = &grads.b + &dpre.sum_axis(Axis(0));

        let dh = dpre.dot(&self.wh);
        // dc flowing to the previous step passes through the forget gate.
        dc.zip_mut_with(&f.to_owned(), |x, &ff| *x *= ff);
        (dh, dc)
    }

    pub fn zero_state(&self, batch: usize) -> (Array2<f64>, Array2<f64>) {
        (
            Array2::zeros((batch, self.hidden)),
            Array2::zeros((batch, self.hidden)),
        )
    }
}

fn apply_gate_nonlinearities(pre: &mut Array2<f64>, hidden: usize) {
    let cols = pre.ncols();
    debug_assert_eq!(cols, 4 * hidden);
    for mut row in pre.rows_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            if j >= 2 * hidden && j < 3 * hidden {
                *x = x.tanh();
            } else {
                *x = sigmoid(*x);
            }
        }
    }
}

fn advance_cell(
    gates: &Array2<f64>,
    c: &Array2<f64>,
    hidden: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let i = gates.slice(s![.., 0..hidden]);
    let f = gates.slice(s![.., hidden..2 * hidden]);
    let g = gates.slice(s![.., 2 * hidden..3 * hidden]);
    let o = gates.slice(s![.., 3 * hidden..4 * hidden]);
    let c2 = &f * c + &i * &g;
    let tanh_c2 = c2.mapv(f64::tanh);
    let h2 = &o * &tanh_c2;
    (c2, tanh_c2, h2)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Params for LstmCell {
    fn visit(&self, f: &mut dyn FnMut(ArrayViewD<'_, f64>)) {
        f(self.wx.view().into_dyn());
        f(self.wh.view().into_dyn());
        f(self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ArrayViewMutD<'_, f64>)) {
        f(self.wx.view_mut().into_dyn());
        f(self.wh.view_mut().into_dyn());
        f(self.b.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Unrolls the cell over a class sequence (same sequence for every batch
    /// row here) and returns the sum of the final hidden state, a scalar
    /// loss with gradients through every step.
    fn unroll_loss(cell: &LstmCell, seq: &[usize], batch: usize) -> f64 {
        let (mut h, mut c) = cell.zero_state(batch);
        for &cls in seq {
            let classes = vec![cls; batch];
            let (h2, c2, _) = cell.step_classes(&classes, &h, &c);
            h = h2;
            c = c2;
        }
        h.sum()
    }

    fn unroll_backward(cell: &LstmCell, seq: &[usize], batch: usize) -> LstmCell {
        let (mut h, mut c) = cell.zero_state(batch);
        let mut caches = Vec::new();
        for &cls in seq {
            let classes = vec![cls; batch];
            let (h2, c2, cache) = cell.step_classes(&classes, &h, &c);
            caches.push(cache);
            h = h2;
            c = c2;
        }
        let mut grads = cell.zeros_like();
        let mut dh = Array2::ones((batch, cell.hidden));
        let mut dc = Array2::zeros((batch, cell.hidden));
        for cache in caches.iter().rev() {
            let (dhp, dcp) = cell.backward_step(cache, &dh, &dc, &mut grads);
            dh = dhp;
            dc = dcp;
        }
        grads
    }

    #[test]
    fn lstm_unroll_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cell = LstmCell::new(5, 6, &mut rng);
        let seq: Vec<usize> = (0..12).map(|_| rng.gen_range(0..5)).collect();
        let analytic = unroll_backward(&cell, &seq, 2).flatten();
        let x0 = cell.flatten();
        let mut f = |p: &[f64]| {
            cell.assign_from_flat(p);
            unroll_loss(&cell, &seq, 2)
        };
        // h at the central-difference noise minimum for O(1) losses; the
        // floor keeps near-zero components from inflating the relative error.
        let fd = central_diff(&mut f, &x0, 1e-4);
        let err = max_rel_err(&analytic, &fd, 1e-4);
        assert!(err < 1e-6, "LSTM BPTT gradient mismatch: {err}");
    }

    #[test]
    fn one_hot_step_equals_explicit_column_math() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cell = LstmCell::new(4, 3, &mut rng);
        let (h, c) = cell.zero_state(1);
        let (h2, _, _) = cell.step_classes(&[2], &h, &c);
        // With h = 0 the preactivation is wx[:, 2] + b.
        let pre: Vec<f64> = (0..12).map(|r| cell.wx[[r, 2]] + cell.b[r]).collect();
        let hh = 3;
        for j in 0..hh {
            let i = sigmoid(pre[j]);
            let g = pre[2 * hh + j].tanh();
            let o = sigmoid(pre[3 * hh + j]);
            let c2 = i * g;
            assert!((h2[[0, j]] - o * c2.tanh()).abs() < 1e-12);
        }
    }
}
