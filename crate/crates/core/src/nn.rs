//! Minimal neural-network substrate: dense layers, MLPs, an LSTM cell, and Adam.
//!
//! Everything is 64-bit and hand-rolled on top of `ndarray` matrix storage so
//! that every gradient path can be verified against central finite differences
//! (see the unit tests and the acceptance suite). Batched forward/backward
//! passes use `ndarray::dot` (matrixmultiply) as the only heavy kernel.
//!
//! Conventions:
//! - batches are row-major: `x` is `[batch, features]`;
//! - `Dense` computes `x · wᵀ + b` with `w` stored `[out, in]`;
//! - MLP hidden activations are ReLU, outputs linear; callers apply any
//!   output squashing (e.g. [`scaled_tanh`]) themselves so its gradient is
//!   part of the checked path;
//! - gradients are carried in a mirror struct of the same type as the model,
//!   so the optimizer walks parameters and gradients in lockstep.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub mod lstm;

pub use lstm::LstmCell;

/// Walks every parameter tensor of a model in a fixed order.
///
/// Gradient structs implement this with the same traversal order as their
/// model, which is what lets [`Adam::step`] pair them up, and what the
/// finite-difference tests use to flatten/restore parameter vectors.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ArrayViewMutD<'_, f64>));

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |t| out.extend(t.iter().copied()));
        out
    }

    fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        self.visit_mut(&mut |mut t| {
            for x in t.iter_mut() {
                *x = flat[k];
                k += 1;
            }
        });
        assert_eq!(k, flat.len(), "flat parameter vector length mismatch");
    }
}

/// One affine layer, `y = x · wᵀ + b`, with `w` of shape `[out, in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Uniform fan-in initialization: entries of `w` and `b` drawn from
    /// `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((n_out, n_in), |_| rng.gen_range(-bound..bound));
        let b = Array1::from_shape_fn(n_out, |_| rng.gen_range(-bound..bound));
        Dense { w, b }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            w: Array2::zeros((n_out, n_in)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }
}

impl Params for Dense {
    fn visit(&self, f: &mut dyn FnMut(ArrayViewD<'_, f64>)) {
        f(self.w.view().into_dyn());
        f(self.b.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ArrayViewMutD<'_, f64>)) {
        f(self.w.view_mut().into_dyn());
        f(self.b.view_mut().into_dyn());
    }
}

/// Multilayer perceptron: ReLU on hidden layers, linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Post-activation values for each layer; `acts[0]` is the input batch.
pub struct MlpCache {
    pub acts: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists layer widths input-first, e.g. `[15, 200, 100, 50, 1]`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].w.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = self.layers[0].forward(x);
        for layer in self.layers.iter().skip(1) {
            relu_inplace(&mut a);
            a = layer.forward(a.view());
        }
        a
    }

    /// Convenience single-row forward.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let xa = ArrayView2::from_shape((1, x.len()), x).expect("input shape");
        self.forward(xa).row(0).to_vec()
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts[i].view());
            if i != last {
                relu_inplace(&mut y);
            }
            acts.push(y);
        }
        let out = acts[acts.len() - 1].clone();
        (out, MlpCache { acts })
    }

    /// Backpropagates `dout` (gradient of the loss w.r.t. the linear output),
    /// returning parameter gradients and the gradient w.r.t. the input batch.
    pub fn backward(&self, cache: &MlpCache, dout: Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = self.zeros_like();
        let mut delta = dout;
        for i in (0..self.layers.len()).rev() {
            let a_in = &cache.acts[i];
            // d/dw of (x · wᵀ): deltaᵀ · x yields [out, in].
            grads.layers[i].w = delta.t().dot(a_in);
            grads.layers[i].b = delta.sum_axis(Axis(0));
            let mut dx = delta.dot(&self.layers[i].w);
            if i > 0 {
                // The stored activation is post-ReLU, so its sign gates the gradient.
                dx.zip_mut_with(a_in, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = dx;
        }
        (grads, delta)
    }

    /// Adds `other`'s tensors scaled by `alpha` into `self` (used for soft
    /// target tracking and gradient accumulation).
    pub fn axpy(&mut self, alpha: f64, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.zip_mut_with(&b.w, |x, &y| *x += alpha * y);
            a.b.zip_mut_with(&b.b, |x, &y| *x += alpha * y);
        }
    }

    /// Soft update toward `source`: `self = (1 - tau) * self + tau * source`.
    pub fn track(&mut self, source: &Mlp, tau: f64) {
        for (a, b) in self.layers.iter_mut().zip(&source.layers) {
            a.w.zip_mut_with(&b.w, |x, &y| *x = (1.0 - tau) * *x + tau * y);
            a.b.zip_mut_with(&b.b, |x, &y| *x = (1.0 - tau) * *x + tau * y);
        }
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(ArrayViewD<'_, f64>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(ArrayViewMutD<'_, f64>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| if x > 0.0 { x } else { 0.0 });
}

/// Bounded odd squashing for perturbation outputs: `phi * tanh(y)`.
pub fn scaled_tanh(y: f64, phi: f64) -> f64 {
    phi * y.tanh()
}

/// Derivative of [`scaled_tanh`] w.r.t. `y`.
pub fn scaled_tanh_grad(y: f64, phi: f64) -> f64 {
    let t = y.tanh();
    phi * (1.0 - t * t)
}

/// Adam with bias correction. Moment state is kept as flat vectors laid out
/// in the model's [`Params`] traversal order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(alpha: f64) -> Self {
        Adam {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update step: `params -= alpha * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let g = grads.flatten();
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        assert_eq!(self.m.len(), g.len(), "gradient layout changed under Adam");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        params.visit_mut(&mut |mut tensor| {
            for x in tensor.iter_mut() {
                let gi = g[k];
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let m_hat = self.m[k] / b1t;
                let v_hat = self.v[k] / b2t;
                *x -= self.alpha * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        });
        assert_eq!(k, g.len());
    }
}

/// Central finite-difference gradient of `f` at `x0` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative disagreement between two gradient vectors:
/// `max_i |a_i - b_i| / max(floor, |a_i|, |b_i|)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / floor.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
