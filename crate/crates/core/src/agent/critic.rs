//! Twin action-value networks with target copies, the bounded perturbation
//! network, and the batched update rules.
//!
//! Values are expected discounted costs-to-go, so every improvement step
//! minimizes. Bootstrapped targets score candidate actions with the
//! pessimistic (elementwise max) combination of the two target critics and
//! keep the cheapest candidate; candidates come from the behavior VAE
//! (support-constrained) or a uniform box depending on the configured mode,
//! and are nudged by a target perturbation net bounded to Φ N·m per
//! component.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::genmodels::ActionVae;
use crate::nn::{scaled_tanh, scaled_tanh_grad, Adam, Mlp};
use crate::powertrain::ControlInput;
use crate::traffic::Observation;

use super::features::FeatureExtractor;

/// Bootstrapped-target style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    /// No learned values at all (horizon priced at zero).
    None,
    /// Unconstrained candidates sampled uniformly over the action box.
    Td3,
    /// Candidates sampled from the behavior VAE (support-constrained).
    Bcq,
}

/// Two independently initialized critics plus frozen-copy targets.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub t1: Mlp,
    pub t2: Mlp,
}

impl CriticPair {
    /// `input_dim` covers state features plus action coordinates. Targets
    /// start as exact copies.
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, rng);
        let q2 = Mlp::new(&sizes, rng);
        let t1 = q1.clone();
        let t2 = q2.clone();
        CriticPair { q1, q2, t1, t2 }
    }

    /// Pessimistic target value: elementwise max of the two target critics.
    pub fn target_max(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let a = self.t1.forward(x);
        let b = self.t2.forward(x);
        Array1::from_iter(a.column(0).iter().zip(b.column(0)).map(|(&p, &q)| p.max(q)))
    }

    /// Pessimistic online value.
    pub fn online_max(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let a = self.q1.forward(x);
        let b = self.q2.forward(x);
        Array1::from_iter(a.column(0).iter().zip(b.column(0)).map(|(&p, &q)| p.max(q)))
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.t1.track(&self.q1, tau);
        self.t2.track(&self.q2, tau);
    }
}

/// Residual action network: reads (state features, action) and emits a
/// torque offset squashed to ±Φ N·m per component.
#[derive(Debug, Clone)]
pub struct PerturbationNet {
    pub net: Mlp,
    pub target: Mlp,
    pub phi_nm: f64,
}

impl PerturbationNet {
    pub fn new(input_dim: usize, hidden: &[usize], phi_nm: f64, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(3);
        let net = Mlp::new(&sizes, rng);
        let target = net.clone();
        PerturbationNet { net, target, phi_nm }
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.target.track(&self.net, tau);
    }
}

/// Minibatch in network coordinates: state features, normalized actions,
/// realized costs, successor features, terminal flags.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub feats: Array2<f64>,
    pub actions_norm: Array2<f64>,
    pub costs: Array1<f64>,
    pub next_feats: Array2<f64>,
    pub terminal: Vec<bool>,
}

/// The learned value stack: featurizer, behavior VAE, critics, perturbation.
#[derive(Debug, Clone)]
pub struct ValueNets {
    pub fx: FeatureExtractor,
    pub vae: ActionVae,
    pub critics: CriticPair,
    pub pert: PerturbationNet,
    pub mode: QMode,
}

impl ValueNets {
    fn stack(feats: ArrayView2<'_, f64>, actions_norm: ArrayView2<'_, f64>) -> Array2<f64> {
        let b = feats.nrows();
        let f = feats.ncols();
        let mut x = Array2::zeros((b, f + actions_norm.ncols()));
        x.slice_mut(s![.., ..f]).assign(&feats);
        x.slice_mut(s![.., f..]).assign(&actions_norm);
        x
    }

    /// Draws `n` candidate actions per row, in physical N·m. Candidates come
    /// from the behavior VAE or a uniform box depending on the mode.
    pub fn candidate_actions<R: Rng>(
        &self,
        feats: ArrayView2<'_, f64>,
        n: usize,
        rng: &mut R,
    ) -> Vec<ControlInput> {
        let mut out = Vec::with_capacity(feats.nrows() * n);
        for row in feats.rows() {
            let state: Vec<f64> = row.to_vec();
            for _ in 0..n {
                let a_norm: [f64; 3] = match self.mode {
                    QMode::Bcq => {
                        let a = self.vae.sample_one(&state, rng);
                        [a[0], a[1], a[2]]
                    }
                    _ => [
                        rng.gen_range(-1.0..=1.0),
                        rng.gen_range(-1.0..=1.0),
                        rng.gen_range(-1.0..=1.0),
                    ],
                };
                out.push(self.fx.action_box.denormalize(a_norm));
            }
        }
        out
    }

    /// Applies the perturbation net to each (features, action) pair and
    /// clamps the result to the action box. `use_target` selects the frozen
    /// copy. The offset never exceeds Φ per component, and because inputs
    /// already sit inside the box, neither does the post-clamp displacement.
    pub fn perturb_batch(
        &self,
        feats: ArrayView2<'_, f64>,
        actions: &[ControlInput],
        use_target: bool,
    ) -> Vec<ControlInput> {
        assert_eq!(feats.nrows(), actions.len());
        let bx = self.fx.action_box;
        let mut a_norm = Array2::zeros((actions.len(), 3));
        for (i, u) in actions.iter().enumerate() {
            let a = bx.normalize(u);
            a_norm.row_mut(i).assign(&Array1::from(a.to_vec()));
        }
        let x = Self::stack(feats, a_norm.view());
        let net = if use_target { &self.pert.target } else { &self.pert.net };
        let raw = net.forward(x.view());
        actions
            .iter()
            .zip(raw.rows())
            .map(|(u, r)| {
                bx.clamp(&ControlInput {
                    t_eng_nm: u.t_eng_nm + scaled_tanh(r[0], self.pert.phi_nm),
                    t_bsg_nm: u.t_bsg_nm + scaled_tanh(r[1], self.pert.phi_nm),
                    t_brk_nm: u.t_brk_nm + scaled_tanh(r[2], self.pert.phi_nm),
                })
            })
            .collect()
    }

    /// Greedy constrained action per successor state: draw `n` candidates,
    /// nudge each with the target perturbation, score with the pessimistic
    /// target pair, keep the cheapest.
    pub fn target_actions<R: Rng>(
        &self,
        next_feats: ArrayView2<'_, f64>,
        n: usize,
        rng: &mut R,
    ) -> Vec<ControlInput> {
        let b = next_feats.nrows();
        let cands = self.candidate_actions(next_feats, n, rng);
        let mut rep = Array2::zeros((b * n, next_feats.ncols()));
        for i in 0..b {
            for j in 0..n {
                rep.row_mut(i * n + j).assign(&next_feats.row(i));
            }
        }
        let perturbed = self.perturb_batch(rep.view(), &cands, true);
        let scores = self.score(rep.view(), &perturbed, true);
        (0..b)
            .map(|i| {
                let block = &scores.as_slice().unwrap()[i * n..(i + 1) * n];
                let j = block
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap();
                perturbed[i * n + j]
            })
            .collect()
    }

    fn score(
        &self,
        feats: ArrayView2<'_, f64>,
        actions: &[ControlInput],
        use_target: bool,
    ) -> Array1<f64> {
        let bx = self.fx.action_box;
        let mut a_norm = Array2::zeros((actions.len(), 3));
        for (i, u) in actions.iter().enumerate() {
            a_norm.row_mut(i).assign(&Array1::from(bx.normalize(u).to_vec()));
        }
        let x = Self::stack(feats, a_norm.view());
        if use_target {
            self.critics.target_max(x.view())
        } else {
            self.critics.online_max(x.view())
        }
    }

    /// Bootstrapped regression targets `y = c + γ·max_i Q'_i(x', u')`, with
    /// the bootstrap dropped on terminal transitions.
    pub fn targets<R: Rng>(
        &self,
        batch: &CriticBatch,
        gamma: f64,
        n_candidates: usize,
        rng: &mut R,
    ) -> Array1<f64> {
        let b = batch.feats.nrows();
        let mut y = batch.costs.clone();
        let cont: Vec<usize> = (0..b).filter(|&i| !batch.terminal[i]).collect();
        if cont.is_empty() || self.mode == QMode::None {
            return y;
        }
        let nf = batch.next_feats.select(Axis(0), &cont);
        let u = self.target_actions(nf.view(), n_candidates, rng);
        let v = self.score(nf.view(), &u, true);
        for (k, &i) in cont.iter().enumerate() {
            y[i] += gamma * v[k];
        }
        y
    }

    /// One Adam step per critic on the squared regression error against the
    /// shared bootstrap targets. Returns both mean squared errors.
    pub fn critic_update<R: Rng>(
        &mut self,
        batch: &CriticBatch,
        gamma: f64,
        n_candidates: usize,
        opt1: &mut Adam,
        opt2: &mut Adam,
        rng: &mut R,
    ) -> (f64, f64) {
        let y = self.targets(batch, gamma, n_candidates, rng);
        let x = Self::stack(batch.feats.view(), batch.actions_norm.view());
        let b = batch.feats.nrows() as f64;
        let mut losses = [0.0; 2];
        for (k, (net, opt)) in [(&mut self.critics.q1, opt1), (&mut self.critics.q2, opt2)]
            .into_iter()
            .enumerate()
        {
            let (pred, cache) = net.forward_cached(x.view());
            let mut dout = Array2::zeros(pred.raw_dim());
            let mut loss = 0.0;
            for i in 0..pred.nrows() {
                let e = pred[[i, 0]] - y[i];
                loss += e * e;
                dout[[i, 0]] = 2.0 * e / b;
            }
            losses[k] = loss / b;
            let (grads, _) = net.backward(&cache, dout);
            opt.step(net, &grads);
        }
        (losses[0], losses[1])
    }

    /// One Adam step on the perturbation net, descending the mean of
    /// `Q_1(x, u + ξ(x, u))`. Gradients flow only through the perturbation
    /// output; the critic and featurizer are treated as constants. Returns
    /// the pre-update mean value.
    pub fn perturbation_update(
        &mut self,
        feats: ArrayView2<'_, f64>,
        actions: &[ControlInput],
        opt: &mut Adam,
    ) -> f64 {
        let bx = self.fx.action_box;
        let b = actions.len() as f64;
        let mut a_norm = Array2::zeros((actions.len(), 3));
        for (i, u) in actions.iter().enumerate() {
            a_norm.row_mut(i).assign(&Array1::from(bx.normalize(u).to_vec()));
        }
        let p_in = Self::stack(feats, a_norm.view());
        let (raw, p_cache) = self.pert.net.forward_cached(p_in.view());

        // Perturbed action in physical units, with clamp gates.
        let mut q_act = Array2::zeros((actions.len(), 3));
        let mut gate = Array2::zeros((actions.len(), 3));
        for (i, u) in actions.iter().enumerate() {
            let phys = [u.t_eng_nm, u.t_bsg_nm, u.t_brk_nm];
            for c in 0..3 {
                let p = phys[c] + scaled_tanh(raw[[i, c]], self.pert.phi_nm);
                let inside = p > bx.lo[c] && p < bx.hi[c];
                gate[[i, c]] = inside as u8 as f64;
                let clamped = p.clamp(bx.lo[c], bx.hi[c]);
                q_act[[i, c]] = 2.0 * (clamped - bx.lo[c]) / (bx.hi[c] - bx.lo[c]) - 1.0;
            }
        }
        let q_in = Self::stack(feats, q_act.view());
        let (q, q_cache) = self.critics.q1.forward_cached(q_in.view());
        let mean_q = q.column(0).sum() / b;

        let dout = Array2::from_elem(q.raw_dim(), 1.0 / b);
        let (_, dq_in) = self.critics.q1.backward(&q_cache, dout);
        let f = feats.ncols();
        let mut draw = Array2::zeros(raw.raw_dim());
        for i in 0..actions.len() {
            for c in 0..3 {
                let da_norm = dq_in[[i, f + c]];
                let da_phys = da_norm * 2.0 / (bx.hi[c] - bx.lo[c]) * gate[[i, c]];
                draw[[i, c]] = da_phys * scaled_tanh_grad(raw[[i, c]], self.pert.phi_nm);
            }
        }
        let (grads, _) = self.pert.net.backward(&p_cache, draw);
        opt.step(&mut self.pert.net, &grads);
        mean_q
    }

    /// Soft-tracks all target copies.
    pub fn soft_update(&mut self, tau: f64) {
        self.critics.soft_update(tau);
        self.pert.soft_update(tau);
    }

    /// Batched state-value estimate: per row, the minimum over `n` sampled
    /// perturbed actions of the pessimistic online critic value.
    pub fn value_batch<R: Rng>(
        &self,
        feats: ArrayView2<'_, f64>,
        n: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let b = feats.nrows();
        let cands = self.candidate_actions(feats, n, rng);
        let mut rep = Array2::zeros((b * n, feats.ncols()));
        for i in 0..b {
            for j in 0..n {
                rep.row_mut(i * n + j).assign(&feats.row(i));
            }
        }
        let perturbed = self.perturb_batch(rep.view(), &cands, false);
        let scores = self.score(rep.view(), &perturbed, false);
        (0..b)
            .map(|i| {
                scores.as_slice().unwrap()[i * n..(i + 1) * n]
                    .iter()
                    .fold(f64::INFINITY, |m, &v| m.min(v))
            })
            .collect()
    }

    /// State value of one observation; +∞ outside the safe set. With
    /// learned values disabled the estimate is identically zero (while safe
    /// membership still applies).
    pub fn value_estimate<R: Rng>(
        &self,
        obs: &Observation,
        n: usize,
        safe_member: Option<bool>,
        rng: &mut R,
    ) -> f64 {
        if safe_member == Some(false) {
            return f64::INFINITY;
        }
        if self.mode == QMode::None {
            return 0.0;
        }
        let f = self.fx.features(obs);
        let feats = Array2::from_shape_vec((1, f.len()), f).unwrap();
        self.value_batch(feats.view(), n, rng)[0]
    }
}
