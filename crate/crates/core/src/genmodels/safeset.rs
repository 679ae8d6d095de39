//! Autoregressive density over discretized observations. States whose
//! log-likelihood under this model clears a calibrated threshold form the
//! learned safe set: the model is fitted only to observations from trips
//! that finished cleanly, so low likelihood marks state combinations that
//! successful driving never visits (for example, high speed close to a red).
//!
//! Tokens are emitted context-first with (SoC, speed) last, so one prefix
//! pass per query context prices the entire planner (SoC, speed) grid.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::lstm::LstmStepCache;
use crate::nn::{Adam, LstmCell, Mlp, MlpCache, Params};

use super::SeqSchema;

/// Recurrent cell plus one softmax head per field kind (heads are shared
/// across positions of the same kind, e.g. all 81 window samples).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafeSetModel {
    pub cell: LstmCell,
    pub heads: Vec<Mlp>,
    pub schema: SeqSchema,
}

/// Numerically stable log-softmax of one logit row.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l - lse).collect()
}

impl SafeSetModel {
    pub fn new(schema: SeqSchema, hidden: usize, rng: &mut impl Rng) -> Self {
        let cell = LstmCell::new(schema.input_width(), hidden, rng);
        let heads = schema
            .vocabs
            .iter()
            .map(|&v| Mlp::new(&[hidden, v], rng))
            .collect();
        SafeSetModel {
            cell,
            heads,
            schema,
        }
    }

    fn zeros_like(&self) -> SafeSetModel {
        SafeSetModel {
            cell: self.cell.zeros_like(),
            heads: self.heads.iter().map(Mlp::zeros_like).collect(),
            schema: self.schema.clone(),
        }
    }

    /// Joint log-probability of one full token sequence.
    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        assert_eq!(tokens.len(), self.schema.len());
        let (mut h, mut c) = self.cell.zero_state(1);
        let mut lp = 0.0;
        for i in 0..tokens.len() {
            let col = if i == 0 {
                self.schema.bos_column()
            } else {
                self.schema.column(i - 1, tokens[i - 1])
            };
            let (h2, c2, _) = self.cell.step_classes(&[col], &h, &c);
            h = h2;
            c = c2;
            let head = &self.heads[self.schema.fields[i]];
            let logits = head.forward_one(h.row(0).as_slice().unwrap());
            lp += log_softmax(&logits)[tokens[i]];
        }
        lp
    }

    /// Joint log-probability over the full (SoC, speed) grid for a fixed
    /// context (all tokens except the trailing SoC and speed fields).
    /// Returns `[n_soc, n_speed]`. The context prefix is evaluated once and
    /// shared across the whole grid.
    pub fn grid_log_probs(&self, context: &[usize]) -> Array2<f64> {
        let l = self.schema.len();
        assert!(l >= 2, "schema must end in (SoC, speed)");
        assert_eq!(context.len(), l - 2);
        let soc_kind = self.schema.fields[l - 2];
        let v_kind = self.schema.fields[l - 1];
        let n_soc = self.schema.vocabs[soc_kind];
        let n_v = self.schema.vocabs[v_kind];

        // Prefix: BOS plus every context token, accumulating their log-probs.
        let (mut h, mut c) = self.cell.zero_state(1);
        let mut lp_prefix = 0.0;
        for i in 0..=context.len() {
            let col = if i == 0 {
                self.schema.bos_column()
            } else {
                self.schema.column(i - 1, context[i - 1])
            };
            let (h2, c2, _) = self.cell.step_classes(&[col], &h, &c);
            h = h2;
            c = c2;
            if i < context.len() {
                let head = &self.heads[self.schema.fields[i]];
                let logits = head.forward_one(h.row(0).as_slice().unwrap());
                lp_prefix += log_softmax(&logits)[context[i]];
            }
        }

        // SoC distribution from the shared prefix state, then one extra step
        // per SoC class to price every speed class.
        let soc_logits = self.heads[soc_kind].forward_one(h.row(0).as_slice().unwrap());
        let lp_soc = log_softmax(&soc_logits);
        let mut grid = Array2::zeros((n_soc, n_v));
        for s in 0..n_soc {
            let col = self.schema.column(l - 2, s);
            let (hs, _, _) = self.cell.step_classes(&[col], &h, &c);
            let v_logits = self.heads[v_kind].forward_one(hs.row(0).as_slice().unwrap());
            let lp_v = log_softmax(&v_logits);
            for v in 0..n_v {
                grid[[s, v]] = lp_prefix + lp_soc[s] + lp_v[v];
            }
        }
        grid
    }

    /// Mean negative log-likelihood of a batch plus parameter gradients.
    pub fn loss_and_grads(&self, seqs: &[Vec<usize>]) -> (f64, SafeSetModel) {
        let bsz = seqs.len();
        assert!(bsz > 0);
        let l = self.schema.len();
        for s in seqs {
            assert_eq!(s.len(), l);
        }

        let (mut h, mut c) = self.cell.zero_state(bsz);
        let mut step_caches: Vec<LstmStepCache> = Vec::with_capacity(l);
        let mut head_caches: Vec<MlpCache> = Vec::with_capacity(l);
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(l);
        let mut nll = 0.0;

        for i in 0..l {
            let cols: Vec<usize> = (0..bsz)
                .map(|b| {
                    if i == 0 {
                        self.schema.bos_column()
                    } else {
                        self.schema.column(i - 1, seqs[b][i - 1])
                    }
                })
                .collect();
            let (h2, c2, cache) = self.cell.step_classes(&cols, &h, &c);
            h = h2;
            c = c2;
            step_caches.push(cache);
            let head = &self.heads[self.schema.fields[i]];
            let (logits, hc) = head.forward_cached(h.view());
            head_caches.push(hc);
            // Row-wise softmax; keep probabilities for the backward pass.
            let mut p = logits;
            for (b, mut row) in p.outer_iter_mut().enumerate() {
                let lsm = log_softmax(row.as_slice().unwrap());
                nll -= lsm[seqs[b][i]];
                for (x, &v) in row.iter_mut().zip(lsm.iter()) {
                    *x = v.exp();
                }
            }
            probs.push(p);
        }
        let loss = nll / bsz as f64;

        // Backward: cross-entropy gradient at each step's head, then BPTT.
        let mut grads = self.zeros_like();
        let hidden = self.cell.hidden;
        let mut dh = Array2::zeros((bsz, hidden));
        let mut dc = Array2::zeros((bsz, hidden));
        for i in (0..l).rev() {
            let kind = self.schema.fields[i];
            let mut dlogits = probs[i].clone();
            for b in 0..bsz {
                dlogits[[b, seqs[b][i]]] -= 1.0;
            }
            dlogits.mapv_inplace(|x| x / bsz as f64);
            let (hg, dh_head) = self.heads[kind].backward(&head_caches[i], dlogits);
            grads.heads[kind].axpy(1.0, &hg);
            let dh_total = &dh + &dh_head;
            let (dh_prev, dc_prev) =
                self.cell
                    .backward_step(&step_caches[i], &dh_total, &dc, &mut grads.cell);
            dh = dh_prev;
            dc = dc_prev;
        }
        (loss, grads)
    }

    /// One optimizer step on a batch of sequences; returns mean NLL.
    pub fn train_batch(&mut self, seqs: &[Vec<usize>], opt: &mut Adam) -> f64 {
        let (loss, grads) = self.loss_and_grads(seqs);
        opt.step(self, &grads);
        loss
    }
}

impl Params for SafeSetModel {
    fn visit(&self, f: &mut dyn FnMut(ArrayViewD<'_, f64>)) {
        self.cell.visit(f);
        for head in &self.heads {
            head.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ArrayViewMutD<'_, f64>)) {
        self.cell.visit_mut(f);
        for head in &mut self.heads {
            head.visit_mut(f);
        }
    }
}

/// Likelihood threshold from training log-probs: the value at the `q`
/// quantile (e.g. 0.02), so at most that fraction of the training data
/// falls below the returned threshold.
pub fn delta_from_quantile(log_probs: &[f64], q: f64) -> f64 {
    assert!(!log_probs.is_empty());
    assert!((0.0..1.0).contains(&q));
    let mut sorted = log_probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx]
}
