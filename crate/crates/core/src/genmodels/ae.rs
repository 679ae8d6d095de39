//! Autoencoder over the signal-phase window: compresses the 81-sample 0/1
//! green/red horizon into a short latent used as a policy feature.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, Mlp, Params};

/// Encoder/decoder MLP pair with a linear latent and linear reconstruction,
/// trained by mean squared error. Inputs are the raw 0/1 window samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateAutoencoder {
    pub enc: Mlp,
    pub dec: Mlp,
}

impl StateAutoencoder {
    /// `sizes` runs input -> hidden ... -> latent for the encoder; the
    /// decoder mirrors it back.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2);
        let mut rev: Vec<usize> = sizes.to_vec();
        rev.reverse();
        StateAutoencoder {
            enc: Mlp::new(sizes, rng),
            dec: Mlp::new(&rev, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.enc.n_outputs()
    }

    pub fn input_dim(&self) -> usize {
        self.enc.n_inputs()
    }

    pub fn encode_one(&self, x: &[f64]) -> Vec<f64> {
        self.enc.forward_one(x)
    }

    pub fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.dec.forward(self.enc.forward(x).view())
    }

    /// Mean squared reconstruction error, averaged over the batch and summed
    /// over output dimensions.
    pub fn loss(&self, x: ArrayView2<'_, f64>) -> f64 {
        let r = self.reconstruct(x);
        let d = &r - &x;
        d.mapv(|e| e * e).sum() / x.nrows() as f64
    }

    /// Loss plus parameter gradients for one batch.
    pub fn loss_and_grads(&self, x: ArrayView2<'_, f64>) -> (f64, StateAutoencoder) {
        let b = x.nrows() as f64;
        let (z, enc_cache) = self.enc.forward_cached(x);
        let (r, dec_cache) = self.dec.forward_cached(z.view());
        let d = &r - &x;
        let loss = d.mapv(|e| e * e).sum() / b;
        let dout = d.mapv(|e| 2.0 * e / b);
        let (dec_grads, dz) = self.dec.backward(&dec_cache, dout);
        let (enc_grads, _) = self.enc.backward(&enc_cache, dz);
        (
            loss,
            StateAutoencoder {
                enc: enc_grads,
                dec: dec_grads,
            },
        )
    }

    /// One optimizer step on a batch; returns the pre-step loss.
    pub fn train_batch(&mut self, x: ArrayView2<'_, f64>, opt: &mut Adam) -> f64 {
        let (loss, grads) = self.loss_and_grads(x);
        opt.step(self, &grads);
        loss
    }
}

impl Params for StateAutoencoder {
    fn visit(&self, f: &mut dyn FnMut(ArrayViewD<'_, f64>)) {
        self.enc.visit(f);
        self.dec.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ArrayViewMutD<'_, f64>)) {
        self.enc.visit_mut(f);
        self.dec.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{central_diff, max_rel_err};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ae = StateAutoencoder::new(&[6, 5, 2], &mut rng);
        let x = Array2::from_shape_fn((4, 6), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });

        let (_, grads) = ae.loss_and_grads(x.view());
        let x0 = ae.flatten();
        let mut probe = StateAutoencoder::new(&[6, 5, 2], &mut rng);
        let mut f = |p: &[f64]| {
            probe.assign_from_flat(p);
            probe.loss(x.view())
        };
        let fd = central_diff(&mut f, &x0, 1e-4);
        let err = max_rel_err(&grads.flatten(), &fd, 1e-4);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn training_shrinks_reconstruction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Structured windows: a single green-to-red switch point, which a
        // 2-dim latent can capture.
        let n = 64;
        let dim = 20;
        let mut x = Array2::zeros((n, dim));
        for i in 0..n {
            let cut = rng.gen_range(0..dim);
            for j in 0..cut {
                x[[i, j]] = 1.0;
            }
        }
        let mut ae = StateAutoencoder::new(&[dim, 16, 2], &mut rng);
        let mut opt = Adam::new(3e-3);
        let before = ae.loss(x.view());
        for _ in 0..400 {
            ae.train_batch(x.view(), &mut opt);
        }
        let after = ae.loss(x.view());
        assert!(
            after < before * 0.2,
            "loss did not drop: {before} -> {after}"
        );
    }

    #[test]
    fn encode_one_matches_batched_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ae = StateAutoencoder::new(&[5, 4, 3], &mut rng);
        let x = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let one = ae.encode_one(&x);
        let batch = Array2::from_shape_vec((1, 5), x).unwrap();
        let z = ae.enc.forward(batch.view());
        for k in 0..3 {
            assert!((one[k] - z[[0, k]]).abs() < 1e-15);
        }
    }
}
