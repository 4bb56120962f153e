use serde::{Deserialize, Serialize};

use super::{affine, argmax, sigmoid, softmax_ce, Batch, LossValue};
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, Rng};

/// Fully connected network: sigmoid hidden layers, softmax output.
///
/// Parameters are laid out layer by layer as `W` (row-major `[out × in]`)
/// followed by `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dim, hidden dims..., output dim.
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec { layer_sizes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Argument(format!(
                "MLP needs at least two positive layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let r = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-r, r)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::new(values)
    }

    /// Offsets of `(W, b)` for every layer.
    fn layout(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let w_off = offset;
                offset += w[0] * w[1];
                let b_off = offset;
                offset += w[1];
                (w_off, b_off)
            })
            .collect()
    }

    /// Activations of every layer for one frame; the last entry holds logits.
    fn forward_frame(&self, params: &[f64], layout: &[(usize, usize)], x: &[f64], acts: &mut [Vec<f64>]) {
        acts[0].copy_from_slice(x);
        let last = layout.len() - 1;
        for (l, &(w_off, b_off)) in layout.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (prev, next) = acts.split_at_mut(l + 1);
            let out = &mut next[0];
            affine(
                &params[w_off..w_off + n_in * n_out],
                &params[b_off..b_off + n_out],
                &prev[l],
                out,
            );
            if l < last {
                out.iter_mut().for_each(|z| *z = sigmoid(*z));
            }
        }
    }

    fn buffers(&self) -> Vec<Vec<f64>> {
        self.layer_sizes.iter().map(|&n| vec![0.0; n]).collect()
    }

    pub(crate) fn forward_loss(&self, params: &[f64], batch: &Batch) -> LossValue {
        let layout = self.layout();
        let mut acts = self.buffers();
        let mut probs = vec![0.0; *self.layer_sizes.last().unwrap()];
        let mut total = 0.0;
        for t in 0..batch.frames() {
            self.forward_frame(params, &layout, batch.frame(t), &mut acts);
            total += softmax_ce(acts.last().unwrap(), batch.targets()[t], &mut probs);
        }
        LossValue(total / batch.frames() as f64)
    }

    pub(crate) fn backward(&self, params: &[f64], batch: &Batch) -> (LossValue, Vec<f64>) {
        let layout = self.layout();
        let mut acts = self.buffers();
        let mut deltas = self.buffers();
        let mut grad = vec![0.0; params.len()];
        let n_layers = layout.len();
        let scale = 1.0 / batch.frames() as f64;
        let mut total = 0.0;
        for t in 0..batch.frames() {
            self.forward_frame(params, &layout, batch.frame(t), &mut acts);
            let y = batch.targets()[t];
            {
                let out = &mut deltas[n_layers];
                total += softmax_ce(&acts[n_layers], y, out);
                out[y] -= 1.0;
                out.iter_mut().for_each(|d| *d *= scale);
            }
            for l in (0..n_layers).rev() {
                let (w_off, b_off) = layout[l];
                let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                let (lower, upper) = deltas.split_at_mut(l + 1);
                let delta = &upper[0];
                let input = &acts[l];
                for r in 0..n_out {
                    let d = delta[r];
                    grad[b_off + r] += d;
                    let row = &mut grad[w_off + r * n_in..w_off + (r + 1) * n_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if l > 0 {
                    let below = &mut lower[l];
                    below.iter_mut().for_each(|v| *v = 0.0);
                    for r in 0..n_out {
                        let d = delta[r];
                        let row = &params[w_off + r * n_in..w_off + (r + 1) * n_in];
                        for (b, &w) in below.iter_mut().zip(row) {
                            *b += w * d;
                        }
                    }
                    for (b, &a) in below.iter_mut().zip(input) {
                        *b *= a * (1.0 - a);
                    }
                }
            }
        }
        (LossValue(total / batch.frames() as f64), grad)
    }

    pub(crate) fn predict(&self, params: &[f64], batch: &Batch) -> Vec<usize> {
        let layout = self.layout();
        let mut acts = self.buffers();
        (0..batch.frames())
            .map(|t| {
                self.forward_frame(params, &layout, batch.frame(t), &mut acts);
                argmax(acts.last().unwrap())
            })
            .collect()
    }
}
