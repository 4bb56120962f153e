use serde::{Deserialize, Serialize};

use super::{affine, argmax, sigmoid, softmax_ce, Batch, LossValue};
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, Rng};

/// Unidirectional LSTM stack (no peepholes, no projection) followed by one
/// fully connected softmax layer.
///
/// Per LSTM layer the parameters are `W` (row-major `[4H × (in + H)]`, gate
/// blocks ordered input, forget, cell, output; columns ordered input then
/// recurrent) followed by `b` (`4H`). The output layer `V` (`[out × H]`) and
/// `c` (`out`) come last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_lstm_layers: usize,
    pub output_dim: usize,
}

/// Gate order inside each `4H` block.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_G: usize = 2;
const GATE_O: usize = 3;

/// Per-timestep activations of one layer over one sequence.
struct LayerTrace {
    /// `[T × 4H]` post-activation gate values.
    gates: Vec<f64>,
    /// `[T × H]` cell states.
    cells: Vec<f64>,
    /// `[T × H]` tanh of cell states.
    cells_tanh: Vec<f64>,
    /// `[T × H]` hidden outputs.
    hidden: Vec<f64>,
}

impl LstmSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, num_lstm_layers: usize, output_dim: usize) -> Result<Self> {
        let spec = LstmSpec {
            input_dim,
            hidden_dim,
            num_lstm_layers,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_lstm_layers == 0 || self.output_dim == 0 {
            return Err(Error::Argument(format!("LSTM dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    fn layer_len(&self, layer: usize) -> usize {
        let h = self.hidden_dim;
        4 * h * (self.layer_input(layer) + h) + 4 * h
    }

    /// Offset of each LSTM layer's `W`, then the output layer's `V`.
    fn offsets(&self) -> (Vec<usize>, usize) {
        let mut offset = 0;
        let layers = (0..self.num_lstm_layers)
            .map(|l| {
                let o = offset;
                offset += self.layer_len(l);
                o
            })
            .collect();
        (layers, offset)
    }

    pub fn param_count(&self) -> usize {
        let lstm: usize = (0..self.num_lstm_layers).map(|l| self.layer_len(l)).sum();
        lstm + self.hidden_dim * self.output_dim + self.output_dim
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero biases, forget-gate bias 1.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let h = self.hidden_dim;
        let mut values = Vec::with_capacity(self.param_count());
        for l in 0..self.num_lstm_layers {
            let fan_in = self.layer_input(l) + h;
            let r = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..4 * h * fan_in).map(|_| rng.uniform_range(-r, r)));
            for gate in 0..4 {
                let bias = if gate == GATE_F { 1.0 } else { 0.0 };
                values.extend(std::iter::repeat_n(bias, h));
            }
        }
        let r = 1.0 / (h as f64).sqrt();
        values.extend((0..h * self.output_dim).map(|_| rng.uniform_range(-r, r)));
        values.extend(std::iter::repeat_n(0.0, self.output_dim));
        ParamVector::new(values)
    }

    /// Runs one layer over a sequence whose inputs are rows of `xs`.
    fn forward_layer(&self, params: &[f64], offset: usize, layer: usize, xs: &[f64]) -> LayerTrace {
        let h = self.hidden_dim;
        let n_in = self.layer_input(layer);
        let cols = n_in + h;
        let steps = xs.len() / n_in;
        let w = &params[offset..offset + 4 * h * cols];
        let b = &params[offset + 4 * h * cols..offset + self.layer_len(layer)];

        let mut trace = LayerTrace {
            gates: vec![0.0; steps * 4 * h],
            cells: vec![0.0; steps * h],
            cells_tanh: vec![0.0; steps * h],
            hidden: vec![0.0; steps * h],
        };
        let mut joined = vec![0.0; cols];
        for t in 0..steps {
            joined[..n_in].copy_from_slice(&xs[t * n_in..(t + 1) * n_in]);
            if t > 0 {
                joined[n_in..].copy_from_slice(&trace.hidden[(t - 1) * h..t * h]);
            }
            let z = &mut trace.gates[t * 4 * h..(t + 1) * 4 * h];
            affine(w, b, &joined, z);
            for (k, v) in z.iter_mut().enumerate() {
                *v = if k / h == GATE_G { v.tanh() } else { sigmoid(*v) };
            }
            for j in 0..h {
                let (i, f, g, o) = (z[GATE_I * h + j], z[GATE_F * h + j], z[GATE_G * h + j], z[GATE_O * h + j]);
                let c_prev = if t > 0 { trace.cells[(t - 1) * h + j] } else { 0.0 };
                let c = f * c_prev + i * g;
                let ct = c.tanh();
                trace.cells[t * h + j] = c;
                trace.cells_tanh[t * h + j] = ct;
                trace.hidden[t * h + j] = o * ct;
            }
        }
        trace
    }

    fn forward_sequence(&self, params: &[f64], xs: &[f64]) -> Vec<LayerTrace> {
        let (offsets, _) = self.offsets();
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.num_lstm_layers);
        for (l, &off) in offsets.iter().enumerate() {
            let input = match traces.last() {
                Some(prev) => &prev.hidden[..],
                None => xs,
            };
            let trace = self.forward_layer(params, off, l, input);
            traces.push(trace);
        }
        traces
    }

    fn output_layer<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let (_, v_off) = self.offsets();
        let v_len = self.hidden_dim * self.output_dim;
        (
            &params[v_off..v_off + v_len],
            &params[v_off + v_len..v_off + v_len + self.output_dim],
        )
    }

    pub(crate) fn forward_loss(&self, params: &[f64], batch: &Batch) -> LossValue {
        let h = self.hidden_dim;
        let (v, c) = self.output_layer(params);
        let mut logits = vec![0.0; self.output_dim];
        let mut probs = vec![0.0; self.output_dim];
        let mut total = 0.0;
        for seq in batch.sequences() {
            let xs = &batch.inputs()[seq.start * self.input_dim..seq.end * self.input_dim];
            let traces = self.forward_sequence(params, xs);
            let top = &traces.last().unwrap().hidden;
            for (t, frame) in seq.enumerate() {
                affine(v, c, &top[t * h..(t + 1) * h], &mut logits);
                total += softmax_ce(&logits, batch.targets()[frame], &mut probs);
            }
        }
        LossValue(total / batch.frames() as f64)
    }

    pub(crate) fn predict(&self, params: &[f64], batch: &Batch) -> Vec<usize> {
        let h = self.hidden_dim;
        let (v, c) = self.output_layer(params);
        let mut logits = vec![0.0; self.output_dim];
        let mut out = Vec::with_capacity(batch.frames());
        for seq in batch.sequences() {
            let xs = &batch.inputs()[seq.start * self.input_dim..seq.end * self.input_dim];
            let traces = self.forward_sequence(params, xs);
            let top = &traces.last().unwrap().hidden;
            for t in 0..seq.len() {
                affine(v, c, &top[t * h..(t + 1) * h], &mut logits);
                out.push(argmax(&logits));
            }
        }
        out
    }

    /// Full backpropagation through time within each sequence; state starts at
    /// zero at every sequence boundary.
    pub(crate) fn backward(&self, params: &[f64], batch: &Batch) -> (LossValue, Vec<f64>) {
        let h = self.hidden_dim;
        let k = self.output_dim;
        let (offsets, v_off) = self.offsets();
        let (v, c) = self.output_layer(params);
        let scale = 1.0 / batch.frames() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut logits = vec![0.0; k];
        let mut dlogits = vec![0.0; k];
        let mut total = 0.0;

        for seq in batch.sequences() {
            let steps = seq.len();
            let xs = &batch.inputs()[seq.start * self.input_dim..seq.end * self.input_dim];
            let traces = self.forward_sequence(params, xs);
            let top = &traces.last().unwrap().hidden;

            // Output layer; `dh` collects the gradient flowing into the top
            // layer's hidden outputs.
            let mut dh = vec![0.0; steps * h];
            for (t, frame) in seq.clone().enumerate() {
                let h_t = &top[t * h..(t + 1) * h];
                affine(v, c, h_t, &mut logits);
                let y = batch.targets()[frame];
                total += softmax_ce(&logits, y, &mut dlogits);
                dlogits[y] -= 1.0;
                for r in 0..k {
                    let d = dlogits[r] * scale;
                    grad[v_off + h * k + r] += d;
                    let row_g = &mut grad[v_off + r * h..v_off + (r + 1) * h];
                    for (g, &a) in row_g.iter_mut().zip(h_t) {
                        *g += d * a;
                    }
                    let row_v = &v[r * h..(r + 1) * h];
                    for (dst, &w) in dh[t * h..(t + 1) * h].iter_mut().zip(row_v) {
                        *dst += w * d;
                    }
                }
            }

            for l in (0..self.num_lstm_layers).rev() {
                let n_in = self.layer_input(l);
                let cols = n_in + h;
                let off = offsets[l];
                let w = &params[off..off + 4 * h * cols];
                let b_off = off + 4 * h * cols;
                let trace = &traces[l];
                let input: &[f64] = if l == 0 { xs } else { &traces[l - 1].hidden };

                let mut dx = vec![0.0; steps * n_in];
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                let mut dz = vec![0.0; 4 * h];
                let mut joined = vec![0.0; cols];
                for t in (0..steps).rev() {
                    let z = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, g, o) = (z[GATE_I * h + j], z[GATE_F * h + j], z[GATE_G * h + j], z[GATE_O * h + j]);
                        let ct = trace.cells_tanh[t * h + j];
                        let c_prev = if t > 0 { trace.cells[(t - 1) * h + j] } else { 0.0 };
                        let dh_t = dh[t * h + j] + dh_next[j];
                        let dc = dh_t * o * (1.0 - ct * ct) + dc_next[j];
                        dz[GATE_I * h + j] = dc * g * i * (1.0 - i);
                        dz[GATE_F * h + j] = dc * c_prev * f * (1.0 - f);
                        dz[GATE_G * h + j] = dc * i * (1.0 - g * g);
                        dz[GATE_O * h + j] = dh_t * ct * o * (1.0 - o);
                        dc_next[j] = dc * f;
                    }

                    joined[..n_in].copy_from_slice(&input[t * n_in..(t + 1) * n_in]);
                    if t > 0 {
                        joined[n_in..].copy_from_slice(&trace.hidden[(t - 1) * h..t * h]);
                    } else {
                        joined[n_in..].iter_mut().for_each(|x| *x = 0.0);
                    }
                    dh_next.iter_mut().for_each(|x| *x = 0.0);
                    let dx_t = &mut dx[t * n_in..(t + 1) * n_in];
                    for (r, &d) in dz.iter().enumerate() {
                        grad[b_off + r] += d;
                        let row_g = &mut grad[off + r * cols..off + (r + 1) * cols];
                        for (gv, &a) in row_g.iter_mut().zip(&joined) {
                            *gv += d * a;
                        }
                        let row_w = &w[r * cols..(r + 1) * cols];
                        for (dst, &wv) in dx_t.iter_mut().zip(&row_w[..n_in]) {
                            *dst += wv * d;
                        }
                        for (dst, &wv) in dh_next.iter_mut().zip(&row_w[n_in..]) {
                            *dst += wv * d;
                        }
                    }
                }
                dh = dx;
            }
        }
        (LossValue(total / batch.frames() as f64), grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;

    #[test]
    fn param_count_matches_layout() {
        let spec = LstmSpec::new(4, 3, 1, 2).unwrap();
        assert_eq!(spec.param_count(), 104);
        assert_eq!(spec.init_params(&mut Rng::new(1)).len(), 104);
        let deep = LstmSpec::new(4, 3, 2, 2).unwrap();
        assert_eq!(deep.param_count(), 104 + 4 * (3 * 6 + 3));
    }

    #[test]
    fn forget_bias_is_one_other_biases_zero() {
        let spec = LstmSpec::new(2, 3, 1, 2).unwrap();
        let p = spec.init_params(&mut Rng::new(9));
        let b = &p.as_slice()[4 * 3 * 5..4 * 3 * 5 + 12];
        assert_eq!(b, &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(LstmSpec::new(0, 3, 1, 2).is_err());
        assert!(LstmSpec::new(2, 3, 0, 2).is_err());
    }

    #[test]
    fn state_resets_at_sequence_boundaries() {
        let spec = ModelSpec::Lstm(LstmSpec::new(2, 3, 2, 3).unwrap());
        let p = spec.init_params(&mut Rng::new(5));
        let a: Vec<f64> = vec![0.3, -1.0, 0.8, 0.1, -0.5, 0.4];
        let b: Vec<f64> = vec![1.0, 1.0, -0.2, 0.7];
        let joint = Batch::from_sequences(2, [(&a[..], &[0usize, 1, 2][..]), (&b[..], &[2usize, 0][..])]).unwrap();
        let only_b = Batch::from_sequences(2, [(&b[..], &[2usize, 0][..])]).unwrap();
        let pj = spec.predict_frames(&p, &joint).unwrap();
        let pb = spec.predict_frames(&p, &only_b).unwrap();
        assert_eq!(&pj[3..], &pb[..]);
    }
}
