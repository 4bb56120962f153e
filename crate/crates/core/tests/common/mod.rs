//! Test-only oracles, written independently of the library's model code from
//! the documented parameter layouts.
#![allow(dead_code)]

use shadowsync::{Batch, ParamVector, Rng};

pub fn random_batch(rng: &mut Rng, frames: usize, dim: usize, classes: usize, seq_starts: Vec<usize>) -> Batch {
    let inputs = (0..frames * dim).map(|_| rng.normal()).collect();
    let targets = (0..frames).map(|_| rng.below(classes)).collect();
    Batch::new(inputs, dim, targets, seq_starts).unwrap()
}

/// Random parameters with magnitude large enough to exercise the
/// non-linearities.
pub fn random_params(rng: &mut Rng, len: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..len).map(|_| rng.normal() * scale).collect())
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Straight-line MLP mean cross-entropy.
pub fn mlp_loss_oracle(sizes: &[usize], p: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for t in 0..batch.frames() {
        let mut a: Vec<f64> = batch.frame(t).to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &p[off..off + n_in * n_out];
            let b = &p[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut z = vec![0.0; n_out];
            for r in 0..n_out {
                let mut s = b[r];
                for c in 0..n_in {
                    s += w[r * n_in + c] * a[c];
                }
                z[r] = s;
            }
            a = if l + 2 < sizes.len() { z.iter().map(|&v| sig(v)).collect() } else { z };
        }
        total += log_sum_exp(&a) - a[batch.targets()[t]];
    }
    total / batch.frames() as f64
}

/// Straight-line LSTM stack + FC mean cross-entropy. Gate order i, f, g, o;
/// rows of `W` act on `[x; h_prev]`.
pub fn lstm_loss_oracle(input: usize, hidden: usize, layers: usize, output: usize, p: &[f64], batch: &Batch) -> f64 {
    let h = hidden;
    let mut total = 0.0;
    let ranges: Vec<(usize, usize)> = batch.sequences().map(|r| (r.start, r.end)).collect();
    for (start, end) in ranges {
        let mut seq: Vec<Vec<f64>> = (start..end).map(|t| batch.frame(t).to_vec()).collect();
        let mut off = 0;
        for l in 0..layers {
            let n_in = if l == 0 { input } else { h };
            let cols = n_in + h;
            let w = &p[off..off + 4 * h * cols];
            let b = &p[off + 4 * h * cols..off + 4 * h * cols + 4 * h];
            off += 4 * h * cols + 4 * h;
            let mut hprev = vec![0.0; h];
            let mut cprev = vec![0.0; h];
            let mut outs = Vec::new();
            for x in &seq {
                let xin: Vec<f64> = x.iter().chain(hprev.iter()).cloned().collect();
                let pre = |row: usize| -> f64 { b[row] + (0..cols).map(|c| w[row * cols + c] * xin[c]).sum::<f64>() };
                let mut hn = vec![0.0; h];
                let mut cn = vec![0.0; h];
                for j in 0..h {
                    let i = sig(pre(j));
                    let f = sig(pre(h + j));
                    let g = pre(2 * h + j).tanh();
                    let o = sig(pre(3 * h + j));
                    cn[j] = f * cprev[j] + i * g;
                    hn[j] = o * cn[j].tanh();
                }
                outs.push(hn.clone());
                hprev = hn;
                cprev = cn;
            }
            seq = outs;
        }
        let v = &p[off..off + output * h];
        let c = &p[off + output * h..off + output * h + output];
        for (k, hv) in seq.iter().enumerate() {
            let z: Vec<f64> = (0..output)
                .map(|r| c[r] + (0..h).map(|j| v[r * h + j] * hv[j]).sum::<f64>())
                .collect();
            total += log_sum_exp(&z) - z[batch.targets()[start + k]];
        }
    }
    total / batch.frames() as f64
}

/// Central differences of `f` at `p` with step `step`.
pub fn central_differences(p: &ParamVector, step: f64, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    let mut probe = p.clone();
    (0..p.len())
        .map(|i| {
            let orig = p.as_slice()[i];
            probe.as_mut_slice()[i] = orig + step;
            let up = f(&probe);
            probe.as_mut_slice()[i] = orig - step;
            let down = f(&probe);
            probe.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`: relative error, measured absolutely for
/// components whose magnitude is below `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
