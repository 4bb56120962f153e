//! Small from-scratch networks over flattened parameters: a sigmoid MLP and
//! a unidirectional LSTM stack with a fully connected softmax head.
//!
//! Losses are the per-frame mean cross-entropy, so gradient magnitude does not
//! depend on how many frames a worker's mini-batch holds.

mod lstm;
mod mlp;

pub use lstm::LstmSpec;
pub use mlp::MlpSpec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamVector, Rng};

/// Frames of one or more sequences laid out back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    input_dim: usize,
    targets: Vec<usize>,
    seq_starts: Vec<usize>,
}

impl Batch {
    /// `inputs` is row-major `[frames × input_dim]`; `seq_starts` lists the
    /// first frame of every sequence and must begin at 0 and be strictly
    /// increasing. An empty `seq_starts` means one sequence.
    pub fn new(
        inputs: Vec<f64>,
        input_dim: usize,
        targets: Vec<usize>,
        seq_starts: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Argument("batch input_dim must be positive".into()));
        }
        if inputs.len() != targets.len() * input_dim {
            return Err(Error::dim("batch inputs", targets.len() * input_dim, inputs.len()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("batch inputs"));
        }
        let seq_starts = if seq_starts.is_empty() && !targets.is_empty() {
            vec![0]
        } else {
            seq_starts
        };
        let frames = targets.len();
        let well_formed = seq_starts.first().map_or(frames == 0, |&s| s == 0)
            && seq_starts.windows(2).all(|w| w[0] < w[1])
            && seq_starts.last().is_none_or(|&s| s < frames);
        if !well_formed {
            return Err(Error::Argument(format!(
                "sequence boundaries {seq_starts:?} do not fit {frames} frames"
            )));
        }
        Ok(Batch {
            inputs,
            input_dim,
            targets,
            seq_starts,
        })
    }

    /// Concatenate `(frames, labels)` sequences; frames are row-major.
    pub fn from_sequences<'a, I>(input_dim: usize, sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [usize])>,
    {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut seq_starts = Vec::new();
        for (frames, labels) in sequences {
            if labels.is_empty() {
                continue;
            }
            seq_starts.push(targets.len());
            inputs.extend_from_slice(frames);
            targets.extend_from_slice(labels);
        }
        Batch::new(inputs, input_dim, targets, seq_starts)
    }

    pub fn frames(&self) -> usize {
        self.targets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn seq_starts(&self) -> &[usize] {
        &self.seq_starts
    }

    /// Half-open frame ranges of the sequences.
    pub fn sequences(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let ends = self
            .seq_starts
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(self.frames()));
        self.seq_starts.iter().copied().zip(ends).map(|(s, e)| s..e)
    }
}

/// Mean cross-entropy per frame.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LossValue(pub f64);

impl LossValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Lstm(LstmSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp(s) => s.validate(),
            ModelSpec::Lstm(s) => s.validate(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.param_count(),
            ModelSpec::Lstm(s) => s.param_count(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => s.layer_sizes[0],
            ModelSpec::Lstm(s) => s.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp(s) => *s.layer_sizes.last().expect("validated spec"),
            ModelSpec::Lstm(s) => s.output_dim,
        }
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        match self {
            ModelSpec::Mlp(s) => s.init_params(rng),
            ModelSpec::Lstm(s) => s.init_params(rng),
        }
    }

    pub fn forward_loss(&self, params: &ParamVector, batch: &Batch) -> Result<LossValue> {
        self.check(params, batch, true)?;
        Ok(match self {
            ModelSpec::Mlp(s) => s.forward_loss(params.as_slice(), batch),
            ModelSpec::Lstm(s) => s.forward_loss(params.as_slice(), batch),
        })
    }

    pub fn backward(&self, params: &ParamVector, batch: &Batch) -> Result<(LossValue, ParamVector)> {
        self.check(params, batch, true)?;
        let (loss, grad) = match self {
            ModelSpec::Mlp(s) => s.backward(params.as_slice(), batch),
            ModelSpec::Lstm(s) => s.backward(params.as_slice(), batch),
        };
        Ok((loss, ParamVector::new(grad)))
    }

    /// Most likely class per frame; ties go to the lowest class index.
    /// Targets in `batch` are ignored.
    pub fn predict_frames(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
        self.check(params, batch, false)?;
        Ok(match self {
            ModelSpec::Mlp(s) => s.predict(params.as_slice(), batch),
            ModelSpec::Lstm(s) => s.predict(params.as_slice(), batch),
        })
    }

    fn check(&self, params: &ParamVector, batch: &Batch, with_targets: bool) -> Result<()> {
        params.check_len(self.param_count(), "model parameters")?;
        if batch.input_dim() != self.input_dim() {
            return Err(Error::dim("batch input_dim", self.input_dim(), batch.input_dim()));
        }
        if with_targets {
            if batch.frames() == 0 {
                return Err(Error::Argument("loss over an empty batch".into()));
            }
            let k = self.output_dim();
            if let Some(&bad) = batch.targets().iter().find(|&&y| y >= k) {
                return Err(Error::Argument(format!("target {bad} out of range for {k} classes")));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Writes softmax(logits) into `probs` and returns `-ln probs[target]`.
pub(crate) fn softmax_ce(logits: &[f64], target: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    // ln(sum) - (z_y - max), stable for saturated logits
    sum.ln() - (logits[target] - max)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `out = W·x + b` for row-major `W` of shape `[out.len() × x.len()]`.
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n..(r + 1) * n];
        *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}
