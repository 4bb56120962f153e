//! Block-level synchronization: model averaging, blockwise model-update
//! filtering (BMUF), and the MA/EMA shadow models that observe the global
//! model without ever being broadcast back to workers.
//!
//! BMUF per block `t`, given the worker average `avg`:
//!
//! ```text
//! G(t)   = avg - θg(t-1)
//! Δ(t)   = η·Δ(t-1) + ζ·G(t)
//! θg(t)  = θg(t-1) + Δ(t)
//! ```
//!
//! The global model is evaluated as `avg + (η·Δ(t-1) + (ζ-1)·G(t))`, which is
//! the same quantity anchored at the fresh average. With `η = 0, ζ = 1` the
//! correction is exactly zero and BMUF reproduces plain model averaging bit
//! for bit.

use crate::error::{Error, Result};
use crate::numerics::{mean_reduce, ParamVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SyncState {
    global: ParamVector,
    delta: ParamVector,
    block_momentum: f64,
    block_learning_rate: f64,
    block_index: u64,
}

impl SyncState {
    pub fn new(initial: ParamVector, block_momentum: f64, block_learning_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&block_momentum) {
            return Err(Error::Argument(format!(
                "block momentum must lie in [0, 1), got {block_momentum}"
            )));
        }
        if !(block_learning_rate > 0.0 && block_learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "block learning rate must be positive, got {block_learning_rate}"
            )));
        }
        let delta = ParamVector::zeros(initial.len());
        Ok(SyncState {
            global: initial,
            delta,
            block_momentum,
            block_learning_rate,
            block_index: 0,
        })
    }

    /// θg(t), the model broadcast to every worker.
    pub fn global_model(&self) -> &ParamVector {
        &self.global
    }

    /// Δ(t), the filtered global-model update.
    pub fn delta(&self) -> &ParamVector {
        &self.delta
    }

    pub fn block_index(&self) -> u64 {
        self.block_index
    }

    pub fn block_momentum(&self) -> f64 {
        self.block_momentum
    }

    pub fn block_learning_rate(&self) -> f64 {
        self.block_learning_rate
    }

    /// BMUF update from an already-aggregated worker average. Transports that
    /// compute the average themselves (the sharded path) enter here.
    pub fn apply_average(&mut self, average: &ParamVector) -> Result<()> {
        average.check_len(self.global.len(), "bmuf average")?;
        let (eta, zeta) = (self.block_momentum, self.block_learning_rate);
        let mut next = Vec::with_capacity(self.global.len());
        for ((&avg, &prev), d) in average
            .as_slice()
            .iter()
            .zip(self.global.as_slice())
            .zip(self.delta.as_mut_slice())
        {
            let g = avg - prev;
            let carried = eta * *d;
            let correction = carried + (zeta - 1.0) * g;
            *d = carried + zeta * g;
            next.push(if correction == 0.0 { avg } else { avg + correction });
        }
        let next = ParamVector::new(next);
        if !next.is_finite() {
            return Err(Error::Numeric("bmuf global model"));
        }
        self.global = next;
        self.block_index += 1;
        Ok(())
    }
}

/// One BMUF synchronization over the workers' local models.
pub fn bmuf_sync(state: &mut SyncState, local_models: &[ParamVector]) -> Result<()> {
    if local_models.is_empty() {
        return Err(Error::Argument("bmuf_sync with no workers".into()));
    }
    let average = mean_reduce(local_models)?;
    state.apply_average(&average)
}

/// Plain model averaging: the global model is the worker mean.
pub fn model_average_sync(local_models: &[ParamVector]) -> Result<ParamVector> {
    mean_reduce(local_models)
}

/// MA and EMA shadows of the global model sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowState {
    ma: ParamVector,
    ema: ParamVector,
    sync_count: u64,
    ema_rate: f64,
}

impl ShadowState {
    /// The EMA starts from `initial` (the model all workers start from); the
    /// MA is empty until the first update.
    pub fn new(initial: ParamVector, ema_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_rate) {
            return Err(Error::Argument(format!("EMA rate must lie in [0, 1], got {ema_rate}")));
        }
        Ok(ShadowState {
            ma: ParamVector::zeros(initial.len()),
            ema: initial,
            sync_count: 0,
            ema_rate,
        })
    }

    pub fn ma_model(&self) -> &ParamVector {
        &self.ma
    }

    pub fn ema_model(&self) -> &ParamVector {
        &self.ema
    }

    pub fn sync_count(&self) -> u64 {
        self.sync_count
    }

    pub fn ema_rate(&self) -> f64 {
        self.ema_rate
    }
}

/// Folds one global model into both shadows:
/// `ma ← ma + (θ − ma)/t` (equal weights) and `ema ← α·ema + (1−α)·θ`.
///
/// Each EMA component is kept inside the interval spanned by its previous
/// value and `θ`, which the exact convex combination always satisfies.
pub fn shadow_update(shadow: &mut ShadowState, global: &ParamVector) -> Result<()> {
    global.check_len(shadow.ema.len(), "shadow update")?;
    shadow.sync_count += 1;
    if shadow.sync_count == 1 {
        shadow.ma = global.clone();
    } else {
        let count = shadow.sync_count as f64;
        for (m, &x) in shadow.ma.as_mut_slice().iter_mut().zip(global.as_slice()) {
            *m += (x - *m) / count;
        }
    }
    let alpha = shadow.ema_rate;
    for (e, &x) in shadow.ema.as_mut_slice().iter_mut().zip(global.as_slice()) {
        let blended = alpha * *e + (1.0 - alpha) * x;
        *e = blended.clamp(e.min(x), e.max(x));
    }
    Ok(())
}

/// The three candidate final models.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalModels {
    pub bmuf: ParamVector,
    pub ma: ParamVector,
    pub ema: ParamVector,
}

pub fn final_models(shadow: &ShadowState, sync: &SyncState) -> Result<FinalModels> {
    if shadow.sync_count == 0 || sync.block_index == 0 {
        return Err(Error::State("final models requested before any synchronization".into()));
    }
    Ok(FinalModels {
        bmuf: sync.global.clone(),
        ma: shadow.ma.clone(),
        ema: shadow.ema.clone(),
    })
}
