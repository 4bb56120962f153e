//! Frame error rate and checkpoint evaluation.

use crate::checkpoint::{Checkpoint, Strategy};
use crate::error::{Error, Result};
use crate::models::{Batch, ModelSpec};
use crate::numerics::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub strategy: Strategy,
    pub epoch: f64,
    pub fer: f64,
}

/// Fraction of frames whose prediction differs from the label.
pub fn frame_error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("frame_error_rate", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::Argument("frame error rate of zero frames".into()));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

pub fn evaluate_model(spec: &ModelSpec, params: &ParamVector, eval_set: &Batch) -> Result<f64> {
    let predictions = spec.predict_frames(params, eval_set)?;
    frame_error_rate(&predictions, eval_set.targets())
}

/// One record per checkpoint, in checkpoint order. Checkpoints are evaluated
/// on scoped threads; results do not depend on scheduling.
pub fn evaluate_checkpoints(checkpoints: &[Checkpoint], eval_set: &Batch, spec: &ModelSpec) -> Result<Vec<EvalRecord>> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(checkpoints.len().max(1));
    let chunk = checkpoints.len().div_ceil(threads).max(1);
    let fers: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = checkpoints
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|ck| evaluate_model(spec, &ck.params, eval_set))
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut records = Vec::with_capacity(checkpoints.len());
    let mut cks = checkpoints.iter();
    for part in fers {
        for fer in part? {
            let ck = cks.next().expect("one result per checkpoint");
            records.push(EvalRecord {
                strategy: ck.strategy,
                epoch: ck.epoch,
                fer,
            });
        }
    }
    Ok(records)
}
