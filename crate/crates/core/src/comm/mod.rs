//! Simulated N-worker cluster: shard plans, the sharded peer-to-peer
//! aggregation (reduce-scatter then all-gather), and barrier-synchronized
//! block training in [`cluster`].

mod cluster;

pub use cluster::{BlockReport, Cluster, ClusterSetup, ExecMode, WorkerState};

use std::ops::Range;
use std::sync::mpsc::{self, Receiver, Sender};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_of, ParamVector};

/// How worker models are combined at a synchronization point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Every worker ships its full model to a single aggregator.
    Centralized,
    /// Worker `j` averages shard `j` of every model and sends the result back
    /// to all peers.
    Decentralized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterConfig {
    pub num_workers: usize,
    /// Mini-batches each worker processes between synchronizations.
    pub block_size: usize,
    pub transport: Transport,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_workers == 0 {
            return Err(Error::config("num_workers", "must be at least 1"));
        }
        if self.block_size == 0 {
            return Err(Error::config("block_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Contiguous, ordered partition of `[0, len)` into one range per worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    ranges: Vec<Range<usize>>,
    len: usize,
}

impl ShardPlan {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, worker: usize) -> Range<usize> {
        self.ranges[worker].clone()
    }

    pub fn num_workers(&self) -> usize {
        self.ranges.len()
    }

    pub fn param_len(&self) -> usize {
        self.len
    }
}

/// The first `len % n` shards are one element longer than the rest.
pub fn make_shard_plan(len: usize, n: usize) -> Result<ShardPlan> {
    if n == 0 {
        return Err(Error::Argument("shard plan for zero workers".into()));
    }
    let (base, extra) = (len / n, len % n);
    let mut start = 0;
    let ranges = (0..n)
        .map(|j| {
            let size = base + usize::from(j < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect();
    Ok(ShardPlan { ranges, len })
}

/// Messages exchanged between peers during one aggregation.
#[derive(Debug)]
pub(crate) enum PeerMsg {
    /// Reduce-scatter: `from`'s slice of the shard owned by the receiver.
    Scatter { from: usize, values: Vec<f64> },
    /// All-gather: the averaged shard owned by `owner`.
    Gather { owner: usize, values: Vec<f64> },
}

/// Creates one inbox per worker and hands every worker senders to all of
/// them.
pub(crate) fn peer_mesh(n: usize) -> Vec<(Vec<Sender<PeerMsg>>, Receiver<PeerMsg>)> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel()).unzip();
    receivers
        .into_iter()
        .map(|rx| (senders.clone(), rx))
        .collect()
}

/// One worker's side of the sharded aggregation. Every peer must call this
/// with the same plan; the returned model is the full average.
pub(crate) fn exchange(
    rank: usize,
    model: &[f64],
    plan: &ShardPlan,
    peers: &[Sender<PeerMsg>],
    inbox: &Receiver<PeerMsg>,
) -> Result<Vec<f64>> {
    let n = peers.len();
    if plan.num_workers() != n || model.len() != plan.param_len() {
        return Err(Error::dim("shard exchange", plan.param_len(), model.len()));
    }
    let lost = |_| Error::Worker(format!("worker {rank}: peer channel closed"));

    for (j, peer) in peers.iter().enumerate() {
        peer.send(PeerMsg::Scatter {
            from: rank,
            values: model[plan.range(j)].to_vec(),
        })
        .map_err(lost)?;
    }

    let mut pieces: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut gathered: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut pending = n;
    while pending > 0 {
        match inbox.recv().map_err(|_| Error::Worker(format!("worker {rank}: inbox closed")))? {
            PeerMsg::Scatter { from, values } => {
                if pieces[from].replace(values).is_some() {
                    return Err(Error::Worker(format!("worker {rank}: duplicate shard from {from}")));
                }
                pending -= 1;
            }
            // A fast peer may already be broadcasting its reduced shard.
            PeerMsg::Gather { owner, values } => gathered[owner] = Some(values),
        }
    }

    let slices: Vec<&[f64]> = pieces.iter().map(|p| p.as_deref().expect("all pieces received")).collect();
    let reduced = mean_of(&slices);
    for peer in peers {
        peer.send(PeerMsg::Gather {
            owner: rank,
            values: reduced.clone(),
        })
        .map_err(lost)?;
    }

    while gathered.iter().any(Option::is_none) {
        match inbox.recv().map_err(|_| Error::Worker(format!("worker {rank}: inbox closed")))? {
            PeerMsg::Gather { owner, values } => gathered[owner] = Some(values),
            PeerMsg::Scatter { from, .. } => {
                return Err(Error::Worker(format!("worker {rank}: stray shard from {from}")));
            }
        }
    }
    let mut full = Vec::with_capacity(model.len());
    for (owner, part) in gathered.into_iter().enumerate() {
        let part = part.expect("all shards gathered");
        if part.len() != plan.range(owner).len() {
            return Err(Error::dim("gathered shard", plan.range(owner).len(), part.len()));
        }
        full.extend(part);
    }
    Ok(full)
}

fn check_models(local_models: &[ParamVector], plan: &ShardPlan) -> Result<()> {
    if local_models.is_empty() {
        return Err(Error::Argument("aggregation over an empty worker list".into()));
    }
    if plan.num_workers() != local_models.len() {
        return Err(Error::dim("shard plan workers", local_models.len(), plan.num_workers()));
    }
    for m in local_models {
        m.check_len(plan.param_len(), "decentralized aggregate")?;
    }
    Ok(())
}

/// Sharded aggregation with one thread per worker exchanging shards over
/// channels. Equal to [`crate::numerics::mean_reduce`] bit for bit.
pub fn decentralized_aggregate(local_models: &[ParamVector], plan: &ShardPlan) -> Result<ParamVector> {
    check_models(local_models, plan)?;
    let mesh = peer_mesh(local_models.len());
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = mesh
            .into_iter()
            .zip(local_models)
            .enumerate()
            .map(|(rank, ((peers, inbox), model))| {
                scope.spawn(move || exchange(rank, model.as_slice(), plan, &peers, &inbox))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Worker("exchange thread panicked".into()))))
            .collect()
    });
    let mut results = results.into_iter();
    let first = results.next().expect("at least one worker")?;
    for (rank, other) in results.enumerate() {
        if other?.iter().zip(&first).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Worker(format!("worker {} assembled a different model", rank + 1)));
        }
    }
    Ok(ParamVector::new(first))
}

/// The same shard-wise reduction as [`decentralized_aggregate`], performed
/// sequentially.
pub fn decentralized_aggregate_serial(local_models: &[ParamVector], plan: &ShardPlan) -> Result<ParamVector> {
    check_models(local_models, plan)?;
    let mut full = Vec::with_capacity(plan.param_len());
    for range in plan.ranges() {
        let slices: Vec<&[f64]> = local_models.iter().map(|m| &m.as_slice()[range.clone()]).collect();
        full.extend(mean_of(&slices));
    }
    Ok(ParamVector::new(full))
}
