//! Barrier-synchronized block training over long-lived worker threads, with a
//! single-threaded mode that performs the same arithmetic in the same order.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::{
    decentralized_aggregate_serial, exchange, make_shard_plan, peer_mesh, ClusterConfig, PeerMsg, ShardPlan, Transport,
};
use crate::data::{batch_of, Corpus};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::numerics::{mean_reduce, ParamVector, Rng};
use crate::optim::{sgd_step, SgdState};
use crate::sync::{shadow_update, ShadowState, SyncState};

/// RNG stream ids below this are reserved for experiment setup.
const WORKER_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// One thread per worker, talking over channels.
    #[default]
    Threaded,
    /// Workers run one after another on the calling thread.
    SingleThread,
}

/// One worker's local model, optimizer state and data stream.
#[derive(Debug, Clone)]
pub struct WorkerState {
    rank: usize,
    num_workers: usize,
    seed: u64,
    model: Arc<ModelSpec>,
    params: ParamVector,
    sgd: SgdState,
    shard: Arc<Corpus>,
    batch_utterances: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl WorkerState {
    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn sgd(&self) -> &SgdState {
        &self.sgd
    }

    /// Reshuffles this worker's shard for `epoch`.
    pub fn begin_epoch(&mut self, epoch: u64) {
        let stream = WORKER_STREAM_BASE + epoch * self.num_workers as u64 + self.rank as u64;
        let mut rng = Rng::with_stream(self.seed, stream);
        self.order = (0..self.shard.utterances.len()).collect();
        rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Runs `steps` SGD steps and returns the mean mini-batch loss. The stream
    /// wraps around if the shard is exhausted.
    pub fn run_steps(&mut self, steps: usize) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..steps {
            let picks: Vec<usize> = (0..self.batch_utterances)
                .map(|i| self.order[(self.cursor + i) % self.order.len()])
                .collect();
            self.cursor = (self.cursor + self.batch_utterances) % self.order.len();
            let batch = batch_of(self.shard.dim, picks.iter().map(|&i| &self.shard.utterances[i]))?;
            let (loss, grad) = self.model.backward(&self.params, &batch)?;
            sgd_step(&mut self.params, &grad, &mut self.sgd)?;
            total += loss.value();
        }
        Ok(total / steps.max(1) as f64)
    }

    /// Overwrites the local model with the broadcast global model.
    pub fn receive_broadcast(&mut self, global: &ParamVector, reset_momentum: bool) {
        self.params.as_mut_slice().copy_from_slice(global.as_slice());
        if reset_momentum {
            self.sgd.reset_velocity();
        }
    }
}

/// Everything needed to start a cluster.
#[derive(Debug, Clone)]
pub struct ClusterSetup {
    pub config: ClusterConfig,
    pub model: ModelSpec,
    /// The model every worker starts from, θg(0).
    pub initial: ParamVector,
    /// One training shard per worker.
    pub shards: Vec<Corpus>,
    pub batch_utterances: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub reset_momentum_on_broadcast: bool,
    pub block_momentum: f64,
    pub block_learning_rate: f64,
    /// EMA rate; `None` disables both shadow models.
    pub ema_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockReport {
    pub block_index: u64,
    /// Mean mini-batch training loss over all workers in the block.
    pub train_loss: f64,
}

enum Command {
    BeginEpoch(u64),
    RunBlock { steps: usize, transport: Transport },
    Broadcast { global: Arc<ParamVector>, reset_momentum: bool },
    Snapshot,
    Shutdown,
}

enum Reply {
    /// Local model (centralized) or the assembled average (decentralized).
    BlockDone { model: ParamVector, loss: f64 },
    Ack,
    Snapshot(ParamVector),
    Failed(String),
}

struct WorkerHandle {
    commands: Sender<Command>,
    replies: Receiver<Reply>,
    join: Option<JoinHandle<()>>,
}

enum Backend {
    Serial(Vec<WorkerState>),
    Threaded(Vec<WorkerHandle>),
}

pub struct Cluster {
    config: ClusterConfig,
    plan: Arc<ShardPlan>,
    sync: SyncState,
    shadow: Option<ShadowState>,
    reset_momentum: bool,
    backend: Backend,
}

impl Cluster {
    pub fn new(setup: ClusterSetup, mode: ExecMode) -> Result<Self> {
        setup.config.validate()?;
        setup.model.validate()?;
        let n = setup.config.num_workers;
        if setup.shards.len() != n {
            return Err(Error::dim("worker shards", n, setup.shards.len()));
        }
        if setup.batch_utterances == 0 {
            return Err(Error::config("batch_utterances", "must be at least 1"));
        }
        if let Some(empty) = setup.shards.iter().position(|s| s.utterances.is_empty()) {
            return Err(Error::Argument(format!("worker {empty} received an empty shard")));
        }
        setup.initial.check_len(setup.model.param_count(), "initial model")?;
        let sync = SyncState::new(setup.initial.clone(), setup.block_momentum, setup.block_learning_rate)?;
        let shadow = setup
            .ema_rate
            .map(|rate| ShadowState::new(setup.initial.clone(), rate))
            .transpose()?;
        let plan = Arc::new(make_shard_plan(setup.initial.len(), n)?);

        let model = Arc::new(setup.model);
        let mut workers = Vec::with_capacity(n);
        for (rank, shard) in setup.shards.into_iter().enumerate() {
            workers.push(WorkerState {
                rank,
                num_workers: n,
                seed: setup.config.seed,
                model: Arc::clone(&model),
                params: setup.initial.clone(),
                sgd: SgdState::new(setup.initial.len(), setup.learning_rate, setup.momentum)?,
                shard: Arc::new(shard),
                batch_utterances: setup.batch_utterances,
                order: Vec::new(),
                cursor: 0,
            });
        }
        for w in &mut workers {
            w.begin_epoch(0);
        }

        let backend = match mode {
            ExecMode::SingleThread => Backend::Serial(workers),
            ExecMode::Threaded => Backend::Threaded(spawn_workers(workers, Arc::clone(&plan))?),
        };
        Ok(Cluster {
            config: setup.config,
            plan,
            sync,
            shadow,
            reset_momentum: setup.reset_momentum_on_broadcast,
            backend,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn sync_state(&self) -> &SyncState {
        &self.sync
    }

    pub fn shadow_state(&self) -> Option<&ShadowState> {
        self.shadow.as_ref()
    }

    pub fn global_model(&self) -> &ParamVector {
        self.sync.global_model()
    }

    /// Reshuffles every worker's shard for a new epoch.
    pub fn begin_epoch(&mut self, epoch: u64) -> Result<()> {
        match &mut self.backend {
            Backend::Serial(workers) => workers.iter_mut().for_each(|w| w.begin_epoch(epoch)),
            Backend::Threaded(handles) => {
                broadcast_command(handles, || Command::BeginEpoch(epoch))?;
                collect_acks(handles)?;
            }
        }
        Ok(())
    }

    /// One block: local SGD on every worker, aggregation over the configured
    /// transport, BMUF update, shadow update, broadcast of θg(t). Returns once
    /// every worker holds θg(t).
    pub fn run_block(&mut self) -> Result<BlockReport> {
        let steps = self.config.block_size;
        let transport = self.config.transport;
        let (average, train_loss) = match &mut self.backend {
            Backend::Serial(workers) => {
                let mut loss = 0.0;
                for w in workers.iter_mut() {
                    loss += w.run_steps(steps)?;
                }
                let models: Vec<ParamVector> = workers.iter().map(|w| w.params.clone()).collect();
                let average = match transport {
                    Transport::Centralized => mean_reduce(&models)?,
                    Transport::Decentralized => decentralized_aggregate_serial(&models, &self.plan)?,
                };
                (average, loss / workers.len() as f64)
            }
            Backend::Threaded(handles) => {
                broadcast_command(handles, || Command::RunBlock { steps, transport })?;
                let mut models = Vec::with_capacity(handles.len());
                let mut loss = 0.0;
                let mut failure = None;
                for (rank, h) in handles.iter().enumerate() {
                    match recv_reply(h, rank)? {
                        Reply::BlockDone { model, loss: l } => {
                            models.push(model);
                            loss += l;
                        }
                        Reply::Failed(msg) => {
                            failure.get_or_insert(msg);
                        }
                        _ => return Err(Error::Worker(format!("worker {rank}: unexpected reply"))),
                    }
                }
                if let Some(msg) = failure {
                    return Err(Error::Worker(msg));
                }
                let average = match transport {
                    Transport::Centralized => mean_reduce(&models)?,
                    Transport::Decentralized => {
                        let first = models.swap_remove(0);
                        if models.iter().any(|m| !m.bit_eq(&first)) {
                            return Err(Error::Worker("workers assembled different averages".into()));
                        }
                        first
                    }
                };
                (average, loss / handles.len() as f64)
            }
        };

        self.sync.apply_average(&average)?;
        if let Some(shadow) = &mut self.shadow {
            shadow_update(shadow, self.sync.global_model())?;
        }

        let reset = self.reset_momentum;
        match &mut self.backend {
            Backend::Serial(workers) => {
                for w in workers.iter_mut() {
                    w.receive_broadcast(self.sync.global_model(), reset);
                }
            }
            Backend::Threaded(handles) => {
                let global = Arc::new(self.sync.global_model().clone());
                broadcast_command(handles, || Command::Broadcast {
                    global: Arc::clone(&global),
                    reset_momentum: reset,
                })?;
                collect_acks(handles)?;
            }
        }
        Ok(BlockReport {
            block_index: self.sync.block_index(),
            train_loss,
        })
    }

    /// Current local model of every worker, in rank order.
    pub fn worker_models(&self) -> Result<Vec<ParamVector>> {
        match &self.backend {
            Backend::Serial(workers) => Ok(workers.iter().map(|w| w.params.clone()).collect()),
            Backend::Threaded(handles) => {
                broadcast_command(handles, || Command::Snapshot)?;
                handles
                    .iter()
                    .enumerate()
                    .map(|(rank, h)| match recv_reply(h, rank)? {
                        Reply::Snapshot(p) => Ok(p),
                        _ => Err(Error::Worker(format!("worker {rank}: unexpected reply"))),
                    })
                    .collect()
            }
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        if let Backend::Threaded(handles) = &mut self.backend {
            for h in handles.iter() {
                let _ = h.commands.send(Command::Shutdown);
            }
            for h in handles.iter_mut() {
                if let Some(join) = h.join.take() {
                    let _ = join.join();
                }
            }
        }
    }
}

fn spawn_workers(workers: Vec<WorkerState>, plan: Arc<ShardPlan>) -> Result<Vec<WorkerHandle>> {
    let mesh = peer_mesh(workers.len());
    let mut handles = Vec::with_capacity(workers.len());
    for (worker, (peers, inbox)) in workers.into_iter().zip(mesh) {
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let (reply_tx, reply_rx) = mpsc::channel();
        let plan = Arc::clone(&plan);
        let join = std::thread::Builder::new()
            .name(format!("worker-{}", worker.rank))
            .spawn(move || worker_loop(worker, plan, peers, inbox, cmd_rx, reply_tx))
            .map_err(|e| Error::Worker(format!("failed to spawn worker thread: {e}")))?;
        handles.push(WorkerHandle {
            commands: cmd_tx,
            replies: reply_rx,
            join: Some(join),
        });
    }
    Ok(handles)
}

fn worker_loop(
    mut worker: WorkerState,
    plan: Arc<ShardPlan>,
    peers: Vec<Sender<PeerMsg>>,
    inbox: Receiver<PeerMsg>,
    commands: Receiver<Command>,
    replies: Sender<Reply>,
) {
    while let Ok(cmd) = commands.recv() {
        let reply = match cmd {
            Command::BeginEpoch(epoch) => {
                worker.begin_epoch(epoch);
                Reply::Ack
            }
            Command::RunBlock { steps, transport } => {
                let local = worker.run_steps(steps);
                match transport {
                    Transport::Centralized => match local {
                        Ok(loss) => Reply::BlockDone {
                            model: worker.params.clone(),
                            loss,
                        },
                        Err(e) => Reply::Failed(format!("worker {}: {e}", worker.rank)),
                    },
                    // Peers block on our shards, so take part even after a
                    // local failure and report it afterwards.
                    Transport::Decentralized => {
                        let shared = exchange(worker.rank, worker.params.as_slice(), &plan, &peers, &inbox);
                        match (local, shared) {
                            (Ok(loss), Ok(avg)) => Reply::BlockDone {
                                model: ParamVector::new(avg),
                                loss,
                            },
                            (Err(e), _) | (_, Err(e)) => Reply::Failed(format!("worker {}: {e}", worker.rank)),
                        }
                    }
                }
            }
            Command::Broadcast { global, reset_momentum } => {
                worker.receive_broadcast(&global, reset_momentum);
                Reply::Ack
            }
            Command::Snapshot => Reply::Snapshot(worker.params.clone()),
            Command::Shutdown => break,
        };
        if replies.send(reply).is_err() {
            break;
        }
    }
}

fn broadcast_command(handles: &[WorkerHandle], make: impl Fn() -> Command) -> Result<()> {
    for (rank, h) in handles.iter().enumerate() {
        h.commands
            .send(make())
            .map_err(|_| Error::Worker(format!("worker {rank} is gone")))?;
    }
    Ok(())
}

fn recv_reply(h: &WorkerHandle, rank: usize) -> Result<Reply> {
    h.replies
        .recv()
        .map_err(|_| Error::Worker(format!("worker {rank} hung up")))
}

fn collect_acks(handles: &[WorkerHandle]) -> Result<()> {
    for (rank, h) in handles.iter().enumerate() {
        match recv_reply(h, rank)? {
            Reply::Ack => {}
            Reply::Failed(msg) => return Err(Error::Worker(msg)),
            _ => return Err(Error::Worker(format!("worker {rank}: unexpected reply"))),
        }
    }
    Ok(())
}
