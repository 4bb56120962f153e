use shadowsync::experiment::prepare_data;
use shadowsync::{
    Cluster, ClusterSetup, ExecMode, ExperimentConfig, ModelKind, ParamVector, Rng, Transport,
};

fn small_config(workers: usize, model: ModelKind) -> ExperimentConfig {
    ExperimentConfig {
        num_workers: workers,
        model,
        mlp_hidden: vec![6],
        lstm_hidden: 4,
        lstm_layers: 1,
        num_speakers: 20,
        utterances_per_speaker: 4,
        frames_per_utterance: 8,
        base_dim: 3,
        num_classes: 3,
        stack: 1,
        block_size: 3,
        learning_rate: 0.05,
        ..ExperimentConfig::default()
    }
}

fn setup(cfg: &ExperimentConfig) -> ClusterSetup {
    let data = prepare_data(cfg).unwrap();
    let model = cfg.model_spec().unwrap();
    let initial = model.init_params(&mut Rng::new(cfg.seed));
    ClusterSetup {
        config: cfg.cluster_config(),
        model,
        initial,
        shards: data.shards,
        batch_utterances: cfg.batch_utterances,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        reset_momentum_on_broadcast: cfg.reset_momentum_on_broadcast,
        block_momentum: cfg.block_momentum,
        block_learning_rate: cfg.block_learning_rate,
        ema_rate: Some(cfg.ema_rate),
    }
}

/// Global models after each of `blocks` blocks, with an epoch boundary every
/// `per_epoch` blocks.
fn trajectory(setup: ClusterSetup, mode: ExecMode, blocks: usize, per_epoch: usize) -> Vec<ParamVector> {
    let mut cluster = Cluster::new(setup, mode).unwrap();
    let mut out = Vec::new();
    for b in 0..blocks {
        if b > 0 && b % per_epoch == 0 {
            cluster.begin_epoch((b / per_epoch) as u64).unwrap();
        }
        cluster.run_block().unwrap();
        out.push(cluster.global_model().clone());
    }
    out
}

#[test]
fn every_worker_holds_the_global_model_after_a_block() {
    for mode in [ExecMode::Threaded, ExecMode::SingleThread] {
        let mut cluster = Cluster::new(setup(&small_config(4, ModelKind::Mlp)), mode).unwrap();
        for _ in 0..3 {
            let report = cluster.run_block().unwrap();
            assert!(report.train_loss.is_finite());
            let global = cluster.global_model().clone();
            for w in cluster.worker_models().unwrap() {
                assert!(w.bit_eq(&global));
            }
        }
        assert_eq!(cluster.sync_state().block_index(), 3);
        assert_eq!(cluster.shadow_state().unwrap().sync_count(), 3);
    }
}

#[test]
fn single_worker_plain_averaging_is_serial_momentum_sgd() {
    let mut cfg = small_config(1, ModelKind::Lstm);
    cfg.block_momentum = 0.0;
    cfg.block_learning_rate = 1.0;
    cfg.batch_utterances = 2;
    let s = setup(&cfg);
    let (blocks, per_epoch) = (12, 5);
    let got = trajectory(s.clone(), ExecMode::Threaded, blocks, per_epoch);

    // Serial oracle: shuffle with the worker's stream, take consecutive
    // utterances, v = μv − lr·g, θ += v.
    let shard = &s.shards[0];
    let mut theta = s.initial.as_slice().to_vec();
    let mut vel = vec![0.0; theta.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for (b, global) in got.iter().enumerate() {
        if b % per_epoch == 0 {
            let epoch = (b / per_epoch) as u64;
            order = (0..shard.utterances.len()).collect();
            Rng::with_stream(cfg.seed, (1u64 << 32) + epoch).shuffle(&mut order);
            cursor = 0;
        }
        for _ in 0..cfg.block_size {
            let start = cursor;
            let picks = (0..cfg.batch_utterances).map(|i| &shard.utterances[order[(start + i) % order.len()]]);
            cursor = (cursor + cfg.batch_utterances) % order.len();
            let batch = shadowsync::data::batch_of(shard.dim, picks).unwrap();
            let (_, g) = s.model.backward(&ParamVector::new(theta.clone()), &batch).unwrap();
            for i in 0..theta.len() {
                vel[i] = cfg.momentum * vel[i] - cfg.learning_rate * g.as_slice()[i];
                theta[i] += vel[i];
            }
        }
        let diff = ParamVector::new(theta.clone()).max_abs_diff(global);
        assert!(diff <= 1e-12, "block {b}: {diff:e}");
    }
}

#[test]
fn transports_produce_identical_trajectories() {
    for workers in [1, 3, 4] {
        let cfg = small_config(workers, ModelKind::Mlp);
        let mut central = setup(&cfg);
        central.config.transport = Transport::Centralized;
        let mut decentral = setup(&cfg);
        decentral.config.transport = Transport::Decentralized;
        let a = trajectory(central, ExecMode::Threaded, 8, 4);
        let b = trajectory(decentral, ExecMode::Threaded, 8, 4);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bit_eq(y), "{workers} workers");
        }
    }
}

#[test]
fn threaded_and_single_thread_runs_agree() {
    for transport in [Transport::Centralized, Transport::Decentralized] {
        let mut s = setup(&small_config(4, ModelKind::Lstm));
        s.config.transport = transport;
        let a = trajectory(s.clone(), ExecMode::Threaded, 6, 3);
        let b = trajectory(s, ExecMode::SingleThread, 6, 3);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn momentum_reset_on_broadcast_changes_the_trajectory() {
    let mut cfg = small_config(2, ModelKind::Mlp);
    let keep = trajectory(setup(&cfg), ExecMode::Threaded, 4, 4);
    cfg.reset_momentum_on_broadcast = true;
    let reset_threaded = trajectory(setup(&cfg), ExecMode::Threaded, 4, 4);
    let reset_serial = trajectory(setup(&cfg), ExecMode::SingleThread, 4, 4);
    assert!(keep[0].bit_eq(&reset_threaded[0]));
    assert!(!keep[3].bit_eq(&reset_threaded[3]));
    assert!(reset_threaded[3].bit_eq(&reset_serial[3]));
}

#[test]
fn mismatched_shards_are_rejected() {
    let mut s = setup(&small_config(3, ModelKind::Mlp));
    s.shards.pop();
    assert!(Cluster::new(s, ExecMode::Threaded).is_err());
}
