//! End-to-end experiment: synthetic corpus → speaker split → worker shards →
//! block training on the simulated cluster → checkpoint curves and final
//! test FER for the BMUF, MA and EMA models.
//!
//! An epoch is `blocks_per_epoch` synchronizations, where every worker runs
//! `block_size` mini-batches per block and
//! `blocks_per_epoch = ⌊⌊smallest shard / batch_utterances⌋ / block_size⌋`.
//! Utterances that do not fill a whole block are skipped for that epoch (the
//! per-epoch reshuffle rotates which ones). Checkpoint `q` of an epoch is
//! taken after block `⌈q·B/C⌉`, with `C` checkpoints per epoch.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Strategy};
use crate::comm::{BlockReport, Cluster, ClusterSetup, ExecMode};
use crate::config::ExperimentConfig;
use crate::data::{generate_corpus, shard_dataset, split_by_speaker, Corpus};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_checkpoints, evaluate_model, EvalRecord};
use crate::models::{Batch, ModelSpec};
use crate::numerics::Rng;
use crate::sync::final_models;

const STREAM_CORPUS: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_SHARD: u64 = 3;
const STREAM_INIT: u64 = 4;

pub const CURVES_FILE: &str = "curves.csv";
pub const FINAL_FILE: &str = "final.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Datasets after stacking and splitting.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    pub shards: Vec<Corpus>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let raw = generate_corpus(&cfg.corpus_spec(), &mut Rng::with_stream(cfg.seed, STREAM_CORPUS))?;
    let stacked = raw.stacked(cfg.stack)?;
    let (train, val, test) = split_by_speaker(&stacked, &cfg.split_spec(), &mut Rng::with_stream(cfg.seed, STREAM_SPLIT))?;
    let shards = shard_dataset(&train, cfg.num_workers, &mut Rng::with_stream(cfg.seed, STREAM_SHARD))?;
    Ok(PreparedData {
        train,
        val,
        test,
        shards,
    })
}

/// Synchronizations per epoch for the given shards.
pub fn blocks_per_epoch(cfg: &ExperimentConfig, shards: &[Corpus]) -> Result<usize> {
    let smallest = shards.iter().map(|s| s.utterances.len()).min().unwrap_or(0);
    let blocks = smallest / cfg.batch_utterances / cfg.block_size;
    if blocks < cfg.checkpoints_per_epoch {
        return Err(Error::config(
            "block_size",
            format!(
                "each worker holds {smallest} training utterances, enough for {blocks} blocks per epoch \
                 but {} checkpoints per epoch are requested",
                cfg.checkpoints_per_epoch
            ),
        ));
    }
    Ok(blocks)
}

/// Blocks (1-based, within an epoch) after which checkpoints are taken.
pub fn checkpoint_blocks(blocks_per_epoch: usize, per_epoch: usize) -> Vec<usize> {
    (1..=per_epoch)
        .map(|q| (q * blocks_per_epoch).div_ceil(per_epoch))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub data: PreparedData,
    pub blocks_per_epoch: usize,
    /// In training order; at each checkpoint position bmuf, ma, ema.
    pub checkpoints: Vec<Checkpoint>,
    /// Validation FER per checkpoint, ordered by strategy then epoch.
    pub curves: Vec<EvalRecord>,
    /// Test FER of the final model of each strategy, in reporting order.
    pub final_fer: Vec<(Strategy, f64)>,
}

impl RunOutcome {
    pub fn val_batch(&self) -> Result<Batch> {
        self.data.val.to_batch()
    }

    pub fn test_batch(&self) -> Result<Batch> {
        self.data.test.to_batch()
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, mode: ExecMode) -> Result<RunOutcome> {
    run_experiment_observed(cfg, mode, |_, _| {})
}

/// Runs the experiment, calling `observer` after every completed block.
pub fn run_experiment_observed<F>(cfg: &ExperimentConfig, mode: ExecMode, mut observer: F) -> Result<RunOutcome>
where
    F: FnMut(&Cluster, &BlockReport),
{
    cfg.validate()?;
    let model = cfg.model_spec()?;
    let data = prepare_data(cfg)?;
    if data.val.utterances.is_empty() || data.test.utterances.is_empty() {
        return Err(Error::config("val_fraction", "validation and test splits must both be non-empty"));
    }
    let blocks = blocks_per_epoch(cfg, &data.shards)?;
    let marks = checkpoint_blocks(blocks, cfg.checkpoints_per_epoch);
    let initial = model.init_params(&mut Rng::with_stream(cfg.seed, STREAM_INIT));

    let mut cluster = Cluster::new(
        ClusterSetup {
            config: cfg.cluster_config(),
            model: model.clone(),
            initial,
            shards: data.shards.clone(),
            batch_utterances: cfg.batch_utterances,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            reset_momentum_on_broadcast: cfg.reset_momentum_on_broadcast,
            block_momentum: cfg.block_momentum,
            block_learning_rate: cfg.block_learning_rate,
            ema_rate: cfg.shadows.then_some(cfg.ema_rate),
        },
        mode,
    )?;

    let mut checkpoints = Vec::new();
    for epoch in 0..cfg.epochs {
        cluster.begin_epoch(epoch as u64)?;
        let mut next_mark = 0;
        for b in 1..=blocks {
            let report = cluster.run_block()?;
            observer(&cluster, &report);
            if marks.get(next_mark) == Some(&b) {
                next_mark += 1;
                let position = epoch as f64 + next_mark as f64 / cfg.checkpoints_per_epoch as f64;
                snapshot(&cluster, position, &mut checkpoints);
            }
        }
    }

    let val = data.val.to_batch()?;
    let test = data.test.to_batch()?;
    let mut curves = evaluate_checkpoints(&checkpoints, &val, &model)?;
    curves.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.epoch.total_cmp(&b.epoch)));

    let final_fer = match cluster.shadow_state() {
        Some(shadow) => {
            let finals = final_models(shadow, cluster.sync_state())?;
            vec![
                (Strategy::Bmuf, evaluate_model(&model, &finals.bmuf, &test)?),
                (Strategy::Ma, evaluate_model(&model, &finals.ma, &test)?),
                (Strategy::Ema, evaluate_model(&model, &finals.ema, &test)?),
            ]
        }
        None => vec![(Strategy::Bmuf, evaluate_model(&model, cluster.global_model(), &test)?)],
    };

    Ok(RunOutcome {
        config: cfg.clone(),
        model,
        data,
        blocks_per_epoch: blocks,
        checkpoints,
        curves,
        final_fer,
    })
}

fn snapshot(cluster: &Cluster, epoch: f64, out: &mut Vec<Checkpoint>) {
    let block = cluster.sync_state().block_index();
    let mut push = |strategy, params: &crate::numerics::ParamVector| {
        out.push(Checkpoint {
            strategy,
            block,
            epoch,
            params: params.clone(),
        })
    };
    push(Strategy::Bmuf, cluster.global_model());
    if let Some(shadow) = cluster.shadow_state() {
        push(Strategy::Ma, shadow.ma_model());
        push(Strategy::Ema, shadow.ema_model());
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    strategy: String,
    epoch: String,
    fer: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FinalRow {
    strategy: String,
    test_fer: String,
}

/// CSV with header `strategy,epoch,fer`; epochs with 2 decimals, FER with 6.
pub fn curves_csv(records: &[EvalRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CurveRow {
            strategy: r.strategy.to_string(),
            epoch: format!("{:.2}", r.epoch),
            fer: format!("{:.6}", r.fer),
        })?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

/// CSV with header `strategy,test_fer`.
pub fn final_csv(final_fer: &[(Strategy, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (s, fer) in final_fer {
        w.serialize(FinalRow {
            strategy: s.to_string(),
            test_fer: format!("{fer:.6}"),
        })?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

pub fn manifest(outcome: &RunOutcome) -> String {
    format!(
        "# shadowsync run manifest ({} {})\n\
         # reproduce with: shadowsync run --config {MANIFEST_FILE} --out <dir>\n\
         # parameters = {}, blocks per epoch = {}, train/val/test utterances = {}/{}/{}\n\n{}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        outcome.model.param_count(),
        outcome.blocks_per_epoch,
        outcome.data.train.utterances.len(),
        outcome.data.val.utterances.len(),
        outcome.data.test.utterances.len(),
        outcome.config.to_toml_string()
    )
}

/// Writes `curves.csv`, `final.csv`, `manifest.toml` and, when configured,
/// the checkpoints into `out_dir`.
pub fn write_artifacts(outcome: &RunOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join(CURVES_FILE), &curves_csv(&outcome.curves)?)?;
    write_file(&out_dir.join(FINAL_FILE), &final_csv(&outcome.final_fer)?)?;
    write_file(&out_dir.join(MANIFEST_FILE), &manifest(outcome))?;
    if outcome.config.save_checkpoints {
        let dir = out_dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for ck in &outcome.checkpoints {
            ck.save(&dir.join(ck.file_name()))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads `final.csv` from a run directory.
pub fn read_final(run_dir: &Path) -> Result<Vec<(Strategy, f64)>> {
    let path = run_dir.join(FINAL_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize::<FinalRow>() {
        let row = row?;
        let fer: f64 = row
            .test_fer
            .parse()
            .map_err(|_| Error::Argument(format!("{}: bad test_fer `{}`", path.display(), row.test_fer)))?;
        rows.push((row.strategy.parse()?, fer));
    }
    Ok(rows)
}

/// Relative FER reduction of `fer` against `baseline`, in percent.
pub fn relative_reduction(baseline: f64, fer: f64) -> Option<f64> {
    (baseline > 0.0).then(|| (baseline - fer) / baseline * 100.0)
}

/// Table of final test FER and relative reduction against bmuf, one block
/// per run directory, strategies in the order bmuf, ma, ema.
pub fn compare(run_dirs: &[&Path]) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Argument("compare needs at least one run directory".into()));
    }
    let mut out = format!("{:<32} {:<8} {:>9} {:>14}\n", "run", "strategy", "test_fer", "rel_reduction");
    for dir in run_dirs {
        let rows = read_final(dir)?;
        let baseline = rows
            .iter()
            .find(|(s, _)| *s == Strategy::Bmuf)
            .map(|&(_, f)| f)
            .ok_or_else(|| Error::Argument(format!("{}: final.csv has no bmuf row", dir.display())))?;
        for strategy in Strategy::ALL {
            let Some(&(_, fer)) = rows.iter().find(|(s, _)| *s == strategy) else {
                continue;
            };
            let rel = match relative_reduction(baseline, fer) {
                Some(r) => format!("{r:.2}%"),
                None if fer == baseline => "0.00%".to_string(),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(
                "{:<32} {:<8} {:>9} {:>14}\n",
                dir.display(),
                strategy,
                format!("{:.2}%", fer * 100.0),
                rel
            ));
        }
    }
    Ok(out)
}
